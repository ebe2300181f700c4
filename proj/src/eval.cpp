#include "ttp/eval.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "ttp/rng.hpp"

namespace ttp::eval {

namespace {

std::string_view region_label(SymbolRegion r) {
    switch (r) {
        case SymbolRegion::counter: return "counter";
        case SymbolRegion::top_rack: return "top_rack";
        case SymbolRegion::bottom_rack: return "bottom_rack";
        case SymbolRegion::sink: return "sink";
        case SymbolRegion::fixture_open: return "open";
        case SymbolRegion::fixture_closed: return "closed";
    }
    return "?";
}

bool fixture_is_open(const sim::SceneState& state, sim::Category fixture) {
    switch (fixture) {
        case sim::Category::door: return state.door_open;
        case sim::Category::top_rack: return state.top_rack_out;
        default: return state.bottom_rack_out;
    }
}

SymbolRegion open_region(bool open) { return open ? SymbolRegion::fixture_open : SymbolRegion::fixture_closed; }

}  // namespace

std::string to_string(const Symbol& s) {
    return std::string(s.place ? "place:" : "pick:") + std::string(sim::category_name(s.category)) + ":" +
           std::string(region_label(s.region));
}

std::pair<Symbol, Symbol> action_symbols(const sim::SceneState& state, const sim::Action& action) {
    const sim::Category c = sim::category_of(state, action.pick_id);
    Symbol pick{false, c, SymbolRegion::counter};
    Symbol place{true, c, SymbolRegion::sink};
    if (sim::is_fixture(c)) {
        pick.region = open_region(fixture_is_open(state, c));
        place.region = open_region(action.place_id == sim::fixture_place_id(c, true));
    } else if (action.place_id != sim::sink_place_id(c)) {
        const sim::Slot* slot = state.library->find(action.place_id);
        if (slot == nullptr) {
            throw sim::SimError(sim::SimErrorCode::UnknownId, "unknown place id " + std::to_string(action.place_id));
        }
        place.region = slot->rack == sim::Rack::top ? SymbolRegion::top_rack : SymbolRegion::bottom_rack;
    }
    return {pick, place};
}

std::vector<Symbol> session_symbols(const expert::Session& session) {
    std::vector<Symbol> out;
    sim::SceneState state = sim::init_scene(session.scene_config);
    for (const auto& step : session.steps) {
        const sim::Action action{step.pick_target_id, step.place_target_id};
        const auto [pick, place] = action_symbols(state, action);
        out.push_back(pick);
        out.push_back(place);
        state = sim::apply_action(state, action);
        for (int k = 0; k < step.spawns; ++k) {
            state = sim::spawn_tick(state);
        }
    }
    return out;
}

double packing_efficiency(int a_hat, int b_hat, int a, int b, int placed_total) {
    if (a == 0 && b == 0) {
        return placed_total == 0 ? 1.0 : 0.0;
    }
    auto term = [](int got, int want) {
        const int m = std::max(got, want);
        return m == 0 ? 1.0 : static_cast<double>(got) / m;
    };
    return 0.5 * (term(a_hat, a) + term(b_hat, b));
}

double temporal_efficiency(double pe, int expert_steps, int policy_steps) {
    if (policy_steps <= expert_steps) {
        return pe;
    }
    return pe * expert_steps / policy_steps;
}

std::array<int, 2> consistent_counts(const sim::SceneState& state, const expert::Preference& pref) {
    std::array<int, 2> out{0, 0};
    for (const auto& d : state.dishes) {
        if (d.region == sim::Region::top_rack && pref.rack_for(d.category) == sim::Rack::top) {
            ++out[0];
        } else if (d.region == sim::Region::bottom_rack && pref.rack_for(d.category) == sim::Rack::bottom) {
            ++out[1];
        }
    }
    return out;
}

Policy model_policy(const model::Params& params, const model::ModelConfig& cfg, const expert::Session& prompt,
                    int context_window) {
    auto gamma = std::make_shared<ad::Mat<double>>(
        model::encode_prompt(params, cfg, tok::build_prompt_sequence(prompt)));
    return [&params, cfg, gamma, context_window](const Query& q) {
        const auto& history = *q.history;
        const std::size_t keep = std::min(history.size(), static_cast<std::size_t>(context_window));
        const std::vector<std::vector<sim::Instance>> window(history.end() - static_cast<long>(keep), history.end());
        const auto situation = tok::build_situation_sequence(window, q.current);
        return model::select_instance(model::decode_situation(params, cfg, situation, *gamma), q.eligible);
    };
}

Policy oracle_policy(const expert::Preference& pref) {
    return [pref](const Query& q) {
        const sim::Action a = expert::expert_step(*q.state, pref);
        const int want = q.place ? a.place_id : a.pick_id;
        return std::find(q.eligible.begin(), q.eligible.end(), want) != q.eligible.end() ? want : q.eligible.front();
    };
}

Policy random_policy(std::uint64_t seed) {
    auto rng = std::make_shared<Rng>(seed);
    return [rng](const Query& q) { return q.eligible[rng->index(q.eligible.size())]; };
}

double RolloutRecord::pe() const { return packing_efficiency(a_hat, b_hat, a, b, placed_total); }

double RolloutRecord::ed() const { return inverse_edit_distance(symbols, expert_symbols); }

double RolloutRecord::te() const { return temporal_efficiency(pe(), expert_steps, policy_steps); }

nlohmann::json RolloutRecord::to_json() const {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& d : decisions) {
        nlohmann::json j{{"kind", d.place ? "place" : "pick"}, {"eligible", d.eligible}, {"chosen", d.chosen},
                         {"legal", d.legal}};
        if (!d.legal) {
            j["error"] = d.error;
        }
        steps.push_back(std::move(j));
    }
    nlohmann::json actions_json = nlohmann::json::array();
    for (const auto& a : actions) {
        actions_json.push_back({a.pick_id, a.place_id});
    }
    nlohmann::json syms = nlohmann::json::array();
    for (const auto& s : symbols) {
        syms.push_back(to_string(s));
    }
    return {{"scene_config", sim::to_json(scene_config)},
            {"decisions", std::move(steps)},
            {"actions", std::move(actions_json)},
            {"symbols", std::move(syms)},
            {"consistent", {a_hat, b_hat}},
            {"reference", {a, b}},
            {"placed_total", placed_total},
            {"policy_steps", policy_steps},
            {"failed_steps", failed_steps},
            {"expert_steps", expert_steps},
            {"truncated", truncated},
            {"aborted", aborted},
            {"terminal", terminal},
            {"pe", pe()},
            {"ed", ed()},
            {"te", te()}};
}

RolloutRecord rollout(const Policy& policy, const sim::SceneConfig& config, const expert::Preference& reference,
                      int max_steps) {
    RolloutRecord rec;
    rec.scene_config = config;
    const auto expert_session = expert::generate_session(0, reference, config);
    rec.expert_steps = static_cast<int>(expert_session.steps.size());
    rec.expert_symbols = session_symbols(expert_session);
    rec.a = expert_session.final_counts[0];
    rec.b = expert_session.final_counts[1];

    auto check_eligible = [](const Query& q, int chosen) {
        if (std::find(q.eligible.begin(), q.eligible.end(), chosen) == q.eligible.end()) {
            throw std::logic_error("policy chose an ineligible id " + std::to_string(chosen));
        }
    };

    sim::SceneState state = sim::init_scene(config);
    std::vector<std::vector<sim::Instance>> history;
    while (true) {
        if (sim::is_terminal(state)) {
            rec.terminal = true;
            break;
        }
        if (rec.policy_steps >= max_steps) {
            rec.truncated = true;
            break;
        }
        const auto visible = sim::visible_instances(state);
        Query q;
        q.state = &state;
        q.history = &history;
        q.current = visible;
        q.eligible = sim::pickable_ids(state);
        const int pick = policy(q);
        check_eligible(q, pick);
        rec.decisions.push_back({false, q.eligible, pick, true, {}});

        const auto candidates = sim::place_candidates(state, sim::category_of(state, pick));
        q.place = true;
        q.picked = pick;
        q.current.insert(q.current.end(), candidates.begin(), candidates.end());
        q.eligible.clear();
        for (const auto& c : candidates) {
            q.eligible.push_back(c.id);
        }

        bool done = false;
        for (int attempt = 0; attempt < 2; ++attempt) {
            const int place = policy(q);
            check_eligible(q, place);
            rec.decisions.push_back({true, q.eligible, place, true, {}});
            ++rec.policy_steps;
            try {
                const sim::Action action{pick, place};
                const auto [ps, pl] = action_symbols(state, action);
                const auto result = sim::env_step(state, action);
                rec.symbols.push_back(ps);
                rec.symbols.push_back(pl);
                rec.actions.push_back(action);
                history.push_back(visible);
                state = result.state;
                done = true;
                break;
            } catch (const sim::SimError& e) {
                rec.decisions.back().legal = false;
                rec.decisions.back().error = std::string(sim::error_code_name(e.code()));
                ++rec.failed_steps;
                q.eligible.erase(std::find(q.eligible.begin(), q.eligible.end(), place));
                if (q.eligible.empty()) {
                    break;
                }
            }
        }
        if (!done) {
            rec.aborted = true;
            break;
        }
    }
    rec.final_state = state;
    const auto counts = consistent_counts(state, reference);
    rec.a_hat = counts[0];
    rec.b_hat = counts[1];
    rec.placed_total = state.count_in(sim::Region::top_rack) + state.count_in(sim::Region::bottom_rack);
    return rec;
}

nlohmann::json Summary::to_json() const {
    return {{"pe", pe}, {"pe_std", pe_std}, {"ed", ed}, {"te", te}, {"consistency", consistency},
            {"sessions", sessions}};
}

Summary summarize(const std::vector<RolloutRecord>& records) {
    Summary s;
    s.sessions = static_cast<int>(records.size());
    if (records.empty()) {
        return s;
    }
    int consistent = 0;
    int placed = 0;
    for (const auto& r : records) {
        s.pe += r.pe();
        s.ed += r.ed();
        s.te += r.te();
        consistent += r.a_hat + r.b_hat;
        placed += r.placed_total;
    }
    const double n = static_cast<double>(records.size());
    s.pe /= n;
    s.ed /= n;
    s.te /= n;
    double var = 0.0;
    for (const auto& r : records) {
        var += (r.pe() - s.pe) * (r.pe() - s.pe);
    }
    s.pe_std = std::sqrt(var / n);
    s.consistency = placed > 0 ? static_cast<double>(consistent) / placed : 0.0;
    return s;
}

std::vector<Scene> scenes_of(const data::Dataset& dataset) {
    std::vector<Scene> out;
    for (const auto& [pref_id, sessions] : dataset.sessions) {
        for (const auto& s : sessions) {
            out.push_back({pref_id, s.scene_config});
        }
    }
    return out;
}

std::string_view policy_name(PolicyKind kind) {
    switch (kind) {
        case PolicyKind::model: return "model";
        case PolicyKind::oracle: return "oracle";
        case PolicyKind::random: return "random";
    }
    return "?";
}

std::optional<PolicyKind> parse_policy(std::string_view name) {
    for (auto k : {PolicyKind::model, PolicyKind::oracle, PolicyKind::random}) {
        if (policy_name(k) == name) {
            return k;
        }
    }
    return std::nullopt;
}

std::vector<RolloutRecord> evaluate(const model::Params* params, const model::ModelConfig* cfg,
                                    const std::map<int, expert::Session>& prompts,
                                    const std::map<int, expert::Preference>& preferences,
                                    const std::vector<Scene>& scenes, const EvalSpec& spec) {
    if (spec.policy == PolicyKind::model && (params == nullptr || cfg == nullptr)) {
        throw std::invalid_argument("model policy needs parameters");
    }
    std::map<int, Policy> model_policies;
    std::vector<RolloutRecord> out;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        const auto& scene = scenes[i];
        const auto& pref = preferences.at(scene.preference_id);
        Policy policy;
        switch (spec.policy) {
            case PolicyKind::model: {
                auto it = model_policies.find(scene.preference_id);
                if (it == model_policies.end()) {
                    it = model_policies
                             .emplace(scene.preference_id, model_policy(*params, *cfg, prompts.at(scene.preference_id),
                                                                        spec.context_window))
                             .first;
                }
                policy = it->second;
                break;
            }
            case PolicyKind::oracle: policy = oracle_policy(pref); break;
            case PolicyKind::random: policy = random_policy(mix_seed(spec.seed, i)); break;
        }
        out.push_back(rollout(policy, scene.config, pref, spec.max_steps));
    }
    return out;
}

std::map<int, expert::Session> choose_prompts(const data::Dataset& train_set, std::uint64_t seed) {
    std::map<int, expert::Session> out;
    for (const auto& [pref_id, sessions] : train_set.sessions) {
        if (sessions.empty()) {
            continue;
        }
        out.emplace(pref_id, sessions[static_cast<std::size_t>(train::validation_prompt_index(train_set, pref_id, seed))]);
    }
    return out;
}

std::optional<AblationSuite> parse_suite(std::string_view name) {
    for (auto s : {AblationSuite::attributes, AblationSuite::context_window, AblationSuite::num_demos,
                   AblationSuite::num_prefs}) {
        if (suite_name(s) == name) {
            return s;
        }
    }
    return std::nullopt;
}

std::string_view suite_name(AblationSuite suite) {
    switch (suite) {
        case AblationSuite::attributes: return "attributes";
        case AblationSuite::context_window: return "context_window";
        case AblationSuite::num_demos: return "num_demos";
        case AblationSuite::num_prefs: return "num_prefs";
    }
    return "?";
}

std::vector<AblationCell> attribute_grid() {
    std::vector<AblationCell> out;
    for (int bits = 7; bits >= 0; --bits) {
        AblationCell cell;
        cell.mask.pose = (bits & 4) != 0;
        cell.mask.category = (bits & 2) != 0;
        cell.mask.time = (bits & 1) != 0;
        std::string label;
        for (auto [on, name] : {std::pair{cell.mask.pose, "pose"}, std::pair{cell.mask.category, "category"},
                                std::pair{cell.mask.time, "time"}}) {
            if (on) {
                label += label.empty() ? name : std::string("+") + name;
            }
        }
        cell.label = label.empty() ? "none" : label;
        out.push_back(std::move(cell));
    }
    return out;
}

nlohmann::json AblationRow::to_json() const {
    return {{"label", cell.label},
            {"mask", {{"pose", cell.mask.pose}, {"category", cell.mask.category}, {"time", cell.mask.time},
                      {"role", cell.mask.role}}},
            {"context_window", cell.context_window},
            {"num_demos", cell.num_demos},
            {"num_prefs", cell.num_prefs},
            {"summary", summary.to_json()},
            {"accuracy", accuracy},
            {"best_epoch", best_epoch}};
}

namespace {

data::Dataset subset(const data::Dataset& d, int num_prefs, int num_demos, const std::set<int>* keep) {
    data::Dataset out;
    out.seed = d.seed;
    out.generator = d.generator;
    int taken = 0;
    for (const auto& [id, sessions] : d.sessions) {
        if (keep != nullptr && !keep->contains(id)) {
            continue;
        }
        if (num_prefs > 0 && taken >= num_prefs) {
            break;
        }
        ++taken;
        out.preferences[id] = d.preferences.at(id);
        auto& dst = out.sessions[id];
        const std::size_t n =
            num_demos > 0 ? std::min(sessions.size(), static_cast<std::size_t>(num_demos)) : sessions.size();
        dst.assign(sessions.begin(), sessions.begin() + static_cast<long>(n));
    }
    return out;
}

}  // namespace

std::vector<AblationRow> run_ablation(const std::vector<AblationCell>& grid, const AblationInputs& inputs,
                                      const RowCallback& on_row) {
    std::vector<AblationRow> rows;
    for (const auto& cell : grid) {
        auto model_cfg = inputs.model_cfg;
        model_cfg.encoder.mask = cell.mask;
        auto train_cfg = inputs.train_cfg;
        train_cfg.context_window = cell.context_window;

        const auto train_set = subset(inputs.train_set, cell.num_prefs, cell.num_demos, nullptr);
        std::set<int> kept;
        for (const auto& [id, s] : train_set.sessions) {
            kept.insert(id);
        }
        const auto validation = subset(inputs.validation_set, 0, 0, &kept);
        const auto test = subset(inputs.test_set, 0, 0, &kept);

        const auto result = train::train_loop(train_set, validation, model_cfg, train_cfg);
        EvalSpec spec;
        spec.context_window = cell.context_window;
        spec.max_steps = inputs.max_steps;
        spec.seed = train_cfg.seed;
        const auto records = evaluate(&result.best_params, &model_cfg, choose_prompts(train_set, train_cfg.seed),
                                      train_set.preferences, scenes_of(test), spec);
        AblationRow row;
        row.cell = cell;
        row.summary = summarize(records);
        row.accuracy = result.best_accuracy;
        row.best_epoch = result.best_epoch;
        if (on_row) {
            on_row(row);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string format_table(const std::vector<AblationRow>& rows) {
    std::ostringstream out;
    out.precision(6);
    out << "label\tcontext_window\tnum_demos\tnum_prefs\tpe\tpe_std\ted\tte\tconsistency\taccuracy\tbest_epoch\n";
    for (const auto& r : rows) {
        out << r.cell.label << '\t' << r.cell.context_window << '\t' << r.cell.num_demos << '\t' << r.cell.num_prefs
            << '\t' << r.summary.pe << '\t' << r.summary.pe_std << '\t' << r.summary.ed << '\t' << r.summary.te
            << '\t' << r.summary.consistency << '\t' << r.accuracy << '\t' << r.best_epoch << '\n';
    }
    return out.str();
}

}  // namespace ttp::eval
