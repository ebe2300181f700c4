// Acceptance runner: one pass/fail line per criterion. Pass criterion numbers
// as arguments to run a subset; the exit status is nonzero if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "ttp/app.hpp"
#include "ttp/calib.hpp"
#include "ttp/rng.hpp"

using namespace ttp;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int precision = 4) {
    std::ostringstream s;
    s.precision(precision);
    s << v;
    return s.str();
}

void progress(const std::string& line) {
    std::cerr << "  .. " << line << std::endl;
}

expert::Session small_session(std::uint64_t seed, int n_per_rack) {
    sim::SceneConfig config;
    config.n_per_rack = n_per_rack;
    config.seed = seed;
    return expert::generate_session(0, expert::sample_preference(seed), config);
}

// Fixture of the unit-level check; every ReLU unit stays clear of h = 1e-4.
Outcome gradient_oracle() {
    const auto start = Clock::now();
    const auto cfg = model::toy_config();
    const auto session = small_session(21, 3);
    const auto prepared = train::prepare_session(session, 0);
    auto head = session;
    head.steps.resize(4);
    const auto prompt = tok::build_prompt_sequence(head);
    model::Batch b;
    b.prompts.push_back(&prompt);
    for (const auto* d : {&prepared.picks[2], &prepared.places[4]}) {
        b.examples.push_back({0, &d->situation, d->eligible, d->target});
    }
    b.slot_noise.push_back(model::sample_slot_noise(cfg, 23));
    const auto params = model::init_params(cfg, 19).cast<long double>();
    const auto check = train::finite_difference_check(b, params, cfg, 1e-4L);
    const double secs = seconds_since(start);
    const bool all = check.checked == model::param_count(cfg);
    return {all && check.max_rel_error < 1e-4 && secs < 120.0,
            "d=" + std::to_string(cfg.d()) + ", " + std::to_string(check.checked) + " scalars, max rel error " +
                fmt(static_cast<double>(check.max_rel_error)) + " at " + check.worst_param + ", " + fmt(secs, 3) +
                " s"};
}

struct SinglePreference {
    std::map<int, expert::Preference> prefs;
    data::Dataset train;
    data::Dataset validation;
    data::Dataset heldout;
};

// 1 preference x 5 sessions with 6-7 objects per rack.
SinglePreference single_preference() {
    SinglePreference s;
    s.prefs = {{0, data::sample_distinct_preferences(1, 1)[0]}};
    s.train = data::generate_for_preferences(s.prefs, 5, {6, 7}, 0.5, 10, 5);
    s.validation = data::generate_for_preferences(s.prefs, 5, {6, 7}, 0.5, 10, 6);
    s.heldout = data::generate_for_preferences(s.prefs, 10, {6, 7}, 0.5, 10, 7);
    return s;
}

train::EpochCallback epoch_log(const std::string& tag, int every) {
    return [tag, every](const train::EpochMetrics& m) {
        if (m.epoch % every == 0) {
            progress(tag + " epoch " + std::to_string(m.epoch) + " loss " + fmt(m.train_loss) + " val acc " +
                     fmt(m.val_accuracy));
        }
    };
}

Outcome overfit() {
    const auto start = Clock::now();
    const auto s = single_preference();
    const model::ModelConfig mc;
    train::TrainConfig tc;
    tc.max_epochs = 400;
    tc.stop_at_accuracy = 0.99;
    // Fitting the demonstrations themselves: validation runs on the training sessions.
    const auto res = train::train_loop(s.train, s.train, mc, tc, epoch_log("overfit", 10));
    const double secs = seconds_since(start);

    const auto& prompt_session = s.train.sessions.at(0)[train::validation_prompt_index(s.train, 0, tc.seed)];
    std::vector<train::PreparedSession> fresh;
    for (const auto& session : s.heldout.sessions.at(0)) {
        fresh.push_back(train::prepare_session(session, tc.context_window));
    }
    const auto held = train::category_token_accuracy(res.best_params, mc, tok::build_prompt_sequence(prompt_session),
                                                     fresh);
    return {res.best_accuracy >= 0.99 && secs < 1800.0,
            "d=" + std::to_string(mc.d()) + ", accuracy " + fmt(res.best_accuracy) + " at epoch " +
                std::to_string(res.best_epoch) + " (" + res.stop_reason + "), " + fmt(secs, 4) +
                " s; unseen-scene accuracy " + fmt(held.overall) + " (pick " + fmt(held.pick) + ")"};
}

// Shared by the generalization and unseen-preference checks.
struct DeskScale {
    std::map<int, expert::Preference> seen;
    expert::Preference unseen;
    data::Dataset train;
    model::ModelConfig mc;
    train::TrainConfig tc;
    train::TrainResult result;
    double seconds = 0.0;
};

const DeskScale& desk_scale() {
    static const DeskScale d = [] {
        DeskScale out;
        const auto start = Clock::now();
        const auto prefs = data::sample_distinct_preferences(4, 31);
        for (int i = 0; i < 3; ++i) {
            out.seen[i] = prefs[static_cast<std::size_t>(i)];
        }
        out.unseen = prefs[3];
        out.train = data::generate_for_preferences(out.seen, 40, {6, 7}, 0.5, 10, 32);
        const auto validation = data::generate_for_preferences(out.seen, 5, {6, 7}, 0.5, 10, 33);
        out.tc.max_epochs = 60;
        out.tc.patience = 15;
        out.result = train::train_loop(out.train, validation, out.mc, out.tc, epoch_log("desk", 1));
        out.seconds = seconds_since(start);
        return out;
    }();
    return d;
}

eval::Summary run_policy(const DeskScale& d, eval::PolicyKind kind, const std::map<int, expert::Session>& prompts,
                         const std::map<int, expert::Preference>& prefs, const std::vector<eval::Scene>& scenes) {
    eval::EvalSpec spec;
    spec.policy = kind;
    spec.context_window = d.tc.context_window;
    spec.seed = 41;
    return eval::summarize(eval::evaluate(&d.result.best_params, &d.mc, prompts, prefs, scenes, spec));
}

Outcome generalization() {
    const auto& d = desk_scale();
    const auto heldout = data::generate_for_preferences(d.seen, 10, {6, 7}, 0.5, 10, 34);
    const auto scenes = eval::scenes_of(heldout);
    const auto prompts = eval::choose_prompts(d.train, d.tc.seed);
    const auto model = run_policy(d, eval::PolicyKind::model, prompts, d.seen, scenes);
    const auto random = run_policy(d, eval::PolicyKind::random, prompts, d.seen, scenes);
    const bool pass = model.pe >= 0.4 && model.pe >= 5.0 * random.pe && random.pe < 0.05;
    return {pass, "3 prefs x 40 sessions, best epoch " + std::to_string(d.result.best_epoch) + " (val acc " +
                      fmt(d.result.best_accuracy) + ", " + d.result.stop_reason + ", " + fmt(d.seconds, 5) +
                      " s); " + std::to_string(model.sessions) + " scenes: model PE " + fmt(model.pe) + " ED " +
                      fmt(model.ed) + ", random PE " + fmt(random.pe) + " (need PE >= 0.4, >= 5x random, random < 0.05)"};
}

Outcome unseen_preference() {
    const auto& d = desk_scale();
    const std::map<int, expert::Preference> prefs{{3, d.unseen}};
    const auto sessions = data::generate_for_preferences(prefs, 11, {6, 7}, 0.5, 10, 35);
    const std::map<int, expert::Session> prompts{{3, sessions.sessions.at(3).front()}};
    std::vector<eval::Scene> scenes;
    for (std::size_t i = 1; i < sessions.sessions.at(3).size(); ++i) {
        scenes.push_back({3, sessions.sessions.at(3)[i].scene_config});
    }
    const auto model = run_policy(d, eval::PolicyKind::model, prompts, prefs, scenes);
    const auto random = run_policy(d, eval::PolicyKind::random, prompts, prefs, scenes);
    return {model.pe > random.pe && model.consistency > 0.5,
            std::to_string(model.sessions) + " scenes: model PE " + fmt(model.pe) + " vs random " + fmt(random.pe) +
                ", consistency " + fmt(model.consistency) + " (random " + fmt(random.consistency) + ")"};
}

Outcome attribute_ordering() {
    const auto s = single_preference();
    std::vector<eval::AblationCell> grid;
    for (const auto& cell : eval::attribute_grid()) {
        if (cell.label == "pose+category+time" || cell.label == "pose" || cell.label == "category" ||
            cell.label == "none") {
            grid.push_back(cell);
        }
    }
    eval::AblationInputs in;
    in.train_set = s.train;
    in.validation_set = s.validation;
    in.test_set = s.heldout;
    in.train_cfg.max_epochs = 150;
    in.train_cfg.patience = 30;
    std::map<std::string, double> pe;
    std::string detail;
    eval::run_ablation(grid, in, [&](const eval::AblationRow& row) {
        pe[row.cell.label] = row.summary.pe;
        const auto line = row.cell.label + " PE " + fmt(row.summary.pe) + " (acc " + fmt(row.accuracy) + ", epoch " +
                          std::to_string(row.best_epoch) + ")";
        progress(line);
        detail += (detail.empty() ? "" : "; ") + line;
    });
    const bool pass = pe.at("pose+category+time") > pe.at("pose") && pe.at("pose") > pe.at("category") &&
                      pe.at("category") >= pe.at("none");
    return {pass, detail};
}

Outcome metric_oracles() {
    int failures = 0;
    auto expect = [&failures](bool ok) { failures += ok ? 0 : 1; };
    expect(eval::packing_efficiency(6, 7, 6, 7, 13) == 1.0);
    expect(eval::packing_efficiency(3, 7, 6, 7, 10) == 0.75);
    expect(eval::packing_efficiency(0, 0, 6, 7, 13) == 0.0);  // dishwasher full, wrong racks
    expect(eval::packing_efficiency(0, 0, 0, 0, 0) == 1.0);
    expect(eval::levenshtein(std::vector<char>{'k', 'i', 't', 't', 'e', 'n'},
                             std::vector<char>{'s', 'i', 't', 't', 'i', 'n', 'g'}) == 3);
    std::vector<int> expert_seq{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    expect(eval::inverse_edit_distance(expert_seq, expert_seq) == 1.0);
    auto one_off = expert_seq;
    one_off[4] = 42;
    expect(std::abs(eval::inverse_edit_distance(one_off, expert_seq) - 0.9) < 1e-15);
    expect(eval::inverse_edit_distance(std::vector<int>(20, 77), expert_seq) == 0.0);
    expect(eval::temporal_efficiency(1.0, 20, 40) == 0.5);
    expect(eval::temporal_efficiency(0.8, 20, 10) == 0.8);
    Rng rng(4);
    int te_checked = 0;
    for (int i = 0; i < 10000; ++i) {
        const double pe = rng.uniform();
        const int l = 1 + static_cast<int>(rng.index(40));
        const int p = static_cast<int>(rng.index(90));
        expect(eval::temporal_efficiency(pe, l, p) <= pe);
        ++te_checked;
    }
    return {failures == 0, std::to_string(failures) + " mismatches; TE <= PE on " + std::to_string(te_checked) +
                               " random triples"};
}

Outcome expert_validity() {
    Rng rng(2024);
    int invalid = 0;
    long steps = 0;
    const int count = 200;
    for (int i = 0; i < count; ++i) {
        const auto pref = expert::sample_preference(rng.next());
        sim::SceneConfig config;
        config.n_per_rack = 3 + static_cast<int>(rng.index(8));
        config.seed = rng.next();
        const auto session = expert::generate_session(0, pref, config);
        invalid += expert::validate_session(session, pref).ok() ? 0 : 1;
        steps += static_cast<long>(session.steps.size());
    }
    const double mean = static_cast<double>(steps) / count;
    return {invalid == 0 && mean >= 17.0 && mean <= 40.0,
            std::to_string(invalid) + " invalid of " + std::to_string(count) + ", mean length " + fmt(mean) +
                " steps (n per rack 3..10)"};
}

// Segments of `segment` object tokens closed by an ACT, truncated to `length`.
tok::TokenSequence synthetic_prompt(std::size_t length, std::size_t segment, std::uint64_t seed) {
    Rng rng(seed);
    tok::TokenSequence seq;
    int index = 0;
    while (seq.size() < length) {
        const bool close = seq.size() + 1 == length || (seq.size() + 1) % (segment + 1) == 0;
        if (close) {
            seq.tokens.push_back(tok::act_token());
        } else {
            sim::Instance inst;
            inst.id = 10 + static_cast<int>(seq.size());
            const auto cats = sim::dish_categories();
            inst.category = cats[rng.index(cats.size())];
            inst.pose.position = {rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)};
            inst.timestep = index;
            inst.is_place = rng.uniform() < 0.3;
            seq.tokens.push_back(tok::instance_token(inst));
        }
        seq.state_index.push_back(index);
        if (close) {
            ++index;
        }
    }
    return seq;
}

Outcome slot_contracts() {
    model::ModelConfig cfg;
    const auto params = model::init_params(cfg, 11);
    bool shapes = true;
    for (std::size_t n : {10u, 300u, 1200u}) {
        const auto gamma = model::encode_prompt(params, cfg, synthetic_prompt(n, 29, n));
        shapes = shapes && gamma.rows() == 50 && gamma.cols() == 256 && gamma.allFinite();
    }
    const auto prompt = tok::build_prompt_sequence(small_session(4, 6));
    auto permuted = prompt;
    Rng rng(99);
    std::size_t begin = 0;
    for (std::size_t i = 0; i < permuted.size(); ++i) {
        if (permuted.tokens[i].kind == tok::TokenKind::act) {
            std::vector<tok::TokenAttributes> block(permuted.tokens.begin() + static_cast<long>(begin),
                                                    permuted.tokens.begin() + static_cast<long>(i));
            rng.shuffle(block);
            std::copy(block.begin(), block.end(), permuted.tokens.begin() + static_cast<long>(begin));
            begin = i + 1;
        }
    }
    const auto noise = model::sample_slot_noise(cfg, 5);
    const double diff = (model::encode_prompt(params, cfg, prompt, &noise) -
                         model::encode_prompt(params, cfg, permuted, &noise))
                            .cwiseAbs()
                            .maxCoeff();
    const bool moved = !(permuted.tokens == prompt.tokens);
    return {shapes && moved && diff < 1e-6, std::string("gamma (50, 256) for 10/300/1200 tokens: ") +
                                                (shapes ? "yes" : "no") + "; permutation max change " + fmt(diff) +
                                                " over " + std::to_string(prompt.size()) + " tokens"};
}

Outcome calibration() {
    Rng rng(8);
    const calib::PlanarTransform truth{2.0, 3.0, 1.0, -1.0};
    std::vector<calib::Pair> pairs;
    for (int i = 0; i < 12; ++i) {
        calib::Pair p;
        p.hw = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
        p.sim = {truth.alpha_x * p.hw[0] + truth.x_trans, truth.alpha_z * p.hw[1] + truth.z_trans};
        pairs.push_back(p);
    }
    const auto fit = calib::fit(pairs);
    const double recovery = std::max({std::abs(fit.transform.alpha_x - 2.0), std::abs(fit.transform.alpha_z - 3.0),
                                      std::abs(fit.transform.x_trans - 1.0), std::abs(fit.transform.z_trans + 1.0)});
    double round_trip = 0.0;
    const calib::HeightTable heights{{"counter", 0.9}};
    for (const auto& p : pairs) {
        const auto out = calib::apply_transform(fit.transform, {p.hw[0], 0.0, p.hw[1]}, heights, "counter");
        round_trip = std::max({round_trip, std::abs(out[0] - p.sim[0]), std::abs(out[2] - p.sim[1])});
    }
    bool rejected = false;
    try {
        calib::fit({{{1.0, 0.0}, {3.0, 0.0}}, {{1.0, 1.0}, {3.0, 2.0}}, {{1.0, 2.0}, {3.0, 4.0}}});
    } catch (const calib::RankDeficient&) {
        rejected = true;
    }
    return {recovery < 1e-9 && round_trip < 1e-9 && rejected,
            "parameter error " + fmt(recovery) + ", round-trip residual " + fmt(round_trip) +
                ", constant-x input rejected: " + (rejected ? "yes" : "no")};
}

Outcome determinism() {
    const fs::path root = fs::temp_directory_path() / "ttp_acceptance_determinism";
    fs::remove_all(root);
    app::RunConfig cfg;
    cfg.seed = 13;
    cfg.data_dir = (root / "data").string();
    cfg.reports = (root / "reports").string();
    cfg.checkpoint = (root / "model.ckpt").string();
    cfg.gen.train_preferences = 2;
    cfg.gen.test_preferences = 1;
    cfg.gen.train_sessions = 3;
    cfg.gen.validation_sessions = 1;
    cfg.gen.heldout_sessions = 2;
    cfg.gen.test_sessions = 3;
    cfg.gen.train_n = {3, 4};
    cfg.gen.test_n = {3, 5};
    cfg.model = model::toy_config();
    cfg.train.batch_size = 16;
    cfg.train.max_epochs = 3;
    cfg.eval.max_steps = 40;

    std::map<std::string, std::string> first;
    std::vector<fs::path> manifests;
    for (const auto& r : {app::cmd_gen(cfg), app::cmd_train(cfg), app::cmd_eval(cfg)}) {
        manifests.push_back(r.manifest);
        for (const auto& p : r.outputs) {
            first[p.string()] = app::file_hash(p);
        }
    }
    // Each stage rerun from the config recorded in its own manifest.
    int mismatched = 0;
    int compared = 0;
    for (std::size_t i = 0; i < manifests.size(); ++i) {
        const auto replay = app::config_from_manifest(manifests[i].string());
        const auto r = i == 0 ? app::cmd_gen(replay) : i == 1 ? app::cmd_train(replay) : app::cmd_eval(replay);
        for (const auto& p : r.outputs) {
            ++compared;
            mismatched += app::file_hash(p) == first.at(p.string()) ? 0 : 1;
        }
    }
    fs::remove_all(root);
    return {mismatched == 0 && compared == static_cast<int>(first.size()),
            std::to_string(compared) + " outputs rerun from manifests, " + std::to_string(mismatched) + " differ"};
}

struct Criterion {
    int number;
    std::string name;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    // Quick criteria first; the training-based ones share one desk-scale model.
    const std::vector<Criterion> all{
        {1, "gradient oracle", gradient_oracle},
        {6, "metric oracles", metric_oracles},
        {7, "expert validity", expert_validity},
        {8, "slot-attention contracts", slot_contracts},
        {9, "calibration", calibration},
        {10, "determinism", determinism},
        {2, "overfit check", overfit},
        {5, "attribute-ablation ordering", attribute_ordering},
        {3, "desk-scale generalization", generalization},
        {4, "unseen-preference prompting", unseen_preference},
    };
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) {
        wanted.insert(std::stoi(argv[i]));
    }

    int failed = 0;
    std::vector<std::string> lines;
    for (const auto& c : all) {
        if (!wanted.empty() && !wanted.contains(c.number)) {
            continue;
        }
        std::cerr << "running " << c.number << " " << c.name << std::endl;
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += o.pass ? 0 : 1;
        std::string line = std::string(o.pass ? "[PASS] " : "[FAIL] ") + std::to_string(c.number) + " " + c.name +
                           ": " + o.detail;
        std::cout << line << std::endl;
        lines.push_back(std::move(line));
    }
    std::cout << "\nsummary\n";
    for (const auto& l : lines) {
        std::cout << l << "\n";
    }
    std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
    return failed == 0 ? 0 : 1;
}
