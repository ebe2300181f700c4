#include "ttp/expert.hpp"

#include <algorithm>
#include <set>

#include "ttp/rng.hpp"

namespace ttp::expert {

using sim::Action;
using sim::SceneState;

namespace {

constexpr int kMaxSessionSteps = 500;

Rack other(Rack r) { return r == Rack::top ? Rack::bottom : Rack::top; }

int rack_index(Rack r) { return static_cast<int>(r); }

Action open_or_close(Category fixture, bool open) {
    return Action{sim::fixture_id(fixture), sim::fixture_place_id(fixture, open)};
}

Category rack_fixture(Rack r) { return r == Rack::top ? Category::top_rack : Category::bottom_rack; }

}  // namespace

Rack Preference::rack_for(Category dish) const {
    if (std::find(top_order.begin(), top_order.end(), dish) != top_order.end()) {
        return Rack::top;
    }
    if (std::find(bottom_order.begin(), bottom_order.end(), dish) != bottom_order.end()) {
        return Rack::bottom;
    }
    throw std::invalid_argument("category not covered by preference: " + std::string(sim::category_name(dish)));
}

int Preference::order_index(Category dish) const {
    const auto& list = order(rack_for(dish));
    return static_cast<int>(std::find(list.begin(), list.end(), dish) - list.begin());
}

bool Preference::valid() const {
    if (top_order.empty() || bottom_order.empty()) {
        return false;
    }
    std::set<Category> seen;
    for (const auto* list : {&top_order, &bottom_order}) {
        for (Category c : *list) {
            if (!sim::is_dish(c) || !seen.insert(c).second) {
                return false;
            }
        }
    }
    return static_cast<int>(seen.size()) == sim::kNumDishCategories;
}

Preference sample_preference(std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x50524546));
    std::vector<Category> perm(sim::dish_categories().begin(), sim::dish_categories().end());
    rng.shuffle(perm);
    const auto split = 1 + rng.index(sim::kNumDishCategories - 1);
    Preference pref;
    pref.first_rack = rng.index(2) == 0 ? Rack::top : Rack::bottom;
    pref.top_order.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(split));
    pref.bottom_order.assign(perm.begin() + static_cast<std::ptrdiff_t>(split), perm.end());
    return pref;
}

nlohmann::json to_json(const Preference& pref) {
    auto names = [](const std::vector<Category>& list) {
        nlohmann::json out = nlohmann::json::array();
        for (Category c : list) {
            out.push_back(sim::category_name(c));
        }
        return out;
    };
    return {{"first_rack", sim::rack_name(pref.first_rack)},
            {"top", names(pref.top_order)},
            {"bottom", names(pref.bottom_order)}};
}

Preference preference_from_json(const nlohmann::json& j) {
    Preference pref;
    const auto first = j.at("first_rack").get<std::string>();
    if (first != "top" && first != "bottom") {
        throw std::invalid_argument("first_rack must be top or bottom");
    }
    pref.first_rack = first == "top" ? Rack::top : Rack::bottom;
    auto parse_list = [](const nlohmann::json& list) {
        std::vector<Category> out;
        for (const auto& item : list) {
            const auto c = sim::parse_category(item.get<std::string>());
            if (!c) {
                throw std::invalid_argument("unknown category " + item.dump());
            }
            out.push_back(*c);
        }
        return out;
    };
    pref.top_order = parse_list(j.at("top"));
    pref.bottom_order = parse_list(j.at("bottom"));
    if (!pref.valid()) {
        throw std::invalid_argument("preference does not partition the dish categories");
    }
    return pref;
}

std::string describe(const Preference& pref) {
    std::string out = "first=" + std::string(sim::rack_name(pref.first_rack)) + " top=[";
    for (std::size_t i = 0; i < pref.top_order.size(); ++i) {
        out += (i ? "," : "") + std::string(sim::category_name(pref.top_order[i]));
    }
    out += "] bottom=[";
    for (std::size_t i = 0; i < pref.bottom_order.size(); ++i) {
        out += (i ? "," : "") + std::string(sim::category_name(pref.bottom_order[i]));
    }
    return out + "]";
}

int lowest_free_slot(const SceneState& state, Category dish, Rack rack) {
    for (const auto& slot : state.library->slots(dish, rack)) {
        if (state.slot_free(slot.id)) {
            return slot.id;
        }
    }
    return -1;
}

CounterAnalysis analyze_counter(const SceneState& state, const Preference& pref) {
    CounterAnalysis out;
    std::array<int, sim::kNumDishCategories> free{};
    std::array<bool, sim::kNumDishCategories> counted{};
    for (const sim::Dish* d : state.counter_dishes()) {
        const auto c = static_cast<std::size_t>(d->category);
        const Rack rack = pref.rack_for(d->category);
        if (!counted[c]) {
            counted[c] = true;
            for (const auto& slot : state.library->slots(d->category, rack)) {
                free[c] += state.slot_free(slot.id) ? 1 : 0;
            }
        }
        if (free[c] > 0) {
            --free[c];
            out.pending[static_cast<std::size_t>(rack_index(rack))].push_back(d->id);
        } else {
            out.sinkable.push_back(d->id);
        }
    }
    return out;
}

Action expert_step(const SceneState& state, const Preference& pref) {
    if (sim::is_terminal(state)) {
        throw NoLegalAction("expert_step called on a terminal state");
    }
    const CounterAnalysis counter = analyze_counter(state, pref);
    if (!counter.sinkable.empty()) {
        const int id = counter.sinkable.front();
        return Action{id, sim::sink_place_id(state.find_dish(id)->category)};
    }
    for (Rack rack : {Rack::top, Rack::bottom}) {
        if (!state.rack_out(rack)) {
            continue;
        }
        const auto& pending = counter.pending[static_cast<std::size_t>(rack_index(rack))];
        if (pending.empty()) {
            return open_or_close(rack_fixture(rack), false);
        }
        const auto best = std::min_element(pending.begin(), pending.end(), [&](int a, int b) {
            const int ia = pref.order_index(state.find_dish(a)->category);
            const int ib = pref.order_index(state.find_dish(b)->category);
            return ia != ib ? ia < ib : a < b;
        });
        const Category c = state.find_dish(*best)->category;
        return Action{*best, lowest_free_slot(state, c, rack)};
    }
    const bool any_pending = !counter.pending[0].empty() || !counter.pending[1].empty();
    if (state.door_open) {
        for (Rack rack : {pref.first_rack, other(pref.first_rack)}) {
            if (!counter.pending[static_cast<std::size_t>(rack_index(rack))].empty()) {
                return open_or_close(rack_fixture(rack), true);
            }
        }
        return open_or_close(Category::door, false);
    }
    if (any_pending) {
        return open_or_close(Category::door, true);
    }
    throw NoLegalAction("no expert action for non-terminal state at step " + std::to_string(state.step));
}

Session generate_session(int preference_id, const Preference& pref, const sim::SceneConfig& config) {
    Session session;
    session.preference_id = preference_id;
    session.scene_config = config;
    SceneState state = sim::init_scene(config);
    while (!sim::is_terminal(state)) {
        if (static_cast<int>(session.steps.size()) >= kMaxSessionSteps) {
            throw NoLegalAction("expert exceeded the session step limit");
        }
        const Action action = expert_step(state, pref);
        Step step;
        step.state = sim::visible_instances(state);
        step.pick_target_id = action.pick_id;
        step.place_candidates = sim::place_candidates(state, sim::category_of(state, action.pick_id));
        step.place_target_id = action.place_id;
        auto result = sim::env_step(state, action);
        step.spawns = result.spawns;
        session.steps.push_back(std::move(step));
        state = std::move(result.state);
    }
    session.final_counts = {state.count_in(sim::Region::top_rack), state.count_in(sim::Region::bottom_rack)};
    return session;
}

Session record_session(int preference_id, const sim::SceneConfig& config, std::span<const Action> actions) {
    Session session;
    session.preference_id = preference_id;
    session.scene_config = config;
    SceneState state = sim::init_scene(config);
    for (const Action& action : actions) {
        Step step;
        step.state = sim::visible_instances(state);
        step.pick_target_id = action.pick_id;
        step.place_candidates = sim::place_candidates(state, sim::category_of(state, action.pick_id));
        step.place_target_id = action.place_id;
        auto result = sim::env_step(state, action);
        step.spawns = result.spawns;
        session.steps.push_back(std::move(step));
        state = std::move(result.state);
    }
    session.final_counts = {state.count_in(sim::Region::top_rack), state.count_in(sim::Region::bottom_rack)};
    return session;
}

std::string_view violation_name(ViolationKind kind) {
    switch (kind) {
        case ViolationKind::replay: return "replay";
        case ViolationKind::structural: return "structural";
        case ViolationKind::rack_assignment: return "rack_assignment";
        case ViolationKind::unnecessary_sink: return "unnecessary_sink";
        case ViolationKind::order: return "order";
        case ViolationKind::first_rack: return "first_rack";
    }
    return "?";
}

int ValidityReport::count(ViolationKind kind) const {
    return static_cast<int>(
        std::count_if(violations.begin(), violations.end(), [kind](const Violation& v) { return v.kind == kind; }));
}

namespace {

bool contains_id(const std::vector<sim::Instance>& list, int id) {
    return std::any_of(list.begin(), list.end(), [id](const sim::Instance& i) { return i.id == id; });
}

bool contains(const std::vector<int>& list, int id) { return std::find(list.begin(), list.end(), id) != list.end(); }

}  // namespace

ValidityReport validate_session(const Session& session, const Preference& pref) {
    ValidityReport report;
    auto add = [&](int step, ViolationKind kind, std::string detail) {
        report.violations.push_back({step, kind, std::move(detail)});
    };

    SceneState state;
    try {
        state = sim::init_scene(session.scene_config);
    } catch (const sim::SimError& e) {
        add(0, ViolationKind::replay, e.what());
        return report;
    }

    for (std::size_t i = 0; i < session.steps.size(); ++i) {
        const int idx = static_cast<int>(i);
        const Step& step = session.steps[i];
        if (sim::visible_instances(state) != step.state) {
            add(idx, ViolationKind::replay, "recorded state differs from replayed state");
            return report;
        }
        if (!contains_id(step.state, step.pick_target_id)) {
            add(idx, ViolationKind::replay, "pick target not in recorded state");
            return report;
        }
        const Category picked = sim::category_of(state, step.pick_target_id);
        if (sim::place_candidates(state, picked) != step.place_candidates) {
            add(idx, ViolationKind::replay, "recorded place candidates differ from replayed candidates");
            return report;
        }
        if (!contains_id(step.place_candidates, step.place_target_id)) {
            add(idx, ViolationKind::replay, "place target not in recorded candidates");
            return report;
        }

        const CounterAnalysis counter = analyze_counter(state, pref);
        if (sim::is_dish(picked)) {
            const sim::Slot* slot = state.library->find(step.place_target_id);
            if (slot != nullptr) {
                const Rack assigned = pref.rack_for(picked);
                if (slot->rack != assigned) {
                    add(idx, ViolationKind::rack_assignment,
                        std::string(sim::category_name(picked)) + " placed on the " +
                            std::string(sim::rack_name(slot->rack)) + " rack");
                } else {
                    const int mine = pref.order_index(picked);
                    for (int other_id : counter.pending[static_cast<std::size_t>(rack_index(assigned))]) {
                        const Category oc = state.find_dish(other_id)->category;
                        if (pref.order_index(oc) < mine) {
                            add(idx, ViolationKind::order,
                                std::string(sim::category_name(picked)) + " loaded before " +
                                    std::string(sim::category_name(oc)));
                            break;
                        }
                    }
                }
            } else if (!contains(counter.sinkable, step.pick_target_id)) {
                add(idx, ViolationKind::unnecessary_sink,
                    std::string(sim::category_name(picked)) + " sunk while its rack had room");
            }
        } else if (picked != Category::door) {
            const Rack rack = picked == Category::top_rack ? Rack::top : Rack::bottom;
            const bool opening = step.place_target_id == sim::fixture_place_id(picked, true) && !state.rack_out(rack);
            if (opening && rack != pref.first_rack &&
                !counter.pending[static_cast<std::size_t>(rack_index(pref.first_rack))].empty()) {
                add(idx, ViolationKind::first_rack,
                    std::string(sim::rack_name(rack)) + " rack opened while the first rack had pending dishes");
            }
        }

        try {
            state = sim::apply_action(state, Action{step.pick_target_id, step.place_target_id});
            for (int k = 0; k < step.spawns; ++k) {
                state = sim::spawn_tick(state);
            }
        } catch (const sim::SimError& e) {
            add(idx, ViolationKind::structural, e.what());
            return report;
        }
    }
    const std::array<int, 2> counts{state.count_in(sim::Region::top_rack), state.count_in(sim::Region::bottom_rack)};
    if (counts != session.final_counts) {
        add(static_cast<int>(session.steps.size()), ViolationKind::replay, "final counts differ from replay");
    }
    return report;
}

SceneState replay_final_state(const Session& session) {
    SceneState state = sim::init_scene(session.scene_config);
    for (const Step& step : session.steps) {
        state = sim::apply_action(state, Action{step.pick_target_id, step.place_target_id});
        for (int k = 0; k < step.spawns; ++k) {
            state = sim::spawn_tick(state);
        }
    }
    return state;
}

}  // namespace ttp::expert
