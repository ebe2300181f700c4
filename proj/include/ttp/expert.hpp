#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "ttp/sim.hpp"

namespace ttp::expert {

using sim::Category;
using sim::Rack;

// Which rack is loaded first, and the ordered categories assigned to each rack.
struct Preference {
    Rack first_rack = Rack::top;
    std::vector<Category> top_order;
    std::vector<Category> bottom_order;

    const std::vector<Category>& order(Rack r) const { return r == Rack::top ? top_order : bottom_order; }
    Rack rack_for(Category dish) const;
    int order_index(Category dish) const;  // position within its rack's list
    bool valid() const;

    bool operator==(const Preference&) const = default;
};

// Permutation of the seven dish categories split at an index in [1, 6], plus
// a uniformly drawn first rack.
Preference sample_preference(std::uint64_t seed);

nlohmann::json to_json(const Preference& pref);
Preference preference_from_json(const nlohmann::json& j);
std::string describe(const Preference& pref);

struct Step {
    std::vector<sim::Instance> state;
    int pick_target_id = -1;
    std::vector<sim::Instance> place_candidates;
    int place_target_id = -1;
    int spawns = 0;  // spawn ticks applied after the action

    bool operator==(const Step&) const = default;
};

struct Session {
    int preference_id = 0;
    sim::SceneConfig scene_config;
    std::vector<Step> steps;
    std::array<int, 2> final_counts{0, 0};  // dishes on the top / bottom rack

    bool operator==(const Session&) const = default;
};

class NoLegalAction : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Counter dishes split into those the expert can still load into their
// assigned rack (lowest ids first while free slots last) and those bound for
// the sink.
struct CounterAnalysis {
    std::array<std::vector<int>, 2> pending;
    std::vector<int> sinkable;
};

CounterAnalysis analyze_counter(const sim::SceneState& state, const Preference& pref);

// Lowest-index free slot of `dish` in `rack`, or -1.
int lowest_free_slot(const sim::SceneState& state, Category dish, Rack rack);

sim::Action expert_step(const sim::SceneState& state, const Preference& pref);

Session generate_session(int preference_id, const Preference& pref, const sim::SceneConfig& config);

// Replays arbitrary actions through env_step and records them as a session.
Session record_session(int preference_id, const sim::SceneConfig& config, std::span<const sim::Action> actions);

enum class ViolationKind { replay, structural, rack_assignment, unnecessary_sink, order, first_rack };

std::string_view violation_name(ViolationKind kind);

struct Violation {
    int step = 0;
    ViolationKind kind = ViolationKind::replay;
    std::string detail;
};

struct ValidityReport {
    std::vector<Violation> violations;

    bool ok() const { return violations.empty(); }
    int count(ViolationKind kind) const;
};

ValidityReport validate_session(const Session& session, const Preference& pref);

// Replays a session's actions from its scene config and returns the state
// after the last step. Throws sim::SimError on an illegal action.
sim::SceneState replay_final_state(const Session& session);

}  // namespace ttp::expert
