#include "doctest.h"

#include <set>

#include "ttp/eval.hpp"
#include "ttp/rng.hpp"

using namespace ttp;

namespace {

sim::SceneConfig scene(std::uint64_t seed, int n = 6) {
    sim::SceneConfig c;
    c.n_per_rack = n;
    c.seed = seed;
    return c;
}

}  // namespace

TEST_CASE("packing efficiency hand values") {
    CHECK(eval::packing_efficiency(6, 7, 6, 7, 13) == 1.0);
    CHECK(eval::packing_efficiency(3, 7, 6, 7, 10) == 0.75);
    CHECK(eval::packing_efficiency(0, 0, 6, 7, 13) == 0.0);  // full but on the wrong racks
    CHECK(eval::packing_efficiency(0, 0, 0, 0, 0) == 1.0);
    CHECK(eval::packing_efficiency(0, 0, 0, 0, 2) == 0.0);
    CHECK(eval::packing_efficiency(0, 5, 0, 5, 5) == 1.0);
    CHECK(eval::packing_efficiency(2, 0, 4, 0, 2) == 0.75);
}

TEST_CASE("inverse edit distance hand values") {
    CHECK(eval::levenshtein(std::vector<char>{'k', 'i', 't', 't', 'e', 'n'},
                            std::vector<char>{'s', 'i', 't', 't', 'i', 'n', 'g'}) == 3);
    CHECK(eval::levenshtein(std::vector<int>{}, std::vector<int>{1, 2}) == 2);
    const std::vector<int> expert{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    CHECK(eval::inverse_edit_distance(expert, expert) == 1.0);
    auto one_off = expert;
    one_off[4] = 42;
    CHECK(eval::inverse_edit_distance(one_off, expert) == doctest::Approx(0.9).epsilon(1e-15));
    std::vector<int> disjoint(20, 77);
    CHECK(eval::inverse_edit_distance(disjoint, expert) == 0.0);
    CHECK_THROWS_AS(eval::inverse_edit_distance(expert, std::vector<int>{}), std::invalid_argument);
}

TEST_CASE("temporal efficiency") {
    CHECK(eval::temporal_efficiency(1.0, 20, 20) == 1.0);
    CHECK(eval::temporal_efficiency(1.0, 20, 40) == 0.5);
    CHECK(eval::temporal_efficiency(0.8, 20, 10) == 0.8);
    Rng rng(4);
    for (int i = 0; i < 500; ++i) {
        const double pe = rng.uniform();
        const int l = 1 + static_cast<int>(rng.index(40));
        const int p = static_cast<int>(rng.index(90));
        const double te = eval::temporal_efficiency(pe, l, p);
        CHECK(te <= pe);
        CHECK(te >= 0.0);
    }
}

TEST_CASE("oracle rollout reproduces the expert") {
    for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
        const auto pref = expert::sample_preference(seed + 50);
        const auto rec = eval::rollout(eval::oracle_policy(pref), scene(seed), pref);
        CHECK(rec.terminal);
        CHECK(!rec.truncated);
        CHECK(rec.failed_steps == 0);
        CHECK(rec.pe() == 1.0);
        CHECK(rec.ed() == 1.0);
        CHECK(rec.te() == 1.0);
        CHECK(rec.policy_steps == rec.expert_steps);
        CHECK(rec.to_json()["pe"] == 1.0);
    }
}

TEST_CASE("random rollouts score near zero and respect invariants") {
    std::vector<eval::RolloutRecord> records;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto pref = expert::sample_preference(seed + 7);
        records.push_back(eval::rollout(eval::random_policy(seed), scene(seed + 100), pref));
        const auto& r = records.back();
        CHECK(r.pe() >= 0.0);
        CHECK(r.pe() <= 1.0);
        CHECK(r.ed() >= 0.0);
        CHECK(r.ed() <= 1.0);
        CHECK(r.te() <= r.pe());
        CHECK(r.policy_steps <= eval::kDefaultMaxSteps);
        for (const auto& d : r.decisions) {
            CHECK(std::find(d.eligible.begin(), d.eligible.end(), d.chosen) != d.eligible.end());
        }
    }
    const auto summary = eval::summarize(records);
    MESSAGE("random PE " << summary.pe);
    CHECK(summary.pe < 0.15);
    CHECK(summary.consistency < 0.6);
}

namespace {

void check_record_consistency(const eval::RolloutRecord& rec) {
    int illegal = 0;
    for (const auto& d : rec.decisions) {
        if (!d.legal) {
            ++illegal;
            CHECK(!d.error.empty());
        }
    }
    CHECK(illegal == rec.failed_steps);
    CHECK(rec.policy_steps == static_cast<int>(rec.actions.size()) + rec.failed_steps);
    const auto replay = expert::record_session(0, rec.scene_config, rec.actions);
    CHECK(expert::replay_final_state(replay) == rec.final_state);
}

}  // namespace

TEST_CASE("illegal choices are retried once and leave the state intact") {
    const auto pref = expert::sample_preference(3);
    // Always the top rack, preferring its open pose: blocked while the door is
    // closed, then the retry closes it instead.
    const eval::Policy stubborn = [](const eval::Query& q) {
        return q.place ? *std::max_element(q.eligible.begin(), q.eligible.end()) : q.eligible[1];
    };
    const auto rec = eval::rollout(stubborn, scene(30), pref, 10);
    check_record_consistency(rec);
    CHECK(rec.failed_steps == 5);
    CHECK(rec.decisions[1].error == "RackBlocked");
    CHECK(rec.decisions[2].legal);
    CHECK(rec.truncated);
    CHECK(!rec.aborted);
}

TEST_CASE("a second illegal choice ends the episode") {
    const auto pref = expert::sample_preference(5);
    // The expert, except that places go to occupied slots whenever possible.
    const auto expert_policy = eval::oracle_policy(pref);
    const eval::Policy clumsy = [&](const eval::Query& q) {
        if (q.place) {
            for (int id : q.eligible) {
                if (q.state->slot_occupancy.contains(id)) {
                    return id;
                }
            }
        }
        return expert_policy(q);
    };
    int aborted = 0;
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const auto rec = eval::rollout(clumsy, scene(seed + 40), pref);
        check_record_consistency(rec);
        if (rec.aborted) {
            ++aborted;
            CHECK(!rec.decisions.back().legal);
            CHECK(!rec.decisions[rec.decisions.size() - 2].legal);
            CHECK(rec.decisions.back().error == "OccupiedSlot");
            CHECK(!rec.terminal);
        }
    }
    CHECK(aborted > 0);
}

TEST_CASE("max_steps truncates the record") {
    const auto pref = expert::sample_preference(9);
    const auto rec = eval::rollout(eval::oracle_policy(pref), scene(9), pref, 5);
    CHECK(rec.truncated);
    CHECK(!rec.terminal);
    CHECK(rec.policy_steps == 5);
    CHECK(rec.te() <= rec.pe());
}

TEST_CASE("random scorer token accuracy over 8 distinct categories") {
    const std::vector<sim::Category> cats{sim::Category::cup,        sim::Category::glass,     sim::Category::tray,
                                          sim::Category::small_bowl, sim::Category::big_bowl,  sim::Category::small_plate,
                                          sim::Category::big_plate,  sim::Category::door};
    eval::Query q;
    for (int i = 0; i < 8; ++i) {
        q.eligible.push_back(i);
    }
    const auto policy = eval::random_policy(17);
    Rng rng(18);
    int hits = 0;
    const int trials = 40000;
    for (int t = 0; t < trials; ++t) {
        const auto target = cats[rng.index(8)];
        hits += cats[static_cast<std::size_t>(policy(q))] == target ? 1 : 0;
    }
    CHECK(static_cast<double>(hits) / trials == doctest::Approx(1.0 / 8).epsilon(0.05));
}

TEST_CASE("attribute grid covers all eight masks") {
    const auto grid = eval::attribute_grid();
    REQUIRE(grid.size() == 8);
    std::set<std::tuple<bool, bool, bool>> seen;
    for (const auto& c : grid) {
        seen.insert({c.mask.pose, c.mask.category, c.mask.time});
        CHECK(c.mask.role);
    }
    CHECK(seen.size() == 8);
    CHECK(grid.front().label == "pose+category+time");
    CHECK(grid.back().label == "none");
    CHECK(grid[3].label == "pose");
    CHECK(grid[5].label == "category");
    CHECK(eval::parse_suite("num_prefs") == eval::AblationSuite::num_prefs);
    CHECK(!eval::parse_suite("bogus").has_value());
    CHECK(eval::parse_policy("oracle") == eval::PolicyKind::oracle);
}

TEST_CASE("symbols of an expert session") {
    const auto pref = expert::sample_preference(12);
    const auto session = expert::generate_session(0, pref, scene(12));
    const auto symbols = eval::session_symbols(session);
    REQUIRE(symbols.size() == 2 * session.steps.size());
    CHECK(eval::to_string(symbols[0]) == "pick:door:closed");
    CHECK(eval::to_string(symbols[1]) == "place:door:open");
    for (std::size_t i = 0; i < symbols.size(); i += 2) {
        CHECK(!symbols[i].place);
        CHECK(symbols[i + 1].place);
        CHECK(symbols[i].category == symbols[i + 1].category);
    }
}

TEST_CASE("ablation harness is reproducible") {
    const std::map<int, expert::Preference> prefs{{0, expert::sample_preference(61)}, {1, expert::sample_preference(62)}};
    eval::AblationInputs in;
    in.train_set = data::generate_for_preferences(prefs, 2, {3}, 0.5, 10, 1);
    in.validation_set = data::generate_for_preferences(prefs, 1, {3}, 0.5, 10, 2);
    in.test_set = data::generate_for_preferences(prefs, 1, {3}, 0.5, 10, 3);
    in.model_cfg = model::toy_config();
    in.train_cfg.max_epochs = 1;
    in.train_cfg.batch_size = 16;
    in.max_steps = 20;
    auto grid = eval::attribute_grid();
    grid.resize(2);
    grid[1].num_prefs = 1;
    const auto a = eval::run_ablation(grid, in);
    const auto b = eval::run_ablation(grid, in);
    REQUIRE(a.size() == 2);
    CHECK(eval::format_table(a) == eval::format_table(b));
    CHECK(a[1].summary.sessions == 1);
    CHECK(a[0].summary.sessions == 2);
}
