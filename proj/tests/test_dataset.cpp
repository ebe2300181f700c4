#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ttp/dataset.hpp"

using namespace ttp;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("ttp_test_" + name)).string();
}

data::Dataset small_dataset() {
    const auto prefs = data::sample_distinct_preferences(2, 9);
    std::map<int, expert::Preference> by_id{{3, prefs[0]}, {8, prefs[1]}};
    auto d = data::generate_for_preferences(by_id, 2, {3, 4}, 0.5, 10, 41);
    d.sessions[8].pop_back();  // 3 sessions total
    return d;
}

}  // namespace

TEST_CASE("dataset file round trip") {
    const auto d = small_dataset();
    REQUIRE(d.session_count() == 3);
    const auto path = temp_path("roundtrip.jsonl");
    data::write_dataset(d, path);
    const auto back = data::read_dataset(path);
    CHECK(back == d);
    CHECK(data::serialize_dataset(back) == data::serialize_dataset(d));
    std::remove(path.c_str());
}

TEST_CASE("empty dataset round trip") {
    data::Dataset empty;
    const auto path = temp_path("empty.jsonl");
    data::write_dataset(empty, path);
    const auto back = data::read_dataset(path);
    CHECK(back.session_count() == 0);
    CHECK(back.preferences.empty());
    CHECK(back == empty);
    std::remove(path.c_str());
}

TEST_CASE("corrupted dataset raises a schema error") {
    const auto text = data::serialize_dataset(small_dataset());
    SUBCASE("truncated") {
        CHECK_THROWS_AS(data::parse_dataset(text.substr(0, text.size() / 2)), data::DatasetError);
    }
    SUBCASE("missing session line") {
        const auto last = text.rfind('\n', text.size() - 2);
        CHECK_THROWS_AS(data::parse_dataset(text.substr(0, last + 1)), data::DatasetError);
    }
    SUBCASE("garbage") {
        CHECK_THROWS_AS(data::parse_dataset("not json\n"), data::DatasetError);
        CHECK_THROWS_AS(data::parse_dataset(""), data::DatasetError);
    }
    SUBCASE("version mismatch") {
        auto bumped = text;
        const auto pos = bumped.find("\"version\":1");
        REQUIRE(pos != std::string::npos);
        bumped.replace(pos, 11, "\"version\":2");
        CHECK_THROWS_WITH_AS(data::parse_dataset(bumped), doctest::Contains("version"), data::DatasetError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(data::read_dataset(temp_path("does_not_exist.jsonl")), data::DatasetError);
    }
}

TEST_CASE("generated dataset: distinct preferences, valid sessions, determinism") {
    data::GenerateSpec spec;
    spec.num_preferences = 4;
    spec.sessions_per_preference = 5;
    spec.seed = 12;
    const auto d = data::generate_dataset(spec);
    CHECK(d.preferences.size() == 4);
    CHECK(d.session_count() == 20);
    for (const auto& [id, list] : d.sessions) {
        CHECK(list.size() == 5);
        for (const auto& s : list) {
            CHECK(s.preference_id == id);
            CHECK((s.scene_config.n_per_rack == 6 || s.scene_config.n_per_rack == 7));
            CHECK(expert::validate_session(s, d.preferences.at(id)).ok());
        }
    }
    for (auto a = d.preferences.begin(); a != d.preferences.end(); ++a) {
        for (auto b = std::next(a); b != d.preferences.end(); ++b) {
            CHECK_FALSE(a->second == b->second);
        }
    }
    CHECK(data::serialize_dataset(data::generate_dataset(spec)) == data::serialize_dataset(d));
}
