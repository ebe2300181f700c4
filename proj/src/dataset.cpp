#include "ttp/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "ttp/rng.hpp"

namespace ttp::data {

using nlohmann::json;

std::size_t Dataset::session_count() const {
    std::size_t n = 0;
    for (const auto& [id, list] : sessions) {
        n += list.size();
    }
    return n;
}

json to_json(const expert::Session& session) {
    json steps = json::array();
    for (const auto& step : session.steps) {
        json state = json::array();
        for (const auto& inst : step.state) {
            state.push_back(sim::to_json(inst));
        }
        json candidates = json::array();
        for (const auto& inst : step.place_candidates) {
            candidates.push_back(sim::to_json(inst));
        }
        steps.push_back({{"state", std::move(state)},
                         {"pick", step.pick_target_id},
                         {"candidates", std::move(candidates)},
                         {"place", step.place_target_id},
                         {"spawns", step.spawns}});
    }
    return {{"preference_id", session.preference_id},
            {"scene_config", sim::to_json(session.scene_config)},
            {"steps", std::move(steps)},
            {"final_counts", {session.final_counts[0], session.final_counts[1]}}};
}

expert::Session session_from_json(const json& j) {
    expert::Session session;
    session.preference_id = j.at("preference_id").get<int>();
    session.scene_config = sim::scene_config_from_json(j.at("scene_config"));
    for (const auto& s : j.at("steps")) {
        expert::Step step;
        for (const auto& inst : s.at("state")) {
            step.state.push_back(sim::instance_from_json(inst));
        }
        step.pick_target_id = s.at("pick").get<int>();
        for (const auto& inst : s.at("candidates")) {
            step.place_candidates.push_back(sim::instance_from_json(inst));
        }
        step.place_target_id = s.at("place").get<int>();
        step.spawns = s.at("spawns").get<int>();
        session.steps.push_back(std::move(step));
    }
    const auto& counts = j.at("final_counts");
    if (!counts.is_array() || counts.size() != 2) {
        throw std::invalid_argument("final_counts must have 2 entries");
    }
    session.final_counts = {counts[0].get<int>(), counts[1].get<int>()};
    return session;
}

std::string serialize_dataset(const Dataset& dataset) {
    json prefs = json::array();
    for (const auto& [id, pref] : dataset.preferences) {
        json p = expert::to_json(pref);
        p["id"] = id;
        prefs.push_back(std::move(p));
    }
    const json header{{"format", "ttp-dataset"},
                      {"version", kDatasetVersion},
                      {"seed", dataset.seed},
                      {"generator", dataset.generator},
                      {"preferences", std::move(prefs)},
                      {"session_count", dataset.session_count()}};
    std::string out = header.dump() + "\n";
    for (const auto& [id, list] : dataset.sessions) {
        for (const auto& session : list) {
            out += to_json(session).dump() + "\n";
        }
    }
    return out;
}

Dataset parse_dataset(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) {
        throw DatasetError("dataset: missing header");
    }
    Dataset dataset;
    std::size_t expected = 0;
    try {
        const json header = json::parse(line);
        if (header.at("format").get<std::string>() != "ttp-dataset") {
            throw DatasetError("dataset: not a ttp dataset");
        }
        const int version = header.at("version").get<int>();
        if (version != kDatasetVersion) {
            throw DatasetError("dataset: schema version " + std::to_string(version) + " is not supported (expected " +
                               std::to_string(kDatasetVersion) + ")");
        }
        dataset.seed = header.at("seed").get<std::uint64_t>();
        dataset.generator = header.at("generator").get<std::string>();
        for (const auto& p : header.at("preferences")) {
            dataset.preferences.emplace(p.at("id").get<int>(), expert::preference_from_json(p));
        }
        expected = header.at("session_count").get<std::size_t>();
        std::size_t line_no = 1;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) {
                continue;
            }
            expert::Session session = session_from_json(json::parse(line));
            if (session.preference_id != kUndeclaredPreference &&
                !dataset.preferences.contains(session.preference_id)) {
                throw DatasetError("dataset line " + std::to_string(line_no) + ": unknown preference id " +
                                   std::to_string(session.preference_id));
            }
            dataset.sessions[session.preference_id].push_back(std::move(session));
        }
    } catch (const DatasetError&) {
        throw;
    } catch (const std::exception& e) {
        throw DatasetError(std::string("dataset: schema error: ") + e.what());
    }
    if (dataset.session_count() != expected) {
        throw DatasetError("dataset: expected " + std::to_string(expected) + " sessions, found " +
                           std::to_string(dataset.session_count()));
    }
    return dataset;
}

void write_dataset(const Dataset& dataset, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DatasetError("dataset: cannot open " + path + " for writing");
    }
    out << serialize_dataset(dataset);
    if (!out) {
        throw DatasetError("dataset: write to " + path + " failed");
    }
}

Dataset read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DatasetError("dataset: cannot open " + path);
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_dataset(buffer.str());
}

std::vector<expert::Preference> sample_distinct_preferences(int count, std::uint64_t seed,
                                                            const std::vector<expert::Preference>& exclude) {
    std::vector<expert::Preference> out;
    std::uint64_t draw = 0;
    while (static_cast<int>(out.size()) < count) {
        expert::Preference pref = expert::sample_preference(mix_seed(seed, draw++));
        const bool seen = std::find(out.begin(), out.end(), pref) != out.end() ||
                          std::find(exclude.begin(), exclude.end(), pref) != exclude.end();
        if (!seen) {
            out.push_back(std::move(pref));
        }
    }
    return out;
}

Dataset generate_for_preferences(const std::map<int, expert::Preference>& preferences, int sessions_per_preference,
                                 const std::vector<int>& n_per_rack_choices, double initial_fraction,
                                 int slot_capacity, std::uint64_t seed) {
    if (n_per_rack_choices.empty()) {
        throw std::invalid_argument("n_per_rack_choices must not be empty");
    }
    Dataset dataset;
    dataset.seed = seed;
    dataset.preferences = preferences;
    for (const auto& [id, pref] : preferences) {
        Rng rng(mix_seed(seed, 1000 + static_cast<std::uint64_t>(id)));
        auto& list = dataset.sessions[id];
        for (int k = 0; k < sessions_per_preference; ++k) {
            sim::SceneConfig config;
            config.n_per_rack = n_per_rack_choices[rng.index(n_per_rack_choices.size())];
            config.initial_fraction = initial_fraction;
            config.slot_capacity = slot_capacity;
            config.seed = rng.next();
            list.push_back(expert::generate_session(id, pref, config));
        }
    }
    return dataset;
}

Dataset generate_dataset(const GenerateSpec& spec) {
    const auto prefs = sample_distinct_preferences(spec.num_preferences, spec.seed);
    std::map<int, expert::Preference> by_id;
    for (int i = 0; i < spec.num_preferences; ++i) {
        by_id.emplace(spec.first_preference_id + i, prefs[static_cast<std::size_t>(i)]);
    }
    return generate_for_preferences(by_id, spec.sessions_per_preference, spec.n_per_rack_choices,
                                    spec.initial_fraction, spec.slot_capacity, spec.seed);
}

}  // namespace ttp::data
