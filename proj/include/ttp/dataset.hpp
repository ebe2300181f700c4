#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ttp/expert.hpp"

namespace ttp::data {

inline constexpr int kDatasetVersion = 1;
inline constexpr const char* kGeneratorVersion = "ttp-expert/1";
// Sessions recorded without a declared preference (human demos).
inline constexpr int kUndeclaredPreference = -1;

struct Dataset {
    std::uint64_t seed = 0;
    std::string generator = kGeneratorVersion;
    std::map<int, expert::Preference> preferences;
    std::map<int, std::vector<expert::Session>> sessions;  // by preference id

    std::size_t session_count() const;
    bool operator==(const Dataset&) const = default;
};

class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Line-delimited JSON: one header record, then one record per session.
//
// header:  {"format":"ttp-dataset","version":1,"seed":u64,"generator":str,
//           "preferences":[{"id":int,"first_rack":"top"|"bottom",
//                           "top":[category...],"bottom":[category...]}],
//           "session_count":int}
// session: {"preference_id":int (-1 when undeclared),
//           "scene_config":{"n_per_rack","initial_fraction","seed","slot_capacity"},
//           "steps":[{"state":[instance...],"pick":int,
//                     "candidates":[instance...],"place":int,"spawns":int}],
//           "final_counts":[top,bottom]}
// instance: {"id":int,"category":str,"pose":[x,y,z,qw,qx,qy,qz],"t":int,
//            "is_place":bool}
void write_dataset(const Dataset& dataset, const std::string& path);
Dataset read_dataset(const std::string& path);

std::string serialize_dataset(const Dataset& dataset);
Dataset parse_dataset(const std::string& text);

nlohmann::json to_json(const expert::Session& session);
expert::Session session_from_json(const nlohmann::json& j);

struct GenerateSpec {
    int num_preferences = 7;
    int sessions_per_preference = 100;
    std::vector<int> n_per_rack_choices{6, 7};
    double initial_fraction = 0.5;
    int slot_capacity = 10;
    std::uint64_t seed = 0;
    int first_preference_id = 0;
};

// Preferences are sampled from the seed; duplicates are skipped so every id
// maps to a distinct preference.
Dataset generate_dataset(const GenerateSpec& spec);

// Same as generate_dataset but with preferences supplied by the caller.
Dataset generate_for_preferences(const std::map<int, expert::Preference>& preferences, int sessions_per_preference,
                                 const std::vector<int>& n_per_rack_choices, double initial_fraction,
                                 int slot_capacity, std::uint64_t seed);

// Distinct preferences drawn from one seed.
std::vector<expert::Preference> sample_distinct_preferences(int count, std::uint64_t seed,
                                                            const std::vector<expert::Preference>& exclude = {});

}  // namespace ttp::data
