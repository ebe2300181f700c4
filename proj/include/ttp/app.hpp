#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ttp/calib.hpp"
#include "ttp/eval.hpp"

namespace ttp::app {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr const char* kVersion = "0.1.0";

struct GenSettings {
    int train_preferences = 7;
    int test_preferences = 5;
    int train_sessions = 100;
    int validation_sessions = 10;
    int heldout_sessions = 10;
    int test_sessions = 100;
    std::vector<int> train_n{6, 7};
    std::vector<int> test_n{3, 4, 5, 8, 9, 10};
    double initial_fraction = 0.5;
    int slot_capacity = 10;

    bool operator==(const GenSettings&) const = default;
};

struct EvalSettings {
    eval::PolicyKind policy = eval::PolicyKind::model;
    std::string split = "heldout";  // heldout | validation | test
    int max_steps = eval::kDefaultMaxSteps;
    int scenes_per_preference = 0;  // 0 keeps all

    bool operator==(const EvalSettings&) const = default;
};

struct AblateSettings {
    eval::AblationSuite suite = eval::AblationSuite::attributes;
    std::vector<int> values;  // sweep values; empty uses the suite default

    bool operator==(const AblateSettings&) const = default;
};

struct ServeSettings {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string sessions_dir = "sessions";

    bool operator==(const ServeSettings&) const = default;
};

// Everything a subcommand needs. The file format is flat "key = value" text;
// model and train keys carry "model." and "train." prefixes.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string data_dir = "data";
    std::string checkpoint = "runs/model.ckpt";
    std::string reports = "reports";
    std::string calib_pairs = "pairs.txt";
    std::string calib_heights;  // optional "area = height" file
    GenSettings gen;
    model::ModelConfig model;
    train::TrainConfig train;
    EvalSettings eval;
    AblateSettings ablate;
    ServeSettings serve;

    static RunConfig from_kv(const KeyValueConfig& kv);
    KeyValueConfig to_kv() const;
    std::string text() const { return to_kv().format(); }
    void validate() const;  // throws ConfigError

    bool operator==(const RunConfig&) const = default;
};

std::vector<std::string> run_config_keys();
RunConfig load_run_config(const std::string& path);
// The config embedded in a manifest written by any subcommand.
RunConfig config_from_manifest(const std::string& path);

std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);
std::string file_hash(const std::filesystem::path& path);

// Dataset file names under data_dir.
std::filesystem::path split_path(const RunConfig& cfg, const std::string& split);

struct CommandResult {
    std::filesystem::path manifest;
    std::vector<std::filesystem::path> outputs;
    nlohmann::json summary;
};

// Each command writes its outputs and a manifest holding the command, the
// full config text and its hash, seeds, versions, input and output hashes,
// and a creation time (the only field that varies between reruns).
CommandResult cmd_gen(const RunConfig& cfg);
CommandResult cmd_train(const RunConfig& cfg, std::ostream* log = nullptr);
CommandResult cmd_eval(const RunConfig& cfg);
CommandResult cmd_ablate(const RunConfig& cfg, std::ostream* log = nullptr);
CommandResult cmd_calib(const RunConfig& cfg);

// Sweep grid for a suite; empty `values` picks the default sweep.
std::vector<eval::AblationCell> ablation_grid(eval::AblationSuite suite, const std::vector<int>& values);

// Prompts for `scenes`: seen preferences draw from `train_set`; preferences
// absent from it use one of their own sessions, which is then dropped from
// the scenes.
struct PromptedScenes {
    std::map<int, expert::Session> prompts;
    std::vector<eval::Scene> scenes;
};
PromptedScenes prompted_scenes(const data::Dataset& train_set, const data::Dataset& scenes_set, std::uint64_t seed,
                               int scenes_per_preference);

// Exit codes: 0 ok, 1 config, 2 IO, 3 divergence.
enum ExitCode { kOk = 0, kConfigError = 1, kIoError = 2, kDivergence = 3 };

// Maps the in-flight exception to an exit code.
int exit_code_for_current_exception();

// Entry point of the `ttp` command line.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ttp::app
