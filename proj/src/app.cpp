#include "ttp/app.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "ttp/rng.hpp"

namespace ttp::app {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string format_double(double v) {
    std::ostringstream out;
    out.precision(17);
    out << v;
    return out.str();
}

std::string join(const std::vector<int>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        out += (i ? ", " : "") + std::to_string(values[i]);
    }
    return out;
}

std::vector<int> to_ints(const std::vector<long long>& values) {
    return {values.begin(), values.end()};
}

// Keys under `prefix`, with the prefix stripped.
KeyValueConfig section(const KeyValueConfig& kv, const std::string& prefix) {
    KeyValueConfig out;
    for (const auto& [key, value] : kv.values()) {
        if (key.starts_with(prefix)) {
            out.set(key.substr(prefix.size()), value);
        }
    }
    return out;
}

void merge(KeyValueConfig& into, const KeyValueConfig& from, const std::string& prefix) {
    for (const auto& [key, value] : from.values()) {
        into.set(prefix + key, value);
    }
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::error_code ec;
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out || !(out << text) || !out.flush()) {
        throw IoError("cannot write " + path.string());
    }
}

void ensure_parent(const fs::path& path) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec) {
            throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
        }
    }
}

data::Dataset load_dataset(const fs::path& path) {
    if (!fs::exists(path)) {
        throw IoError("missing dataset " + path.string());
    }
    return data::read_dataset(path.string());
}

std::string utc_now() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream out;
    out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return out.str();
}

fs::path write_manifest(const RunConfig& cfg, const std::string& command, const fs::path& path,
                        const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs,
                        const json& summary) {
    json in = json::object();
    for (const auto& p : inputs) {
        in[p.string()] = file_hash(p);
    }
    json out = json::object();
    for (const auto& p : outputs) {
        out[p.string()] = file_hash(p);
    }
    const std::string text = cfg.text();
    const json manifest{{"command", command},
                        {"config", text},
                        {"config_hash", hex64(fnv1a(text))},
                        {"seeds", {{"run", cfg.seed}, {"train", cfg.train.seed}}},
                        {"versions",
                         {{"ttp", kVersion},
                          {"dataset_format", data::kDatasetVersion},
                          {"checkpoint_format", model::kCheckpointVersion},
                          {"generator", data::kGeneratorVersion}}},
                        {"inputs", std::move(in)},
                        {"outputs", std::move(out)},
                        {"summary", summary},
                        {"created", utc_now()}};
    write_text(path, manifest.dump(2) + "\n");
    return path;
}

int positive(const KeyValueConfig& kv, const std::string& key, int fallback, int min = 1) {
    const auto v = kv.get_int(key, fallback);
    if (v < min) {
        throw ConfigError("config key '" + key + "' must be >= " + std::to_string(min));
    }
    return static_cast<int>(v);
}

}  // namespace

std::vector<std::string> run_config_keys() {
    std::vector<std::string> keys{"seed",
                                  "paths.data",
                                  "paths.checkpoint",
                                  "paths.reports",
                                  "calib.pairs",
                                  "calib.heights",
                                  "gen.train_preferences",
                                  "gen.test_preferences",
                                  "gen.train_sessions",
                                  "gen.validation_sessions",
                                  "gen.heldout_sessions",
                                  "gen.test_sessions",
                                  "gen.train_n",
                                  "gen.test_n",
                                  "gen.initial_fraction",
                                  "gen.slot_capacity",
                                  "eval.policy",
                                  "eval.split",
                                  "eval.max_steps",
                                  "eval.scenes_per_preference",
                                  "ablate.suite",
                                  "ablate.values",
                                  "serve.host",
                                  "serve.port",
                                  "serve.sessions_dir"};
    for (const auto& k : model::config_keys()) {
        keys.push_back("model." + k);
    }
    for (const auto& k : train::config_keys()) {
        keys.push_back("train." + k);
    }
    return keys;
}

RunConfig RunConfig::from_kv(const KeyValueConfig& kv) {
    kv.reject_unknown(run_config_keys());
    RunConfig c;
    c.seed = kv.get_uint("seed", c.seed);
    c.data_dir = kv.get_string("paths.data", c.data_dir);
    c.checkpoint = kv.get_string("paths.checkpoint", c.checkpoint);
    c.reports = kv.get_string("paths.reports", c.reports);
    c.calib_pairs = kv.get_string("calib.pairs", c.calib_pairs);
    c.calib_heights = kv.get_string("calib.heights", c.calib_heights);

    auto& g = c.gen;
    g.train_preferences = positive(kv, "gen.train_preferences", g.train_preferences);
    g.test_preferences = positive(kv, "gen.test_preferences", g.test_preferences, 0);
    g.train_sessions = positive(kv, "gen.train_sessions", g.train_sessions);
    g.validation_sessions = positive(kv, "gen.validation_sessions", g.validation_sessions, 0);
    g.heldout_sessions = positive(kv, "gen.heldout_sessions", g.heldout_sessions, 0);
    g.test_sessions = positive(kv, "gen.test_sessions", g.test_sessions, 0);
    g.train_n = to_ints(kv.get_int_list("gen.train_n", {g.train_n.begin(), g.train_n.end()}));
    g.test_n = to_ints(kv.get_int_list("gen.test_n", {g.test_n.begin(), g.test_n.end()}));
    g.initial_fraction = kv.get_double("gen.initial_fraction", g.initial_fraction);
    g.slot_capacity = positive(kv, "gen.slot_capacity", g.slot_capacity);

    try {
        c.model = model::read_config(section(kv, "model."));
        c.train = train::read_config(section(kv, "train."));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }

    const auto policy = kv.get_string("eval.policy", std::string(eval::policy_name(c.eval.policy)));
    if (const auto p = eval::parse_policy(policy)) {
        c.eval.policy = *p;
    } else {
        throw ConfigError("eval.policy: unknown policy '" + policy + "'");
    }
    c.eval.split = kv.get_string("eval.split", c.eval.split);
    c.eval.max_steps = positive(kv, "eval.max_steps", c.eval.max_steps);
    c.eval.scenes_per_preference = positive(kv, "eval.scenes_per_preference", c.eval.scenes_per_preference, 0);

    const auto suite = kv.get_string("ablate.suite", std::string(eval::suite_name(c.ablate.suite)));
    if (const auto s = eval::parse_suite(suite)) {
        c.ablate.suite = *s;
    } else {
        throw ConfigError("ablate.suite: unknown suite '" + suite + "'");
    }
    c.ablate.values = to_ints(kv.get_int_list("ablate.values", {}));

    c.serve.host = kv.get_string("serve.host", c.serve.host);
    c.serve.port = positive(kv, "serve.port", c.serve.port, 0);
    c.serve.sessions_dir = kv.get_string("serve.sessions_dir", c.serve.sessions_dir);
    c.validate();
    return c;
}

KeyValueConfig RunConfig::to_kv() const {
    KeyValueConfig kv;
    kv.set("seed", std::to_string(seed));
    kv.set("paths.data", data_dir);
    kv.set("paths.checkpoint", checkpoint);
    kv.set("paths.reports", reports);
    kv.set("calib.pairs", calib_pairs);
    kv.set("calib.heights", calib_heights);
    kv.set("gen.train_preferences", std::to_string(gen.train_preferences));
    kv.set("gen.test_preferences", std::to_string(gen.test_preferences));
    kv.set("gen.train_sessions", std::to_string(gen.train_sessions));
    kv.set("gen.validation_sessions", std::to_string(gen.validation_sessions));
    kv.set("gen.heldout_sessions", std::to_string(gen.heldout_sessions));
    kv.set("gen.test_sessions", std::to_string(gen.test_sessions));
    kv.set("gen.train_n", join(gen.train_n));
    kv.set("gen.test_n", join(gen.test_n));
    kv.set("gen.initial_fraction", format_double(gen.initial_fraction));
    kv.set("gen.slot_capacity", std::to_string(gen.slot_capacity));
    KeyValueConfig m;
    model::write_config(m, model);
    merge(kv, m, "model.");
    KeyValueConfig t;
    train::write_config(t, train);
    merge(kv, t, "train.");
    kv.set("eval.policy", std::string(eval::policy_name(eval.policy)));
    kv.set("eval.split", eval.split);
    kv.set("eval.max_steps", std::to_string(eval.max_steps));
    kv.set("eval.scenes_per_preference", std::to_string(eval.scenes_per_preference));
    kv.set("ablate.suite", std::string(eval::suite_name(ablate.suite)));
    kv.set("ablate.values", join(ablate.values));
    kv.set("serve.host", serve.host);
    kv.set("serve.port", std::to_string(serve.port));
    kv.set("serve.sessions_dir", serve.sessions_dir);
    return kv;
}

void RunConfig::validate() const {
    if (gen.train_n.empty() || gen.test_n.empty()) {
        throw ConfigError("gen.train_n and gen.test_n must not be empty");
    }
    for (const auto* list : {&gen.train_n, &gen.test_n}) {
        for (int n : *list) {
            sim::SceneConfig sc;
            sc.n_per_rack = n;
            sc.initial_fraction = gen.initial_fraction;
            sc.slot_capacity = gen.slot_capacity;
            try {
                sim::validate_config(sc);
            } catch (const sim::SimError& e) {
                throw ConfigError(std::string("gen: ") + e.what());
            }
        }
    }
    if (eval.split != "heldout" && eval.split != "validation" && eval.split != "test") {
        throw ConfigError("eval.split must be heldout, validation or test");
    }
    if (serve.port > 65535) {
        throw ConfigError("serve.port out of range");
    }
}

RunConfig load_run_config(const std::string& path) {
    if (!fs::exists(path)) {
        throw IoError("missing config file " + path);
    }
    return RunConfig::from_kv(KeyValueConfig::parse(read_text(path)));
}

RunConfig config_from_manifest(const std::string& path) {
    const std::string text = read_text(path);
    json manifest;
    try {
        manifest = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError("manifest " + path + ": " + e.what());
    }
    if (!manifest.contains("config") || !manifest["config"].is_string()) {
        throw ConfigError("manifest " + path + " has no config");
    }
    return RunConfig::from_kv(KeyValueConfig::parse(manifest["config"].get<std::string>()));
}

std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << v;
    return out.str();
}

std::string file_hash(const fs::path& path) { return hex64(fnv1a(read_text(path))); }

fs::path split_path(const RunConfig& cfg, const std::string& split) {
    return fs::path(cfg.data_dir) / (split + ".jsonl");
}

CommandResult cmd_gen(const RunConfig& cfg) {
    const auto& g = cfg.gen;
    const auto prefs = data::sample_distinct_preferences(g.train_preferences + g.test_preferences, cfg.seed);
    std::map<int, expert::Preference> train_prefs;
    std::map<int, expert::Preference> test_prefs;
    for (int i = 0; i < static_cast<int>(prefs.size()); ++i) {
        (i < g.train_preferences ? train_prefs : test_prefs).emplace(i, prefs[static_cast<std::size_t>(i)]);
    }
    struct Split {
        const char* name;
        const std::map<int, expert::Preference>* prefs;
        int sessions;
        const std::vector<int>* n;
    };
    const Split splits[] = {{"train", &train_prefs, g.train_sessions, &g.train_n},
                            {"validation", &train_prefs, g.validation_sessions, &g.train_n},
                            {"heldout", &train_prefs, g.heldout_sessions, &g.train_n},
                            {"test", &test_prefs, g.test_sessions, &g.test_n}};
    CommandResult result;
    json counts = json::object();
    std::uint64_t salt = 1;
    for (const auto& s : splits) {
        const auto ds = data::generate_for_preferences(*s.prefs, s.sessions, *s.n, g.initial_fraction,
                                                       g.slot_capacity, mix_seed(cfg.seed, salt++));
        const auto path = split_path(cfg, s.name);
        ensure_parent(path);
        try {
            data::write_dataset(ds, path.string());
        } catch (const data::DatasetError& e) {
            throw IoError(e.what());
        }
        result.outputs.push_back(path);
        counts[s.name] = {{"preferences", ds.preferences.size()}, {"sessions", ds.session_count()}};
    }
    result.summary = {{"splits", counts}};
    result.manifest = write_manifest(cfg, "gen", fs::path(cfg.data_dir) / "gen.manifest.json", {}, result.outputs,
                                     result.summary);
    return result;
}

CommandResult cmd_train(const RunConfig& cfg, std::ostream* log) {
    const auto train_path = split_path(cfg, "train");
    const auto val_path = split_path(cfg, "validation");
    const auto train_set = load_dataset(train_path);
    const auto val_set = load_dataset(val_path);
    const fs::path metrics_path = fs::path(cfg.reports) / "train_metrics.jsonl";
    ensure_parent(metrics_path);
    std::ofstream metrics(metrics_path, std::ios::binary);
    if (!metrics) {
        throw IoError("cannot write " + metrics_path.string());
    }
    const auto res = train::train_loop(train_set, val_set, cfg.model, cfg.train, [&](const train::EpochMetrics& m) {
        const auto line = m.to_json().dump();
        metrics << line << "\n";
        if (log) {
            *log << line << std::endl;
        }
    });
    metrics.close();

    model::Checkpoint ckpt;
    ckpt.config = cfg.model;
    ckpt.params = res.best_params;
    std::ostringstream meta;
    meta << "best_epoch = " << res.best_epoch << "\n"
         << "best_accuracy = " << format_double(res.best_accuracy) << "\n"
         << "stop_reason = " << res.stop_reason << "\n"
         << "context_window = " << cfg.train.context_window << "\n"
         << "config_hash = " << hex64(fnv1a(cfg.text())) << "\n";
    ckpt.metadata = meta.str();
    ensure_parent(cfg.checkpoint);
    try {
        model::save_checkpoint(ckpt, cfg.checkpoint);
    } catch (const model::CheckpointError& e) {
        throw IoError(e.what());
    }

    CommandResult result;
    result.outputs = {cfg.checkpoint, metrics_path};
    result.summary = {{"best_epoch", res.best_epoch},
                      {"best_accuracy", res.best_accuracy},
                      {"epochs", res.history.size()},
                      {"stop_reason", res.stop_reason}};
    result.manifest = write_manifest(cfg, "train", fs::path(cfg.reports) / "train.manifest.json",
                                     {train_path, val_path}, result.outputs, result.summary);
    return result;
}

PromptedScenes prompted_scenes(const data::Dataset& train_set, const data::Dataset& scenes_set, std::uint64_t seed,
                               int scenes_per_preference) {
    PromptedScenes out;
    const auto seen = eval::choose_prompts(train_set, seed);
    for (const auto& [pref_id, sessions] : scenes_set.sessions) {
        std::size_t skip = sessions.size();
        if (const auto it = seen.find(pref_id); it != seen.end()) {
            out.prompts.emplace(pref_id, it->second);
        } else if (!sessions.empty()) {
            skip = static_cast<std::size_t>(train::validation_prompt_index(scenes_set, pref_id, seed));
            out.prompts.emplace(pref_id, sessions[skip]);
        }
        int taken = 0;
        for (std::size_t i = 0; i < sessions.size(); ++i) {
            if (i == skip || (scenes_per_preference > 0 && taken >= scenes_per_preference)) {
                continue;
            }
            out.scenes.push_back({pref_id, sessions[i].scene_config});
            ++taken;
        }
    }
    return out;
}

CommandResult cmd_eval(const RunConfig& cfg) {
    const auto train_path = split_path(cfg, "train");
    const auto scenes_path = split_path(cfg, cfg.eval.split);
    const auto train_set = load_dataset(train_path);
    const auto scenes_set = load_dataset(scenes_path);
    std::vector<fs::path> inputs{train_path, scenes_path};

    std::optional<model::Checkpoint> ckpt;
    if (cfg.eval.policy == eval::PolicyKind::model) {
        if (!fs::exists(cfg.checkpoint)) {
            throw IoError("missing checkpoint " + cfg.checkpoint);
        }
        try {
            ckpt = model::load_checkpoint(cfg.checkpoint);
        } catch (const model::CheckpointError& e) {
            throw IoError(e.what());
        }
        inputs.emplace_back(cfg.checkpoint);
    }
    auto preferences = train_set.preferences;
    preferences.insert(scenes_set.preferences.begin(), scenes_set.preferences.end());
    const auto ps = prompted_scenes(train_set, scenes_set, cfg.seed, cfg.eval.scenes_per_preference);

    eval::EvalSpec spec;
    spec.policy = cfg.eval.policy;
    spec.context_window = cfg.train.context_window;
    spec.max_steps = cfg.eval.max_steps;
    spec.seed = cfg.seed;
    const auto records = eval::evaluate(ckpt ? &ckpt->params : nullptr, ckpt ? &ckpt->config : nullptr, ps.prompts,
                                        preferences, ps.scenes, spec);
    const auto summary = eval::summarize(records);

    json recs = json::array();
    for (std::size_t i = 0; i < records.size(); ++i) {
        auto j = records[i].to_json();
        j["preference_id"] = ps.scenes[i].preference_id;
        recs.push_back(std::move(j));
    }
    const std::string name = "eval_" + cfg.eval.split + "_" + std::string(eval::policy_name(cfg.eval.policy));
    const fs::path report = fs::path(cfg.reports) / (name + ".json");
    const json body{{"split", cfg.eval.split},
                    {"policy", eval::policy_name(cfg.eval.policy)},
                    {"summary", summary.to_json()},
                    {"records", std::move(recs)}};
    write_text(report, body.dump(1) + "\n");

    CommandResult result;
    result.outputs = {report};
    result.summary = summary.to_json();
    result.manifest = write_manifest(cfg, "eval", fs::path(cfg.reports) / (name + ".manifest.json"), inputs,
                                     result.outputs, result.summary);
    return result;
}

std::vector<eval::AblationCell> ablation_grid(eval::AblationSuite suite, const std::vector<int>& values) {
    if (suite == eval::AblationSuite::attributes) {
        return eval::attribute_grid();
    }
    std::vector<int> sweep = values;
    if (sweep.empty()) {
        switch (suite) {
            case eval::AblationSuite::context_window: sweep = {0, 1, 2, 4}; break;
            case eval::AblationSuite::num_demos: sweep = {1, 2, 5, 10}; break;
            case eval::AblationSuite::num_prefs: sweep = {1, 2, 4, 7}; break;
            case eval::AblationSuite::attributes: break;
        }
    }
    std::vector<eval::AblationCell> grid;
    for (int v : sweep) {
        if (v < 0 || (v == 0 && suite != eval::AblationSuite::context_window)) {
            throw ConfigError("ablate.values: invalid sweep value " + std::to_string(v));
        }
        eval::AblationCell cell;
        cell.label = std::string(eval::suite_name(suite)) + "=" + std::to_string(v);
        switch (suite) {
            case eval::AblationSuite::context_window: cell.context_window = v; break;
            case eval::AblationSuite::num_demos: cell.num_demos = v; break;
            case eval::AblationSuite::num_prefs: cell.num_prefs = v; break;
            case eval::AblationSuite::attributes: break;
        }
        grid.push_back(cell);
    }
    return grid;
}

CommandResult cmd_ablate(const RunConfig& cfg, std::ostream* log) {
    const auto train_path = split_path(cfg, "train");
    const auto val_path = split_path(cfg, "validation");
    const auto heldout_path = split_path(cfg, "heldout");
    eval::AblationInputs in;
    in.train_set = load_dataset(train_path);
    in.validation_set = load_dataset(val_path);
    in.test_set = load_dataset(heldout_path);
    in.model_cfg = cfg.model;
    in.train_cfg = cfg.train;
    in.max_steps = cfg.eval.max_steps;
    const auto grid = ablation_grid(cfg.ablate.suite, cfg.ablate.values);

    const std::string name = "ablate_" + std::string(eval::suite_name(cfg.ablate.suite));
    const fs::path rows_path = fs::path(cfg.reports) / (name + ".jsonl");
    const fs::path table_path = fs::path(cfg.reports) / (name + ".tsv");
    const auto rows = eval::run_ablation(grid, in, [&](const eval::AblationRow& row) {
        if (log) {
            *log << row.to_json().dump() << std::endl;
        }
    });
    std::string lines;
    json summary = json::array();
    for (const auto& row : rows) {
        lines += row.to_json().dump() + "\n";
        summary.push_back({{"label", row.cell.label}, {"pe", row.summary.pe}});
    }
    write_text(rows_path, lines);
    write_text(table_path, eval::format_table(rows));

    CommandResult result;
    result.outputs = {table_path, rows_path};
    result.summary = {{"rows", std::move(summary)}};
    result.manifest = write_manifest(cfg, "ablate", fs::path(cfg.reports) / (name + ".manifest.json"),
                                     {train_path, val_path, heldout_path}, result.outputs, result.summary);
    return result;
}

CommandResult cmd_calib(const RunConfig& cfg) {
    std::vector<fs::path> inputs{cfg.calib_pairs};
    const auto pairs = calib::parse_pairs(read_text(cfg.calib_pairs));
    calib::HeightTable heights;
    if (!cfg.calib_heights.empty()) {
        heights = calib::parse_heights(read_text(cfg.calib_heights));
        inputs.emplace_back(cfg.calib_heights);
    }
    const auto fit = calib::fit(pairs);
    const auto a = fit.transform.matrix();
    json matrix = json::array();
    for (int r = 0; r < 3; ++r) {
        matrix.push_back({a(r, 0), a(r, 1), a(r, 2)});
    }
    const json body{{"matrix", std::move(matrix)},
                    {"alpha_x", fit.transform.alpha_x},
                    {"alpha_z", fit.transform.alpha_z},
                    {"x_trans", fit.transform.x_trans},
                    {"z_trans", fit.transform.z_trans},
                    {"pairs", pairs.size()},
                    {"residual", fit.residual},
                    {"rms", fit.rms},
                    {"condition", fit.condition},
                    {"heights", heights}};
    const fs::path out = fs::path(cfg.reports) / "calib.json";
    write_text(out, body.dump(2) + "\n");

    CommandResult result;
    result.outputs = {out};
    result.summary = {{"rms", fit.rms}, {"pairs", pairs.size()}};
    result.manifest = write_manifest(cfg, "calib", fs::path(cfg.reports) / "calib.manifest.json", inputs,
                                     result.outputs, result.summary);
    return result;
}

}  // namespace ttp::app
