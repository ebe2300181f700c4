#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "ttp/app.hpp"
#include "ttp/serve.hpp"

// After Eigen: glibc's resolv.h defines a _res macro.
#include <httplib.h>

namespace ttp::app {

int exit_code_for_current_exception() {
    try {
        throw;
    } catch (const train::DivergenceError&) {
        return kDivergence;
    } catch (const IoError&) {
        return kIoError;
    } catch (const data::DatasetError&) {
        return kIoError;
    } catch (const model::CheckpointError&) {
        return kIoError;
    } catch (const std::ios_base::failure&) {
        return kIoError;
    } catch (const std::filesystem::filesystem_error&) {
        return kIoError;
    } catch (...) {
        return kConfigError;
    }
}

namespace {

struct Overrides {
    std::string config_path;
    std::string manifest_path;
    std::vector<std::string> sets;
    std::map<std::string, std::string> flags;  // subcommand options, as config keys
};

RunConfig resolve(const Overrides& o) {
    if (!o.config_path.empty() && !o.manifest_path.empty()) {
        throw ConfigError("--config and --manifest are mutually exclusive");
    }
    KeyValueConfig kv;
    if (!o.manifest_path.empty()) {
        kv = config_from_manifest(o.manifest_path).to_kv();
    } else if (!o.config_path.empty()) {
        kv = load_run_config(o.config_path).to_kv();
    }
    for (const auto& s : o.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects KEY=VALUE, got '" + s + "'");
        }
        auto trim = [](std::string v) {
            const auto b = v.find_first_not_of(" \t");
            const auto e = v.find_last_not_of(" \t");
            return b == std::string::npos ? std::string() : v.substr(b, e - b + 1);
        };
        kv.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
    for (const auto& [key, value] : o.flags) {
        kv.set(key, value);
    }
    return RunConfig::from_kv(kv);
}

void print_result(std::ostream& out, const CommandResult& r) {
    for (const auto& p : r.outputs) {
        out << "wrote " << p.string() << "\n";
    }
    out << "manifest " << r.manifest.string() << "\n" << r.summary.dump() << "\n";
}

int serve(const RunConfig& cfg, bool use_checkpoint, std::ostream& out) {
    std::optional<model::Checkpoint> ckpt;
    if (use_checkpoint && std::filesystem::exists(cfg.checkpoint)) {
        ckpt = model::load_checkpoint(cfg.checkpoint);
    }
    out << (ckpt ? "loaded checkpoint " + cfg.checkpoint : std::string("no checkpoint; model rollouts disabled"))
        << "\n";
    serve::Service service(cfg.serve.sessions_dir, std::move(ckpt), cfg.train.context_window);
    httplib::Server server;
    service.bind(server);
    out << "listening on " << cfg.serve.host << ":" << cfg.serve.port << std::endl;
    if (!server.listen(cfg.serve.host, cfg.serve.port)) {
        throw IoError("cannot listen on " + cfg.serve.host + ":" + std::to_string(cfg.serve.port));
    }
    return kOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App cli{"Prompt-conditioned dishwasher loading: data, training, evaluation and serving", "ttp"};
    cli.require_subcommand(1);
    cli.fallthrough();
    Overrides o;
    bool quiet = false;
    cli.add_option("-c,--config", o.config_path, "Run config file (key = value)");
    cli.add_option("-m,--manifest", o.manifest_path, "Reuse the config recorded in a manifest");
    cli.add_option("-s,--set", o.sets, "Override a config key: KEY=VALUE")->take_all();
    cli.add_flag("-q,--quiet", quiet, "Suppress per-epoch logs");

    auto flag = [&o](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
        sub->add_option_function<std::string>(name, [&o, key](const std::string& v) { o.flags[key] = v; }, help);
    };

    auto* gen = cli.add_subcommand("gen", "Generate train/validation/heldout/test datasets");
    flag(gen, "--out", "paths.data", "Dataset directory");
    auto* train = cli.add_subcommand("train", "Train a model and write a checkpoint");
    flag(train, "--checkpoint", "paths.checkpoint", "Checkpoint path");
    auto* evaluate = cli.add_subcommand("eval", "Roll out a policy on a split and report PE/ED/TE");
    flag(evaluate, "--policy", "eval.policy", "model | oracle | random");
    flag(evaluate, "--split", "eval.split", "heldout | validation | test");
    flag(evaluate, "--checkpoint", "paths.checkpoint", "Checkpoint path");
    auto* ablate = cli.add_subcommand("ablate", "Train and evaluate an ablation sweep");
    flag(ablate, "--suite", "ablate.suite", "attributes | context_window | num_demos | num_prefs");
    auto* calibrate = cli.add_subcommand("calib", "Fit the hardware-to-sim planar transform");
    flag(calibrate, "--pairs", "calib.pairs", "Pairs file: x_hw z_hw x_sim z_sim per line");
    flag(calibrate, "--heights", "calib.heights", "Height table file: area = height");
    auto* srv = cli.add_subcommand("serve", "Serve the recording and rollout HTTP API");
    flag(srv, "--host", "serve.host", "Bind address");
    flag(srv, "--port", "serve.port", "Port");
    flag(srv, "--sessions", "serve.sessions_dir", "Directory of stored sessions");
    bool no_checkpoint = false;
    srv->add_flag("--no-checkpoint", no_checkpoint, "Start without loading a checkpoint");
    auto* show = cli.add_subcommand("config", "Print the resolved config");

    try {
        cli.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = cli.exit(e, out, err);
        return code == 0 ? kOk : kConfigError;
    }

    try {
        const RunConfig cfg = resolve(o);
        std::ostream* log = quiet ? nullptr : &out;
        if (gen->parsed()) {
            print_result(out, cmd_gen(cfg));
        } else if (train->parsed()) {
            print_result(out, cmd_train(cfg, log));
        } else if (evaluate->parsed()) {
            print_result(out, cmd_eval(cfg));
        } else if (ablate->parsed()) {
            print_result(out, cmd_ablate(cfg, log));
        } else if (calibrate->parsed()) {
            print_result(out, cmd_calib(cfg));
        } else if (srv->parsed()) {
            return serve(cfg, !no_checkpoint, out);
        } else if (show->parsed()) {
            out << cfg.text();
        }
        return kOk;
    } catch (const std::exception& e) {
        const int code = exit_code_for_current_exception();
        err << "ttp: " << e.what() << "\n";
        return code;
    }
}

}  // namespace ttp::app
