#include "ttp/serve.hpp"

#include <fstream>

// After Eigen: glibc's resolv.h defines a _res macro.
#include <httplib.h>

namespace ttp::serve {

namespace fs = std::filesystem;
using nlohmann::json;

struct Service::Live {
    std::mutex mutation;
    sim::SceneState state;
    expert::Session session;
    std::optional<expert::Preference> preference;
    bool finished = false;
};

namespace {

Reply error(int status, std::string_view code, const std::string& message) {
    return {status, {{"error", code}, {"message", message}}};
}

Reply sim_error(const sim::SimError& e) { return error(409, sim::error_code_name(e.code()), e.what()); }

Reply busy() { return error(409, "Busy", "another request is modifying this session"); }

// Empty bodies read as {}.
std::optional<json> parse_body(const std::string& body) {
    if (body.find_first_not_of(" \t\r\n") == std::string::npos) {
        return json::object();
    }
    try {
        auto j = json::parse(body);
        if (j.is_object()) {
            return j;
        }
    } catch (const json::exception&) {
    }
    return std::nullopt;
}

json instances_json(const std::vector<sim::Instance>& instances) {
    json out = json::array();
    for (const auto& inst : instances) {
        out.push_back(sim::to_json(inst));
    }
    return out;
}

std::optional<expert::Preference> preference_of(const json& body) {
    if (!body.contains("preference") || body["preference"].is_null()) {
        return std::nullopt;
    }
    auto pref = expert::preference_from_json(body["preference"]);
    if (!pref.valid()) {
        throw std::invalid_argument("preference must split the seven dish categories between the racks");
    }
    return pref;
}

}  // namespace

json state_json(const std::string& id, const sim::SceneState& state, int steps, bool finished) {
    json candidates = json::object();
    const auto pickable = sim::pickable_ids(state);
    for (int pid : pickable) {
        candidates[std::to_string(pid)] = instances_json(sim::place_candidates(state, sim::category_of(state, pid)));
    }
    return {{"id", id},
            {"steps", steps},
            {"finished", finished},
            {"phase", state.dynamic_phase ? "dynamic" : "static"},
            {"terminal", sim::is_terminal(state)},
            {"door_open", state.door_open},
            {"top_rack_out", state.top_rack_out},
            {"bottom_rack_out", state.bottom_rack_out},
            {"queued", state.pending_spawn_queue.size()},
            {"instances", instances_json(sim::visible_instances(state))},
            {"pickable", pickable},
            {"candidates", std::move(candidates)}};
}

Service::Service(fs::path sessions_dir, std::optional<model::Checkpoint> checkpoint, int context_window)
    : dir_(std::move(sessions_dir)), checkpoint_(std::move(checkpoint)), context_window_(context_window) {
    fs::create_directories(dir_);
    load_stored();
}

Service::~Service() = default;

void Service::load_stored() {
    for (const auto& entry : fs::directory_iterator(dir_)) {
        if (entry.path().extension() != ".jsonl") {
            continue;
        }
        const std::string id = entry.path().stem().string();
        int number = 0;
        try {
            number = std::stoi(id);
        } catch (const std::exception&) {
            continue;
        }
        const auto ds = data::read_dataset(entry.path().string());
        for (const auto& [pref_id, sessions] : ds.sessions) {
            for (const auto& s : sessions) {
                Stored st{s, std::nullopt};
                if (const auto it = ds.preferences.find(pref_id); it != ds.preferences.end()) {
                    st.preference = it->second;
                }
                stored_[id] = std::move(st);
            }
        }
        next_session_ = std::max(next_session_, number + 1);
    }
}

std::shared_ptr<Service::Live> Service::find_live(const std::string& id) {
    std::lock_guard lock(mutex_);
    const auto it = live_.find(id);
    return it == live_.end() ? nullptr : it->second;
}

std::unique_lock<std::mutex> Service::hold(const std::string& id) {
    const auto live = find_live(id);
    if (!live) {
        throw std::out_of_range("no live session " + id);
    }
    return std::unique_lock(live->mutation);
}

Reply Service::info() const {
    std::lock_guard lock(mutex_);
    json j{{"checkpoint", checkpoint_.has_value()},
           {"policies", checkpoint_ ? json{"model", "oracle", "random"} : json{"oracle", "random"}},
           {"live_sessions", live_.size()},
           {"stored_sessions", stored_.size()},
           {"rollouts", rollouts_.size()}};
    if (checkpoint_) {
        j["metadata"] = checkpoint_->metadata;
    }
    return {200, std::move(j)};
}

Reply Service::create_session(const std::string& body) {
    const auto req = parse_body(body);
    if (!req) {
        return error(400, "BadRequest", "body must be a JSON object");
    }
    auto live = std::make_shared<Live>();
    try {
        sim::SceneConfig config;
        config.n_per_rack = req->value("n_per_rack", config.n_per_rack);
        config.initial_fraction = req->value("initial_fraction", config.initial_fraction);
        config.seed = req->value("seed", config.seed);
        config.slot_capacity = req->value("slot_capacity", config.slot_capacity);
        live->preference = preference_of(*req);
        live->state = sim::init_scene(config);
        live->session.scene_config = config;
    } catch (const sim::SimError& e) {
        return sim_error(e);
    } catch (const std::exception& e) {
        return error(400, "BadRequest", e.what());
    }
    std::string id;
    {
        std::lock_guard lock(mutex_);
        id = std::to_string(next_session_++);
        live_[id] = live;
    }
    return {201, state_json(id, live->state, 0, false)};
}

Reply Service::state(const std::string& id) {
    if (const auto live = find_live(id)) {
        std::unique_lock lock(live->mutation, std::try_to_lock);
        if (!lock) {
            return busy();
        }
        return {200, state_json(id, live->state, static_cast<int>(live->session.steps.size()), live->finished)};
    }
    std::unique_lock lock(mutex_);
    const auto it = stored_.find(id);
    if (it == stored_.end()) {
        return error(404, "NotFound", "no session " + id);
    }
    const auto session = it->second.session;
    lock.unlock();
    return {200, state_json(id, expert::replay_final_state(session), static_cast<int>(session.steps.size()), true)};
}

Reply Service::action(const std::string& id, const std::string& body) {
    const auto live = find_live(id);
    if (!live) {
        return error(404, "NotFound", "no live session " + id);
    }
    std::unique_lock lock(live->mutation, std::try_to_lock);
    if (!lock) {
        return busy();
    }
    if (live->finished) {
        return error(409, "Finished", "session " + id + " is finished");
    }
    const auto req = parse_body(body);
    if (!req || !req->contains("pick_id") || !req->contains("place_id") || !(*req)["pick_id"].is_number_integer() ||
        !(*req)["place_id"].is_number_integer()) {
        return error(400, "BadRequest", "body must be {\"pick_id\": int, \"place_id\": int}");
    }
    const sim::Action act{(*req)["pick_id"].get<int>(), (*req)["place_id"].get<int>()};
    try {
        expert::Step step;
        step.state = sim::visible_instances(live->state);
        step.pick_target_id = act.pick_id;
        step.place_candidates = sim::place_candidates(live->state, sim::category_of(live->state, act.pick_id));
        step.place_target_id = act.place_id;
        auto result = sim::env_step(live->state, act);
        step.spawns = result.spawns;
        live->session.steps.push_back(std::move(step));
        live->state = std::move(result.state);
    } catch (const sim::SimError& e) {
        return sim_error(e);
    }
    return {200, state_json(id, live->state, static_cast<int>(live->session.steps.size()), false)};
}

Reply Service::tick(const std::string& id) {
    const auto live = find_live(id);
    if (!live) {
        return error(404, "NotFound", "no live session " + id);
    }
    std::unique_lock lock(live->mutation, std::try_to_lock);
    if (!lock) {
        return busy();
    }
    if (live->finished) {
        return error(409, "Finished", "session " + id + " is finished");
    }
    if (live->session.steps.empty()) {
        return error(409, sim::error_code_name(sim::SimErrorCode::NotInDynamicPhase), "no step taken yet");
    }
    try {
        live->state = sim::spawn_tick(live->state);
    } catch (const sim::SimError& e) {
        return sim_error(e);
    }
    ++live->session.steps.back().spawns;
    return {200, state_json(id, live->state, static_cast<int>(live->session.steps.size()), false)};
}

Reply Service::finish(const std::string& id, const std::string& body) {
    const auto live = find_live(id);
    if (!live) {
        return error(404, "NotFound", "no live session " + id);
    }
    std::unique_lock lock(live->mutation, std::try_to_lock);
    if (!lock) {
        return busy();
    }
    if (live->finished) {
        return error(409, "Finished", "session " + id + " is finished");
    }
    const auto req = parse_body(body);
    if (!req) {
        return error(400, "BadRequest", "body must be a JSON object");
    }
    try {
        if (auto pref = preference_of(*req)) {
            live->preference = std::move(pref);
        }
    } catch (const std::exception& e) {
        return error(400, "BadRequest", e.what());
    }
    if (live->session.steps.empty()) {
        return error(409, "EmptySession", "session " + id + " has no steps");
    }

    expert::Session session = live->session;
    session.preference_id = live->preference ? 0 : data::kUndeclaredPreference;
    session.final_counts = {live->state.count_in(sim::Region::top_rack),
                            live->state.count_in(sim::Region::bottom_rack)};
    if (!(expert::replay_final_state(session) == live->state)) {
        return error(500, "ReplayMismatch", "recorded session does not replay to the live state");
    }
    json violations = json::array();
    if (live->preference) {
        for (const auto& v : expert::validate_session(session, *live->preference).violations) {
            violations.push_back({{"step", v.step}, {"kind", expert::violation_name(v.kind)}, {"detail", v.detail}});
        }
    }

    data::Dataset ds;
    ds.generator = "ttp-serve/1";
    if (live->preference) {
        ds.preferences[0] = *live->preference;
    }
    ds.sessions[session.preference_id].push_back(session);
    try {
        data::write_dataset(ds, (dir_ / (id + ".jsonl")).string());
    } catch (const data::DatasetError& e) {
        return error(500, "IoError", e.what());
    }
    live->finished = true;
    {
        std::lock_guard guard(mutex_);
        stored_[id] = Stored{session, live->preference};
    }
    return {200,
            {{"id", id},
             {"session", data::to_json(session)},
             {"preference", live->preference ? expert::to_json(*live->preference) : json(nullptr)},
             {"terminal", sim::is_terminal(live->state)},
             {"violations", std::move(violations)}}};
}

Reply Service::stored_session(const std::string& id) const {
    std::lock_guard lock(mutex_);
    const auto it = stored_.find(id);
    if (it == stored_.end()) {
        return error(404, "NotFound", "no stored session " + id);
    }
    return {200,
            {{"id", id},
             {"session", data::to_json(it->second.session)},
             {"preference", it->second.preference ? expert::to_json(*it->second.preference) : json(nullptr)}}};
}

Reply Service::create_rollout(const std::string& body) {
    const auto req = parse_body(body);
    if (!req || !req->contains("prompt_session_id") || !req->contains("scene_seed")) {
        return error(400, "BadRequest", "body must include prompt_session_id and scene_seed");
    }
    std::string prompt_id;
    const auto& pid = (*req)["prompt_session_id"];
    prompt_id = pid.is_string() ? pid.get<std::string>() : pid.dump();
    Stored prompt;
    {
        std::lock_guard lock(mutex_);
        const auto it = stored_.find(prompt_id);
        if (it == stored_.end()) {
            return error(404, "NotFound", "no stored session " + prompt_id);
        }
        prompt = it->second;
    }

    const std::string policy_name = req->value("policy", checkpoint_ ? "model" : "random");
    const auto kind = eval::parse_policy(policy_name);
    if (!kind) {
        return error(400, "BadRequest", "unknown policy " + policy_name);
    }
    if (*kind == eval::PolicyKind::model && !checkpoint_) {
        return error(503, "NoCheckpoint", "the service was started without a checkpoint");
    }
    if (*kind == eval::PolicyKind::oracle && !prompt.preference) {
        return error(409, "NoPreference", "the oracle needs a declared preference");
    }

    sim::SceneConfig config = prompt.session.scene_config;
    int max_steps = eval::kDefaultMaxSteps;
    try {
        config.seed = (*req)["scene_seed"].get<std::uint64_t>();
        config.n_per_rack = req->value("n_per_rack", config.n_per_rack);
        max_steps = req->value("max_steps", max_steps);
        if (max_steps < 1) {
            throw std::invalid_argument("max_steps must be positive");
        }
        sim::validate_config(config);
    } catch (const sim::SimError& e) {
        return sim_error(e);
    } catch (const std::exception& e) {
        return error(400, "BadRequest", e.what());
    }

    eval::Policy policy;
    switch (*kind) {
        case eval::PolicyKind::model:
            policy = eval::model_policy(checkpoint_->params, checkpoint_->config, prompt.session, context_window_);
            break;
        case eval::PolicyKind::oracle: policy = eval::oracle_policy(*prompt.preference); break;
        case eval::PolicyKind::random: policy = eval::random_policy(config.seed); break;
    }
    // Without a declared preference the metrics are withheld; the reference
    // only sizes the record.
    const auto reference = prompt.preference.value_or(expert::sample_preference(0));
    const auto rec = eval::rollout(policy, config, reference, max_steps);

    json record = rec.to_json();
    json metrics = nullptr;
    if (prompt.preference) {
        metrics = {{"pe", rec.pe()}, {"ed", rec.ed()}, {"te", rec.te()}};
    } else {
        for (const char* key : {"pe", "ed", "te", "consistent", "reference", "expert_steps"}) {
            record.erase(key);
        }
    }
    const auto replay = expert::record_session(data::kUndeclaredPreference, config, rec.actions);
    json states = json::array();
    for (const auto& step : replay.steps) {
        states.push_back(instances_json(step.state));
    }
    states.push_back(instances_json(sim::visible_instances(rec.final_state)));

    std::string id;
    std::lock_guard lock(mutex_);
    id = std::to_string(next_rollout_++);
    json out{{"id", id},
             {"prompt_session_id", prompt_id},
             {"policy", policy_name},
             {"record", std::move(record)},
             {"states", std::move(states)},
             {"metrics", std::move(metrics)}};
    rollouts_[id] = out;
    return {201, std::move(out)};
}

Reply Service::rollout(const std::string& id) const {
    std::lock_guard lock(mutex_);
    const auto it = rollouts_.find(id);
    if (it == rollouts_.end()) {
        return error(404, "NotFound", "no rollout " + id);
    }
    return {200, it->second};
}

void Service::bind(httplib::Server& server) {
    auto send = [](httplib::Response& res, const Reply& r) {
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    };
    auto guarded = [send](auto fn) {
        return [send, fn](const httplib::Request& req, httplib::Response& res) {
            try {
                send(res, fn(req));
            } catch (const std::exception& e) {
                send(res, error(500, "Internal", e.what()));
            }
        };
    };
    server.Get("/info", guarded([this](const httplib::Request&) { return info(); }));
    server.Post("/sessions", guarded([this](const httplib::Request& r) { return create_session(r.body); }));
    server.Get(R"(/sessions/(\d+))",
               guarded([this](const httplib::Request& r) { return stored_session(r.matches[1]); }));
    server.Get(R"(/sessions/(\d+)/state)", guarded([this](const httplib::Request& r) { return state(r.matches[1]); }));
    server.Post(R"(/sessions/(\d+)/action)",
                guarded([this](const httplib::Request& r) { return action(r.matches[1], r.body); }));
    server.Post(R"(/sessions/(\d+)/tick)", guarded([this](const httplib::Request& r) { return tick(r.matches[1]); }));
    server.Post(R"(/sessions/(\d+)/finish)",
                guarded([this](const httplib::Request& r) { return finish(r.matches[1], r.body); }));
    server.Post("/rollouts", guarded([this](const httplib::Request& r) { return create_rollout(r.body); }));
    server.Get(R"(/rollouts/(\d+))", guarded([this](const httplib::Request& r) { return rollout(r.matches[1]); }));
}

}  // namespace ttp::serve
