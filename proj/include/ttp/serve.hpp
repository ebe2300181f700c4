#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "ttp/eval.hpp"

namespace httplib {
class Server;
}

namespace ttp::serve {

// Status code and JSON body of one request.
struct Reply {
    int status = 200;
    nlohmann::json body;
};

// Backing logic of the HTTP service, callable without a socket.
//
// Live sessions are in memory. Finished sessions are written to
// `sessions_dir/<id>.jsonl` in the dataset format and reloaded on start, so
// they survive restarts and can be used as prompts. Errors come back as
// {"error": code, "message": text}: 400 bad request, 404 unknown id, 409 for
// simulator errors (code = simulator error name), concurrent mutations
// ("Busy") and finished sessions ("Finished"), 503 when a rollout needs a
// checkpoint and none is loaded.
class Service {
public:
    Service(std::filesystem::path sessions_dir, std::optional<model::Checkpoint> checkpoint, int context_window = 0);
    ~Service();

    Reply info() const;
    // Body: optional {"n_per_rack", "initial_fraction", "seed", "slot_capacity",
    // "preference": {"first_rack", "top", "bottom"}}.
    Reply create_session(const std::string& body);
    Reply state(const std::string& id);
    Reply action(const std::string& id, const std::string& body);  // {"pick_id", "place_id"}
    Reply tick(const std::string& id);
    // Body: optional {"preference": ...}, overriding the one given at creation.
    Reply finish(const std::string& id, const std::string& body);
    Reply stored_session(const std::string& id) const;
    // Body: {"prompt_session_id", "scene_seed", optional "n_per_rack",
    // "policy" (model | oracle | random), "max_steps"}.
    Reply create_rollout(const std::string& body);
    Reply rollout(const std::string& id) const;

    // Holds the mutation lock of a live session; requests that need it get
    // 409 Busy meanwhile. Throws std::out_of_range for an unknown id.
    std::unique_lock<std::mutex> hold(const std::string& id);

    // Registers the routes on `server`.
    void bind(httplib::Server& server);

private:
    struct Live;
    struct Stored {
        expert::Session session;
        std::optional<expert::Preference> preference;
    };

    std::shared_ptr<Live> find_live(const std::string& id);
    void load_stored();

    std::filesystem::path dir_;
    std::optional<model::Checkpoint> checkpoint_;
    int context_window_;
    mutable std::mutex mutex_;  // guards the maps and counters below
    std::map<std::string, std::shared_ptr<Live>> live_;
    std::map<std::string, Stored> stored_;
    std::map<std::string, nlohmann::json> rollouts_;
    int next_session_ = 1;
    int next_rollout_ = 1;
};

// Response body for a live state: instances, per-pickable candidates, phase.
nlohmann::json state_json(const std::string& id, const sim::SceneState& state, int steps, bool finished);

}  // namespace ttp::serve
