#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ttp/dataset.hpp"
#include "ttp/model.hpp"

namespace ttp::train {

struct TrainConfig {
    int batch_size = 64;
    double lr0 = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double dampening = 0.1;
    double lr_decay = 0.9995;
    int decay_every = 10;
    int patience = 100;
    int max_epochs = 1000;
    std::uint64_t seed = 0;
    int context_window = 0;
    bool sample_slots = true;       // seeded slot noise during training
    double stop_at_accuracy = 2.0;  // stop once validation accuracy reaches this (> 1 disables)

    void validate() const;  // throws std::invalid_argument
    bool operator==(const TrainConfig&) const = default;
};

void write_config(KeyValueConfig& kv, const TrainConfig& cfg);
TrainConfig read_config(const KeyValueConfig& kv, TrainConfig base = {});
std::vector<std::string> config_keys();

double learning_rate(const TrainConfig& cfg, long step);

// Negative log softmax of `scores` restricted to `eligible` at `target`.
// Throws std::invalid_argument when target is not eligible.
double loss(const std::map<int, double>& scores, int target_id, const std::vector<int>& eligible);

template <class S>
struct OptimizerState {
    ParamSet<S> velocity;
    long step = 0;
};

template <class S>
OptimizerState<S> make_optimizer(const ParamSet<S>& params) {
    return {params.zeros_like(), 0};
}

// v <- momentum v + (1 - dampening)(g + weight_decay theta); theta <- theta - lr(step) v.
template <class S>
void sgd_step(ParamSet<S>& params, const ParamSet<S>& grads, OptimizerState<S>& state, const TrainConfig& cfg) {
    const S lr = static_cast<S>(learning_rate(cfg, state.step));
    const S mom = static_cast<S>(cfg.momentum);
    const S damp = static_cast<S>(1.0 - cfg.dampening);
    const S wd = static_cast<S>(cfg.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& theta = params.values()[i];
        auto& v = state.velocity.values()[i];
        v = mom * v + damp * (grads.values()[i] + wd * theta);
        theta -= lr * v;
    }
    ++state.step;
}

// A single decision inside a session: the pick or the place of one step.
struct Decision {
    int session = 0;
    int step = 0;
    bool place = false;
};

// Situation tokens and selection bookkeeping for one decision.
struct PreparedDecision {
    tok::TokenSequence situation;
    std::vector<int> eligible;                  // token positions
    std::vector<int> eligible_ids;              // instance ids, aligned
    std::vector<sim::Category> eligible_categories;
    int target = 0;                             // index into eligible
};

struct PreparedSession {
    tok::TokenSequence prompt;
    std::vector<PreparedDecision> picks;
    std::vector<PreparedDecision> places;

    const PreparedDecision& at(const Decision& d) const {
        return d.place ? places[static_cast<std::size_t>(d.step)] : picks[static_cast<std::size_t>(d.step)];
    }
};

// Replays the session to recover pickable ids and builds every situation with
// `context_window` earlier states.
PreparedSession prepare_session(const expert::Session& session, int context_window);

struct TrainingExample {
    int preference_id = 0;
    int prompt_session = 0;
    Decision decision;
};

// One epoch of examples: per preference, a seeded prompt session paired with
// every pick and place decision of every session of that preference, shuffled.
std::vector<TrainingExample> make_pairs(const data::Dataset& dataset, std::uint64_t seed);

// Exact gradient of the mean batch loss.
template <class S>
struct Gradients {
    S loss = 0;
    ParamSet<S> grads;
};

template <class S>
Gradients<S> compute_gradients(const model::Batch& batch, const ParamSet<S>& params, const model::ModelConfig& cfg);

struct GradientCheck {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t checked = 0;
};

// Central differences over every scalar parameter, compared with
// compute_gradients. Relative error uses max(|numeric|, |analytic|, floor).
GradientCheck finite_difference_check(const model::Batch& batch, const ParamSet<long double>& params,
                                      const model::ModelConfig& cfg, long double h = 1e-4L, double floor = 1e-8);

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct EpochMetrics {
    int epoch = 0;
    long steps = 0;
    double train_loss = 0.0;
    double val_accuracy = 0.0;       // pick and place predictions
    double val_pick_accuracy = 0.0;  // pick predictions only
    double lr = 0.0;

    nlohmann::json to_json() const;
};

struct TrainResult {
    model::Params best_params;
    int best_epoch = -1;
    double best_accuracy = -1.0;
    std::vector<EpochMetrics> history;
    std::string stop_reason;
};

struct Accuracy {
    double overall = 0.0;
    double pick = 0.0;
    double place = 0.0;
    int count = 0;
    int picks = 0;
};

// Category-token accuracy of `params` on every decision of `sessions`, each
// prompted with `prompt`. Slot means are used.
Accuracy category_token_accuracy(const model::Params& params, const model::ModelConfig& cfg,
                                 const tok::TokenSequence& prompt, const std::vector<PreparedSession>& sessions);

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Trains on `train_set`, tracks accuracy on `validation_set` (same preference
// ids) and keeps the best parameters. Throws DivergenceError on a non-finite
// loss.
TrainResult train_loop(const data::Dataset& train_set, const data::Dataset& validation_set,
                       const model::ModelConfig& model_cfg, const TrainConfig& cfg,
                       const EpochCallback& on_epoch = {});

// Seeded choice of the validation prompt session for a preference.
int validation_prompt_index(const data::Dataset& train_set, int preference_id, std::uint64_t seed);

}  // namespace ttp::train
