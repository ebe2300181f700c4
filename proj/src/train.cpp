#include "ttp/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "ttp/rng.hpp"

namespace ttp::train {

void TrainConfig::validate() const {
    if (batch_size < 1 || patience < 1 || max_epochs < 1 || decay_every < 1) {
        throw std::invalid_argument("batch_size, patience, max_epochs and decay_every must be at least 1");
    }
    if (!(lr0 > 0.0) || !(lr_decay > 0.0) || lr_decay > 1.0) {
        throw std::invalid_argument("lr0 must be positive and lr_decay in (0, 1]");
    }
    if (momentum < 0.0 || weight_decay < 0.0 || dampening < 0.0 || dampening > 1.0) {
        throw std::invalid_argument("momentum and weight_decay must be non-negative, dampening in [0, 1]");
    }
    if (context_window < 0) {
        throw std::invalid_argument("context_window must be non-negative");
    }
}

namespace {

std::string format_double(double v) {
    std::ostringstream out;
    out.precision(17);
    out << v;
    return out.str();
}

}  // namespace

std::vector<std::string> config_keys() {
    return {"batch_size", "lr0",        "momentum",       "weight_decay", "dampening",       "lr_decay",
            "decay_every", "patience",  "max_epochs",     "seed",         "context_window",  "sample_slots",
            "stop_at_accuracy"};
}

void write_config(KeyValueConfig& kv, const TrainConfig& cfg) {
    kv.set("batch_size", std::to_string(cfg.batch_size));
    kv.set("lr0", format_double(cfg.lr0));
    kv.set("momentum", format_double(cfg.momentum));
    kv.set("weight_decay", format_double(cfg.weight_decay));
    kv.set("dampening", format_double(cfg.dampening));
    kv.set("lr_decay", format_double(cfg.lr_decay));
    kv.set("decay_every", std::to_string(cfg.decay_every));
    kv.set("patience", std::to_string(cfg.patience));
    kv.set("max_epochs", std::to_string(cfg.max_epochs));
    kv.set("seed", std::to_string(cfg.seed));
    kv.set("context_window", std::to_string(cfg.context_window));
    kv.set("sample_slots", cfg.sample_slots ? "true" : "false");
    kv.set("stop_at_accuracy", format_double(cfg.stop_at_accuracy));
}

TrainConfig read_config(const KeyValueConfig& kv, TrainConfig base) {
    auto geti = [&](const char* key, int fallback) { return static_cast<int>(kv.get_int(key, fallback)); };
    base.batch_size = geti("batch_size", base.batch_size);
    base.lr0 = kv.get_double("lr0", base.lr0);
    base.momentum = kv.get_double("momentum", base.momentum);
    base.weight_decay = kv.get_double("weight_decay", base.weight_decay);
    base.dampening = kv.get_double("dampening", base.dampening);
    base.lr_decay = kv.get_double("lr_decay", base.lr_decay);
    base.decay_every = geti("decay_every", base.decay_every);
    base.patience = geti("patience", base.patience);
    base.max_epochs = geti("max_epochs", base.max_epochs);
    base.seed = kv.get_uint("seed", base.seed);
    base.context_window = geti("context_window", base.context_window);
    base.sample_slots = kv.get_bool("sample_slots", base.sample_slots);
    base.stop_at_accuracy = kv.get_double("stop_at_accuracy", base.stop_at_accuracy);
    base.validate();
    return base;
}

double learning_rate(const TrainConfig& cfg, long step) {
    return cfg.lr0 * std::pow(cfg.lr_decay, static_cast<double>(step / cfg.decay_every));
}

double loss(const std::map<int, double>& scores, int target_id, const std::vector<int>& eligible) {
    if (std::find(eligible.begin(), eligible.end(), target_id) == eligible.end()) {
        throw std::invalid_argument("loss: target is not eligible");
    }
    double peak = -std::numeric_limits<double>::infinity();
    for (int id : eligible) {
        peak = std::max(peak, scores.at(id));
    }
    double total = 0.0;
    for (int id : eligible) {
        total += std::exp(scores.at(id) - peak);
    }
    return std::log(total) + peak - scores.at(target_id);
}

PreparedSession prepare_session(const expert::Session& session, int context_window) {
    PreparedSession out;
    out.prompt = tok::build_prompt_sequence(session);
    sim::SceneState state = sim::init_scene(session.scene_config);
    const auto& steps = session.steps;
    for (std::size_t s = 0; s < steps.size(); ++s) {
        const auto& step = steps[s];
        std::vector<std::vector<sim::Instance>> history;
        const std::size_t first = s >= static_cast<std::size_t>(context_window) ? s - context_window : 0;
        for (std::size_t h = first; h < s; ++h) {
            history.push_back(steps[h].state);
        }

        PreparedDecision pick;
        pick.situation = tok::build_situation_sequence(history, step.state);
        const auto pickable = sim::pickable_ids(state);
        for (const auto& c : pick.situation.candidate_map) {
            if (std::find(pickable.begin(), pickable.end(), c.instance_id) == pickable.end()) {
                continue;
            }
            if (c.instance_id == step.pick_target_id) {
                pick.target = static_cast<int>(pick.eligible.size());
            }
            pick.eligible.push_back(c.position);
            pick.eligible_ids.push_back(c.instance_id);
            pick.eligible_categories.push_back(sim::category_of(state, c.instance_id));
        }

        PreparedDecision place;
        std::vector<sim::Instance> current = step.state;
        current.insert(current.end(), step.place_candidates.begin(), step.place_candidates.end());
        place.situation = tok::build_situation_sequence(history, current);
        for (std::size_t i = step.state.size(); i < current.size(); ++i) {
            const auto& c = place.situation.candidate_map[i];
            if (c.instance_id == step.place_target_id) {
                place.target = static_cast<int>(place.eligible.size());
            }
            place.eligible.push_back(c.position);
            place.eligible_ids.push_back(c.instance_id);
            place.eligible_categories.push_back(current[i].category);
        }

        state = sim::apply_action(state, {step.pick_target_id, step.place_target_id});
        for (int k = 0; k < step.spawns; ++k) {
            state = sim::spawn_tick(state);
        }
        out.picks.push_back(std::move(pick));
        out.places.push_back(std::move(place));
    }
    return out;
}

std::vector<TrainingExample> make_pairs(const data::Dataset& dataset, std::uint64_t seed) {
    std::vector<TrainingExample> out;
    for (const auto& [pref_id, sessions] : dataset.sessions) {
        if (sessions.empty()) {
            continue;
        }
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(pref_id)));
        const int prompt = static_cast<int>(rng.index(sessions.size()));
        std::vector<TrainingExample> block;
        for (std::size_t s = 0; s < sessions.size(); ++s) {
            for (std::size_t k = 0; k < sessions[s].steps.size(); ++k) {
                for (bool place : {false, true}) {
                    block.push_back({pref_id, prompt, {static_cast<int>(s), static_cast<int>(k), place}});
                }
            }
        }
        rng.shuffle(block);
        out.insert(out.end(), block.begin(), block.end());
    }
    return out;
}

template <class S>
Gradients<S> compute_gradients(const model::Batch& batch, const ParamSet<S>& params, const model::ModelConfig& cfg) {
    ad::Tape<S> tape;
    BoundParams<S> bound(tape, params, true);
    const auto result = model::batch_loss(bound, cfg, batch);
    const S value = tape.value(result.loss)(0, 0);
    if (!std::isfinite(static_cast<double>(value))) {
        throw DivergenceError("non-finite loss");
    }
    tape.backward(result.loss);
    return {value, bound.gradients()};
}

template Gradients<float> compute_gradients<float>(const model::Batch&, const ParamSet<float>&,
                                                   const model::ModelConfig&);
template Gradients<double> compute_gradients<double>(const model::Batch&, const ParamSet<double>&,
                                                     const model::ModelConfig&);
template Gradients<long double> compute_gradients<long double>(const model::Batch&, const ParamSet<long double>&,
                                                               const model::ModelConfig&);

GradientCheck finite_difference_check(const model::Batch& batch, const ParamSet<long double>& params,
                                      const model::ModelConfig& cfg, long double h, double floor) {
    const auto analytic = compute_gradients(batch, params, cfg);
    auto eval = [&](const ParamSet<long double>& p) {
        ad::Tape<long double> tape;
        BoundParams<long double> bound(tape, p, false);
        return tape.value(model::batch_loss(bound, cfg, batch).loss)(0, 0);
    };
    GradientCheck out;
    ParamSet<long double> probe = params;
    for (std::size_t k = 0; k < probe.size(); ++k) {
        auto& values = probe.values()[k];
        for (Eigen::Index i = 0; i < values.size(); ++i) {
            const long double saved = values.data()[i];
            values.data()[i] = saved + h;
            const long double up = eval(probe);
            values.data()[i] = saved - h;
            const long double down = eval(probe);
            values.data()[i] = saved;
            const long double numeric = (up - down) / (2 * h);
            const long double exact = analytic.grads.values()[k].data()[i];
            const long double denom = std::max({std::abs(numeric), std::abs(exact), static_cast<long double>(floor)});
            const double rel = static_cast<double>(std::abs(numeric - exact) / denom);
            if (rel > out.max_rel_error) {
                out.max_rel_error = rel;
                out.worst_param = probe.names()[k];
            }
            ++out.checked;
        }
    }
    return out;
}

nlohmann::json EpochMetrics::to_json() const {
    return {{"epoch", epoch},
            {"steps", steps},
            {"loss", train_loss},
            {"val_accuracy", val_accuracy},
            {"val_pick_accuracy", val_pick_accuracy},
            {"lr", lr}};
}

namespace {

constexpr int kEvalBatch = 64;

template <class S>
Accuracy accuracy_impl(const ParamSet<S>& params, const model::ModelConfig& cfg, const tok::TokenSequence& prompt,
                       const std::vector<PreparedSession>& sessions) {
    std::vector<const PreparedDecision*> decisions;
    std::vector<bool> is_place;
    for (const auto& s : sessions) {
        for (const auto& d : s.picks) {
            decisions.push_back(&d);
            is_place.push_back(false);
        }
        for (const auto& d : s.places) {
            decisions.push_back(&d);
            is_place.push_back(true);
        }
    }
    Accuracy acc;
    int correct_pick = 0;
    int correct_place = 0;
    int picks = 0;
    for (std::size_t begin = 0; begin < decisions.size(); begin += kEvalBatch) {
        const std::size_t end = std::min(decisions.size(), begin + kEvalBatch);
        model::Batch batch;
        batch.prompts.push_back(&prompt);
        for (std::size_t i = begin; i < end; ++i) {
            batch.examples.push_back({0, &decisions[i]->situation, decisions[i]->eligible, decisions[i]->target});
        }
        ad::Tape<S> tape;
        BoundParams<S> bound(tape, params, false);
        const auto result = model::batch_loss(bound, cfg, batch);
        for (std::size_t i = begin; i < end; ++i) {
            const auto& d = *decisions[i];
            const auto& scores = result.scores[i - begin];
            std::size_t best = 0;
            for (std::size_t j = 1; j < scores.size(); ++j) {
                if (scores[j] > scores[best] || (scores[j] == scores[best] && d.eligible_ids[j] < d.eligible_ids[best])) {
                    best = j;
                }
            }
            const bool hit = d.eligible_categories[best] == d.eligible_categories[static_cast<std::size_t>(d.target)];
            if (is_place[i]) {
                correct_place += hit ? 1 : 0;
            } else {
                ++picks;
                correct_pick += hit ? 1 : 0;
            }
        }
    }
    acc.count = static_cast<int>(decisions.size());
    acc.picks = picks;
    const int places = acc.count - picks;
    acc.overall = acc.count > 0 ? static_cast<double>(correct_pick + correct_place) / acc.count : 0.0;
    acc.pick = picks > 0 ? static_cast<double>(correct_pick) / picks : 0.0;
    acc.place = places > 0 ? static_cast<double>(correct_place) / places : 0.0;
    return acc;
}

struct Totals {
    double weighted_overall = 0.0;
    double weighted_pick = 0.0;
    int count = 0;
    int picks = 0;

    void add(const Accuracy& a) {
        weighted_overall += a.overall * a.count;
        weighted_pick += a.pick * a.picks;
        count += a.count;
        picks += a.picks;
    }
    double overall() const { return count > 0 ? weighted_overall / count : 0.0; }
    double pick() const { return picks > 0 ? weighted_pick / picks : 0.0; }
};

}  // namespace

Accuracy category_token_accuracy(const model::Params& params, const model::ModelConfig& cfg,
                                 const tok::TokenSequence& prompt, const std::vector<PreparedSession>& sessions) {
    return accuracy_impl(params, cfg, prompt, sessions);
}

int validation_prompt_index(const data::Dataset& train_set, int preference_id, std::uint64_t seed) {
    const auto it = train_set.sessions.find(preference_id);
    if (it == train_set.sessions.end() || it->second.empty()) {
        throw std::invalid_argument("no training sessions for preference " + std::to_string(preference_id));
    }
    Rng rng(mix_seed(seed, 0x56414c00u + static_cast<std::uint64_t>(preference_id)));
    return static_cast<int>(rng.index(it->second.size()));
}

TrainResult train_loop(const data::Dataset& train_set, const data::Dataset& validation_set,
                       const model::ModelConfig& model_cfg, const TrainConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    model_cfg.validate();
    if (train_set.session_count() == 0) {
        throw std::invalid_argument("train_loop: empty training set");
    }

    std::map<int, std::vector<PreparedSession>> train_prepared;
    for (const auto& [pref_id, sessions] : train_set.sessions) {
        for (const auto& s : sessions) {
            train_prepared[pref_id].push_back(prepare_session(s, cfg.context_window));
        }
    }
    std::map<int, std::vector<PreparedSession>> val_prepared;
    for (const auto& [pref_id, sessions] : validation_set.sessions) {
        if (!train_prepared.contains(pref_id)) {
            throw std::invalid_argument("validation preference " + std::to_string(pref_id) + " has no training data");
        }
        for (const auto& s : sessions) {
            val_prepared[pref_id].push_back(prepare_session(s, cfg.context_window));
        }
    }
    std::map<int, const tok::TokenSequence*> val_prompts;
    for (const auto& [pref_id, sessions] : val_prepared) {
        const int idx = validation_prompt_index(train_set, pref_id, cfg.seed);
        val_prompts[pref_id] = &train_prepared.at(pref_id)[static_cast<std::size_t>(idx)].prompt;
    }

    ParamSet<float> params = model::init_params(model_cfg, cfg.seed).cast<float>();
    auto optimizer = make_optimizer(params);

    TrainResult result;
    result.best_params = params.cast<double>();
    int since_best = 0;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const auto pairs = make_pairs(train_set, mix_seed(cfg.seed, 0x45504f43u + static_cast<std::uint64_t>(epoch)));

        // Chunk each preference block into batches, then shuffle batch order.
        std::vector<std::pair<std::size_t, std::size_t>> batches;
        for (std::size_t begin = 0; begin < pairs.size();) {
            std::size_t end = begin;
            while (end < pairs.size() && end - begin < static_cast<std::size_t>(cfg.batch_size) &&
                   pairs[end].preference_id == pairs[begin].preference_id) {
                ++end;
            }
            batches.emplace_back(begin, end);
            begin = end;
        }
        Rng order(mix_seed(cfg.seed, 0x4f524400u + static_cast<std::uint64_t>(epoch)));
        order.shuffle(batches);

        double loss_sum = 0.0;
        for (const auto& [begin, end] : batches) {
            const auto& first = pairs[begin];
            const auto& sessions = train_prepared.at(first.preference_id);
            model::Batch batch;
            batch.prompts.push_back(&sessions[static_cast<std::size_t>(first.prompt_session)].prompt);
            for (std::size_t i = begin; i < end; ++i) {
                const auto& d = sessions[static_cast<std::size_t>(pairs[i].decision.session)].at(pairs[i].decision);
                batch.examples.push_back({0, &d.situation, d.eligible, d.target});
            }
            if (cfg.sample_slots) {
                batch.slot_noise.push_back(
                    model::sample_slot_noise(model_cfg, mix_seed(cfg.seed, 0x4e4f0000u + optimizer.step)));
            }
            auto g = compute_gradients(batch, params, model_cfg);
            loss_sum += static_cast<double>(g.loss);
            sgd_step(params, g.grads, optimizer, cfg);
        }

        Totals totals;
        for (const auto& [pref_id, sessions] : val_prepared) {
            totals.add(accuracy_impl(params, model_cfg, *val_prompts.at(pref_id), sessions));
        }

        EpochMetrics m;
        m.epoch = epoch;
        m.steps = optimizer.step;
        m.train_loss = batches.empty() ? 0.0 : loss_sum / static_cast<double>(batches.size());
        m.val_accuracy = totals.overall();
        m.val_pick_accuracy = totals.pick();
        m.lr = learning_rate(cfg, optimizer.step);
        result.history.push_back(m);
        if (on_epoch) {
            on_epoch(m);
        }

        if (m.val_accuracy > result.best_accuracy) {
            result.best_accuracy = m.val_accuracy;
            result.best_epoch = epoch;
            result.best_params = params.cast<double>();
            since_best = 0;
        } else {
            ++since_best;
        }
        if (m.val_accuracy >= cfg.stop_at_accuracy) {
            result.stop_reason = "target_accuracy";
            return result;
        }
        if (since_best >= cfg.patience) {
            result.stop_reason = "patience";
            return result;
        }
    }
    result.stop_reason = "max_epochs";
    return result;
}

}  // namespace ttp::train
