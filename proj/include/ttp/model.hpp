#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ttp/config.hpp"
#include "ttp/params.hpp"
#include "ttp/tokenizer.hpp"

namespace ttp::model {

struct ModelConfig {
    tok::EncoderConfig encoder;
    int encoder_layers = 2;
    int decoder_layers = 2;
    int heads = 2;
    int ff_hidden = 512;
    int num_slots = 50;
    int slot_iters = 3;
    int slot_hidden = 512;
    double slot_init_sigma = 0.01;

    int d() const { return encoder.token_dim(); }
    void validate() const;  // throws std::invalid_argument
    bool operator==(const ModelConfig&) const = default;
};

// d = 16 configuration with 4 slots, one layer and one head.
ModelConfig toy_config();

void write_config(KeyValueConfig& kv, const ModelConfig& cfg);
ModelConfig read_config(const KeyValueConfig& kv, ModelConfig base = {});
std::vector<std::string> config_keys();

using Params = ParamSet<double>;

// Fan-in scaled uniform weights, zero biases, unit norm gains, slot log-std at
// log(slot_init_sigma).
Params init_params(const ModelConfig& cfg, std::uint64_t seed);

// Closed-form parameter count for a configuration.
std::size_t param_count(const ModelConfig& cfg);

// One selection target inside a batch.
struct Example {
    int prompt = 0;                       // index into Batch::prompts
    const tok::TokenSequence* situation;  // built by build_situation_sequence
    std::vector<int> eligible;            // token positions in the situation
    int target = 0;                       // index into eligible
};

struct Batch {
    std::vector<const tok::TokenSequence*> prompts;
    std::vector<Example> examples;
    // Per prompt slot-initialization noise (num_slots x d). Empty uses the
    // slot means.
    std::vector<ad::Mat<double>> slot_noise;
    bool pad = true;  // pad situations to the batch maximum length
};

template <class S>
struct BatchResult {
    ad::Var loss;
    std::vector<std::vector<S>> scores;  // per example, aligned with eligible
};

// Full forward pass of a batch on the tape; mean cross-entropy over examples.
template <class S>
BatchResult<S> batch_loss(const BoundParams<S>& params, const ModelConfig& cfg, const Batch& batch);

// Prompt encoder and slot bottleneck. `noise` (num_slots x d) perturbs the
// slot means through exp(log_sigma); null uses the means.
template <class S>
ad::Var encode_prompt_var(const BoundParams<S>& params, const ModelConfig& cfg, const tok::TokenSequence& prompt,
                          const ad::Mat<S>* noise);

// Encoder outputs before slot attention (for masking checks).
ad::Mat<double> encoder_outputs(const Params& params, const ModelConfig& cfg, const tok::TokenSequence& prompt);

// Preference embedding: num_slots x d.
ad::Mat<double> encode_prompt(const Params& params, const ModelConfig& cfg, const tok::TokenSequence& prompt,
                              const ad::Mat<double>* noise = nullptr);

// Seeded standard normal slot noise.
ad::Mat<double> sample_slot_noise(const ModelConfig& cfg, std::uint64_t seed);

struct Score {
    int position = 0;
    int instance_id = -1;
    double value = 0.0;
};

// One score per candidate_map entry: decoder output at the final ACT dotted
// with the candidate's input embedding, divided by sqrt(d).
std::vector<Score> decode_situation(const Params& params, const ModelConfig& cfg, const tok::TokenSequence& situation,
                                    const ad::Mat<double>& gamma);

// Argmax over eligible ids; ties go to the lowest id. Throws on an empty set
// or when no eligible id has a score.
int select_instance(const std::vector<Score>& scores, const std::vector<int>& eligible);

struct Checkpoint {
    ModelConfig config;
    Params params;
    std::string metadata;  // free-form key = value text
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Layout (little-endian): "TTPCKPT\0", u32 version, u32 n + config text,
// u32 n + metadata text, u32 param count, then per parameter u32 n + name,
// u32 rows, u32 cols, rows*cols f64 row-major; finally u64 FNV-1a of all
// preceding bytes.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ttp::model
