#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "ttp/expert.hpp"
#include "ttp/params.hpp"
#include "ttp/rng.hpp"

namespace ttp::tok {

// Which instance attributes reach the token embedding. Disabled attributes
// contribute zeros of their allotted width.
struct AttributeMask {
    bool pose = true;
    bool category = true;
    bool time = true;
    bool role = true;

    bool operator==(const AttributeMask&) const = default;
};

struct EncoderConfig {
    int pose_embed = 128;
    int category_embed = 64;
    int temporal_embed = 32;
    int marker_embed = 32;
    int pose_frequencies = 8;
    int category_frequencies = 8;
    int category_hidden = 64;
    int t_max = 64;
    AttributeMask mask;

    int token_dim() const { return temporal_embed + category_embed + pose_embed + marker_embed; }
    int pose_feature_dim() const { return 7 * 2 * pose_frequencies; }
    int category_feature_dim() const { return 3 * 2 * category_frequencies; }
    // Throws std::invalid_argument.
    void validate() const;

    bool operator==(const EncoderConfig&) const = default;
};

enum class TokenKind : std::uint8_t { object, place, act, pad };

struct TokenAttributes {
    std::array<double, 7> pose{};  // x, y, z, qw, qx, qy, qz
    std::array<double, 3> bbox{};
    int timestep = 0;
    bool is_place = false;
    TokenKind kind = TokenKind::act;
    int instance_id = -1;

    bool operator==(const TokenAttributes&) const = default;
};

struct CandidateEntry {
    int position = 0;
    int instance_id = -1;

    bool operator==(const CandidateEntry&) const = default;
};

// Token attributes in sequence order. Embedding into d-vectors happens on a
// tape (embed_tokens) so gradients reach the attribute encoders.
struct TokenSequence {
    std::vector<TokenAttributes> tokens;
    std::vector<int> state_index;  // segment per token, -1 for padding
    std::vector<CandidateEntry> candidate_map;

    std::size_t size() const { return tokens.size(); }
    int act_count() const;
    // Position of the last ACT token, or -1.
    int final_act() const;
    bool operator==(const TokenSequence&) const = default;
};

TokenAttributes instance_token(const sim::Instance& instance);
TokenAttributes act_token();
TokenAttributes pad_token();

// sin(2^k pi v), cos(2^k pi v) for k < L, grouped per input value.
std::vector<double> fourier_features(std::span<const double> values, int frequencies);

// One segment per recorded step: visible instances, then that step's place
// candidates, then ACT.
TokenSequence build_prompt_sequence(const expert::Session& session);

// Earlier states as ACT-closed segments, then the current candidates and a
// trailing ACT. Only the final segment populates candidate_map.
TokenSequence build_situation_sequence(const std::vector<std::vector<sim::Instance>>& history,
                                       const std::vector<sim::Instance>& current);

// Appends PAD tokens up to `length`.
void pad_to(TokenSequence& seq, std::size_t length);

// Parameter names and shapes of the attribute encoders.
void add_embedding_params(ParamSet<double>& params, const EncoderConfig& cfg, Rng& rng);
std::size_t embedding_param_count(const EncoderConfig& cfg);

// Rows of `seq` embedded as [time | category | pose | role]. PAD rows are zero.
template <class S>
ad::Var embed_tokens(const BoundParams<S>& params, const EncoderConfig& cfg, const TokenSequence& seq);

// Single-attribute encoders (inference precision).
Eigen::VectorXd encode_pose(const sim::Pose& pose, const EncoderConfig& cfg, const ParamSet<double>& params);
Eigen::VectorXd encode_category(const sim::Vec3& bbox, const EncoderConfig& cfg, const ParamSet<double>& params);
Eigen::VectorXd encode_timestep(int t, const EncoderConfig& cfg, const ParamSet<double>& params);
Eigen::VectorXd encode_role(bool is_place, const EncoderConfig& cfg, const ParamSet<double>& params);
Eigen::VectorXd embed_instance(const sim::Instance& instance, const EncoderConfig& cfg, const ParamSet<double>& params);

}  // namespace ttp::tok
