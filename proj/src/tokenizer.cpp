#include "ttp/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace ttp::tok {

void EncoderConfig::validate() const {
    if (pose_embed <= 0 || category_embed <= 0 || temporal_embed <= 0 || marker_embed <= 0) {
        throw std::invalid_argument("embedding widths must be positive");
    }
    if (pose_frequencies < 1 || category_frequencies < 1) {
        throw std::invalid_argument("fourier frequency count must be at least 1");
    }
    if (category_hidden <= 0 || t_max < 1) {
        throw std::invalid_argument("category_hidden and t_max must be positive");
    }
}

int TokenSequence::act_count() const {
    return static_cast<int>(
        std::count_if(tokens.begin(), tokens.end(), [](const TokenAttributes& t) { return t.kind == TokenKind::act; }));
}

int TokenSequence::final_act() const {
    for (std::size_t i = tokens.size(); i-- > 0;) {
        if (tokens[i].kind == TokenKind::act) {
            return static_cast<int>(i);
        }
    }
    return -1;
}

TokenAttributes instance_token(const sim::Instance& instance) {
    TokenAttributes t;
    for (int i = 0; i < 3; ++i) {
        t.pose[static_cast<std::size_t>(i)] = instance.pose.position[static_cast<std::size_t>(i)];
    }
    for (int i = 0; i < 4; ++i) {
        t.pose[static_cast<std::size_t>(3 + i)] = instance.pose.orientation[static_cast<std::size_t>(i)];
    }
    t.bbox = sim::category_spec(instance.category).bbox;
    t.timestep = instance.timestep;
    t.is_place = instance.is_place;
    t.kind = instance.is_place ? TokenKind::place : TokenKind::object;
    t.instance_id = instance.id;
    return t;
}

TokenAttributes act_token() { return TokenAttributes{}; }

TokenAttributes pad_token() {
    TokenAttributes t;
    t.kind = TokenKind::pad;
    return t;
}

std::vector<double> fourier_features(std::span<const double> values, int frequencies) {
    std::vector<double> out;
    out.reserve(values.size() * 2 * static_cast<std::size_t>(frequencies));
    for (double v : values) {
        for (int k = 0; k < frequencies; ++k) {
            const double arg = std::ldexp(std::numbers::pi, k) * v;
            out.push_back(std::sin(arg));
            out.push_back(std::cos(arg));
        }
    }
    return out;
}

namespace {

void append_segment(TokenSequence& seq, const std::vector<sim::Instance>& instances, int segment) {
    for (const auto& inst : instances) {
        seq.tokens.push_back(instance_token(inst));
        seq.state_index.push_back(segment);
    }
}

void close_segment(TokenSequence& seq, int segment) {
    seq.tokens.push_back(act_token());
    seq.state_index.push_back(segment);
}

}  // namespace

TokenSequence build_prompt_sequence(const expert::Session& session) {
    TokenSequence seq;
    int segment = 0;
    for (const auto& step : session.steps) {
        append_segment(seq, step.state, segment);
        append_segment(seq, step.place_candidates, segment);
        close_segment(seq, segment);
        ++segment;
    }
    return seq;
}

TokenSequence build_situation_sequence(const std::vector<std::vector<sim::Instance>>& history,
                                       const std::vector<sim::Instance>& current) {
    TokenSequence seq;
    int segment = 0;
    for (const auto& state : history) {
        append_segment(seq, state, segment);
        close_segment(seq, segment);
        ++segment;
    }
    for (const auto& inst : current) {
        seq.candidate_map.push_back({static_cast<int>(seq.tokens.size()), inst.id});
        seq.tokens.push_back(instance_token(inst));
        seq.state_index.push_back(segment);
    }
    close_segment(seq, segment);
    return seq;
}

void pad_to(TokenSequence& seq, std::size_t length) {
    while (seq.tokens.size() < length) {
        seq.tokens.push_back(pad_token());
        seq.state_index.push_back(-1);
    }
}

namespace {

ad::Mat<double> uniform_matrix(Rng& rng, int rows, int cols, double bound) {
    ad::Mat<double> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = rng.uniform(-bound, bound);
    }
    return m;
}

}  // namespace

void add_embedding_params(ParamSet<double>& params, const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    const int fp = cfg.pose_feature_dim();
    const int fc = cfg.category_feature_dim();
    params.add("embed.pose.w", uniform_matrix(rng, fp, cfg.pose_embed, 1.0 / std::sqrt(fp)));
    params.add("embed.pose.b", ad::Mat<double>::Zero(1, cfg.pose_embed));
    params.add("embed.cat.w1", uniform_matrix(rng, fc, cfg.category_hidden, 1.0 / std::sqrt(fc)));
    params.add("embed.cat.b1", ad::Mat<double>::Zero(1, cfg.category_hidden));
    params.add("embed.cat.w2", uniform_matrix(rng, cfg.category_hidden, cfg.category_embed,
                                              1.0 / std::sqrt(cfg.category_hidden)));
    params.add("embed.cat.b2", ad::Mat<double>::Zero(1, cfg.category_embed));
    params.add("embed.time", uniform_matrix(rng, cfg.t_max, cfg.temporal_embed, 1.0));
    params.add("embed.role", uniform_matrix(rng, 2, cfg.marker_embed, 1.0));
}

std::size_t embedding_param_count(const EncoderConfig& cfg) {
    const auto fp = static_cast<std::size_t>(cfg.pose_feature_dim());
    const auto fc = static_cast<std::size_t>(cfg.category_feature_dim());
    const auto p = static_cast<std::size_t>(cfg.pose_embed);
    const auto h = static_cast<std::size_t>(cfg.category_hidden);
    const auto c = static_cast<std::size_t>(cfg.category_embed);
    return fp * p + p + fc * h + h + h * c + c + static_cast<std::size_t>(cfg.t_max * cfg.temporal_embed) +
           2 * static_cast<std::size_t>(cfg.marker_embed);
}

template <class S>
ad::Var embed_tokens(const BoundParams<S>& params, const EncoderConfig& cfg, const TokenSequence& seq) {
    auto& tape = params.tape();
    using M = ad::Mat<S>;
    std::vector<int> rows;
    for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
        if (seq.tokens[i].kind != TokenKind::pad) {
            rows.push_back(static_cast<int>(i));
        }
    }
    const auto n = static_cast<Eigen::Index>(rows.size());
    std::vector<ad::Var> parts;

    if (cfg.mask.time) {
        std::vector<int> idx;
        for (int r : rows) {
            idx.push_back(std::clamp(seq.tokens[static_cast<std::size_t>(r)].timestep, 0, cfg.t_max - 1));
        }
        parts.push_back(tape.gather_rows(params("embed.time"), std::move(idx)));
    } else {
        parts.push_back(tape.constant(M::Zero(n, cfg.temporal_embed)));
    }

    if (cfg.mask.category) {
        M features(n, cfg.category_feature_dim());
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto& bbox = seq.tokens[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])].bbox;
            const auto f = fourier_features(bbox, cfg.category_frequencies);
            for (std::size_t j = 0; j < f.size(); ++j) {
                features(i, static_cast<Eigen::Index>(j)) = static_cast<S>(f[j]);
            }
        }
        const ad::Var hidden =
            tape.relu(tape.linear(tape.constant(std::move(features)), params("embed.cat.w1"), params("embed.cat.b1"), true));
        parts.push_back(tape.linear(hidden, params("embed.cat.w2"), params("embed.cat.b2"), true));
    } else {
        parts.push_back(tape.constant(M::Zero(n, cfg.category_embed)));
    }

    if (cfg.mask.pose) {
        M features(n, cfg.pose_feature_dim());
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto& pose = seq.tokens[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])].pose;
            const auto f = fourier_features(pose, cfg.pose_frequencies);
            for (std::size_t j = 0; j < f.size(); ++j) {
                features(i, static_cast<Eigen::Index>(j)) = static_cast<S>(f[j]);
            }
        }
        parts.push_back(tape.linear(tape.constant(std::move(features)), params("embed.pose.w"), params("embed.pose.b"), true));
    } else {
        parts.push_back(tape.constant(M::Zero(n, cfg.pose_embed)));
    }

    if (cfg.mask.role) {
        std::vector<int> idx;
        for (int r : rows) {
            idx.push_back(seq.tokens[static_cast<std::size_t>(r)].is_place ? 1 : 0);
        }
        parts.push_back(tape.gather_rows(params("embed.role"), std::move(idx)));
    } else {
        parts.push_back(tape.constant(M::Zero(n, cfg.marker_embed)));
    }

    const ad::Var packed = tape.concat_cols(parts);
    if (rows.size() == seq.tokens.size()) {
        return packed;
    }
    return tape.scatter_rows(packed, std::move(rows), static_cast<Eigen::Index>(seq.tokens.size()));
}

template ad::Var embed_tokens<float>(const BoundParams<float>&, const EncoderConfig&, const TokenSequence&);
template ad::Var embed_tokens<double>(const BoundParams<double>&, const EncoderConfig&, const TokenSequence&);
template ad::Var embed_tokens<long double>(const BoundParams<long double>&, const EncoderConfig&,
                                           const TokenSequence&);

namespace {

Eigen::VectorXd segment_of(const sim::Instance& instance, const EncoderConfig& cfg, const ParamSet<double>& params,
                           int begin, int width) {
    ad::Tape<double> tape;
    BoundParams<double> bound(tape, params, false);
    TokenSequence seq;
    seq.tokens.push_back(instance_token(instance));
    seq.state_index.push_back(0);
    const auto& row = tape.value(embed_tokens(bound, cfg, seq));
    return row.row(0).segment(begin, width).transpose();
}

EncoderConfig unmasked(EncoderConfig cfg) {
    cfg.mask = AttributeMask{};
    return cfg;
}

}  // namespace

Eigen::VectorXd encode_pose(const sim::Pose& pose, const EncoderConfig& cfg, const ParamSet<double>& params) {
    sim::Instance inst;
    inst.pose = pose;
    return segment_of(inst, unmasked(cfg), params, cfg.temporal_embed + cfg.category_embed, cfg.pose_embed);
}

Eigen::VectorXd encode_category(const sim::Vec3& bbox, const EncoderConfig& cfg, const ParamSet<double>& params) {
    const auto f = fourier_features(bbox, cfg.category_frequencies);
    const Eigen::Map<const Eigen::RowVectorXd> features(f.data(), static_cast<Eigen::Index>(f.size()));
    Eigen::RowVectorXd hidden = features * params.at("embed.cat.w1") + params.at("embed.cat.b1");
    hidden = hidden.cwiseMax(0.0);
    return (hidden * params.at("embed.cat.w2") + params.at("embed.cat.b2")).transpose();
}

Eigen::VectorXd encode_timestep(int t, const EncoderConfig& cfg, const ParamSet<double>& params) {
    return params.at("embed.time").row(std::clamp(t, 0, cfg.t_max - 1)).transpose();
}

Eigen::VectorXd encode_role(bool is_place, const EncoderConfig&, const ParamSet<double>& params) {
    return params.at("embed.role").row(is_place ? 1 : 0).transpose();
}

Eigen::VectorXd embed_instance(const sim::Instance& instance, const EncoderConfig& cfg,
                               const ParamSet<double>& params) {
    return segment_of(instance, cfg, params, 0, cfg.token_dim());
}

}  // namespace ttp::tok
