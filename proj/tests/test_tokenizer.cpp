#include "doctest.h"

#include <cmath>
#include <set>

#include "ttp/dataset.hpp"
#include "ttp/rng.hpp"
#include "ttp/tokenizer.hpp"

using namespace ttp;

namespace {

sim::Instance make_instance(int id, sim::Category c, bool is_place = false, int t = 0) {
    sim::Instance inst;
    inst.id = id;
    inst.category = c;
    inst.pose.position = {0.1 * id, 0.2, 0.05 * id};
    inst.timestep = t;
    inst.is_place = is_place;
    return inst;
}

ParamSet<double> embedding_params(const tok::EncoderConfig& cfg, std::uint64_t seed = 3) {
    ParamSet<double> p;
    Rng rng(seed);
    tok::add_embedding_params(p, cfg, rng);
    return p;
}

expert::Session generated_session(std::uint64_t seed) {
    const auto pref = expert::sample_preference(seed);
    sim::SceneConfig config;
    config.n_per_rack = 6;
    config.seed = seed;
    return expert::generate_session(0, pref, config);
}

}  // namespace

TEST_CASE("default encoder widths") {
    tok::EncoderConfig cfg;
    CHECK(cfg.temporal_embed + cfg.category_embed + cfg.pose_embed + cfg.marker_embed == 256);
    CHECK(cfg.token_dim() == 256);
    CHECK(cfg.category_embed == 64);
    CHECK(cfg.marker_embed == 32);
    for (int L : {1, 4, 8}) {
        cfg.pose_frequencies = L;
        CHECK(cfg.pose_feature_dim() == 7 * 2 * L);
    }
}

TEST_CASE("fourier features at zero") {
    const std::array<double, 3> zeros{0.0, 0.0, 0.0};
    const auto f = tok::fourier_features(zeros, 4);
    REQUIRE(f.size() == 24);
    for (std::size_t i = 0; i < f.size(); i += 2) {
        CHECK(f[i] == 0.0);
        CHECK(f[i + 1] == 1.0);
    }
    const std::array<double, 1> half{0.5};
    const auto g = tok::fourier_features(half, 2);
    CHECK(g[0] == doctest::Approx(1.0));  // sin(pi/2)
    CHECK(std::abs(g[2]) < 1e-15);        // sin(pi)
}

TEST_CASE("prompt sequence counts") {
    expert::Session session;
    expert::Step step;
    for (int i = 0; i < 5; ++i) {
        step.state.push_back(make_instance(10 + i, sim::Category::cup));
    }
    for (int i = 0; i < 3; ++i) {
        step.place_candidates.push_back(make_instance(1000 + i, sim::Category::cup, true));
    }
    session.steps.push_back(step);
    const auto seq = tok::build_prompt_sequence(session);
    CHECK(seq.size() == 9);
    CHECK(seq.act_count() == 1);
    CHECK(seq.final_act() == 8);
    CHECK(seq.tokens[5].kind == tok::TokenKind::place);

    const auto full = generated_session(5);
    const auto prompt = tok::build_prompt_sequence(full);
    CHECK(prompt.act_count() == static_cast<int>(full.steps.size()));
    for (std::size_t i = 0; i < prompt.size(); ++i) {
        CHECK(prompt.tokens[i].kind != tok::TokenKind::pad);
        if (i + 1 < prompt.size() && prompt.tokens[i].kind != tok::TokenKind::act &&
            prompt.tokens[i + 1].kind != tok::TokenKind::act) {
            CHECK(prompt.state_index[i] == prompt.state_index[i + 1]);
            CHECK(prompt.tokens[i].timestep == prompt.tokens[i + 1].timestep);
        }
        if (prompt.tokens[i].kind == tok::TokenKind::act) {
            CHECK((i + 1 == prompt.size() || prompt.state_index[i + 1] == prompt.state_index[i] + 1));
        }
    }
}

TEST_CASE("situation sequence counts") {
    std::vector<sim::Instance> visible;
    for (int i = 0; i < 15; ++i) {
        visible.push_back(make_instance(10 + i, sim::Category::small_bowl));
    }
    const auto k0 = tok::build_situation_sequence({}, visible);
    CHECK(k0.size() == 16);
    CHECK(k0.candidate_map.size() == 15);
    CHECK(k0.act_count() == 1);

    std::vector<sim::Instance> prior(visible.begin(), visible.begin() + 4);
    const auto k1 = tok::build_situation_sequence({prior}, visible);
    CHECK(k1.size() == 16 + 5);
    CHECK(k1.candidate_map.size() == 15);
    CHECK(k1.candidate_map.front().position == 5);
    CHECK(k1.state_index[4] == 0);
    CHECK(k1.state_index[5] == 1);

    auto padded = k0;
    tok::pad_to(padded, 20);
    CHECK(padded.size() == 20);
    CHECK(padded.tokens.back().kind == tok::TokenKind::pad);
    CHECK(padded.state_index.back() == -1);
    CHECK(padded.final_act() == 15);
}

TEST_CASE("timestep and role lookups") {
    tok::EncoderConfig cfg;
    const auto p = embedding_params(cfg);
    CHECK(tok::encode_timestep(0, cfg, p) == Eigen::VectorXd(p.at("embed.time").row(0).transpose()));
    CHECK(tok::encode_timestep(cfg.t_max + 5, cfg, p) ==
          Eigen::VectorXd(p.at("embed.time").row(cfg.t_max - 1).transpose()));
    CHECK(tok::encode_timestep(3, cfg, p) == tok::encode_timestep(3, cfg, p));
    CHECK(tok::encode_role(true, cfg, p) != tok::encode_role(false, cfg, p));
    CHECK(tok::encode_role(true, cfg, p).size() == 32);
}

TEST_CASE("pose encoding") {
    tok::EncoderConfig cfg;
    const auto p = embedding_params(cfg);
    sim::Pose a;
    sim::Pose b = a;
    b.position[0] += 1e-12;
    const auto ea = tok::encode_pose(a, cfg, p);
    CHECK(ea.size() == 128);
    CHECK((ea - tok::encode_pose(b, cfg, p)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("category encodings are distinct per dish") {
    tok::EncoderConfig cfg;
    const auto p = embedding_params(cfg);
    std::vector<Eigen::VectorXd> codes;
    for (auto c : sim::dish_categories()) {
        codes.push_back(tok::encode_category(sim::category_spec(c).bbox, cfg, p));
        CHECK(codes.back().size() == 64);
    }
    REQUIRE(codes.size() == 7);
    for (std::size_t i = 0; i < codes.size(); ++i) {
        for (std::size_t j = i + 1; j < codes.size(); ++j) {
            CHECK((codes[i] - codes[j]).norm() > 1e-6);
        }
    }
    const auto& bbox = sim::category_spec(sim::Category::cup).bbox;
    CHECK(tok::encode_category(bbox, cfg, p) == tok::encode_category(bbox, cfg, p));
}

TEST_CASE("embedding segments and masks") {
    tok::EncoderConfig cfg;
    const auto p = embedding_params(cfg);
    const auto inst = make_instance(12, sim::Category::big_plate, false, 4);
    const auto full = tok::embed_instance(inst, cfg, p);
    REQUIRE(full.size() == 256);
    CHECK(full.segment(0, 32) == tok::encode_timestep(4, cfg, p));
    CHECK((full.segment(32, 64) - tok::encode_category(sim::category_spec(inst.category).bbox, cfg, p))
              .cwiseAbs()
              .maxCoeff() < 1e-12);
    CHECK((full.segment(96, 128) - tok::encode_pose(inst.pose, cfg, p)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(full.segment(224, 32) == tok::encode_role(false, cfg, p));

    auto off = cfg;
    off.mask = {false, false, false, false};
    CHECK(tok::embed_instance(inst, off, p).isZero(0.0));

    auto pose_only = cfg;
    pose_only.mask = {true, false, false, false};
    const auto e = tok::embed_instance(inst, pose_only, p);
    CHECK(e.segment(0, 96).isZero(0.0));
    CHECK(e.segment(224, 32).isZero(0.0));
    CHECK((e.segment(96, 128) - tok::encode_pose(inst.pose, cfg, p)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("batched embedding agrees with single-item path") {
    tok::EncoderConfig cfg;
    const auto p = embedding_params(cfg);
    const auto session = generated_session(8);
    auto seq = tok::build_prompt_sequence(session);
    const auto n = seq.size();
    tok::pad_to(seq, n + 3);
    ad::Tape<double> tape;
    BoundParams<double> bound(tape, p, false);
    const auto& e = tape.value(tok::embed_tokens(bound, cfg, seq));
    REQUIRE(e.rows() == static_cast<Eigen::Index>(n + 3));
    std::size_t index = 0;
    for (const auto& step : session.steps) {
        for (const auto* group : {&step.state, &step.place_candidates}) {
            for (const auto& inst : *group) {
                CHECK(Eigen::VectorXd(e.row(static_cast<Eigen::Index>(index)).transpose()) ==
                      tok::embed_instance(inst, cfg, p));
                ++index;
            }
        }
        ++index;  // ACT
    }
    CHECK(index == n);
    CHECK(e.bottomRows(3).isZero(0.0));
}
