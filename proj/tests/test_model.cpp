#include "doctest.h"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ttp/model.hpp"
#include "ttp/rng.hpp"
#include "ttp/train.hpp"

using namespace ttp;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("ttp_test_" + name)).string();
}

expert::Session small_session(std::uint64_t seed, int n_per_rack = 3) {
    sim::SceneConfig config;
    config.n_per_rack = n_per_rack;
    config.seed = seed;
    return expert::generate_session(0, expert::sample_preference(seed), config);
}

// Segments of `segment` object tokens closed by an ACT, truncated to exactly `length`.
tok::TokenSequence synthetic_prompt(std::size_t length, std::size_t segment, std::uint64_t seed) {
    Rng rng(seed);
    tok::TokenSequence seq;
    int index = 0;
    while (seq.size() < length) {
        const bool close = seq.size() + 1 == length || (seq.size() + 1) % (segment + 1) == 0;
        if (close) {
            seq.tokens.push_back(tok::act_token());
        } else {
            sim::Instance inst;
            inst.id = 10 + static_cast<int>(seq.size());
            const auto cats = sim::dish_categories();
            inst.category = cats[rng.index(cats.size())];
            inst.pose.position = {rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)};
            inst.timestep = index;
            inst.is_place = rng.uniform() < 0.3;
            seq.tokens.push_back(tok::instance_token(inst));
        }
        seq.state_index.push_back(index);
        if (close) {
            ++index;
        }
    }
    return seq;
}

}  // namespace

TEST_CASE("parameter count matches construction") {
    model::ModelConfig def;
    CHECK(model::init_params(def, 1).scalar_count() == model::param_count(def));
    const auto toy = model::toy_config();
    CHECK(model::init_params(toy, 1).scalar_count() == model::param_count(toy));
    CHECK(toy.d() == 16);
    CHECK(model::init_params(def, 7) == model::init_params(def, 7));
}

TEST_CASE("config round trip and validation") {
    auto cfg = model::toy_config();
    cfg.encoder.mask.time = false;
    KeyValueConfig kv;
    model::write_config(kv, cfg);
    CHECK(model::read_config(KeyValueConfig::parse(kv.format())) == cfg);
    cfg.heads = 3;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("slot bottleneck shape for several prompt lengths") {
    model::ModelConfig cfg;
    const auto params = model::init_params(cfg, 11);
    for (std::size_t n : {10u, 300u, 1200u}) {
        const auto gamma = model::encode_prompt(params, cfg, synthetic_prompt(n, 29, n));
        CHECK(gamma.rows() == 50);
        CHECK(gamma.cols() == 256);
        CHECK(gamma.allFinite());
    }
}

TEST_CASE("within-segment permutation leaves the preference embedding unchanged") {
    model::ModelConfig cfg;
    const auto params = model::init_params(cfg, 12);
    const auto prompt = tok::build_prompt_sequence(small_session(4, 6));
    const auto gamma = model::encode_prompt(params, cfg, prompt);

    auto permuted = prompt;
    Rng rng(99);
    std::size_t begin = 0;
    for (std::size_t i = 0; i < permuted.size(); ++i) {
        if (permuted.tokens[i].kind == tok::TokenKind::act) {
            std::vector<tok::TokenAttributes> block(permuted.tokens.begin() + static_cast<long>(begin),
                                                    permuted.tokens.begin() + static_cast<long>(i));
            rng.shuffle(block);
            std::copy(block.begin(), block.end(), permuted.tokens.begin() + static_cast<long>(begin));
            begin = i + 1;
        }
    }
    REQUIRE(!(permuted.tokens == prompt.tokens));
    const auto moved = model::encode_prompt(params, cfg, permuted);
    CHECK((gamma - moved).cwiseAbs().maxCoeff() < 1e-6);

    const auto noise = model::sample_slot_noise(cfg, 5);
    CHECK((model::encode_prompt(params, cfg, prompt, &noise) - model::encode_prompt(params, cfg, permuted, &noise))
              .cwiseAbs()
              .maxCoeff() < 1e-6);
    CHECK((model::encode_prompt(params, cfg, prompt, &noise) - gamma).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("encoder is block causal") {
    const auto cfg = model::toy_config();
    const auto params = model::init_params(cfg, 13);
    const auto prompt = synthetic_prompt(40, 9, 3);
    auto changed = prompt;
    for (std::size_t i = 0; i < changed.size(); ++i) {
        if (changed.state_index[i] >= 2 && changed.tokens[i].kind != tok::TokenKind::act) {
            changed.tokens[i].pose[0] += 0.3;
        }
    }
    const auto a = model::encoder_outputs(params, cfg, prompt);
    const auto b = model::encoder_outputs(params, cfg, changed);
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        const double diff = (a.row(i) - b.row(i)).cwiseAbs().maxCoeff();
        if (prompt.state_index[static_cast<std::size_t>(i)] < 2) {
            CHECK(diff == 0.0);
        } else {
            CHECK(diff > 0.0);
        }
    }
}

TEST_CASE("decoder scores and selection") {
    const auto cfg = model::toy_config();
    const auto params = model::init_params(cfg, 14);
    const auto gamma = model::encode_prompt(params, cfg, tok::build_prompt_sequence(small_session(2)));

    std::vector<sim::Instance> current;
    for (int i = 0; i < 4; ++i) {
        sim::Instance inst;
        inst.id = 20 + i;
        inst.category = sim::Category::small_bowl;
        inst.pose.position = {0.1 * i, 0.9, 0.2};
        current.push_back(inst);
    }
    auto twin = current[1];
    twin.id = 40;
    current.push_back(twin);
    const auto situation = tok::build_situation_sequence({}, current);
    const auto scores = model::decode_situation(params, cfg, situation, gamma);
    REQUIRE(scores.size() == situation.candidate_map.size());
    CHECK(scores[1].value == scores[4].value);
    CHECK(scores[0].value != scores[1].value);

    const int pick = model::select_instance(scores, {21, 40});
    CHECK(pick == 21);  // tie goes to the lower id
    CHECK_THROWS_AS(model::select_instance(scores, {}), std::invalid_argument);
    CHECK_THROWS_AS(model::select_instance(scores, {999}), std::invalid_argument);

    const std::vector<model::Score> fixed{{0, 5, 0.2}, {1, 7, 0.9}, {2, 9, 0.9}, {3, 11, 3.0}};
    CHECK(model::select_instance(fixed, {5, 7, 9}) == 7);
    CHECK(model::select_instance(fixed, {5, 11}) == 11);
}

TEST_CASE("checkpoint round trip and corruption") {
    model::Checkpoint ckpt;
    ckpt.config = model::toy_config();
    ckpt.params = model::init_params(ckpt.config, 15);
    ckpt.metadata = "epoch = 3\n";
    const auto path = temp_path("model.ckpt");
    model::save_checkpoint(ckpt, path);
    const auto back = model::load_checkpoint(path);
    CHECK(back.config == ckpt.config);
    CHECK(back.params == ckpt.params);
    CHECK(back.metadata == ckpt.metadata);

    const auto prompt = tok::build_prompt_sequence(small_session(6));
    const auto situation = tok::build_situation_sequence({}, small_session(6).steps[2].state);
    const auto s1 = model::decode_situation(ckpt.params, ckpt.config, situation,
                                            model::encode_prompt(ckpt.params, ckpt.config, prompt));
    const auto s2 = model::decode_situation(back.params, back.config, situation,
                                            model::encode_prompt(back.params, back.config, prompt));
    for (std::size_t i = 0; i < s1.size(); ++i) {
        CHECK(s1[i].value == s2[i].value);
    }

    std::string bytes;
    {
        std::ifstream in(path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    auto write = [&](const std::string& data) {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << data;
    };
    write(bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(model::load_checkpoint(path), model::CheckpointError);
    auto flipped = bytes;
    flipped[bytes.size() / 2] = static_cast<char>(flipped[bytes.size() / 2] ^ 0x10);
    write(flipped);
    CHECK_THROWS_AS(model::load_checkpoint(path), model::CheckpointError);
    auto versioned = bytes;
    versioned[8] = 9;
    write(versioned);
    CHECK_THROWS_AS(model::load_checkpoint(path), model::CheckpointError);
    write(bytes + "x");
    CHECK_THROWS_AS(model::load_checkpoint(path), model::CheckpointError);
    std::remove(path.c_str());
    CHECK_THROWS_AS(model::load_checkpoint(path), model::CheckpointError);
}

namespace {

struct Fixture {
    model::ModelConfig cfg = model::toy_config();
    expert::Session session = small_session(21);
    train::PreparedSession prepared = train::prepare_session(session, 0);
    tok::TokenSequence prompt = tok::build_prompt_sequence(small_session(22));

    model::Batch batch(std::vector<const train::PreparedDecision*> decisions, bool pad = true) const {
        model::Batch b;
        b.prompts.push_back(&prompt);
        for (const auto* d : decisions) {
            b.examples.push_back({0, &d->situation, d->eligible, d->target});
        }
        b.pad = pad;
        return b;
    }
};

double batch_loss_value(const model::Params& params, const model::ModelConfig& cfg, const model::Batch& b,
                        std::vector<std::vector<double>>* scores = nullptr) {
    ad::Tape<double> tape;
    BoundParams<double> bound(tape, params, false);
    auto r = model::batch_loss(bound, cfg, b);
    if (scores) {
        *scores = r.scores;
    }
    return tape.value(r.loss)(0, 0);
}

}  // namespace

TEST_CASE("padding does not change losses or scores") {
    Fixture f;
    const auto params = model::init_params(f.cfg, 16);
    const auto by_length = [](const train::PreparedDecision& a, const train::PreparedDecision& b) {
        return a.situation.size() < b.situation.size();
    };
    const auto* shortest = &*std::min_element(f.prepared.places.begin(), f.prepared.places.end(), by_length);
    const auto* longest = &*std::max_element(f.prepared.places.begin(), f.prepared.places.end(), by_length);
    REQUIRE(shortest->situation.size() < longest->situation.size());

    std::vector<std::vector<double>> alone;
    std::vector<std::vector<double>> together;
    const double a = batch_loss_value(params, f.cfg, f.batch({shortest}, false), &alone);
    const double b = batch_loss_value(params, f.cfg, f.batch({longest}, false));
    const double ab = batch_loss_value(params, f.cfg, f.batch({shortest, longest}, true), &together);
    CHECK(ab == doctest::Approx(0.5 * (a + b)).epsilon(1e-12));
    for (std::size_t i = 0; i < alone[0].size(); ++i) {
        CHECK(together[0][i] == doctest::Approx(alone[0][i]).epsilon(1e-12));
    }
}

TEST_CASE("batch gradient is the mean of single-example gradients") {
    Fixture f;
    const auto params = model::init_params(f.cfg, 17);
    const auto* x = &f.prepared.picks[1];
    const auto* y = &f.prepared.places[3];
    const auto gx = train::compute_gradients(f.batch({x}), params, f.cfg);
    const auto gy = train::compute_gradients(f.batch({y}), params, f.cfg);
    const auto gxy = train::compute_gradients(f.batch({x, y}), params, f.cfg);
    CHECK(gxy.loss == doctest::Approx(0.5 * (gx.loss + gy.loss)).epsilon(1e-12));
    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        const auto expected = 0.5 * (gx.grads.values()[k] + gy.grads.values()[k]);
        worst = std::max(worst, (gxy.grads.values()[k] - expected).cwiseAbs().maxCoeff());
    }
    CHECK(worst < 1e-12);
}

TEST_CASE("unused timestep rows receive exactly zero gradient") {
    Fixture f;
    f.cfg.encoder.t_max = 64;
    const auto params = model::init_params(f.cfg, 18);
    const auto g = train::compute_gradients(f.batch({&f.prepared.picks[0]}), params, f.cfg);
    const auto& time = g.grads.at("embed.time");
    CHECK(time.bottomRows(20).isZero(0.0));
    CHECK(!time.topRows(1).isZero(0.0));
}

namespace {

train::GradientCheck toy_gradient_check(std::uint64_t seed, long double h) {
    const auto cfg = model::toy_config();
    const auto session = small_session(seed);
    const auto prepared = train::prepare_session(session, 0);
    auto head = session;
    head.steps.resize(4);
    const auto prompt = tok::build_prompt_sequence(head);
    model::Batch b;
    b.prompts.push_back(&prompt);
    for (const auto* d : {&prepared.picks[2], &prepared.places[4]}) {
        b.examples.push_back({0, &d->situation, d->eligible, d->target});
    }
    b.slot_noise.push_back(model::sample_slot_noise(cfg, 23));
    const auto params = model::init_params(cfg, 19).cast<long double>();
    return train::finite_difference_check(b, params, cfg, h);
}

}  // namespace

// Central differences are only meaningful where no ReLU pre-activation lies
// within the probe band; this fixture keeps every unit clear at h = 1e-4.
TEST_CASE("full model gradients match central differences at step 1e-4") {
    const auto check = toy_gradient_check(21, 1e-4L);
    MESSAGE("max relative error " << check.max_rel_error << " at " << check.worst_param);
    CHECK(check.checked == model::param_count(model::toy_config()));
    CHECK(check.max_rel_error < 1e-4);
}

TEST_CASE("full model gradients match central differences at step 1e-6") {
    const auto check = toy_gradient_check(23, 1e-6L);
    MESSAGE("max relative error " << check.max_rel_error << " at " << check.worst_param);
    CHECK(check.max_rel_error < 1e-4);
}
