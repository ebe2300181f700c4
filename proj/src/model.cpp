#include "ttp/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ttp/rng.hpp"

namespace ttp::model {

using ad::AttentionBlock;
using ad::Var;

void ModelConfig::validate() const {
    encoder.validate();
    if (encoder_layers < 1 || decoder_layers < 1 || heads < 1 || ff_hidden < 1 || num_slots < 1 || slot_iters < 1 ||
        slot_hidden < 1) {
        throw std::invalid_argument("model sizes must be positive");
    }
    if (d() % heads != 0) {
        throw std::invalid_argument("token dimension must be divisible by the head count");
    }
    if (!(slot_init_sigma > 0.0)) {
        throw std::invalid_argument("slot_init_sigma must be positive");
    }
}

ModelConfig toy_config() {
    ModelConfig cfg;
    cfg.encoder.pose_embed = 8;
    cfg.encoder.category_embed = 4;
    cfg.encoder.temporal_embed = 2;
    cfg.encoder.marker_embed = 2;
    cfg.encoder.pose_frequencies = 2;
    cfg.encoder.category_frequencies = 2;
    cfg.encoder.category_hidden = 6;
    cfg.encoder.t_max = 8;
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 1;
    cfg.heads = 1;
    cfg.ff_hidden = 12;
    cfg.num_slots = 4;
    cfg.slot_iters = 3;
    cfg.slot_hidden = 12;
    cfg.slot_init_sigma = 0.5;
    return cfg;
}

std::vector<std::string> config_keys() {
    return {"pose_embed",     "category_embed", "temporal_embed", "marker_embed",  "pose_frequencies",
            "category_frequencies", "category_hidden", "t_max",   "use_pose",      "use_category",
            "use_time",       "use_role",       "encoder_layers", "decoder_layers", "heads",
            "ff_hidden",      "num_slots",      "slot_iters",     "slot_hidden",   "slot_init_sigma"};
}

void write_config(KeyValueConfig& kv, const ModelConfig& cfg) {
    const auto& e = cfg.encoder;
    kv.set("pose_embed", std::to_string(e.pose_embed));
    kv.set("category_embed", std::to_string(e.category_embed));
    kv.set("temporal_embed", std::to_string(e.temporal_embed));
    kv.set("marker_embed", std::to_string(e.marker_embed));
    kv.set("pose_frequencies", std::to_string(e.pose_frequencies));
    kv.set("category_frequencies", std::to_string(e.category_frequencies));
    kv.set("category_hidden", std::to_string(e.category_hidden));
    kv.set("t_max", std::to_string(e.t_max));
    kv.set("use_pose", e.mask.pose ? "true" : "false");
    kv.set("use_category", e.mask.category ? "true" : "false");
    kv.set("use_time", e.mask.time ? "true" : "false");
    kv.set("use_role", e.mask.role ? "true" : "false");
    kv.set("encoder_layers", std::to_string(cfg.encoder_layers));
    kv.set("decoder_layers", std::to_string(cfg.decoder_layers));
    kv.set("heads", std::to_string(cfg.heads));
    kv.set("ff_hidden", std::to_string(cfg.ff_hidden));
    kv.set("num_slots", std::to_string(cfg.num_slots));
    kv.set("slot_iters", std::to_string(cfg.slot_iters));
    kv.set("slot_hidden", std::to_string(cfg.slot_hidden));
    std::ostringstream sigma;
    sigma.precision(17);
    sigma << cfg.slot_init_sigma;
    kv.set("slot_init_sigma", sigma.str());
}

ModelConfig read_config(const KeyValueConfig& kv, ModelConfig base) {
    auto geti = [&](const char* key, int fallback) { return static_cast<int>(kv.get_int(key, fallback)); };
    auto& e = base.encoder;
    e.pose_embed = geti("pose_embed", e.pose_embed);
    e.category_embed = geti("category_embed", e.category_embed);
    e.temporal_embed = geti("temporal_embed", e.temporal_embed);
    e.marker_embed = geti("marker_embed", e.marker_embed);
    e.pose_frequencies = geti("pose_frequencies", e.pose_frequencies);
    e.category_frequencies = geti("category_frequencies", e.category_frequencies);
    e.category_hidden = geti("category_hidden", e.category_hidden);
    e.t_max = geti("t_max", e.t_max);
    e.mask.pose = kv.get_bool("use_pose", e.mask.pose);
    e.mask.category = kv.get_bool("use_category", e.mask.category);
    e.mask.time = kv.get_bool("use_time", e.mask.time);
    e.mask.role = kv.get_bool("use_role", e.mask.role);
    base.encoder_layers = geti("encoder_layers", base.encoder_layers);
    base.decoder_layers = geti("decoder_layers", base.decoder_layers);
    base.heads = geti("heads", base.heads);
    base.ff_hidden = geti("ff_hidden", base.ff_hidden);
    base.num_slots = geti("num_slots", base.num_slots);
    base.slot_iters = geti("slot_iters", base.slot_iters);
    base.slot_hidden = geti("slot_hidden", base.slot_hidden);
    base.slot_init_sigma = kv.get_double("slot_init_sigma", base.slot_init_sigma);
    base.validate();
    return base;
}

namespace {

using MD = ad::Mat<double>;

MD uniform(Rng& rng, int rows, int cols, double bound) {
    MD m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = rng.uniform(-bound, bound);
    }
    return m;
}

void add_linear(Params& p, Rng& rng, const std::string& name, int in, int out, bool bias = true) {
    p.add(name + ".w", uniform(rng, in, out, 1.0 / std::sqrt(static_cast<double>(in))));
    if (bias) {
        p.add(name + ".b", MD::Zero(1, out));
    }
}

void add_norm(Params& p, const std::string& name, int d) {
    p.add(name + ".g", MD::Ones(1, d));
    p.add(name + ".b", MD::Zero(1, d));
}

void add_attention(Params& p, Rng& rng, const std::string& name, int d) {
    for (const char* proj : {".q", ".k", ".v", ".o"}) {
        add_linear(p, rng, name + proj, d, d);
    }
}

std::string layer_name(const char* stack, int layer) { return std::string(stack) + "." + std::to_string(layer); }

}  // namespace

Params init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(mix_seed(seed, 0x494e4954));
    Params p;
    const int d = cfg.d();
    tok::add_embedding_params(p, cfg.encoder, rng);
    for (int l = 0; l < cfg.encoder_layers; ++l) {
        const auto pre = layer_name("enc", l);
        add_norm(p, pre + ".ln1", d);
        add_attention(p, rng, pre + ".attn", d);
        add_norm(p, pre + ".ln2", d);
        add_linear(p, rng, pre + ".ff1", d, cfg.ff_hidden);
        add_linear(p, rng, pre + ".ff2", cfg.ff_hidden, d);
    }
    add_norm(p, "enc.ln", d);

    add_norm(p, "slot.ln_in", d);
    p.add("slot.mu", uniform(rng, cfg.num_slots, d, 1.0 / std::sqrt(static_cast<double>(d))));
    p.add("slot.log_sigma", MD::Constant(cfg.num_slots, d, std::log(cfg.slot_init_sigma)));
    add_linear(p, rng, "slot.q", d, d, false);
    add_linear(p, rng, "slot.k", d, d, false);
    add_linear(p, rng, "slot.v", d, d, false);
    add_norm(p, "slot.ln_slots", d);
    add_linear(p, rng, "slot.gru_i", d, 3 * d);
    add_linear(p, rng, "slot.gru_h", d, 3 * d);
    add_norm(p, "slot.ln_mlp", d);
    add_linear(p, rng, "slot.mlp1", d, cfg.slot_hidden);
    add_linear(p, rng, "slot.mlp2", cfg.slot_hidden, d);

    for (int l = 0; l < cfg.decoder_layers; ++l) {
        const auto pre = layer_name("dec", l);
        add_norm(p, pre + ".ln1", d);
        add_attention(p, rng, pre + ".self", d);
        add_norm(p, pre + ".ln2", d);
        add_attention(p, rng, pre + ".cross", d);
        add_norm(p, pre + ".ln3", d);
        add_linear(p, rng, pre + ".ff1", d, cfg.ff_hidden);
        add_linear(p, rng, pre + ".ff2", cfg.ff_hidden, d);
    }
    add_norm(p, "dec.ln", d);
    return p;
}

std::size_t param_count(const ModelConfig& cfg) {
    const std::size_t d = static_cast<std::size_t>(cfg.d());
    const std::size_t f = static_cast<std::size_t>(cfg.ff_hidden);
    const std::size_t s = static_cast<std::size_t>(cfg.slot_hidden);
    const std::size_t h = static_cast<std::size_t>(cfg.num_slots);
    const std::size_t attention = 4 * d * d + 4 * d;
    const std::size_t ff = 2 * d * f + f + d;
    const std::size_t norm = 2 * d;
    const std::size_t encoder_layer = 2 * norm + attention + ff;
    const std::size_t decoder_layer = 3 * norm + 2 * attention + ff;
    const std::size_t slots = 3 * norm + 2 * h * d + 3 * d * d + 2 * (3 * d * d + 3 * d) + (2 * d * s + s + d);
    return tok::embedding_param_count(cfg.encoder) + static_cast<std::size_t>(cfg.encoder_layers) * encoder_layer +
           norm + slots + static_cast<std::size_t>(cfg.decoder_layers) * decoder_layer + norm;
}

namespace {

template <class S>
Var norm(const BoundParams<S>& p, const std::string& name, Var x) {
    return p.tape().layer_norm(x, p(name + ".g"), p(name + ".b"));
}

template <class S>
Var linear(const BoundParams<S>& p, const std::string& name, Var x, bool bias = true) {
    return bias ? p.tape().linear(x, p(name + ".w"), p(name + ".b")) : p.tape().linear(x, p(name + ".w"));
}

template <class S>
Var attention(const BoundParams<S>& p, const std::string& name, Var xq, Var xkv, int heads,
              std::vector<AttentionBlock> blocks) {
    auto& t = p.tape();
    const Var q = linear(p, name + ".q", xq);
    const Var k = linear(p, name + ".k", xkv);
    const Var v = linear(p, name + ".v", xkv);
    return linear(p, name + ".o", t.attention(q, k, v, heads, std::move(blocks)));
}

template <class S>
Var feed_forward(const BoundParams<S>& p, const std::string& a, const std::string& b, Var x) {
    return linear(p, b, p.tape().relu(linear(p, a, x)));
}

template <class S>
Var encoder_stack(const BoundParams<S>& p, const ModelConfig& cfg, Var x, const std::vector<int>& segments) {
    auto& t = p.tape();
    const AttentionBlock block{0, 0, segments, segments, true};
    for (int l = 0; l < cfg.encoder_layers; ++l) {
        const auto pre = layer_name("enc", l);
        const Var y = norm(p, pre + ".ln1", x);
        x = t.add(x, attention(p, pre + ".attn", y, y, cfg.heads, {block}));
        x = t.add(x, feed_forward(p, pre + ".ff1", pre + ".ff2", norm(p, pre + ".ln2", x)));
    }
    return norm(p, "enc.ln", x);
}

template <class S>
Var slot_attention(const BoundParams<S>& p, const ModelConfig& cfg, Var x, const std::vector<int>& segments,
                   const ad::Mat<S>* noise) {
    auto& t = p.tape();
    const int d = cfg.d();
    const Var inputs = norm(p, "slot.ln_in", x);
    const Var k = linear(p, "slot.k", inputs, false);
    const Var v = linear(p, "slot.v", inputs, false);
    Var slots = p("slot.mu");
    if (noise != nullptr) {
        slots = t.add(slots, t.hadamard(t.exp(p("slot.log_sigma")), t.constant(*noise)));
    }
    std::vector<bool> valid(segments.size());
    for (std::size_t i = 0; i < segments.size(); ++i) {
        valid[i] = segments[i] >= 0;
    }
    const S inv_sqrt_d = S(1) / std::sqrt(S(d));
    for (int it = 0; it < cfg.slot_iters; ++it) {
        const Var prev = slots;
        const Var q = linear(p, "slot.q", norm(p, "slot.ln_slots", slots), false);
        const Var weights = t.slot_weights(t.scale(t.matmul_nt(k, q), inv_sqrt_d), valid);
        const Var updates = t.matmul_tn(weights, v);
        const Var gi = linear(p, "slot.gru_i", updates);
        const Var gh = linear(p, "slot.gru_h", prev);
        const Var r = t.sigmoid(t.add(t.slice_cols(gi, 0, d), t.slice_cols(gh, 0, d)));
        const Var z = t.sigmoid(t.add(t.slice_cols(gi, d, d), t.slice_cols(gh, d, d)));
        const Var n = t.tanh(t.add(t.slice_cols(gi, 2 * d, d), t.hadamard(r, t.slice_cols(gh, 2 * d, d))));
        slots = t.add(n, t.hadamard(z, t.sub(prev, n)));
        slots = t.add(slots, feed_forward(p, "slot.mlp1", "slot.mlp2", norm(p, "slot.ln_mlp", slots)));
    }
    return slots;
}

template <class S>
Var decoder_stack(const BoundParams<S>& p, const ModelConfig& cfg, Var x, Var gamma,
                  const std::vector<AttentionBlock>& self_blocks, const std::vector<AttentionBlock>& cross_blocks) {
    auto& t = p.tape();
    for (int l = 0; l < cfg.decoder_layers; ++l) {
        const auto pre = layer_name("dec", l);
        const Var y = norm(p, pre + ".ln1", x);
        x = t.add(x, attention(p, pre + ".self", y, y, cfg.heads, self_blocks));
        x = t.add(x, attention(p, pre + ".cross", norm(p, pre + ".ln2", x), gamma, cfg.heads, cross_blocks));
        x = t.add(x, feed_forward(p, pre + ".ff1", pre + ".ff2", norm(p, pre + ".ln3", x)));
    }
    return norm(p, "dec.ln", x);
}

// Situations laid out back to back (optionally padded to a common length).
struct Layout {
    tok::TokenSequence merged;
    std::vector<int> offsets;
    std::vector<int> lengths;
};

Layout lay_out(const std::vector<const tok::TokenSequence*>& situations, bool pad) {
    Layout out;
    std::size_t max_len = 0;
    for (const auto* s : situations) {
        max_len = std::max(max_len, s->size());
    }
    for (const auto* s : situations) {
        out.offsets.push_back(static_cast<int>(out.merged.tokens.size()));
        tok::TokenSequence copy = *s;
        if (pad) {
            tok::pad_to(copy, max_len);
        }
        out.lengths.push_back(static_cast<int>(copy.size()));
        out.merged.tokens.insert(out.merged.tokens.end(), copy.tokens.begin(), copy.tokens.end());
        out.merged.state_index.insert(out.merged.state_index.end(), copy.state_index.begin(), copy.state_index.end());
    }
    return out;
}

std::vector<int> segments_of(const tok::TokenSequence& seq, std::size_t begin, std::size_t length) {
    return {seq.state_index.begin() + static_cast<std::ptrdiff_t>(begin),
            seq.state_index.begin() + static_cast<std::ptrdiff_t>(begin + length)};
}

template <class S>
Var encode_prompt_impl(const BoundParams<S>& p, const ModelConfig& cfg, const tok::TokenSequence& prompt,
                       const ad::Mat<S>* noise) {
    if (prompt.size() == 0) {
        throw std::invalid_argument("empty prompt");
    }
    const Var e = tok::embed_tokens(p, cfg.encoder, prompt);
    const Var enc = encoder_stack(p, cfg, e, prompt.state_index);
    return slot_attention(p, cfg, enc, prompt.state_index, noise);
}

// Decoder over laid-out situations; returns (decoder output at each final
// ACT, input embeddings).
template <class S>
std::pair<Var, Var> decode_impl(const BoundParams<S>& p, const ModelConfig& cfg, const Layout& layout, Var gamma,
                                const std::vector<int>& gamma_index) {
    auto& t = p.tape();
    const Var e = tok::embed_tokens(p, cfg.encoder, layout.merged);
    std::vector<AttentionBlock> self_blocks;
    std::vector<AttentionBlock> cross_blocks;
    std::vector<int> act_rows;
    for (std::size_t b = 0; b < layout.offsets.size(); ++b) {
        const auto off = static_cast<std::size_t>(layout.offsets[b]);
        const auto len = static_cast<std::size_t>(layout.lengths[b]);
        const auto segs = segments_of(layout.merged, off, len);
        self_blocks.push_back({static_cast<int>(off), static_cast<int>(off), segs, segs, true});
        cross_blocks.push_back({static_cast<int>(off), gamma_index[b] * cfg.num_slots, segs,
                                std::vector<int>(static_cast<std::size_t>(cfg.num_slots), 0), false});
        int act = -1;
        for (std::size_t i = off + len; i-- > off;) {
            if (layout.merged.tokens[i].kind == tok::TokenKind::act) {
                act = static_cast<int>(i);
                break;
            }
        }
        if (act < 0) {
            throw std::invalid_argument("situation has no ACT token");
        }
        act_rows.push_back(act);
    }
    const Var out = decoder_stack(p, cfg, e, gamma, self_blocks, cross_blocks);
    return {t.gather_rows(out, std::move(act_rows)), e};
}

}  // namespace

template <class S>
Var encode_prompt_var(const BoundParams<S>& params, const ModelConfig& cfg, const tok::TokenSequence& prompt,
                      const ad::Mat<S>* noise) {
    return encode_prompt_impl(params, cfg, prompt, noise);
}

template <class S>
BatchResult<S> batch_loss(const BoundParams<S>& p, const ModelConfig& cfg, const Batch& batch) {
    auto& t = p.tape();
    if (batch.examples.empty() || batch.prompts.empty()) {
        throw std::invalid_argument("empty batch");
    }
    std::vector<Var> gammas;
    for (std::size_t i = 0; i < batch.prompts.size(); ++i) {
        ad::Mat<S> noise;
        const bool noisy = i < batch.slot_noise.size() && batch.slot_noise[i].size() > 0;
        if (noisy) {
            noise = batch.slot_noise[i].template cast<S>();
        }
        gammas.push_back(encode_prompt_impl(p, cfg, *batch.prompts[i], noisy ? &noise : nullptr));
    }
    const Var stacked = gammas.size() == 1 ? gammas.front() : t.concat_rows(gammas);

    std::vector<const tok::TokenSequence*> situations;
    std::vector<int> gamma_index;
    for (const auto& ex : batch.examples) {
        situations.push_back(ex.situation);
        gamma_index.push_back(ex.prompt);
    }
    const Layout layout = lay_out(situations, batch.pad);
    const auto [h, e] = decode_impl(p, cfg, layout, stacked, gamma_index);

    std::vector<ad::SelectItem> items;
    for (std::size_t b = 0; b < batch.examples.size(); ++b) {
        const auto& ex = batch.examples[b];
        ad::SelectItem item;
        item.h_row = static_cast<int>(b);
        for (int pos : ex.eligible) {
            item.rows.push_back(layout.offsets[b] + pos);
        }
        item.target = ex.target;
        items.push_back(std::move(item));
    }
    BatchResult<S> result;
    result.loss = t.select_xent(h, e, std::move(items), &result.scores);
    return result;
}

template BatchResult<float> batch_loss<float>(const BoundParams<float>&, const ModelConfig&, const Batch&);
template BatchResult<double> batch_loss<double>(const BoundParams<double>&, const ModelConfig&, const Batch&);
template BatchResult<long double> batch_loss<long double>(const BoundParams<long double>&, const ModelConfig&,
                                                          const Batch&);
template Var encode_prompt_var<float>(const BoundParams<float>&, const ModelConfig&, const tok::TokenSequence&,
                                      const ad::Mat<float>*);
template Var encode_prompt_var<double>(const BoundParams<double>&, const ModelConfig&, const tok::TokenSequence&,
                                       const ad::Mat<double>*);
template Var encode_prompt_var<long double>(const BoundParams<long double>&, const ModelConfig&,
                                            const tok::TokenSequence&, const ad::Mat<long double>*);

ad::Mat<double> encoder_outputs(const Params& params, const ModelConfig& cfg, const tok::TokenSequence& prompt) {
    ad::Tape<double> tape;
    BoundParams<double> p(tape, params, false);
    const Var e = tok::embed_tokens(p, cfg.encoder, prompt);
    return tape.value(encoder_stack(p, cfg, e, prompt.state_index));
}

ad::Mat<double> encode_prompt(const Params& params, const ModelConfig& cfg, const tok::TokenSequence& prompt,
                              const ad::Mat<double>* noise) {
    ad::Tape<double> tape;
    BoundParams<double> p(tape, params, false);
    return tape.value(encode_prompt_impl(p, cfg, prompt, noise));
}

ad::Mat<double> sample_slot_noise(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    ad::Mat<double> m(cfg.num_slots, cfg.d());
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = rng.normal();
    }
    return m;
}

std::vector<Score> decode_situation(const Params& params, const ModelConfig& cfg, const tok::TokenSequence& situation,
                                    const ad::Mat<double>& gamma) {
    if (situation.final_act() < 0) {
        throw std::invalid_argument("situation has no ACT token");
    }
    ad::Tape<double> tape;
    BoundParams<double> p(tape, params, false);
    const Layout layout = lay_out({&situation}, false);
    const auto [h, e] = decode_impl(p, cfg, layout, tape.constant(gamma), {0});
    const auto& hv = tape.value(h);
    const auto& ev = tape.value(e);
    const double inv = 1.0 / std::sqrt(static_cast<double>(cfg.d()));
    std::vector<Score> out;
    for (const auto& c : situation.candidate_map) {
        out.push_back({c.position, c.instance_id, hv.row(0).dot(ev.row(c.position)) * inv});
    }
    return out;
}

int select_instance(const std::vector<Score>& scores, const std::vector<int>& eligible) {
    if (eligible.empty()) {
        throw std::invalid_argument("select_instance: empty eligible set");
    }
    int best = -1;
    double best_value = 0.0;
    for (const auto& s : scores) {
        if (std::find(eligible.begin(), eligible.end(), s.instance_id) == eligible.end()) {
            continue;
        }
        if (best < 0 || s.value > best_value || (s.value == best_value && s.instance_id < best)) {
            best = s.instance_id;
            best_value = s.value;
        }
    }
    if (best < 0) {
        throw std::invalid_argument("select_instance: no eligible id has a score");
    }
    return best;
}

namespace {

constexpr char kMagic[8] = {'T', 'T', 'P', 'C', 'K', 'P', 'T', '\0'};

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

template <class T>
void put(std::string& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

void put_string(std::string& out, const std::string& s) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out += s;
}

class Reader {
public:
    explicit Reader(const std::string& data) : data_(data) {}

    template <class T>
    T get() {
        need(sizeof(T));
        T value;
        std::memcpy(&value, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }
    std::string get_string() {
        const auto n = get<std::uint32_t>();
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > data_.size()) {
            throw CheckpointError("checkpoint is truncated");
        }
    }
    const std::string& data_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::string out(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kCheckpointVersion);
    KeyValueConfig kv;
    write_config(kv, ckpt.config);
    put_string(out, kv.format());
    put_string(out, ckpt.metadata);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.params.size()));
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
        const auto& m = ckpt.params.values()[i];
        put_string(out, ckpt.params.names()[i]);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
        out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
    }
    put<std::uint64_t>(out, fnv1a(out));
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) {
        throw CheckpointError("cannot open " + path + " for writing");
    }
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) {
        throw CheckpointError("write to " + path + " failed");
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) {
        throw CheckpointError("cannot open " + path);
    }
    std::stringstream buffer;
    buffer << file.rdbuf();
    const std::string data = buffer.str();
    if (data.size() < sizeof(kMagic) + 4 + 8 || std::memcmp(data.data(), kMagic, sizeof(kMagic)) != 0) {
        throw CheckpointError(path + " is not a checkpoint");
    }
    Reader r(data);
    for (std::size_t i = 0; i < sizeof(kMagic); ++i) {
        (void)r.get<char>();
    }
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported");
    }
    Checkpoint ckpt;
    try {
        ckpt.config = read_config(KeyValueConfig::parse(r.get_string()));
    } catch (const CheckpointError&) {
        throw;
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("checkpoint config: ") + e.what());
    }
    ckpt.metadata = r.get_string();
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.get_string();
        const auto rows = r.get<std::uint32_t>();
        const auto cols = r.get<std::uint32_t>();
        ad::Mat<double> m(rows, cols);
        for (Eigen::Index k = 0; k < m.size(); ++k) {
            m.data()[k] = r.get<double>();
        }
        ckpt.params.add(name, std::move(m));
    }
    const std::size_t body = r.pos();
    const auto checksum = r.get<std::uint64_t>();
    if (r.pos() != data.size()) {
        throw CheckpointError("checkpoint has trailing bytes");
    }
    if (checksum != fnv1a(data.substr(0, body))) {
        throw CheckpointError("checkpoint checksum mismatch");
    }
    return ckpt;
}

}  // namespace ttp::model
