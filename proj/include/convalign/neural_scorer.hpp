#pragma once

// Trainable next-sentence-prediction scorer. Context and response share an
// encoder (embedding + positions, transformer block(s), LSTM); a single-head
// cross-attention decoder matches the response against the context and an
// aggregation LSTM feeds a two-way softmax. With the stylebook enabled the
// encoder attention takes its keys and values from a global learned bank
// instead of from the input sequence.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <fstream>
#include <functional>
#include <istream>
#include <memory>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "convalign/dataset.hpp"
#include "convalign/error.hpp"
#include "convalign/eval.hpp"
#include "convalign/nn.hpp"
#include "convalign/rng.hpp"
#include "convalign/tokenizer.hpp"

namespace convalign {

struct ScorerConfig {
    std::size_t vocab_size = kDefaultVocabSize;
    std::size_t embedding_dim = 300;
    std::size_t max_tokens = kDefaultMaxTokens;
    std::size_t encoder_heads = 3;
    std::size_t forward_expansion = 1;
    std::size_t encoder_layers = 2;
    bool share_encoder_layers = false;
    bool stylebook_enabled = true;
    std::size_t stylebook_size = 500;
    bool fc1_enabled = false;
    bool ff_addnorm1_enabled = true;
    bool fc2_enabled = true;
    bool addnorm2_enabled = true;
    std::size_t lstm_encoder_hidden = 1024;
    std::size_t lstm_agg_hidden = 256;
    double dropout = 0.0;
    double learning_rate = 1e-5;
    double weight_decay = 0.01;
    std::size_t batch_size = 32;
    std::size_t patience = 10;
    std::size_t max_epochs = 50;
    std::uint64_t seed = 0;

    // Best validated architecture: 3 heads, expansion 1, two encoder blocks,
    // no FC1, FF/AddNorm1 + FC2 + AddNorm2, LSTM 1024 / 256, batch 32, lr 1e-5.
    static ScorerConfig best_validated(bool stylebook = true) {
        ScorerConfig c;
        c.stylebook_enabled = stylebook;
        return c;
    }

    // Desk-scale model for tests and synthetic runs.
    static ScorerConfig tiny(bool stylebook = false) {
        ScorerConfig c;
        c.vocab_size = 50;
        c.embedding_dim = 8;
        c.encoder_heads = 2;
        c.encoder_layers = 1;
        c.stylebook_enabled = stylebook;
        c.stylebook_size = 6;
        c.lstm_encoder_hidden = 16;
        c.lstm_agg_hidden = 16;
        c.learning_rate = 1e-3;
        c.batch_size = 16;
        c.max_epochs = 30;
        return c;
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw Error(Errc::ConfigInvalid, "scorer config: " + m); };
        if (embedding_dim == 0 || lstm_encoder_hidden == 0 || lstm_agg_hidden == 0 || encoder_heads == 0)
            fail("dimensions and heads must be >= 1");
        if (embedding_dim % encoder_heads != 0) fail("embedding_dim must be divisible by encoder_heads");
        if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
        if (vocab_size <= SpecialTokens::count) fail("vocab_size too small");
        if (max_tokens == 0 || batch_size == 0 || forward_expansion == 0) fail("max_tokens, batch_size, forward_expansion must be >= 1");
        if (stylebook_enabled && stylebook_size == 0) fail("stylebook_size must be >= 1");
        if (!(learning_rate >= 0.0) || !(weight_decay >= 0.0)) fail("learning_rate and weight_decay must be >= 0");
    }

    bool operator==(const ScorerConfig&) const = default;
};

inline void to_json(nlohmann::ordered_json& j, const ScorerConfig& c) {
    j = nlohmann::ordered_json{{"vocab_size", c.vocab_size},
                               {"embedding_dim", c.embedding_dim},
                               {"max_tokens", c.max_tokens},
                               {"encoder_heads", c.encoder_heads},
                               {"forward_expansion", c.forward_expansion},
                               {"encoder_layers", c.encoder_layers},
                               {"share_encoder_layers", c.share_encoder_layers},
                               {"stylebook_enabled", c.stylebook_enabled},
                               {"stylebook_size", c.stylebook_size},
                               {"fc1_enabled", c.fc1_enabled},
                               {"ff_addnorm1_enabled", c.ff_addnorm1_enabled},
                               {"fc2_enabled", c.fc2_enabled},
                               {"addnorm2_enabled", c.addnorm2_enabled},
                               {"lstm_encoder_hidden", c.lstm_encoder_hidden},
                               {"lstm_agg_hidden", c.lstm_agg_hidden},
                               {"dropout", c.dropout},
                               {"learning_rate", c.learning_rate},
                               {"weight_decay", c.weight_decay},
                               {"batch_size", c.batch_size},
                               {"patience", c.patience},
                               {"max_epochs", c.max_epochs},
                               {"seed", c.seed}};
}

template <typename Json>
void from_json(const Json& j, ScorerConfig& c) {
    ScorerConfig d;
    auto get = [&](const char* key, auto& field) {
        if (auto it = j.find(key); it != j.end()) it->get_to(field);
    };
    get("vocab_size", d.vocab_size);
    get("embedding_dim", d.embedding_dim);
    get("max_tokens", d.max_tokens);
    get("encoder_heads", d.encoder_heads);
    get("forward_expansion", d.forward_expansion);
    get("encoder_layers", d.encoder_layers);
    get("share_encoder_layers", d.share_encoder_layers);
    get("stylebook_enabled", d.stylebook_enabled);
    get("stylebook_size", d.stylebook_size);
    get("fc1_enabled", d.fc1_enabled);
    get("ff_addnorm1_enabled", d.ff_addnorm1_enabled);
    get("fc2_enabled", d.fc2_enabled);
    get("addnorm2_enabled", d.addnorm2_enabled);
    get("lstm_encoder_hidden", d.lstm_encoder_hidden);
    get("lstm_agg_hidden", d.lstm_agg_hidden);
    get("dropout", d.dropout);
    get("learning_rate", d.learning_rate);
    get("weight_decay", d.weight_decay);
    get("batch_size", d.batch_size);
    get("patience", d.patience);
    get("max_epochs", d.max_epochs);
    get("seed", d.seed);
    c = d;
}

// A tokenized (context, response) example.
struct EncodedPair {
    std::string pair_id;
    std::vector<TokenId> context;
    std::vector<TokenId> response;
    Label label = Label::Negative;
};

class NeuralModel {
public:
    using Matrix = nn::Matrix;

    explicit NeuralModel(const ScorerConfig& config) : config_(config) {
        config_.validate();
        build();
        initialize();
    }

    const ScorerConfig& config() const noexcept { return config_; }
    nn::ParameterSet& parameters() noexcept { return params_; }
    const nn::ParameterSet& parameters() const noexcept { return params_; }

    void set_parameters(const nn::ParameterSet& p) {
        if (p.size() != params_.size()) throw Error(Errc::ShapeMismatch, "parameter count differs from config");
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (p.name(i) != params_.name(i) || p[i].rows() != params_[i].rows() || p[i].cols() != params_[i].cols())
                throw Error(Errc::ShapeMismatch, "parameter " + p.name(i) + " does not match the config");
        }
        params_ = p;
    }

    // Per-batch state: stylebook key/value projections computed once for the
    // current parameters, with their gradients accumulated across samples.
    struct Session {
        Matrix bank_keys;                // S x d, key projection of the bank
        std::vector<Matrix> layer_k, layer_v;
        std::vector<Matrix> grad_k, grad_v;
    };

    Session begin() const {
        Session s;
        if (!config_.stylebook_enabled) return s;
        const auto& p = params_;
        s.bank_keys = stylebook_key_.forward(p, p[stylebook_values_]);
        for (const auto& layer : layers_) {
            s.layer_k.push_back(layer.wk.forward(p, s.bank_keys));
            s.layer_v.push_back(layer.wv.forward(p, p[stylebook_values_]));
            s.grad_k.push_back(Matrix::Zero(s.layer_k.back().rows(), s.layer_k.back().cols()));
            s.grad_v.push_back(Matrix::Zero(s.layer_v.back().rows(), s.layer_v.back().cols()));
        }
        return s;
    }

    // Pushes the accumulated bank gradients into `grads`.
    void finish(const Session& s, nn::ParameterSet& grads) const {
        if (!config_.stylebook_enabled) return;
        const auto& p = params_;
        Matrix d_keys = Matrix::Zero(s.bank_keys.rows(), s.bank_keys.cols());
        Matrix d_values = Matrix::Zero(p[stylebook_values_].rows(), p[stylebook_values_].cols());
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            d_keys += layers_[l].wk.backward(p, grads, s.bank_keys, s.grad_k[l]);
            d_values += layers_[l].wv.backward(p, grads, p[stylebook_values_], s.grad_v[l]);
        }
        d_values += stylebook_key_.backward(p, grads, p[stylebook_values_], d_keys);
        grads[stylebook_values_] += d_values;
    }

    // Softmax over (false, true).
    std::array<double, 2> predict(const Session& s, const EncodedPair& pair) const {
        Session& scratch = const_cast<Session&>(s); // forward-only use leaves grads untouched
        ForwardState st;
        const Matrix logits = forward(scratch, pair, st, nullptr);
        return softmax2(logits);
    }

    // Adds d(weight * CE)/dparams into grads; returns the unweighted loss.
    double forward_backward(Session& s, const EncodedPair& pair, nn::ParameterSet& grads, double weight,
                            Rng* dropout_rng = nullptr) const {
        ForwardState st;
        const Matrix logits = forward(s, pair, st, dropout_rng);
        const auto probs = softmax2(logits);
        const int y = pair.label == Label::Positive ? 1 : 0;
        const double mx = std::max(logits(0, 0), logits(0, 1));
        const double loss = -(logits(0, y) - mx - std::log(std::exp(logits(0, 0) - mx) + std::exp(logits(0, 1) - mx)));
        Matrix dlogits(1, 2);
        dlogits(0, 0) = weight * (probs[0] - (y == 0 ? 1.0 : 0.0));
        dlogits(0, 1) = weight * (probs[1] - (y == 1 ? 1.0 : 0.0));
        backward(s, st, dlogits, grads);
        return loss;
    }

    double loss(const std::vector<EncodedPair>& pairs) const {
        Session s = begin();
        double total = 0.0;
        for (const auto& p : pairs) {
            const auto pr = predict(s, p);
            total -= std::log(pr[p.label == Label::Positive ? 1 : 0]);
        }
        return total;
    }

private:
    struct EncoderLayer {
        nn::Linear wq, wk, wv, wo, fc1, ff1, ff2;
        nn::LayerNorm ln1, ln2;
    };

    struct LayerCache {
        Matrix x, q, k, v, attn, a_pre_fc1, mask_a, h1, ff_pre, ff_act, mask_f;
        nn::AttentionCache att;
        nn::LayerNorm::Cache ln1, ln2;
    };

    struct EncodeCache {
        std::vector<TokenId> ids;
        Matrix mask0;
        std::vector<LayerCache> layers;
        Matrix lstm_in;
        nn::Lstm::Cache lstm;
    };

    struct ForwardState {
        EncodeCache ctx, resp;
        Matrix c_enc, r_enc, qd, kd, vd, m, mask_m, m2, m3, agg_last;
        nn::AttentionCache datt;
        nn::LayerNorm::Cache ln_dec;
        nn::Lstm::Cache agg;
    };

    static std::array<double, 2> softmax2(const Matrix& logits) {
        const double mx = std::max(logits(0, 0), logits(0, 1));
        const double e0 = std::exp(logits(0, 0) - mx), e1 = std::exp(logits(0, 1) - mx);
        return {e0 / (e0 + e1), e1 / (e0 + e1)};
    }

    void build() {
        const auto d = static_cast<Eigen::Index>(config_.embedding_dim);
        const auto inner = d * static_cast<Eigen::Index>(config_.forward_expansion);
        const auto he = static_cast<Eigen::Index>(config_.lstm_encoder_hidden);
        const auto ha = static_cast<Eigen::Index>(config_.lstm_agg_hidden);
        auto& p = params_;
        embedding_ = p.add("embedding", static_cast<Eigen::Index>(config_.vocab_size), d);
        positions_ = nn::sinusoidal_positions(static_cast<Eigen::Index>(config_.max_tokens), d);
        const std::size_t distinct = config_.share_encoder_layers ? 1 : config_.encoder_layers;
        std::vector<EncoderLayer> unique;
        for (std::size_t l = 0; l < distinct; ++l) {
            const std::string n = "encoder" + std::to_string(l);
            EncoderLayer L;
            L.wq = nn::Linear::create(p, n + ".attn.q", d, d);
            L.wk = nn::Linear::create(p, n + ".attn.k", d, d);
            L.wv = nn::Linear::create(p, n + ".attn.v", d, d);
            L.wo = nn::Linear::create(p, n + ".attn.out", d, d);
            if (config_.fc1_enabled) L.fc1 = nn::Linear::create(p, n + ".fc1", d, d);
            L.ln1 = nn::LayerNorm::create(p, n + ".addnorm1", d);
            if (config_.ff_addnorm1_enabled) {
                L.ff1 = nn::Linear::create(p, n + ".ff.in", d, inner);
                L.ff2 = nn::Linear::create(p, n + ".ff.out", inner, d);
                L.ln2 = nn::LayerNorm::create(p, n + ".ff.addnorm", d);
            }
            unique.push_back(L);
        }
        for (std::size_t l = 0; l < config_.encoder_layers; ++l)
            layers_.push_back(unique[config_.share_encoder_layers ? 0 : l]);
        if (config_.stylebook_enabled) {
            stylebook_values_ = p.add("stylebook.values", static_cast<Eigen::Index>(config_.stylebook_size), d);
            stylebook_key_ = nn::Linear::create(p, "stylebook.key", d, d);
        }
        lstm_encoder_ = nn::Lstm::create(p, "lstm_encoder", d, he);
        dec_q_ = nn::Linear::create(p, "decoder.q", he, d);
        dec_k_ = nn::Linear::create(p, "decoder.k", he, d);
        dec_v_ = nn::Linear::create(p, "decoder.v", he, d);
        if (config_.fc2_enabled) fc2_ = nn::Linear::create(p, "decoder.fc2", d, d);
        if (config_.addnorm2_enabled) ln_dec_ = nn::LayerNorm::create(p, "decoder.addnorm2", d);
        lstm_agg_ = nn::Lstm::create(p, "lstm_aggregation", d, ha);
        out_ = nn::Linear::create(p, "output", ha, 2);
    }

    // Every tensor draws from its own stream keyed by name, so toggling the
    // stylebook leaves all other initial values unchanged.
    void initialize() {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const std::string& name = params_.name(i);
            auto& m = params_[i];
            const std::uint64_t seed = derive_seed(config_.seed, name);
            const bool is_gamma = name.size() > 6 && name.compare(name.size() - 6, 6, ".gamma") == 0;
            const bool is_beta = name.size() > 5 && name.compare(name.size() - 5, 5, ".beta") == 0;
            if (is_gamma) {
                m.setOnes();
            } else if (is_beta) {
                m.setZero();
            } else if (name == "stylebook.values") {
                nn::init_normal(m, 1.0, seed);
            } else if (name == "embedding") {
                nn::init_uniform(m, 1.0, seed);
            } else if (name.find("lstm") == 0) {
                const auto hidden = name.find("encoder") != std::string::npos ? config_.lstm_encoder_hidden
                                                                                 : config_.lstm_agg_hidden;
                nn::init_uniform(m, 1.0 / std::sqrt(static_cast<double>(hidden)), seed);
            } else {
                // Linear: fan-in is the row count of the weight of the same layer.
                const std::string base = name.substr(0, name.rfind('.'));
                const auto w = params_.find(base + ".w");
                const double fan_in = w ? static_cast<double>(params_[*w].rows()) : static_cast<double>(m.rows());
                nn::init_uniform(m, 1.0 / std::sqrt(fan_in), seed);
            }
        }
    }

    Matrix embed(const std::vector<TokenId>& ids) const {
        const auto& E = params_[embedding_];
        const auto n = static_cast<Eigen::Index>(ids.size());
        Matrix x(n, E.cols());
        for (Eigen::Index t = 0; t < n; ++t) {
            const auto id = ids[static_cast<std::size_t>(t)];
            if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size)
                throw Error(Errc::ShapeMismatch, "token id " + std::to_string(id) + " outside the embedding table");
            x.row(t) = E.row(id) + positions_.row(t);
        }
        return x;
    }

    Matrix layer_forward(std::size_t l, Session& s, const Matrix& x, LayerCache& c, Rng* rng) const {
        const auto& L = layers_[l];
        const auto& p = params_;
        c.x = x;
        c.q = L.wq.forward(p, x);
        if (config_.stylebook_enabled) {
            c.attn = nn::attend(c.q, s.layer_k[l], s.layer_v[l], config_.encoder_heads, c.att);
        } else {
            c.k = L.wk.forward(p, x);
            c.v = L.wv.forward(p, x);
            c.attn = nn::attend(c.q, c.k, c.v, config_.encoder_heads, c.att);
        }
        Matrix a = L.wo.forward(p, c.attn);
        if (config_.fc1_enabled) {
            c.a_pre_fc1 = a;
            a = L.fc1.forward(p, a);
        }
        c.mask_a = nn::dropout_mask(a.rows(), a.cols(), config_.dropout, rng);
        a = nn::apply_mask(a, c.mask_a);
        c.h1 = L.ln1.forward(p, x + a, c.ln1);
        if (!config_.ff_addnorm1_enabled) return c.h1;
        c.ff_pre = L.ff1.forward(p, c.h1);
        c.ff_act = nn::gelu(c.ff_pre);
        Matrix f = L.ff2.forward(p, c.ff_act);
        c.mask_f = nn::dropout_mask(f.rows(), f.cols(), config_.dropout, rng);
        f = nn::apply_mask(f, c.mask_f);
        return L.ln2.forward(p, c.h1 + f, c.ln2);
    }

    Matrix layer_backward(std::size_t l, Session& s, const LayerCache& c, const Matrix& dout,
                          nn::ParameterSet& g) const {
        const auto& L = layers_[l];
        const auto& p = params_;
        Matrix dh1;
        if (config_.ff_addnorm1_enabled) {
            const Matrix ds2 = L.ln2.backward(p, g, c.ln2, dout);
            const Matrix df = nn::apply_mask(ds2, c.mask_f);
            const Matrix dact = L.ff2.backward(p, g, c.ff_act, df);
            dh1 = ds2 + L.ff1.backward(p, g, c.h1, nn::gelu_backward(c.ff_pre, dact));
        } else {
            dh1 = dout;
        }
        const Matrix ds1 = L.ln1.backward(p, g, c.ln1, dh1);
        Matrix dx = ds1;
        Matrix da = nn::apply_mask(ds1, c.mask_a);
        if (config_.fc1_enabled) da = L.fc1.backward(p, g, c.a_pre_fc1, da);
        const Matrix dattn = L.wo.backward(p, g, c.attn, da);
        Matrix dq, dk, dv;
        if (config_.stylebook_enabled) {
            nn::attend_backward(c.q, s.layer_k[l], s.layer_v[l], config_.encoder_heads, c.att, dattn, dq, dk, dv);
            s.grad_k[l] += dk;
            s.grad_v[l] += dv;
        } else {
            nn::attend_backward(c.q, c.k, c.v, config_.encoder_heads, c.att, dattn, dq, dk, dv);
            dx += L.wk.backward(p, g, c.x, dk);
            dx += L.wv.backward(p, g, c.x, dv);
        }
        dx += L.wq.backward(p, g, c.x, dq);
        return dx;
    }

    Matrix encode(Session& s, const std::vector<TokenId>& ids, EncodeCache& c, Rng* rng) const {
        c.ids = ids;
        Matrix x = embed(ids);
        c.mask0 = nn::dropout_mask(x.rows(), x.cols(), config_.dropout, rng);
        x = nn::apply_mask(x, c.mask0);
        c.layers.resize(layers_.size());
        for (std::size_t l = 0; l < layers_.size(); ++l) x = layer_forward(l, s, x, c.layers[l], rng);
        c.lstm_in = x;
        return lstm_encoder_.forward(params_, x, c.lstm);
    }

    void encode_backward(Session& s, const EncodeCache& c, const Matrix& denc, nn::ParameterSet& g) const {
        Matrix dx = lstm_encoder_.backward(params_, g, c.lstm, denc);
        for (std::size_t l = layers_.size(); l-- > 0;) dx = layer_backward(l, s, c.layers[l], dx, g);
        dx = nn::apply_mask(dx, c.mask0);
        auto& dE = g[embedding_];
        for (Eigen::Index t = 0; t < dx.rows(); ++t) dE.row(c.ids[static_cast<std::size_t>(t)]) += dx.row(t);
    }

    std::vector<TokenId> prepared(const std::vector<TokenId>& ids, bool keep_tail) const {
        if (ids.empty()) return {SpecialTokens::pad};
        if (ids.size() <= config_.max_tokens) return ids;
        return keep_tail ? std::vector<TokenId>(ids.end() - static_cast<std::ptrdiff_t>(config_.max_tokens), ids.end())
                         : std::vector<TokenId>(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(config_.max_tokens));
    }

    Matrix forward(Session& s, const EncodedPair& pair, ForwardState& st, Rng* rng) const {
        const auto& p = params_;
        st.c_enc = encode(s, prepared(pair.context, true), st.ctx, rng);
        st.r_enc = encode(s, prepared(pair.response, false), st.resp, rng);
        st.qd = dec_q_.forward(p, st.r_enc);
        st.kd = dec_k_.forward(p, st.c_enc);
        st.vd = dec_v_.forward(p, st.c_enc);
        st.m = nn::attend(st.qd, st.kd, st.vd, 1, st.datt);
        st.mask_m = nn::dropout_mask(st.m.rows(), st.m.cols(), config_.dropout, rng);
        st.m = nn::apply_mask(st.m, st.mask_m);
        st.m2 = config_.fc2_enabled ? fc2_.forward(p, st.m) : st.m;
        st.m3 = config_.addnorm2_enabled ? ln_dec_.forward(p, st.qd + st.m2, st.ln_dec) : st.m2;
        const Matrix agg = lstm_agg_.forward(p, st.m3, st.agg);
        st.agg_last = agg.bottomRows(1);
        return out_.forward(p, st.agg_last);
    }

    void backward(Session& s, const ForwardState& st, const Matrix& dlogits, nn::ParameterSet& g) const {
        const auto& p = params_;
        const Matrix dlast = out_.backward(p, g, st.agg_last, dlogits);
        Matrix dagg = Matrix::Zero(st.m3.rows(), static_cast<Eigen::Index>(config_.lstm_agg_hidden));
        dagg.bottomRows(1) = dlast;
        const Matrix dm3 = lstm_agg_.backward(p, g, st.agg, dagg);
        Matrix dqd = Matrix::Zero(st.qd.rows(), st.qd.cols());
        Matrix dm2;
        if (config_.addnorm2_enabled) {
            dm2 = ln_dec_.backward(p, g, st.ln_dec, dm3);
            dqd += dm2;
        } else {
            dm2 = dm3;
        }
        Matrix dm = config_.fc2_enabled ? fc2_.backward(p, g, st.m, dm2) : dm2;
        dm = nn::apply_mask(dm, st.mask_m);
        Matrix dq, dk, dv;
        nn::attend_backward(st.qd, st.kd, st.vd, 1, st.datt, dm, dq, dk, dv);
        dqd += dq;
        const Matrix dr = dec_q_.backward(p, g, st.r_enc, dqd);
        Matrix dc = dec_k_.backward(p, g, st.c_enc, dk);
        dc += dec_v_.backward(p, g, st.c_enc, dv);
        encode_backward(s, st.resp, dr, g);
        encode_backward(s, st.ctx, dc, g);
    }

    ScorerConfig config_;
    nn::ParameterSet params_;
    Matrix positions_;
    std::size_t embedding_ = 0;
    std::vector<EncoderLayer> layers_;
    std::size_t stylebook_values_ = 0;
    nn::Linear stylebook_key_;
    nn::Lstm lstm_encoder_;
    nn::Linear dec_q_, dec_k_, dec_v_, fc2_;
    nn::LayerNorm ln_dec_;
    nn::Lstm lstm_agg_;
    nn::Linear out_;
};

// ---------------------------------------------------------------------------
// Optimizer

class AdamW {
public:
    AdamW(const nn::ParameterSet& like, double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8)
        : m_(like.zeros_like()), v_(like.zeros_like()), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(nn::ParameterSet& params, const nn::ParameterSet& grads) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& m = m_[i];
            auto& v = v_[i];
            const auto& g = grads[i];
            m = b1_ * m + (1.0 - b1_) * g;
            v = b2_ * v + (1.0 - b2_) * g.cwiseProduct(g);
            auto& w = params[i];
            w.array() -= lr_ * ((m.array() / c1) / ((v.array() / c2).sqrt() + eps_) + wd_ * w.array());
        }
    }

private:
    nn::ParameterSet m_, v_;
    double lr_, wd_, b1_, b2_, eps_;
    std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Inference helpers

// Runs fn(i) for i in [0, n) over `jobs` threads; results must be written to
// pre-sized slots so the outcome is independent of scheduling.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(jobs);
    for (std::size_t w = 0; w < jobs; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += jobs) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline std::vector<double> predict_all(const NeuralModel& model, const std::vector<EncodedPair>& pairs,
                                       std::size_t jobs = 1) {
    const auto session = model.begin();
    std::vector<double> out(pairs.size());
    parallel_for(pairs.size(), jobs, [&](std::size_t i) { out[i] = model.predict(session, pairs[i])[1]; });
    return out;
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
    std::size_t epoch = 0; // 1-based
    double train_loss = 0.0;
    double train_recall1 = 0.0; // n = 2 sets built from the epoch's forward passes
    double val_recall1 = 0.0;   // n = 10 validation sets
    bool improved = false;
};

struct TrainingResult {
    nn::ParameterSet best_parameters;
    std::size_t best_epoch = 0;
    double best_val_recall1 = 0.0;
    std::vector<EpochRecord> history;
    std::string stop_reason;
};

struct TrainingOptions {
    std::size_t jobs = 1; // validation inference only; gradient reduction stays sequential
    std::function<void(const EpochRecord&)> on_epoch;
};

inline double recall1_of(const std::vector<EncodedPair>& pairs, const std::vector<double>& probs,
                         const std::vector<CandidateSet>& sets) {
    PredictionIndex idx;
    idx.reserve(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) idx[pairs[i].pair_id] = probs[i];
    return recall_at_k(idx, sets, 1);
}

inline std::vector<CandidateSet> candidate_sets(const std::vector<EncodedPair>& pairs) {
    std::vector<ContextResponsePair> shells;
    shells.reserve(pairs.size());
    for (const auto& p : pairs) {
        ContextResponsePair c;
        c.pair_id = p.pair_id;
        c.label = p.label;
        shells.push_back(std::move(c));
    }
    return candidate_sets(shells);
}

// Minimizes cross-entropy with AdamW; after each epoch the validation
// recall@1 is measured and training stops once it has not improved for
// `patience` epochs (or at max_epochs). The model is left holding the
// parameters of the best validation epoch.
inline TrainingResult train_scorer(NeuralModel& model, const std::vector<EncodedPair>& train,
                                   const std::vector<EncodedPair>& val, const TrainingOptions& options = {}) {
    const auto& cfg = model.config();
    if (train.empty() || val.empty()) throw Error(Errc::MissingInput, "training needs train and val pairs");
    const auto train_sets = candidate_sets(train);
    const auto val_sets = candidate_sets(val);

    TrainingResult result;
    result.best_parameters = model.parameters();
    AdamW opt(model.parameters(), cfg.learning_rate, cfg.weight_decay);
    Rng shuffle_rng(derive_seed(cfg.seed, "train/shuffle"));
    Rng dropout_rng(derive_seed(cfg.seed, "train/dropout"));
    Rng* drop = cfg.dropout > 0.0 ? &dropout_rng : nullptr;
    nn::ParameterSet grads = model.parameters().zeros_like();
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<double> train_probs(train.size());
    bool have_best = false;

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const double weight = 1.0 / static_cast<double>(end - start);
            grads.set_zero();
            auto session = model.begin();
            double batch_loss = 0.0;
            for (std::size_t b = start; b < end; ++b) {
                const auto& pair = train[order[b]];
                const double l = model.forward_backward(session, pair, grads, weight, drop);
                train_probs[order[b]] = pair.label == Label::Positive ? std::exp(-l) : -std::expm1(-l);
                batch_loss += l;
            }
            model.finish(session, grads);
            if (!std::isfinite(batch_loss) || !grads.all_finite())
                throw Error(Errc::Diverged, "non-finite loss or gradient in epoch " + std::to_string(epoch));
            opt.step(model.parameters(), grads);
            if (!model.parameters().all_finite())
                throw Error(Errc::Diverged, "non-finite parameters in epoch " + std::to_string(epoch));
            loss_sum += batch_loss;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(train.size());
        rec.train_recall1 = recall1_of(train, train_probs, train_sets);
        rec.val_recall1 = recall1_of(val, predict_all(model, val, options.jobs), val_sets);
        if (!have_best || rec.val_recall1 > result.best_val_recall1) {
            rec.improved = true;
            have_best = true;
            result.best_val_recall1 = rec.val_recall1;
            result.best_epoch = epoch;
            result.best_parameters = model.parameters();
        }
        result.history.push_back(rec);
        if (options.on_epoch) options.on_epoch(rec);
        if (epoch - result.best_epoch >= cfg.patience) {
            result.stop_reason = "patience";
            break;
        }
    }
    if (result.stop_reason.empty()) result.stop_reason = "max_epochs";
    model.set_parameters(result.best_parameters);
    return result;
}

inline void write_history_csv(const TrainingResult& r, std::ostream& out) {
    out << "epoch,train_loss,train_recall@1,val_recall@1,improved\n";
    char buf[128];
    for (const auto& e : r.history) {
        std::snprintf(buf, sizeof buf, "%zu,%.8f,%.6f,%.6f,%d\n", e.epoch, e.train_loss, e.train_recall1,
                      e.val_recall1, e.improved ? 1 : 0);
        out << buf;
    }
}

// ---------------------------------------------------------------------------
// Checkpoint: JSON with a mandatory version, the config echo, the vocabulary
// and every parameter tensor as row-major data.

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::ordered_json checkpoint_json(const NeuralModel& model, const SubwordVocab& vocab) {
    nlohmann::ordered_json j;
    j["format"] = "convalign-checkpoint";
    j["version"] = kCheckpointVersion;
    j["config"] = model.config();
    j["vocab"] = vocab.to_string();
    auto tensors = nlohmann::ordered_json::array();
    const auto& p = model.parameters();
    for (std::size_t i = 0; i < p.size(); ++i) {
        std::vector<double> data;
        data.reserve(static_cast<std::size_t>(p[i].size()));
        for (Eigen::Index r = 0; r < p[i].rows(); ++r)
            for (Eigen::Index c = 0; c < p[i].cols(); ++c) data.push_back(p[i](r, c));
        tensors.push_back({{"name", p.name(i)}, {"rows", p[i].rows()}, {"cols", p[i].cols()}, {"data", std::move(data)}});
    }
    j["parameters"] = std::move(tensors);
    return j;
}

struct LoadedCheckpoint {
    std::unique_ptr<NeuralModel> model;
    std::shared_ptr<SubwordVocab> vocab;
};

inline LoadedCheckpoint load_checkpoint(const nlohmann::json& j) {
    if (j.value("format", "") != "convalign-checkpoint") throw Error(Errc::MalformedDocument, "not a checkpoint");
    if (!j.contains("version") || j["version"].get<int>() != kCheckpointVersion)
        throw Error(Errc::MalformedDocument, "unsupported checkpoint version");
    ScorerConfig cfg = j.at("config").get<ScorerConfig>();
    LoadedCheckpoint out;
    out.vocab = std::make_shared<SubwordVocab>(SubwordVocab::from_string(j.at("vocab").get<std::string>()));
    out.model = std::make_unique<NeuralModel>(cfg);
    nn::ParameterSet params = out.model->parameters();
    const auto& tensors = j.at("parameters");
    if (tensors.size() != params.size()) throw Error(Errc::ShapeMismatch, "checkpoint tensor count differs from config");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& t = tensors[i];
        if (t.at("name").get<std::string>() != params.name(i) || t.at("rows").get<Eigen::Index>() != params[i].rows() ||
            t.at("cols").get<Eigen::Index>() != params[i].cols())
            throw Error(Errc::ShapeMismatch, "checkpoint tensor " + params.name(i) + " does not match the config");
        const auto data = t.at("data").get<std::vector<double>>();
        if (static_cast<Eigen::Index>(data.size()) != params[i].size())
            throw Error(Errc::ShapeMismatch, "checkpoint tensor " + params.name(i) + " has wrong length");
        std::size_t k = 0;
        for (Eigen::Index r = 0; r < params[i].rows(); ++r)
            for (Eigen::Index c = 0; c < params[i].cols(); ++c) params[i](r, c) = data[k++];
    }
    out.model->set_parameters(params);
    return out;
}

} // namespace convalign
