#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "vsens/optim.hpp"
#include "vsens/relevance.hpp"
#include "vsens/rng.hpp"
#include "vsens/tensor.hpp"
#include "vsens/tokenizer.hpp"

namespace vsens {

// Decoding semantics of a virtual-sensor token. Under `forecast` a token at
// slot t predicts patch t+1 (the prototype sits at the context frontier);
// under `nowcast` it predicts its own slot, so a prototype is computed from
// the concurrent input patches like a classical virtual sensor. Both
// readings are consistent with autoregressive generation; the mode is part
// of the model configuration and travels with checkpoints.
enum class decoding_mode { forecast, nowcast };

struct model_config {
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t dim = 64;      // token dimension d
    std::size_t hidden = 64;   // MLP hidden width (patch MLP, FFN, output head)
    std::size_t patch_len = 16;
    double dropout = 0.0;
    decoding_mode decoding = decoding_mode::forecast;

    std::size_t head_dim() const { return dim / heads; }
    void validate() const {
        if (layers == 0 || heads == 0 || dim == 0 || hidden == 0 || patch_len == 0)
            throw std::invalid_argument("model_config: all dimensions must be positive");
        if (dim % heads != 0)
            throw std::invalid_argument("model_config: dim " + std::to_string(dim) +
                                        " not divisible by heads " + std::to_string(heads));
        if (dim % 2 != 0) throw std::invalid_argument("model_config: dim must be even");
        if (dropout < 0.0 || dropout >= 1.0)
            throw std::invalid_argument("model_config: dropout must be in [0, 1)");
    }
};

// Dropout on attention weights and FFN hidden activations during training;
// inactive when gen is null (inference).
struct dropout_ctx {
    double rate = 0.0;
    rng* gen = nullptr;
    bool active() const { return rate > 0.0 && gen != nullptr; }
};

// Global forward-pass counter, asserted by the training-strategy contract
// (one pass per teacher-forcing step, K per BPTT step).
inline std::uint64_t& forward_pass_counter() {
    static std::uint64_t n = 0;
    return n;
}

template <class T>
struct layer_params {
    // no key bias: it shifts every score in a row equally and cancels
    // under softmax, leaving a parameter with identically zero gradient
    tensor<T> wq, bq, wk, wv, bv, wo, bo;
    tensor<T> ff_w1, ff_b1, ff_w2, ff_b2;      // feed-forward
    tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;      // pre-norm gains/offsets
};

// All trainable state: embedding tables, transformer layers, final norm, and
// the relevance table. The parameter count is independent of which sensors a
// request selects.
template <class T>
struct model_params {
    model_config cfg;
    std::size_t m = 0;  // input signals
    std::size_t n = 0;  // virtual sensors

    embedding_tables<T> emb;
    std::vector<layer_params<T>> layers;
    tensor<T> lnf_g, lnf_b;
    relevance_table<T> relevance;

    static model_params init(const model_config& cfg, std::size_t m, std::size_t n, rng& gen) {
        cfg.validate();
        if (m == 0 || n == 0) throw std::invalid_argument("model_params: m and n must be positive");
        model_params p;
        p.cfg = cfg;
        p.m = m;
        p.n = n;

        auto glorot = [&gen](std::size_t rows, std::size_t cols) {
            tensor<T> t = tensor<T>::zeros({rows, cols}, true);
            const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
            for (std::size_t i = 0; i < t.numel(); ++i)
                t.data()[i] = static_cast<T>(gen.uniform(-a, a));
            return t;
        };
        auto row_zeros = [](std::size_t n_) { return tensor<T>::zeros({1, n_}, true); };
        auto row_ones = [](std::size_t n_) { return tensor<T>::full({1, n_}, T(1), true); };
        auto small_normal = [&gen](std::size_t rows, std::size_t cols) {
            tensor<T> t = tensor<T>::zeros({rows, cols}, true);
            for (std::size_t i = 0; i < t.numel(); ++i)
                t.data()[i] = static_cast<T>(0.02 * gen.normal());
            return t;
        };

        p.emb.patch_w1 = glorot(cfg.patch_len, cfg.hidden);
        p.emb.patch_b1 = row_zeros(cfg.hidden);
        p.emb.patch_w2 = glorot(cfg.hidden, cfg.dim);
        p.emb.patch_b2 = row_zeros(cfg.dim);
        p.emb.variate_in = small_normal(m, cfg.dim);
        p.emb.variate_virtual = small_normal(n, cfg.dim);
        p.emb.head_w1 = glorot(cfg.dim, cfg.hidden);
        p.emb.head_b1 = row_zeros(cfg.hidden);
        p.emb.head_w2 = glorot(cfg.hidden, cfg.patch_len);
        p.emb.head_b2 = row_zeros(cfg.patch_len);

        p.layers.resize(cfg.layers);
        for (auto& l : p.layers) {
            l.wq = glorot(cfg.dim, cfg.dim);
            l.bq = row_zeros(cfg.dim);
            l.wk = glorot(cfg.dim, cfg.dim);
            l.wv = glorot(cfg.dim, cfg.dim);
            l.bv = row_zeros(cfg.dim);
            l.wo = glorot(cfg.dim, cfg.dim);
            l.bo = row_zeros(cfg.dim);
            l.ff_w1 = glorot(cfg.dim, cfg.hidden);
            l.ff_b1 = row_zeros(cfg.hidden);
            l.ff_w2 = glorot(cfg.hidden, cfg.dim);
            l.ff_b2 = row_zeros(cfg.dim);
            l.ln1_g = row_ones(cfg.dim);
            l.ln1_b = row_zeros(cfg.dim);
            l.ln2_g = row_ones(cfg.dim);
            l.ln2_b = row_zeros(cfg.dim);
        }
        p.lnf_g = row_ones(cfg.dim);
        p.lnf_b = row_zeros(cfg.dim);
        p.relevance = relevance_table<T>::make(n, m + n);
        return p;
    }

    named_params<T> parameters() {
        named_params<T> out;
        auto put = [&out](const std::string& name, tensor<T>& t) { out.emplace_back(name, &t); };
        put("emb.patch_w1", emb.patch_w1);
        put("emb.patch_b1", emb.patch_b1);
        put("emb.patch_w2", emb.patch_w2);
        put("emb.patch_b2", emb.patch_b2);
        put("emb.variate_in", emb.variate_in);
        put("emb.variate_virtual", emb.variate_virtual);
        put("emb.head_w1", emb.head_w1);
        put("emb.head_b1", emb.head_b1);
        put("emb.head_w2", emb.head_w2);
        put("emb.head_b2", emb.head_b2);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string pre = "layer" + std::to_string(l) + ".";
            put(pre + "wq", layers[l].wq);
            put(pre + "bq", layers[l].bq);
            put(pre + "wk", layers[l].wk);
            put(pre + "wv", layers[l].wv);
            put(pre + "bv", layers[l].bv);
            put(pre + "wo", layers[l].wo);
            put(pre + "bo", layers[l].bo);
            put(pre + "ff_w1", layers[l].ff_w1);
            put(pre + "ff_b1", layers[l].ff_b1);
            put(pre + "ff_w2", layers[l].ff_w2);
            put(pre + "ff_b2", layers[l].ff_b2);
            put(pre + "ln1_g", layers[l].ln1_g);
            put(pre + "ln1_b", layers[l].ln1_b);
            put(pre + "ln2_g", layers[l].ln2_g);
            put(pre + "ln2_b", layers[l].ln2_b);
        }
        put("lnf_g", lnf_g);
        put("lnf_b", lnf_b);
        put("relevance", relevance.rows);
        return out;
    }

    std::size_t param_count() {
        std::size_t total = 0;
        for (auto& [name, t] : parameters()) {
            (void)name;
            total += t->numel();
        }
        return total;
    }
};

// ---------------------------------------------------------------------------
// masking and attention
// ---------------------------------------------------------------------------

// Block-causal allow-matrix: token a may attend to token b iff
// slot(b) <= slot(a). Same-slot attention is permitted so prototype tokens
// see the concurrent input patches.
inline bool_matrix causal_mask(const std::vector<std::size_t>& slot_of) {
    const std::size_t s = slot_of.size();
    bool_matrix mask = bool_matrix::full(s, s, false);
    for (std::size_t a = 0; a < s; ++a)
        for (std::size_t b = 0; b < s; ++b)
            if (slot_of[b] <= slot_of[a]) mask.set(a, b, true);
    return mask;
}

namespace detail {

template <class T>
tensor<T> dropout_mask(std::size_t rows, std::size_t cols, const dropout_ctx& dc) {
    tensor<T> mask = tensor<T>::zeros({rows, cols});
    const T keep_scale = static_cast<T>(1.0 / (1.0 - dc.rate));
    for (std::size_t i = 0; i < mask.numel(); ++i)
        mask.data()[i] = dc.gen->uniform() < dc.rate ? T(0) : keep_scale;
    return mask;
}

} // namespace detail

// Multi-head scaled dot-product attention with the relevance bias added to
// the scores of every head after the 1/sqrt(d_k) scaling (bias may be
// undefined for the bias-free model). Residual and pre-norm belong to the
// caller block.
template <class T>
tensor<T> attention_layer(const tensor<T>& x, const layer_params<T>& lp, const model_config& cfg,
                          const tensor<T>& bias, const bool_matrix& mask,
                          const dropout_ctx& dc = {}) {
    const auto [s, d] = x.as2d();
    if (d != cfg.dim) throw std::invalid_argument("attention_layer: token dim mismatch");
    if (mask.rows != s || mask.cols != s)
        throw std::invalid_argument("attention_layer: mask must be s x s");
    if (bias.defined() && bias.as2d() != std::pair<std::size_t, std::size_t>{s, s})
        throw std::invalid_argument("attention_layer: bias must be s x s, got " +
                                    shape_str(bias.shape()));

    tensor<T> q = add_rowvec(matmul(x, lp.wq), lp.bq);
    tensor<T> k = matmul(x, lp.wk);
    tensor<T> v = add_rowvec(matmul(x, lp.wv), lp.bv);

    const std::size_t dk = cfg.head_dim();
    const T inv_sqrt_dk = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
    std::vector<tensor<T>> heads;
    heads.reserve(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        tensor<T> qh = slice_cols(q, h * dk, dk);
        tensor<T> kh = slice_cols(k, h * dk, dk);
        tensor<T> vh = slice_cols(v, h * dk, dk);
        tensor<T> scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dk);
        if (bias.defined()) scores = add(scores, bias);
        tensor<T> p = masked_softmax_lastdim(scores, mask);
        if (dc.active()) p = mul(p, detail::dropout_mask<T>(s, s, dc));
        heads.push_back(matmul(p, vh));
    }
    tensor<T> concat = cfg.heads == 1 ? heads[0] : concat_cols(heads);
    return add_rowvec(matmul(concat, lp.wo), lp.bo);
}

// Full forward pass: L pre-norm blocks (attention + ReLU feed-forward, each
// residual), final norm, shared output head. Returns an s x p matrix of
// next-patch predictions; the engine reads rows at virtual-sensor positions.
// `mask_override` restricts attention beyond block-causality (the masked
// route of the pruned/masked equivalence check).
template <class T>
tensor<T> model_forward(model_params<T>& params, const patch_sequence<T>& seq,
                        const tensor<T>& bias = {}, const bool_matrix* mask_override = nullptr,
                        const dropout_ctx& dc = {}) {
    ++forward_pass_counter();
    const bool_matrix mask = mask_override ? *mask_override : causal_mask(seq.slot_of);
    tensor<T> x = seq.embedded;
    for (const auto& lp : params.layers) {
        tensor<T> h = layernorm_lastdim(x, lp.ln1_g, lp.ln1_b);
        x = add(x, attention_layer(h, lp, params.cfg, bias, mask, dc));
        tensor<T> h2 = layernorm_lastdim(x, lp.ln2_g, lp.ln2_b);
        tensor<T> f = relu(add_rowvec(matmul(h2, lp.ff_w1), lp.ff_b1));
        if (dc.active()) f = mul(f, detail::dropout_mask<T>(f.as2d().first, f.as2d().second, dc));
        f = add_rowvec(matmul(f, lp.ff_w2), lp.ff_b2);
        x = add(x, f);
    }
    x = layernorm_lastdim(x, params.lnf_g, params.lnf_b);
    return deembed(params.emb, x);
}

} // namespace vsens
