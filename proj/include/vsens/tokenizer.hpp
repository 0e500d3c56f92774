#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "vsens/series.hpp"
#include "vsens/tensor.hpp"

namespace vsens {

// Patch-embedding MLP, learned additive variate embeddings for inputs (v) and
// virtual sensors (v'), and the shared output head. One output head serves
// all variates; variate identity flows through the additive embedding, which
// keeps the parameter count nearly constant in the number of sensors.
template <class T>
struct embedding_tables {
    tensor<T> patch_w1, patch_b1, patch_w2, patch_b2;  // p -> hidden -> d
    tensor<T> variate_in;                              // M x d
    tensor<T> variate_virtual;                         // N x d
    tensor<T> head_w1, head_b1, head_w2, head_b2;      // d -> hidden -> p
};

// Column-role lookup shared by tokenizer/relevance/engine: for every variate
// (family column) whether it is an input or a virtual sensor, and its row in
// the corresponding embedding table.
struct family_layout {
    std::vector<series_role> roles;       // per variate
    std::vector<std::size_t> emb_index;   // row within variate_in / variate_virtual
    std::vector<std::size_t> virtual_column;  // sensor j -> variate id

    static family_layout of(const series_family& fam) {
        family_layout l;
        l.roles = fam.roles;
        l.emb_index.resize(fam.cols());
        std::size_t mi = 0, vi = 0;
        for (std::size_t c = 0; c < fam.cols(); ++c) {
            if (fam.roles[c] == series_role::input) {
                l.emb_index[c] = mi++;
            } else {
                l.emb_index[c] = vi++;
                l.virtual_column.push_back(c);
            }
        }
        return l;
    }

    std::size_t num_variates() const { return roles.size(); }
    std::size_t num_inputs() const { return num_variates() - virtual_column.size(); }
    std::size_t num_virtual() const { return virtual_column.size(); }
    bool is_virtual(std::size_t variate) const {
        return roles[variate] == series_role::virtual_sensor;
    }
};

struct patch_token {
    std::size_t variate = 0;
    std::size_t slot = 0;  // 1-based patch index
    bool prototype = false;
};

// Tokens in canonical order (slot ascending; within a slot variate ascending
// with prototypes last) plus the assembled s x d embedding matrix.
template <class T>
struct patch_sequence {
    std::vector<patch_token> tokens;
    std::vector<std::size_t> variate_of;
    std::vector<std::size_t> slot_of;
    tensor<T> embedded;  // s x d

    std::size_t size() const { return tokens.size(); }
    // position of a token, or npos
    std::size_t find(std::size_t variate, std::size_t slot) const {
        for (std::size_t i = 0; i < tokens.size(); ++i)
            if (tokens[i].variate == variate && tokens[i].slot == slot) return i;
        return static_cast<std::size_t>(-1);
    }
};

// ---------------------------------------------------------------------------

// Non-overlapping length-p patches of a segment; order- and value-preserving.
inline std::vector<std::vector<double>> patchify(const std::vector<double>& segment, std::size_t p) {
    if (p == 0 || segment.size() % p != 0)
        throw std::invalid_argument("patchify: segment length " + std::to_string(segment.size()) +
                                    " not divisible by patch length " + std::to_string(p));
    std::vector<std::vector<double>> out(segment.size() / p);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i].assign(segment.begin() + i * p, segment.begin() + (i + 1) * p);
    return out;
}

// Sinusoidal position encoding of a time slot, shared among variates.
template <class T>
std::vector<T> time_embedding(std::size_t slot, std::size_t d) {
    if (d % 2 != 0)
        throw std::invalid_argument("time_embedding: token dimension must be even, got " +
                                    std::to_string(d));
    std::vector<T> out(d);
    for (std::size_t i = 0; i < d; i += 2) {
        const double angle = static_cast<double>(slot) /
                             std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
        out[i] = static_cast<T>(std::sin(angle));
        out[i + 1] = static_cast<T>(std::cos(angle));
    }
    return out;
}

// Content embedding of one patch through the MLP. Prototype tokens never pass
// through here; their content embedding is the zero vector by definition.
template <class T>
tensor<T> embed_patch(const embedding_tables<T>& emb, const tensor<T>& patch) {
    tensor<T> h = relu(add_rowvec(matmul(patch, emb.patch_w1), emb.patch_b1));
    return add_rowvec(matmul(h, emb.patch_w2), emb.patch_b2);
}

// Shared output head mapping final token states back to patch space.
template <class T>
tensor<T> deembed(const embedding_tables<T>& emb, const tensor<T>& hidden) {
    tensor<T> h = relu(add_rowvec(matmul(hidden, emb.head_w1), emb.head_b1));
    return add_rowvec(matmul(h, emb.head_w2), emb.head_b2);
}

// One requested token of an assembly: ground-truth content, an empty
// prototype, or content given as a tensor (the autoregressive feedback path).
template <class T>
struct token_spec {
    std::size_t variate = 0;
    std::size_t slot = 0;
    enum class kind { ground_truth, prototype, tensor_content } what = kind::ground_truth;
    std::vector<double> patch;  // ground_truth
    tensor<T> content;          // tensor_content, 1 x p
};

// Builds the token sequence: sorts tokens into canonical order, embeds
// content through the patch MLP (prototypes contribute zero content), and
// adds time and variate embeddings. Pure in (specs, tables).
template <class T>
patch_sequence<T> assemble_sequence(const embedding_tables<T>& emb, const family_layout& layout,
                                    std::vector<token_spec<T>> specs, std::size_t patch_len) {
    if (specs.empty()) throw std::invalid_argument("assemble_sequence: no tokens");
    for (const auto& sp : specs)
        if (sp.what == token_spec<T>::kind::prototype && !layout.is_virtual(sp.variate))
            throw std::invalid_argument("assemble_sequence: prototype requested for input variate " +
                                        std::to_string(sp.variate));
    std::stable_sort(specs.begin(), specs.end(), [](const auto& a, const auto& b) {
        if (a.slot != b.slot) return a.slot < b.slot;
        const bool ap = a.what == token_spec<T>::kind::prototype;
        const bool bp = b.what == token_spec<T>::kind::prototype;
        if (ap != bp) return bp;  // prototypes last within the slot
        return a.variate < b.variate;
    });

    // slots must be contiguous from 1
    std::size_t max_slot = 0;
    std::vector<std::uint8_t> seen_slot;
    for (const auto& sp : specs) max_slot = std::max(max_slot, sp.slot);
    seen_slot.assign(max_slot + 1, 0);
    for (const auto& sp : specs) {
        if (sp.slot < 1) throw std::invalid_argument("assemble_sequence: slots are 1-based");
        seen_slot[sp.slot] = 1;
    }
    for (std::size_t s = 1; s <= max_slot; ++s)
        if (!seen_slot[s])
            throw std::invalid_argument("assemble_sequence: slot " + std::to_string(s) +
                                        " missing; slots must be contiguous from 1");
    {
        std::vector<std::pair<std::size_t, std::size_t>> keys;
        keys.reserve(specs.size());
        for (const auto& sp : specs) keys.emplace_back(sp.slot, sp.variate);
        std::sort(keys.begin(), keys.end());
        if (std::adjacent_find(keys.begin(), keys.end()) != keys.end())
            throw std::invalid_argument("assemble_sequence: duplicate (variate, slot) token");
    }

    const std::size_t s = specs.size();
    const std::size_t d = emb.patch_w2.shape()[1];

    patch_sequence<T> seq;
    seq.tokens.reserve(s);
    seq.variate_of.reserve(s);
    seq.slot_of.reserve(s);

    // content rows: group consecutive ground-truth patches into blocks so the
    // autoregressive path (tensor contents) stays cheap to stitch in
    std::vector<tensor<T>> content_blocks;
    std::vector<T> pending;
    std::size_t pending_rows = 0;
    std::vector<std::size_t> content_positions;
    auto flush_pending = [&] {
        if (pending_rows == 0) return;
        content_blocks.push_back(tensor<T>::from({pending_rows, patch_len}, pending));
        pending.clear();
        pending_rows = 0;
    };

    for (std::size_t i = 0; i < s; ++i) {
        const auto& sp = specs[i];
        seq.tokens.push_back({sp.variate, sp.slot, sp.what == token_spec<T>::kind::prototype});
        seq.variate_of.push_back(sp.variate);
        seq.slot_of.push_back(sp.slot);
        if (sp.what == token_spec<T>::kind::ground_truth) {
            if (sp.patch.size() != patch_len)
                throw std::invalid_argument("assemble_sequence: patch of " +
                                            std::to_string(sp.patch.size()) + " samples, expected " +
                                            std::to_string(patch_len));
            for (double v : sp.patch) pending.push_back(static_cast<T>(v));
            ++pending_rows;
            content_positions.push_back(i);
        } else if (sp.what == token_spec<T>::kind::tensor_content) {
            if (sp.content.as2d() != std::pair<std::size_t, std::size_t>{1, patch_len})
                throw std::invalid_argument("assemble_sequence: tensor content must be 1x" +
                                            std::to_string(patch_len));
            flush_pending();
            content_blocks.push_back(sp.content);
            content_positions.push_back(i);
        }
    }
    flush_pending();

    // X = scatter(MLP(content)) + time + variate embeddings
    tensor<T> x;
    if (!content_blocks.empty()) {
        tensor<T> content =
            content_blocks.size() == 1 ? content_blocks[0] : concat_rows(content_blocks);
        tensor<T> embedded = embed_patch(emb, content);
        x = content_positions.size() == s ? embedded
                                          : scatter_rows(embedded, content_positions, s);
    } else {
        x = tensor<T>::zeros({s, d});
    }

    std::vector<T> time_flat(s * d);
    for (std::size_t i = 0; i < s; ++i) {
        const auto te = time_embedding<T>(seq.slot_of[i], d);
        std::copy(te.begin(), te.end(), time_flat.begin() + i * d);
    }
    x = add(x, tensor<T>::from({s, d}, std::move(time_flat)));

    std::vector<std::size_t> in_pos, in_rows, virt_pos, virt_rows;
    for (std::size_t i = 0; i < s; ++i) {
        const std::size_t var = seq.variate_of[i];
        if (layout.is_virtual(var)) {
            virt_pos.push_back(i);
            virt_rows.push_back(layout.emb_index[var]);
        } else {
            in_pos.push_back(i);
            in_rows.push_back(layout.emb_index[var]);
        }
    }
    if (!in_pos.empty()) {
        tensor<T> ve = gather_rows(emb.variate_in, in_rows);
        x = add(x, in_pos.size() == s ? ve : scatter_rows(ve, in_pos, s));
    }
    if (!virt_pos.empty()) {
        tensor<T> ve = gather_rows(emb.variate_virtual, virt_rows);
        x = add(x, virt_pos.size() == s ? ve : scatter_rows(ve, virt_pos, s));
    }

    seq.embedded = x;
    return seq;
}

} // namespace vsens
