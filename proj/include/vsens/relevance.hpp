#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "vsens/rng.hpp"
#include "vsens/series.hpp"
#include "vsens/tensor.hpp"
#include "vsens/tokenizer.hpp"

namespace vsens {

// One learned relevance vector r'_j over all M+N variates per virtual sensor.
// Initialized to ones: the resulting all-ones bias is a no-op under softmax,
// while zeros would kill the gradient into the table.
template <class T>
struct relevance_table {
    tensor<T> rows;  // N x (M+N), trainable

    static relevance_table make(std::size_t n_sensors, std::size_t n_variates) {
        relevance_table t;
        t.rows = tensor<T>::full({n_sensors, n_variates}, T(1), true);
        return t;
    }
    std::size_t sensors() const { return rows.shape()[0]; }
    std::size_t variates() const { return rows.shape()[1]; }
};

// Retained variates for one sensor after thresholding; always contains the
// sensor's own variate (pruning it would sever the autoregressive feedback).
struct input_set {
    std::size_t sensor = 0;              // 0-based sensor index
    std::vector<std::size_t> variates;   // ascending variate ids
    double threshold = -std::numeric_limits<double>::infinity();

    bool contains(std::size_t v) const {
        return std::binary_search(variates.begin(), variates.end(), v);
    }
};

// ---------------------------------------------------------------------------
// bias construction
// ---------------------------------------------------------------------------

// B[a,b] = r'_j[var(a)] * r'_j[var(b)] for a token sequence: the outer product
// of the sensor's relevance over the sequence's variates, tiled across time
// because token entries depend on variates only. Differentiable w.r.t. the
// table, which is how relevance is learned from attention gradients.
template <class T>
tensor<T> bias_from_relevance(const relevance_table<T>& table, std::size_t sensor,
                              const std::vector<std::size_t>& variate_of) {
    if (sensor >= table.sensors())
        throw std::invalid_argument("bias_from_relevance: sensor " + std::to_string(sensor) +
                                    " out of " + std::to_string(table.sensors()));
    for (auto v : variate_of)
        if (v >= table.variates())
            throw std::invalid_argument("bias_from_relevance: variate " + std::to_string(v) +
                                        " out of " + std::to_string(table.variates()));
    tensor<T> row = gather_rows(table.rows, {sensor});           // 1 x (M+N)
    tensor<T> col = reshape(row, {table.variates(), 1});         // (M+N) x 1
    tensor<T> u = gather_rows(col, variate_of);                  // s x 1
    return matmul(u, transpose(u));                              // s x s
}

// Mean of the per-sensor biases for a multi-sensor request.
template <class T>
tensor<T> combined_bias(const relevance_table<T>& table, const std::vector<std::size_t>& sensors,
                        const std::vector<std::size_t>& variate_of) {
    if (sensors.empty()) throw std::invalid_argument("combined_bias: empty sensor set");
    tensor<T> b = bias_from_relevance(table, sensors[0], variate_of);
    for (std::size_t i = 1; i < sensors.size(); ++i)
        b = add(b, bias_from_relevance(table, sensors[i], variate_of));
    if (sensors.size() > 1) b = scale(b, T(1) / T(sensors.size()));
    return b;
}

// ---------------------------------------------------------------------------
// sparsification and input sets
// ---------------------------------------------------------------------------

// Threshold the raw relevance row: retained = {a : r'_j[a] >= threshold} plus
// the sensor's own variate. Tokens of non-retained variates are structurally
// removed from sequences built for this sensor, which matches the fully
// masked rows/columns the -inf bias would produce.
template <class T>
input_set sparsify(const relevance_table<T>& table, const family_layout& layout, std::size_t sensor,
                   double threshold) {
    if (sensor >= table.sensors())
        throw std::invalid_argument("sparsify: sensor " + std::to_string(sensor) + " out of " +
                                    std::to_string(table.sensors()));
    input_set out;
    out.sensor = sensor;
    out.threshold = threshold;
    const std::size_t own = layout.virtual_column.at(sensor);
    const T* r = table.rows.data() + sensor * table.variates();
    for (std::size_t v = 0; v < table.variates(); ++v)
        if (static_cast<double>(r[v]) >= threshold || v == own) out.variates.push_back(v);
    return out;
}

// Union of the requested sensors' input sets (the variate universe a
// multi-sensor request is assembled from).
inline std::vector<std::size_t> union_variates(const std::vector<input_set>& sets) {
    if (sets.empty()) throw std::invalid_argument("union_variates: empty request");
    std::vector<std::size_t> out;
    for (const auto& s : sets) out.insert(out.end(), s.variates.begin(), s.variates.end());
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

// Top-k input variates by |Pearson correlation| with the sensor's ground
// truth over the training split, plus the sensor's own variate.
inline input_set correlation_relevance(const series_family& fam, double train_fraction,
                                       std::size_t sensor, std::size_t k) {
    const auto inputs = fam.input_columns();
    const auto virtuals = fam.virtual_columns();
    if (sensor >= virtuals.size())
        throw std::invalid_argument("correlation_relevance: sensor out of range");
    if (k > inputs.size())
        throw std::invalid_argument("correlation_relevance: k exceeds number of inputs");
    const std::size_t tt = train_sample_count(fam, train_fraction);
    const std::size_t target = virtuals[sensor];

    auto moments = [&](std::size_t c) {
        double mean = 0.0;
        for (std::size_t i = 0; i < tt; ++i) mean += fam.at(i, c);
        mean /= static_cast<double>(tt);
        double var = 0.0;
        for (std::size_t i = 0; i < tt; ++i) {
            const double d = fam.at(i, c) - mean;
            var += d * d;
        }
        return std::pair<double, double>(mean, var);
    };
    const auto [tm, tv] = moments(target);

    std::vector<std::pair<double, std::size_t>> ranked;  // (-|rho|, column)
    for (auto c : inputs) {
        const auto [cm, cv] = moments(c);
        double cov = 0.0;
        for (std::size_t i = 0; i < tt; ++i) cov += (fam.at(i, c) - cm) * (fam.at(i, target) - tm);
        const double denom = std::sqrt(cv * tv);
        const double rho = denom > 0.0 ? cov / denom : 0.0;
        ranked.emplace_back(-std::abs(rho), c);
    }
    std::sort(ranked.begin(), ranked.end());

    input_set out;
    out.sensor = sensor;
    out.threshold = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t i = 0; i < k; ++i) out.variates.push_back(ranked[i].second);
    out.variates.push_back(target);
    std::sort(out.variates.begin(), out.variates.end());
    out.variates.erase(std::unique(out.variates.begin(), out.variates.end()), out.variates.end());
    return out;
}

// Top-k input variates by raw learned relevance plus the sensor's own
// variate; the matched-sparsity counterpart of the correlation/random sets.
template <class T>
input_set learned_topk(const relevance_table<T>& table, const family_layout& layout,
                       std::size_t sensor, std::size_t k) {
    if (sensor >= table.sensors())
        throw std::invalid_argument("learned_topk: sensor out of range");
    if (k > layout.num_inputs())
        throw std::invalid_argument("learned_topk: k exceeds number of inputs");
    const T* r = table.rows.data() + sensor * table.variates();
    std::vector<std::pair<double, std::size_t>> ranked;  // (-value, variate)
    for (std::size_t v = 0; v < layout.num_variates(); ++v)
        if (!layout.is_virtual(v)) ranked.emplace_back(-static_cast<double>(r[v]), v);
    std::sort(ranked.begin(), ranked.end());
    input_set out;
    out.sensor = sensor;
    out.threshold = k > 0 ? -ranked[k - 1].first : std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i) out.variates.push_back(ranked[i].second);
    out.variates.push_back(layout.virtual_column.at(sensor));
    std::sort(out.variates.begin(), out.variates.end());
    return out;
}

// Uniform k-subset of the input variates plus the sensor's own variate.
inline input_set random_relevance(std::uint64_t seed, const series_family& fam, std::size_t sensor,
                                  std::size_t k) {
    const auto inputs = fam.input_columns();
    const auto virtuals = fam.virtual_columns();
    if (sensor >= virtuals.size())
        throw std::invalid_argument("random_relevance: sensor out of range");
    if (k > inputs.size())
        throw std::invalid_argument("random_relevance: k = " + std::to_string(k) + " exceeds " +
                                    std::to_string(inputs.size()) + " inputs");
    rng gen = rng::stream(seed, "random-relevance");
    auto pick = gen.sample_without_replacement(inputs.size(), k);
    input_set out;
    out.sensor = sensor;
    out.threshold = std::numeric_limits<double>::quiet_NaN();
    for (auto i : pick) out.variates.push_back(inputs[i]);
    out.variates.push_back(virtuals[sensor]);
    std::sort(out.variates.begin(), out.variates.end());
    out.variates.erase(std::unique(out.variates.begin(), out.variates.end()), out.variates.end());
    return out;
}

// ---------------------------------------------------------------------------
// set metrics
// ---------------------------------------------------------------------------

namespace detail {

inline std::pair<std::size_t, std::size_t> intersection_union(const std::vector<std::size_t>& a,
                                                              const std::vector<std::size_t>& b) {
    std::size_t inter = 0, i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] == b[j]) {
            ++inter;
            ++i;
            ++j;
        } else if (a[i] < b[j]) {
            ++i;
        } else {
            ++j;
        }
    }
    return {inter, a.size() + b.size() - inter};
}

} // namespace detail

// Mean pairwise Jaccard similarity |A∩B| / |A∪B| over unordered pairs.
inline double set_similarity(const std::vector<input_set>& sets) {
    if (sets.size() < 2) throw std::invalid_argument("set_similarity: needs at least 2 sets");
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < sets.size(); ++a)
        for (std::size_t b = a + 1; b < sets.size(); ++b) {
            const auto [inter, uni] = detail::intersection_union(sets[a].variates, sets[b].variates);
            total += uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
            ++pairs;
        }
    return total / static_cast<double>(pairs);
}

// Mean pairwise shared fraction 2|A∩B| / (|A|+|B|), the "share of signals"
// reading; reported alongside Jaccard.
inline double set_overlap_fraction(const std::vector<input_set>& sets) {
    if (sets.size() < 2) throw std::invalid_argument("set_overlap_fraction: needs at least 2 sets");
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < sets.size(); ++a)
        for (std::size_t b = a + 1; b < sets.size(); ++b) {
            const auto [inter, uni] = detail::intersection_union(sets[a].variates, sets[b].variates);
            (void)uni;
            const double denom = static_cast<double>(sets[a].variates.size() + sets[b].variates.size());
            total += 2.0 * static_cast<double>(inter) / denom;
            ++pairs;
        }
    return total / static_cast<double>(pairs);
}

// Fraction of content tokens saved against the dense model predicting all N
// sensors from all M+N variates over the same slots. Prototype seeds are
// excluded from both counts so the ratio is exact.
inline double sparsity_of(std::size_t universe_size, std::size_t total_variates) {
    if (universe_size > total_variates)
        throw std::invalid_argument("sparsity_of: universe larger than variate count");
    return 1.0 - static_cast<double>(universe_size) / static_cast<double>(total_variates);
}

inline double sparsity_of(const std::vector<input_set>& request_sets, std::size_t total_variates) {
    return sparsity_of(union_variates(request_sets).size(), total_variates);
}

} // namespace vsens
