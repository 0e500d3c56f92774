#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vsens/model.hpp"

namespace vsens {

// Analytic per-forward cost model in scalar flops (one multiply or add each,
// so a multiply-add counts 2):
//   attention per layer: 8*s*d^2 (Q/K/V/output projections) + 4*s^2*d (scores
//   and value mixing), feed-forward per layer: 4*s*d*hidden, plus the patch
//   embedding and de-embedding MLPs which are linear in s.
struct cost_estimate {
    std::size_t tokens = 0;
    double attention_flops = 0.0;
    double feedforward_flops = 0.0;
    double embedding_flops = 0.0;
    double total = 0.0;
};

inline std::size_t count_tokens(std::size_t universe_size, std::size_t slots,
                                std::size_t prototypes) {
    return slots * universe_size + prototypes;
}

inline cost_estimate estimate_ops(std::size_t s, const model_config& cfg) {
    const double sd = static_cast<double>(s);
    const double d = static_cast<double>(cfg.dim);
    const double h = static_cast<double>(cfg.hidden);
    const double p = static_cast<double>(cfg.patch_len);
    const double layers = static_cast<double>(cfg.layers);
    cost_estimate est;
    est.tokens = s;
    est.attention_flops = layers * (8.0 * sd * d * d + 4.0 * sd * sd * d);
    est.feedforward_flops = layers * 4.0 * sd * d * h;
    est.embedding_flops = 2.0 * sd * (p * h + h * d) + 2.0 * sd * (d * h + h * p);
    est.total = est.attention_flops + est.feedforward_flops + est.embedding_flops;
    return est;
}

// ---------------------------------------------------------------------------
// wall-clock profiling
// ---------------------------------------------------------------------------

struct profile_stats {
    double median_ns = 0.0;
    double spread_ns = 0.0;  // median absolute deviation
    std::size_t reps = 0;
};

// Median and MAD of single-threaded wall-clock over `reps` runs after
// `warmups` discarded runs.
template <class F>
profile_stats profile(F&& closure, std::size_t warmups = 3, std::size_t reps = 5) {
    if (reps == 0) throw std::invalid_argument("profile: reps must be >= 1");
    for (std::size_t i = 0; i < warmups; ++i) closure();
    std::vector<double> samples;
    samples.reserve(reps);
    for (std::size_t i = 0; i < reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        closure();
        const auto t1 = std::chrono::steady_clock::now();
        samples.push_back(
            std::chrono::duration<double, std::nano>(t1 - t0).count());
    }
    auto median_of = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        const std::size_t mid = v.size() / 2;
        return v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
    };
    profile_stats st;
    st.reps = reps;
    st.median_ns = median_of(samples);
    std::vector<double> dev;
    dev.reserve(reps);
    for (double s : samples) dev.push_back(std::abs(s - st.median_ns));
    st.spread_ns = median_of(dev);
    return st;
}

// ---------------------------------------------------------------------------
// scaling-slope fits
// ---------------------------------------------------------------------------

// Two least-squares lines on log10(1-sparsity) vs log10(cost), split at the
// point minimizing combined residual. The dense regime (large 1-sparsity)
// reflects the quadratic attention term, the sparse regime the linear MLPs.
struct slope_fit {
    double boundary = 0.0;     // log10(1-sparsity) at the split
    double dense_slope = 0.0;  // high-token regime
    double sparse_slope = 0.0; // low-token regime
    double residual = 0.0;     // combined SSE of both fits
};

namespace detail {

struct line_fit {
    double slope = 0.0;
    double intercept = 0.0;
    double sse = 0.0;
};

inline line_fit fit_line(const std::vector<std::pair<double, double>>& pts, std::size_t lo,
                         std::size_t hi) {
    const double n = static_cast<double>(hi - lo);
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = lo; i < hi; ++i) {
        sx += pts[i].first;
        sy += pts[i].second;
        sxx += pts[i].first * pts[i].first;
        sxy += pts[i].first * pts[i].second;
    }
    line_fit f;
    const double denom = n * sxx - sx * sx;
    if (std::abs(denom) < 1e-12) throw std::invalid_argument("fit_line: degenerate x values");
    f.slope = (n * sxy - sx * sy) / denom;
    f.intercept = (sy - f.slope * sx) / n;
    for (std::size_t i = lo; i < hi; ++i) {
        const double r = pts[i].second - (f.slope * pts[i].first + f.intercept);
        f.sse += r * r;
    }
    return f;
}

} // namespace detail

// `sweep` holds (sparsity, cost) pairs; needs at least 4 points per regime.
inline slope_fit fit_scaling_slopes(std::vector<std::pair<double, double>> sweep) {
    if (sweep.size() < 8)
        throw std::invalid_argument("fit_scaling_slopes: need >= 4 points per regime, got " +
                                    std::to_string(sweep.size()) + " total");
    std::vector<std::pair<double, double>> pts;
    pts.reserve(sweep.size());
    for (auto [sparsity, cost] : sweep) {
        if (!(sparsity >= 0.0) || sparsity >= 1.0)
            throw std::invalid_argument("fit_scaling_slopes: sparsity must be in [0, 1)");
        if (!(cost > 0.0)) throw std::invalid_argument("fit_scaling_slopes: cost must be positive");
        pts.emplace_back(std::log10(1.0 - sparsity), std::log10(cost));
    }
    std::sort(pts.begin(), pts.end());
    if (pts.front().first == pts.back().first)
        throw std::invalid_argument("fit_scaling_slopes: degenerate sweep (single sparsity)");

    slope_fit best;
    best.residual = std::numeric_limits<double>::infinity();
    for (std::size_t split = 4; split + 4 <= pts.size(); ++split) {
        const auto lo = detail::fit_line(pts, 0, split);
        const auto hi = detail::fit_line(pts, split, pts.size());
        if (lo.sse + hi.sse < best.residual) {
            best.residual = lo.sse + hi.sse;
            best.sparse_slope = lo.slope;
            best.dense_slope = hi.slope;
            best.boundary = pts[split].first;
        }
    }
    return best;
}

} // namespace vsens
