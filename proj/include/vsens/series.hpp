#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "vsens/rng.hpp"

namespace vsens {

enum class series_role { input, virtual_sensor };

// A family of univariate series sampled on a shared grid: M input signals
// plus N virtual-sensor targets, stored column-wise in one T x (M+N) matrix.
// Immutable after construction.
struct series_family {
    std::vector<std::string> names;  // per column
    std::vector<series_role> roles;  // per column
    std::size_t samples = 0;         // T
    std::vector<double> values;      // row-major T x cols

    std::size_t cols() const { return names.size(); }
    double at(std::size_t t, std::size_t c) const { return values[t * cols() + c]; }
    double& at(std::size_t t, std::size_t c) { return values[t * cols() + c]; }

    std::size_t num_inputs() const {
        std::size_t m = 0;
        for (auto r : roles) m += (r == series_role::input);
        return m;
    }
    std::size_t num_virtual() const { return cols() - num_inputs(); }

    // column indexes by role, ascending
    std::vector<std::size_t> input_columns() const {
        std::vector<std::size_t> out;
        for (std::size_t c = 0; c < cols(); ++c)
            if (roles[c] == series_role::input) out.push_back(c);
        return out;
    }
    std::vector<std::size_t> virtual_columns() const {
        std::vector<std::size_t> out;
        for (std::size_t c = 0; c < cols(); ++c)
            if (roles[c] == series_role::virtual_sensor) out.push_back(c);
        return out;
    }

    void validate() const {
        if (samples < 1) throw std::invalid_argument("series_family: needs at least one sample");
        if (roles.size() != names.size() || values.size() != samples * cols())
            throw std::invalid_argument("series_family: inconsistent sizes");
        if (num_virtual() == 0) throw std::invalid_argument("series_family: no virtual sensors");
        if (num_inputs() == 0) throw std::invalid_argument("series_family: no input signals");
    }
};

namespace detail {

// Distinct odd integer DFT frequencies keep any two generated signals exactly
// uncorrelated over the full span, and keep products of two signals (whose
// spectrum lands on even integers) uncorrelated with every signal. The pool
// stays as low-frequency as the requested count allows (ceiling t/32, so
// periods span at least ~32 samples) to keep signals temporally smooth;
// it stretches up to t/8 only when more distinct frequencies are needed.
inline std::vector<std::size_t> draw_frequency_pool(std::size_t needed, std::size_t t, rng& gen) {
    const std::size_t k_min = 3;
    const std::size_t smooth_cap = std::max<std::size_t>(t / 32, k_min);
    const std::size_t wanted_cap = k_min + 2 * (needed > 0 ? needed - 1 : 0);
    const std::size_t k_max = std::min(std::max(smooth_cap, wanted_cap),
                                       std::max<std::size_t>(t / 8, k_min));
    std::vector<std::size_t> pool;
    for (std::size_t k = k_min; k <= k_max; k += 2) pool.push_back(k);
    if (pool.size() < needed)
        throw std::invalid_argument("synthetic generator: only " + std::to_string(pool.size()) +
                                    " distinct frequencies available for " + std::to_string(needed) +
                                    " requested (increase T)");
    gen.shuffle(pool);
    pool.resize(needed);
    return pool;
}

inline void fill_sinusoid_mixture(series_family& fam, std::size_t col, std::size_t t,
                                  const std::size_t* freqs, std::size_t n_freqs, rng& gen) {
    constexpr double two_pi = 2.0 * 3.14159265358979323846;
    for (std::size_t q = 0; q < n_freqs; ++q) {
        const double amp = gen.uniform(0.5, 1.5);
        const double phase = gen.uniform(0.0, two_pi);
        const double w = two_pi * static_cast<double>(freqs[q]) / static_cast<double>(t);
        for (std::size_t i = 0; i < t; ++i)
            fam.at(i, col) += amp * std::sin(w * static_cast<double>(i) + phase);
    }
}

inline void standardize_column(series_family& fam, std::size_t col) {
    const std::size_t t = fam.samples;
    double mean = 0.0;
    for (std::size_t i = 0; i < t; ++i) mean += fam.at(i, col);
    mean /= static_cast<double>(t);
    double var = 0.0;
    for (std::size_t i = 0; i < t; ++i) {
        const double d = fam.at(i, col) - mean;
        var += d * d;
    }
    const double sd = std::max(std::sqrt(var / static_cast<double>(t)), 1e-8);
    for (std::size_t i = 0; i < t; ++i) fam.at(i, col) = (fam.at(i, col) - mean) / sd;
}

inline series_family sinusoid_inputs(std::size_t m, std::size_t t, std::size_t n_virtual,
                                     std::size_t freqs_per_signal, rng& gen) {
    series_family fam;
    fam.samples = t;
    for (std::size_t i = 0; i < m; ++i) {
        fam.names.push_back("z" + std::to_string(i + 1));
        fam.roles.push_back(series_role::input);
    }
    for (std::size_t j = 0; j < n_virtual; ++j) {
        fam.names.push_back("v" + std::to_string(j + 1));
        fam.roles.push_back(series_role::virtual_sensor);
    }
    fam.values.assign(t * fam.cols(), 0.0);
    const auto pool = draw_frequency_pool(m * freqs_per_signal, t, gen);
    for (std::size_t i = 0; i < m; ++i)
        fill_sinusoid_mixture(fam, i, t, pool.data() + i * freqs_per_signal, freqs_per_signal, gen);
    return fam;
}

} // namespace detail

// M mutually uncorrelated smooth input signals; virtual sensor j is an exact
// copy of input column targets[j]. Targets are 1-based input indexes.
inline series_family generate_synthetic_uncorrelated(std::size_t m, std::size_t t,
                                                     const std::vector<std::size_t>& targets,
                                                     std::size_t frequencies_per_signal,
                                                     std::uint64_t seed) {
    if (frequencies_per_signal < 1)
        throw std::invalid_argument("generate_synthetic_uncorrelated: frequencies_per_signal >= 1");
    for (std::size_t a = 0; a < targets.size(); ++a) {
        if (targets[a] < 1 || targets[a] > m)
            throw std::invalid_argument("generate_synthetic_uncorrelated: target " +
                                        std::to_string(targets[a]) + " out of [1, " +
                                        std::to_string(m) + "]");
        for (std::size_t b = a + 1; b < targets.size(); ++b)
            if (targets[a] == targets[b])
                throw std::invalid_argument("generate_synthetic_uncorrelated: duplicate target " +
                                            std::to_string(targets[a]));
    }
    rng gen = rng::stream(seed, "data");
    series_family fam = detail::sinusoid_inputs(m, t, targets.size(), frequencies_per_signal, gen);
    for (std::size_t j = 0; j < targets.size(); ++j) {
        const std::size_t src = targets[j] - 1;
        for (std::size_t i = 0; i < t; ++i) fam.at(i, m + j) = fam.at(i, src);
    }
    fam.validate();
    return fam;
}

// Virtual sensor j is the standardized elementwise product of its two factor
// inputs (1-based). Nonlinear targets defeat correlation-based relevance.
inline series_family generate_synthetic_nonlinear(
    std::size_t m, std::size_t t, const std::vector<std::pair<std::size_t, std::size_t>>& factor_pairs,
    std::size_t frequencies_per_signal, std::uint64_t seed) {
    if (frequencies_per_signal < 1)
        throw std::invalid_argument("generate_synthetic_nonlinear: frequencies_per_signal >= 1");
    for (const auto& [a, b] : factor_pairs) {
        if (a < 1 || a > m || b < 1 || b > m)
            throw std::invalid_argument("generate_synthetic_nonlinear: factor out of [1, " +
                                        std::to_string(m) + "]");
        if (a == b) throw std::invalid_argument("generate_synthetic_nonlinear: identical factors");
    }
    rng gen = rng::stream(seed, "data");
    series_family fam = detail::sinusoid_inputs(m, t, factor_pairs.size(), frequencies_per_signal, gen);
    for (std::size_t j = 0; j < factor_pairs.size(); ++j) {
        const std::size_t a = factor_pairs[j].first - 1;
        const std::size_t b = factor_pairs[j].second - 1;
        for (std::size_t i = 0; i < t; ++i) fam.at(i, m + j) = fam.at(i, a) * fam.at(i, b);
        detail::standardize_column(fam, m + j);
    }
    fam.validate();
    return fam;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

// Header row of names, numeric body. role_map assigns input/virtual per name;
// names absent from the map default to input. Missing or non-finite cells are
// rejected with their location.
inline series_family load_csv(const std::string& path,
                              const std::unordered_map<std::string, series_role>& role_map) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_csv: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("load_csv: '" + path + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();

    series_family fam;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) fam.names.push_back(cell);
    }
    if (fam.names.empty()) throw std::runtime_error("load_csv: no columns in header");
    for (const auto& [name, role] : role_map) {
        (void)role;
        if (std::find(fam.names.begin(), fam.names.end(), name) == fam.names.end())
            throw std::runtime_error("load_csv: role map names unknown column '" + name + "'");
    }
    fam.roles.reserve(fam.names.size());
    for (const auto& name : fam.names) {
        auto it = role_map.find(name);
        fam.roles.push_back(it == role_map.end() ? series_role::input : it->second);
    }

    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::size_t col = 0;
        while (std::getline(ss, cell, ',')) {
            if (col >= fam.names.size())
                throw std::runtime_error("load_csv: row " + std::to_string(row) + " has more than " +
                                         std::to_string(fam.names.size()) + " fields");
            std::size_t pos = 0;
            double v = 0.0;
            bool ok = true;
            try {
                v = std::stod(cell, &pos);
            } catch (const std::exception&) {
                ok = false;
            }
            if (!ok || pos != cell.size() || !std::isfinite(v))
                throw std::runtime_error("load_csv: row " + std::to_string(row) + ", column '" +
                                         fam.names[col] + "': not a finite number: '" + cell + "'");
            fam.values.push_back(v);
            ++col;
        }
        if (col != fam.names.size())
            throw std::runtime_error("load_csv: row " + std::to_string(row) + " has " +
                                     std::to_string(col) + " fields, expected " +
                                     std::to_string(fam.names.size()));
        ++fam.samples;
    }
    if (fam.samples == 0) throw std::runtime_error("load_csv: '" + path + "' has no data rows");
    fam.validate();
    return fam;
}

inline void write_csv(const series_family& fam, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_csv: cannot open '" + path + "'");
    for (std::size_t c = 0; c < fam.cols(); ++c) out << (c ? "," : "") << fam.names[c];
    out << "\n";
    char buf[40];
    for (std::size_t i = 0; i < fam.samples; ++i) {
        for (std::size_t c = 0; c < fam.cols(); ++c) {
            std::snprintf(buf, sizeof(buf), "%.17g", fam.at(i, c));
            out << (c ? "," : "") << buf;
        }
        out << "\n";
    }
    if (!out) throw std::runtime_error("write_csv: failed writing '" + path + "'");
}

// ---------------------------------------------------------------------------
// normalization + windows
// ---------------------------------------------------------------------------

// Per-variate mean and population standard deviation of the leading training
// fraction, applied identically at training and inference. std clamped below
// by 1e-8 so constant series stay finite.
struct norm_stats {
    std::vector<double> mean;
    std::vector<double> stddev;
    static constexpr double min_std = 1e-8;

    double normalize(double x, std::size_t c) const { return (x - mean[c]) / stddev[c]; }
    double denormalize(double x, std::size_t c) const { return x * stddev[c] + mean[c]; }
};

inline std::size_t train_sample_count(const series_family& fam, double train_fraction) {
    if (!(train_fraction > 0.0) || train_fraction > 1.0)
        throw std::invalid_argument("train_fraction must be in (0, 1]");
    auto n = static_cast<std::size_t>(static_cast<double>(fam.samples) * train_fraction);
    return std::max<std::size_t>(n, 1);
}

inline norm_stats compute_norm_stats(const series_family& fam, double train_fraction) {
    const std::size_t tt = train_sample_count(fam, train_fraction);
    norm_stats st;
    st.mean.resize(fam.cols());
    st.stddev.resize(fam.cols());
    for (std::size_t c = 0; c < fam.cols(); ++c) {
        double mean = 0.0;
        for (std::size_t i = 0; i < tt; ++i) mean += fam.at(i, c);
        mean /= static_cast<double>(tt);
        double var = 0.0;
        for (std::size_t i = 0; i < tt; ++i) {
            const double d = fam.at(i, c) - mean;
            var += d * d;
        }
        var /= static_cast<double>(tt);
        st.mean[c] = mean;
        st.stddev[c] = std::max(std::sqrt(var), norm_stats::min_std);
    }
    return st;
}

struct window_spec {
    std::size_t context_slots = 2;  // c
    std::size_t horizon_slots = 6;  // K
    std::size_t patch_len = 16;     // p
    std::size_t stride = 16;

    std::size_t slots() const { return context_slots + horizon_slots; }
    std::size_t sample_len() const { return slots() * patch_len; }
    void validate() const {
        if (context_slots < 1 || horizon_slots < 1 || patch_len < 1 || stride < 1)
            throw std::invalid_argument("window_spec: all fields must be >= 1");
    }
};

// Normalized copy of (c+K)*p consecutive samples of every column.
struct series_window {
    std::size_t start = 0;  // absolute sample offset in the family
    std::size_t len = 0;
    std::size_t cols = 0;
    std::vector<double> values;  // row-major len x cols

    double at(std::size_t i, std::size_t c) const { return values[i * cols + c]; }
    // patch `slot` (1-based) of column c, as patch_len consecutive samples
    std::vector<double> patch(std::size_t slot, std::size_t c, std::size_t patch_len) const {
        std::vector<double> out(patch_len);
        for (std::size_t i = 0; i < patch_len; ++i) out[i] = at((slot - 1) * patch_len + i, c);
        return out;
    }
};

// Stride-spaced windows covering [sample_begin, sample_end); never straddles
// the boundary, so train and validation windows are cut from disjoint ranges.
inline std::vector<series_window> make_windows(const series_family& fam, const window_spec& spec,
                                               const norm_stats& st, std::size_t sample_begin,
                                               std::size_t sample_end) {
    spec.validate();
    if (sample_end > fam.samples) throw std::invalid_argument("make_windows: range past end of family");
    const std::size_t len = spec.sample_len();
    if (sample_begin + len > sample_end)
        throw std::invalid_argument("make_windows: window of " + std::to_string(len) +
                                    " samples does not fit in split of " +
                                    std::to_string(sample_end - sample_begin));
    std::vector<series_window> out;
    for (std::size_t start = sample_begin; start + len <= sample_end; start += spec.stride) {
        series_window w;
        w.start = start;
        w.len = len;
        w.cols = fam.cols();
        w.values.resize(len * w.cols);
        for (std::size_t i = 0; i < len; ++i)
            for (std::size_t c = 0; c < w.cols; ++c)
                w.values[i * w.cols + c] = st.normalize(fam.at(start + i, c), c);
        out.push_back(std::move(w));
    }
    return out;
}

inline std::vector<series_window> make_train_windows(const series_family& fam, const window_spec& spec,
                                                     const norm_stats& st, double train_fraction) {
    return make_windows(fam, spec, st, 0, train_sample_count(fam, train_fraction));
}

inline std::vector<series_window> make_validation_windows(const series_family& fam,
                                                          const window_spec& spec,
                                                          const norm_stats& st,
                                                          double train_fraction) {
    return make_windows(fam, spec, st, train_sample_count(fam, train_fraction), fam.samples);
}

} // namespace vsens
