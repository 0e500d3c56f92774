#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vsens/tensor.hpp"

namespace vsens {

// Linear warm-up from start_factor*base to base over warmup_iters steps,
// then base * gamma^(iter / decay_step) with integer division.
// decay_step == 0 disables decay.
struct lr_schedule {
    double base = 1e-3;
    std::size_t warmup_iters = 0;
    double warmup_start_factor = 0.5;
    std::size_t decay_step = 0;
    double decay_gamma = 0.98;
};

inline double lr_at(const lr_schedule& s, std::size_t iteration) {
    if (iteration < s.warmup_iters) {
        const double f = s.warmup_start_factor +
                         (1.0 - s.warmup_start_factor) *
                             (static_cast<double>(iteration) / static_cast<double>(s.warmup_iters));
        return s.base * f;
    }
    if (s.decay_step == 0) return s.base;
    return s.base * std::pow(s.decay_gamma, static_cast<double>(iteration / s.decay_step));
}

// Adam with bias correction. Moments are kept in double and keyed by
// parameter name; a parameter whose gradient has stayed identically zero has
// zero moments and is left bit-unchanged by the update.
struct adam_state {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t t = 0;
    std::unordered_map<std::string, std::vector<double>> m;
    std::unordered_map<std::string, std::vector<double>> v;

    void reset() {
        t = 0;
        m.clear();
        v.clear();
    }
};

template <class T>
using named_params = std::vector<std::pair<std::string, tensor<T>*>>;

template <class T>
void adam_step(const named_params<T>& params, adam_state& st, double lr) {
    st.t += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
    for (const auto& [name, p] : params) {
        const std::size_t n = p->numel();
        auto& m = st.m[name];
        auto& v = st.v[name];
        if (m.size() != n) m.assign(n, 0.0);
        if (v.size() != n) v.assign(n, 0.0);
        const std::vector<T>& g = p->grad();
        if (!g.empty() && g.size() != n)
            throw std::runtime_error("adam_step: gradient size mismatch for parameter '" + name + "'");
        T* x = p->data();
        for (std::size_t i = 0; i < n; ++i) {
            const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
            if (!std::isfinite(gi))
                throw std::runtime_error("adam_step: non-finite gradient for parameter '" + name + "'");
            m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * gi;
            v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * gi * gi;
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            const double delta = lr * mh / (std::sqrt(vh) + st.eps);
            if (delta != 0.0) x[i] = static_cast<T>(static_cast<double>(x[i]) - delta);
        }
    }
}

template <class T>
void zero_grads(const named_params<T>& params) {
    for (const auto& [name, p] : params) {
        (void)name;
        p->zero_grad();
    }
}

} // namespace vsens
