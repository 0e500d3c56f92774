#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace vsens {

// Deterministic splitmix64 generator. All randomness in the project flows
// from one run seed through named sub-streams (see stream()), so individual
// components (data generation, init, subset sampling, dropout) can be
// reproduced independently of each other.
class rng {
public:
    explicit rng(std::uint64_t seed) : state_(seed) {
        // decorrelate trivially related seeds
        next_u64();
        next_u64();
    }

    static constexpr std::uint64_t fnv1a(std::string_view s) {
        std::uint64_t h = 1469598103934665603ull;
        for (char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        return h;
    }

    // Named sub-stream of a run seed.
    static rng stream(std::uint64_t run_seed, std::string_view name) {
        return rng(run_seed * 0x9e3779b97f4a7c15ull ^ fnv1a(name));
    }

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal, Box-Muller with cached spare
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // unbiased integer in [0, n)
    std::size_t below(std::size_t n) {
        if (n == 0) return 0;
        const std::uint64_t bound = n;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return static_cast<std::size_t>(x % bound);
    }

    template <class V>
    void shuffle(V& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct values from [0, n), order not meaningful
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        for (std::size_t i = 0; i < k && i < n; ++i) {
            std::size_t j = i + below(n - i);
            std::swap(idx[i], idx[j]);
        }
        idx.resize(k < n ? k : n);
        return idx;
    }

private:
    std::uint64_t state_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace vsens
