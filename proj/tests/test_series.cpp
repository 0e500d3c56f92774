#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "vsens/series.hpp"

using namespace vsens;

namespace {

double pearson(const series_family& f, std::size_t a, std::size_t b) {
    const std::size_t t = f.samples;
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < t; ++i) {
        ma += f.at(i, a);
        mb += f.at(i, b);
    }
    ma /= t;
    mb /= t;
    double va = 0, vb = 0, cov = 0;
    for (std::size_t i = 0; i < t; ++i) {
        va += (f.at(i, a) - ma) * (f.at(i, a) - ma);
        vb += (f.at(i, b) - mb) * (f.at(i, b) - mb);
        cov += (f.at(i, a) - ma) * (f.at(i, b) - mb);
    }
    return cov / std::sqrt(va * vb);
}

std::string temp_csv(const std::string& body) {
    static int counter = 0;
    std::string path = "vsens_test_" + std::to_string(counter++) + ".csv";
    std::ofstream out(path);
    out << body;
    return path;
}

} // namespace

TEST_CASE("uncorrelated generator replicates targets exactly") {
    auto fam = generate_synthetic_uncorrelated(16, 2048, {10, 3}, 3, 7);
    CHECK(fam.num_inputs() == 16);
    CHECK(fam.num_virtual() == 2);
    for (std::size_t i = 0; i < fam.samples; ++i) {
        CHECK(fam.at(i, 16) == fam.at(i, 9));  // v1 copies z10
        CHECK(fam.at(i, 17) == fam.at(i, 2));  // v2 copies z3
    }
}

TEST_CASE("single input single target") {
    auto fam = generate_synthetic_uncorrelated(1, 64, {1}, 2, 1);
    for (std::size_t i = 0; i < fam.samples; ++i) CHECK(fam.at(i, 0) == fam.at(i, 1));
}

TEST_CASE("generator validates targets") {
    CHECK_THROWS_AS(generate_synthetic_uncorrelated(4, 64, {5}, 2, 1), std::invalid_argument);
    CHECK_THROWS_AS(generate_synthetic_uncorrelated(4, 64, {0}, 2, 1), std::invalid_argument);
    CHECK_THROWS_AS(generate_synthetic_uncorrelated(4, 64, {2, 2}, 2, 1), std::invalid_argument);
}

TEST_CASE("input signals are mutually uncorrelated") {
    auto fam = generate_synthetic_uncorrelated(64, 8192, {10, 20}, 3, 11);
    double worst = 0.0;
    for (std::size_t a = 0; a < 64; ++a)
        for (std::size_t b = a + 1; b < 64; ++b) worst = std::max(worst, std::abs(pearson(fam, a, b)));
    CHECK(worst <= 0.2);
}

TEST_CASE("nonlinear generator: product targets are uncorrelated with factors") {
    auto fam = generate_synthetic_nonlinear(8, 8192, {{1, 2}, {3, 4}}, 3, 13);
    CHECK(std::abs(pearson(fam, 8, 0)) <= 0.15);
    CHECK(std::abs(pearson(fam, 8, 1)) <= 0.15);
    CHECK(std::abs(pearson(fam, 9, 2)) <= 0.15);
}

TEST_CASE("nonlinear generator: virtual is the standardized product") {
    auto fam = generate_synthetic_nonlinear(2, 4096, {{1, 2}}, 2, 17);
    std::vector<double> prod(fam.samples);
    double mean = 0;
    for (std::size_t i = 0; i < fam.samples; ++i) {
        prod[i] = fam.at(i, 0) * fam.at(i, 1);
        mean += prod[i];
    }
    mean /= fam.samples;
    double var = 0;
    for (auto v : prod) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / fam.samples);
    for (std::size_t i = 0; i < fam.samples; ++i)
        CHECK(fam.at(i, 2) == doctest::Approx((prod[i] - mean) / sd).epsilon(1e-12));
}

TEST_CASE("generation is seed deterministic") {
    auto a = generate_synthetic_nonlinear(4, 256, {{1, 2}}, 2, 99);
    auto b = generate_synthetic_nonlinear(4, 256, {{1, 2}}, 2, 99);
    CHECK(a.values == b.values);
    auto c = generate_synthetic_uncorrelated(4, 256, {2}, 2, 5);
    auto d = generate_synthetic_uncorrelated(4, 256, {2}, 2, 5);
    CHECK(c.values == d.values);
}

TEST_CASE("csv roundtrip and loading") {
    auto path = temp_csv("z1,z2,v1\n1,2,3\n4,5,6\n7,8,9\n10,11,12\n");
    auto fam = load_csv(path, {{"v1", series_role::virtual_sensor}});
    CHECK(fam.num_inputs() == 2);
    CHECK(fam.num_virtual() == 1);
    CHECK(fam.samples == 4);
    CHECK(fam.at(3, 2) == 12.0);
    std::remove(path.c_str());

    auto gen = generate_synthetic_uncorrelated(3, 256, {1}, 2, 3);
    write_csv(gen, "vsens_test_rt.csv");
    auto back = load_csv("vsens_test_rt.csv", {{"v1", series_role::virtual_sensor}});
    CHECK(back.values == gen.values);
    CHECK(back.names == gen.names);
    std::remove("vsens_test_rt.csv");
}

TEST_CASE("csv rejects malformed input with locations") {
    auto empty = temp_csv("z1,v1\n");
    CHECK_THROWS_WITH_AS(load_csv(empty, {{"v1", series_role::virtual_sensor}}),
                         doctest::Contains("no data rows"), std::runtime_error);
    std::remove(empty.c_str());

    auto nan = temp_csv("z1,v1\n1,2\n3,NaN\n");
    CHECK_THROWS_WITH_AS(load_csv(nan, {{"v1", series_role::virtual_sensor}}),
                         doctest::Contains("row 3, column 'v1'"), std::runtime_error);
    std::remove(nan.c_str());

    auto ragged = temp_csv("z1,v1\n1,2\n3\n");
    CHECK_THROWS_WITH_AS(load_csv(ragged, {{"v1", series_role::virtual_sensor}}),
                         doctest::Contains("row 3"), std::runtime_error);
    std::remove(ragged.c_str());

    auto unknown = temp_csv("z1,v1\n1,2\n");
    CHECK_THROWS_WITH_AS(load_csv(unknown, {{"nope", series_role::virtual_sensor}}),
                         doctest::Contains("nope"), std::runtime_error);
    std::remove(unknown.c_str());
}

TEST_CASE("norm stats use population convention and clamp") {
    series_family fam;
    fam.names = {"z1", "v1"};
    fam.roles = {series_role::input, series_role::virtual_sensor};
    fam.samples = 3;
    fam.values = {1, 5, 2, 5, 3, 5};
    auto st = compute_norm_stats(fam, 1.0);
    CHECK(st.mean[0] == doctest::Approx(2.0));
    CHECK(st.stddev[0] == doctest::Approx(std::sqrt(2.0 / 3.0)));
    CHECK(st.stddev[1] == norm_stats::min_std);  // constant column clamps

    // normalize-then-invert roundtrip
    for (double x : {-3.25, 0.0, 17.5})
        CHECK(st.denormalize(st.normalize(x, 0), 0) == doctest::Approx(x).epsilon(1e-6));
}

TEST_CASE("normalized training split has zero mean unit std") {
    auto fam = generate_synthetic_uncorrelated(6, 2048, {1}, 3, 23);
    auto st = compute_norm_stats(fam, 0.75);
    const std::size_t tt = train_sample_count(fam, 0.75);
    for (std::size_t c = 0; c < fam.cols(); ++c) {
        double mean = 0;
        for (std::size_t i = 0; i < tt; ++i) mean += st.normalize(fam.at(i, c), c);
        mean /= tt;
        double var = 0;
        for (std::size_t i = 0; i < tt; ++i) {
            const double d = st.normalize(fam.at(i, c), c) - mean;
            var += d * d;
        }
        CHECK(std::abs(mean) <= 1e-6);
        CHECK(std::abs(std::sqrt(var / tt) - 1.0) <= 1e-4);
    }
}

TEST_CASE("window counts") {
    auto fam = generate_synthetic_uncorrelated(2, 256, {1}, 2, 31);
    auto st = compute_norm_stats(fam, 1.0);
    window_spec spec{2, 6, 32, 256};
    auto w = make_windows(fam, spec, st, 0, fam.samples);
    CHECK(w.size() == 1);
    CHECK(w[0].len == 256);

    auto fam2 = generate_synthetic_uncorrelated(2, (2 + 6 + 1) * 32, {1}, 2, 31);
    auto st2 = compute_norm_stats(fam2, 1.0);
    window_spec spec2{2, 6, 32, 32};
    CHECK(make_windows(fam2, spec2, st2, 0, fam2.samples).size() == 2);
}

TEST_CASE("window count matches brute-force enumeration") {
    rng gen(77);
    for (int rep = 0; rep < 20; ++rep) {
        const std::size_t t = 64 + gen.below(512);
        const std::size_t p = 1 + gen.below(8);
        window_spec spec{1 + gen.below(3), 1 + gen.below(4), p, 1 + gen.below(17)};
        if (spec.sample_len() > t) continue;
        auto fam = generate_synthetic_uncorrelated(2, t, {1}, 1, rep + 1);
        auto st = compute_norm_stats(fam, 1.0);
        auto w = make_windows(fam, spec, st, 0, t);
        std::size_t expected = 0;
        for (std::size_t start = 0; start + spec.sample_len() <= t; start += spec.stride) ++expected;
        CHECK(w.size() == expected);
    }
}

TEST_CASE("window longer than split errors") {
    auto fam = generate_synthetic_uncorrelated(2, 100, {1}, 2, 3);
    auto st = compute_norm_stats(fam, 1.0);
    window_spec spec{2, 6, 32, 32};  // needs 256 samples
    CHECK_THROWS_AS(make_windows(fam, spec, st, 0, fam.samples), std::invalid_argument);
}

TEST_CASE("windows never straddle the train/validation boundary") {
    auto fam = generate_synthetic_uncorrelated(2, 400, {1}, 2, 3);
    auto st = compute_norm_stats(fam, 0.5);
    window_spec spec{1, 2, 16, 16};  // 48-sample windows
    auto train = make_train_windows(fam, spec, st, 0.5);
    auto val = make_validation_windows(fam, spec, st, 0.5);
    for (const auto& w : train) CHECK(w.start + w.len <= 200);
    for (const auto& w : val) CHECK(w.start >= 200);
    CHECK(!train.empty());
    CHECK(!val.empty());
}
