#include <doctest.h>

#include <cmath>
#include <limits>

#include "vsens/engine.hpp"
#include "vsens/model.hpp"
#include "vsens/relevance.hpp"

using namespace vsens;

namespace {

constexpr double neg_inf = -std::numeric_limits<double>::infinity();

family_layout toy_layout(std::size_t m, std::size_t n) {
    series_family fam;
    for (std::size_t i = 0; i < m; ++i) {
        fam.names.push_back("z" + std::to_string(i + 1));
        fam.roles.push_back(series_role::input);
    }
    for (std::size_t j = 0; j < n; ++j) {
        fam.names.push_back("v" + std::to_string(j + 1));
        fam.roles.push_back(series_role::virtual_sensor);
    }
    fam.samples = 1;
    fam.values.assign(m + n, 0.0);
    return family_layout::of(fam);
}

} // namespace

TEST_CASE("bias is the outer product of relevance over token variates") {
    auto table = relevance_table<double>::make(1, 2);
    table.rows.data()[0] = 2.0;
    table.rows.data()[1] = 1.0;
    auto b = bias_from_relevance(table, 0, {0, 1});
    CHECK(b.at(0, 0) == doctest::Approx(4.0));
    CHECK(b.at(0, 1) == doctest::Approx(2.0));
    CHECK(b.at(1, 0) == doctest::Approx(2.0));
    CHECK(b.at(1, 1) == doctest::Approx(1.0));
}

TEST_CASE("bias tiles across time: slot-pair blocks repeat") {
    auto table = relevance_table<double>::make(1, 2);
    table.rows.data()[0] = 1.5;
    table.rows.data()[1] = -0.5;
    // 3 slots x 2 variates, slot-major token order
    std::vector<std::size_t> variate_of = {0, 1, 0, 1, 0, 1};
    auto b = bias_from_relevance(table, 0, variate_of);
    CHECK(b.shape() == std::vector<std::size_t>{6, 6});
    // naive double loop over tokens as the oracle
    const double r[2] = {1.5, -0.5};
    for (std::size_t a = 0; a < 6; ++a)
        for (std::size_t c = 0; c < 6; ++c)
            CHECK(b.at(a, c) == doctest::Approx(r[variate_of[a]] * r[variate_of[c]]));
}

TEST_CASE("bias is differentiable with respect to the relevance table") {
    auto table = relevance_table<double>::make(2, 3);
    for (std::size_t i = 0; i < 6; ++i) table.rows.data()[i] = 0.5 + 0.25 * i;
    auto f = [&] {
        auto b = combined_bias(table, {0, 1}, {0, 1, 2, 2});
        return mean_all(mul(b, b));
    };
    CHECK(grad_check(f, {&table.rows}, 1e-6) <= 1e-6);
}

TEST_CASE("combined bias averages the per-sensor outer products") {
    auto table = relevance_table<double>::make(2, 2);
    table.rows.data()[0] = 2.0;
    table.rows.data()[1] = 1.0;
    table.rows.data()[2] = 0.0;
    table.rows.data()[3] = 1.0;
    auto b = combined_bias(table, {0, 1}, {0, 1});
    CHECK(b.at(0, 0) == doctest::Approx(2.0));
    CHECK(b.at(0, 1) == doctest::Approx(1.0));
    CHECK(b.at(1, 0) == doctest::Approx(1.0));
    CHECK(b.at(1, 1) == doctest::Approx(1.0));

    // singleton request equals the single-sensor bias
    auto one = combined_bias(table, {0}, {0, 1});
    auto direct = bias_from_relevance(table, 0, {0, 1});
    for (std::size_t i = 0; i < 4; ++i) CHECK(one.data()[i] == direct.data()[i]);

    CHECK_THROWS_AS(combined_bias(table, {}, {0, 1}), std::invalid_argument);
}

TEST_CASE("sparsify thresholds the raw row and keeps the own variate") {
    auto layout = toy_layout(2, 1);
    auto table = relevance_table<double>::make(1, 3);
    table.rows.data()[0] = 0.5;
    table.rows.data()[1] = 2.0;
    table.rows.data()[2] = 1.0;  // own virtual variate

    auto all = sparsify(table, layout, 0, neg_inf);
    CHECK(all.variates == std::vector<std::size_t>{0, 1, 2});

    auto some = sparsify(table, layout, 0, 1.0);
    CHECK(some.variates == std::vector<std::size_t>{1, 2});

    // own variate survives even when its relevance is below threshold
    auto own_kept = sparsify(table, layout, 0, 10.0);
    CHECK(own_kept.variates == std::vector<std::size_t>{2});
}

TEST_CASE("union of input sets") {
    input_set a{0, {0, 1, 4}, 0.0};
    input_set b{1, {1, 2, 5}, 0.0};
    CHECK(union_variates({a, b}) == std::vector<std::size_t>{0, 1, 2, 4, 5});
    CHECK(union_variates({a}) == a.variates);
    CHECK_THROWS_AS(union_variates({}), std::invalid_argument);

    // union monotonicity: |U| <= sum of sizes, strict when sets overlap
    CHECK(union_variates({a, b}).size() < a.variates.size() + b.variates.size());
}

TEST_CASE("correlation relevance ranks a replicated source first") {
    auto fam = generate_synthetic_uncorrelated(8, 4096, {3}, 3, 5);
    auto set = correlation_relevance(fam, 0.8, 0, 1);
    // top-1 input must be z3 (column 2), plus the sensor's own column 8
    CHECK(set.variates == std::vector<std::size_t>{2, 8});

    auto all = correlation_relevance(fam, 0.8, 0, 8);
    CHECK(all.variates.size() == 9);
    CHECK_THROWS_AS(correlation_relevance(fam, 0.8, 0, 9), std::invalid_argument);
}

TEST_CASE("correlation relevance misses nonlinear factors") {
    auto fam = generate_synthetic_nonlinear(12, 8192, {{2, 7}}, 3, 21);
    auto set = correlation_relevance(fam, 0.8, 0, 2);
    // the true factors are uncorrelated with the product target, so a small
    // top-k correlation set should not contain them
    CHECK(!set.contains(1));
    CHECK(!set.contains(6));
}

TEST_CASE("random relevance") {
    auto fam = generate_synthetic_uncorrelated(6, 512, {2}, 2, 9);
    auto full = random_relevance(1, fam, 0, 6);
    CHECK(full.variates.size() == 7);  // all inputs + own

    auto a = random_relevance(42, fam, 0, 3);
    auto b = random_relevance(42, fam, 0, 3);
    CHECK(a.variates == b.variates);

    auto none = random_relevance(7, fam, 0, 0);
    CHECK(none.variates == std::vector<std::size_t>{6});  // own id only

    CHECK_THROWS_AS(random_relevance(7, fam, 0, 7), std::invalid_argument);
}

TEST_CASE("set similarity") {
    input_set a{0, {1, 2}, 0.0};
    input_set b{1, {2, 3}, 0.0};
    input_set c{2, {4, 5}, 0.0};
    CHECK(set_similarity({a, a}) == doctest::Approx(1.0));
    CHECK(set_similarity({a, c}) == doctest::Approx(0.0));
    CHECK(set_similarity({a, b}) == doctest::Approx(1.0 / 3.0));
    CHECK_THROWS_AS(set_similarity({a}), std::invalid_argument);

    CHECK(set_overlap_fraction({a, b}) == doctest::Approx(0.5));
}

TEST_CASE("sparsity against the dense baseline") {
    CHECK(sparsity_of(10, 10) == doctest::Approx(0.0));
    CHECK(sparsity_of(5, 10) == doctest::Approx(0.5));
    CHECK_THROWS_AS(sparsity_of(11, 10), std::invalid_argument);
}

TEST_CASE("raising the threshold never decreases sparsity") {
    auto layout = toy_layout(6, 2);
    auto table = relevance_table<double>::make(2, 8);
    rng gen(3);
    for (std::size_t i = 0; i < 16; ++i) table.rows.data()[i] = gen.normal();
    double prev = -1.0;
    for (double thr : {neg_inf, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0}) {
        std::vector<input_set> sets{sparsify(table, layout, 0, thr), sparsify(table, layout, 1, thr)};
        const double sp = sparsity_of(sets, 8);
        CHECK(sp >= prev);
        prev = sp;
    }
}
