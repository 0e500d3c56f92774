#include <doctest.h>

#include <cmath>
#include <vector>

#include "vsens/rng.hpp"
#include "vsens/tensor.hpp"

using namespace vsens;

namespace {

// independent central-difference gradient for a scalar function of one tensor
template <class F>
std::vector<double> finite_diff(F&& f, tensor<double>& x, double step) {
    std::vector<double> g(x.numel());
    no_grad_guard ng;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double saved = x.data()[i];
        x.data()[i] = saved + step;
        const double f1 = f().data()[0];
        x.data()[i] = saved - step;
        const double f2 = f().data()[0];
        x.data()[i] = saved;
        g[i] = (f1 - f2) / (2.0 * step);
    }
    return g;
}

} // namespace

TEST_CASE("matmul identity") {
    auto i2 = tensor<float>::from({2, 2}, {1, 0, 0, 1});
    auto x = tensor<float>::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto y = matmul(i2, x);
    for (std::size_t i = 0; i < 6; ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("matmul shape error names op and shapes") {
    auto a = tensor<float>::zeros({2, 3});
    auto b = tensor<float>::zeros({4, 5});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("matmul"), std::invalid_argument);
}

TEST_CASE("add requires exact shape") {
    auto a = tensor<float>::zeros({2, 3});
    auto b = tensor<float>::zeros({3, 2});
    CHECK_THROWS_AS(add(a, b), std::invalid_argument);
}

TEST_CASE("softmax symmetry and translation invariance") {
    auto s = softmax_lastdim(tensor<double>::from({1, 2}, {0.0, 0.0}));
    CHECK(s.data()[0] == doctest::Approx(0.5));
    CHECK(s.data()[1] == doctest::Approx(0.5));

    auto x = tensor<double>::from({1, 3}, {1.0, 2.0, 3.0});
    auto xc = tensor<double>::from({1, 3}, {8.0, 9.0, 10.0});  // x + 7
    auto a = softmax_lastdim(x);
    auto b = softmax_lastdim(xc);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one for random input") {
    rng gen(41);
    for (int rep = 0; rep < 10; ++rep) {
        const std::size_t m = 1 + gen.below(5), n = 1 + gen.below(7);
        auto x = tensor<double>::zeros({m, n});
        for (std::size_t i = 0; i < x.numel(); ++i) x.data()[i] = gen.uniform(-30.0, 30.0);
        auto p = softmax_lastdim(x);
        for (std::size_t i = 0; i < m; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < n; ++j) sum += p.at(i, j);
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("masked softmax matches manual restriction and rejects empty rows") {
    auto x = tensor<double>::from({2, 3}, {1.0, 2.0, 3.0, 0.5, -1.0, 0.0});
    bool_matrix allow = bool_matrix::full(2, 3, true);
    allow.set(0, 2, false);
    auto p = masked_softmax_lastdim(x, allow);
    const double z = std::exp(1.0) + std::exp(2.0);
    CHECK(p.at(0, 0) == doctest::Approx(std::exp(1.0) / z));
    CHECK(p.at(0, 1) == doctest::Approx(std::exp(2.0) / z));
    CHECK(p.at(0, 2) == 0.0);

    bool_matrix none = bool_matrix::full(2, 3, true);
    none.set(1, 0, false);
    none.set(1, 1, false);
    none.set(1, 2, false);
    CHECK_THROWS_AS(masked_softmax_lastdim(x, none), std::runtime_error);
}

TEST_CASE("backward of x*x at 3") {
    auto x = tensor<double>::from({1}, {3.0}, true);
    auto y = mul(x, x);
    backward(y);
    CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("backward of mse mean convention") {
    auto y = tensor<double>::from({1, 2}, {1.0, 0.0}, true);
    auto t = tensor<double>::from({1, 2}, {0.0, 0.0});
    auto loss = mse(y, t);
    backward(loss);
    CHECK(y.grad()[0] == doctest::Approx(1.0));  // 2*(1-0)/2
    CHECK(y.grad()[1] == doctest::Approx(0.0));
}

TEST_CASE("backward rejects non-scalar loss") {
    auto x = tensor<double>::from({1, 2}, {1.0, 2.0}, true);
    auto y = mul(x, x);
    CHECK_THROWS_AS(backward(y), std::invalid_argument);
}

TEST_CASE("tape is consumed by backward") {
    auto x = tensor<double>::from({1}, {2.0}, true);
    auto y = mul(x, x);
    backward(y);
    CHECK_THROWS_AS(backward(y), std::runtime_error);
}

TEST_CASE("three-layer matmul relu chain matches finite differences") {
    rng gen(7);
    auto x = tensor<double>::zeros({2, 4});
    for (std::size_t i = 0; i < x.numel(); ++i) x.data()[i] = gen.normal();
    auto w1 = tensor<double>::zeros({4, 5}, true);
    auto w2 = tensor<double>::zeros({5, 3}, true);
    auto w3 = tensor<double>::zeros({3, 2}, true);
    for (auto* w : {&w1, &w2, &w3})
        for (std::size_t i = 0; i < w->numel(); ++i) w->data()[i] = gen.normal();

    auto f = [&] {
        auto h = relu(matmul(x, w1));
        h = relu(matmul(h, w2));
        h = matmul(h, w3);
        return mean_all(mul(h, h));
    };
    const double err = grad_check(f, {&w1, &w2, &w3}, 1e-5);
    CHECK(err <= 1e-5);
}

TEST_CASE("grad_check on sum of squares") {
    auto x = tensor<double>::from({1, 2}, {1.0, 2.0}, true);
    auto f = [&] { return scale(mean_all(mul(x, x)), 2.0); };  // sum(x^2)
    CHECK(grad_check(f, {&x}, 1e-5) <= 1e-7);
}

TEST_CASE("random composed graphs match finite differences") {
    // property: backward through random small graphs tracks central
    // differences within 1e-4 relative error in 64-bit. Points whose ReLU
    // inputs sit within finite-difference reach of the kink violate the
    // oracle's differentiability precondition and are redrawn.
    std::size_t checked = 0;
    for (std::uint64_t seed = 0; checked < 8 && seed < 64; ++seed) {
        rng gen(seed + 100);
        const std::size_t m = 2 + gen.below(2);
        const std::size_t n = 2 + gen.below(3);
        auto a = tensor<double>::zeros({m, n}, true);
        auto b = tensor<double>::zeros({n, m}, true);
        auto c = tensor<double>::zeros({m, m}, true);
        auto gn = tensor<double>::zeros({1, m}, true);
        auto off = tensor<double>::zeros({1, m}, true);
        for (auto* t : {&a, &b, &c, &gn, &off})
            for (std::size_t i = 0; i < (*t).numel(); ++i) (*t).data()[i] = 0.5 * gen.normal();
        for (std::size_t i = 0; i < m; ++i) gn.data()[i] += 1.0;

        {
            no_grad_guard ng;
            auto pre = add(matmul(a, b), c);
            double closest = 1e9;
            for (std::size_t i = 0; i < pre.numel(); ++i)
                closest = std::min(closest, std::abs(pre.data()[i]));
            if (closest < 1e-3) continue;  // too close to the ReLU kink
        }

        auto f = [&] {
            std::vector<tensor<double>> in1{a, b};
            auto h = forward_op<double>(op_kind::matmul, in1);  // m x m
            std::vector<tensor<double>> in2{h, c};
            h = forward_op<double>(op_kind::add, in2);
            std::vector<tensor<double>> in3{h};
            h = forward_op<double>(op_kind::relu, in3);
            std::vector<tensor<double>> in4{h, gn, off};
            h = forward_op<double>(op_kind::layernorm, in4);
            std::vector<tensor<double>> in5{h};
            h = forward_op<double>(op_kind::softmax, in5);
            std::vector<tensor<double>> in6{h, c};
            h = forward_op<double>(op_kind::mse, in6);
            return h;
        };

        std::vector<tensor<double>*> params{&a, &b, &c, &gn, &off};
        for (auto* p : params) p->zero_grad();
        {
            auto loss = f();
            backward(loss);
        }
        const double step = 1e-6;
        for (auto* p : params) {
            std::vector<double> ad = p->grad();
            ad.resize(p->numel(), 0.0);
            for (std::size_t i = 0; i < p->numel(); ++i) {
                no_grad_guard ng;
                const double saved = p->data()[i];
                p->data()[i] = saved + step;
                const double f1 = f().data()[0];
                p->data()[i] = saved - step;
                const double f2 = f().data()[0];
                p->data()[i] = saved;
                const double fd = (f1 - f2) / (2.0 * step);
                // mixed tolerance: 1e-4 relative plus a floor for coordinates
                // whose true gradient sits below finite-difference roundoff
                CHECK(std::abs(ad[i] - fd) <= 1e-4 * (std::abs(fd) + std::abs(ad[i])) + 1e-7);
            }
        }
        ++checked;
    }
    CHECK(checked == 8);
}

TEST_CASE("autodiff matches independent finite differences through softmax") {
    auto x = tensor<double>::from({2, 3}, {0.3, -0.7, 1.1, 0.2, 0.9, -0.4}, true);
    auto t = tensor<double>::from({2, 3}, {1.0, 0.0, 0.0, 0.0, 1.0, 0.0});
    auto f = [&] { return mse(softmax_lastdim(x), t); };
    x.zero_grad();
    auto loss = f();
    backward(loss);
    auto fd = finite_diff(f, x, 1e-6);
    for (std::size_t i = 0; i < x.numel(); ++i)
        CHECK(std::abs(x.grad()[i] - fd[i]) / (std::abs(fd[i]) + 1e-12) <= 1e-4);
}

TEST_CASE("gather scatter slice concat gradients") {
    auto a = tensor<double>::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
    auto f = [&] {
        auto g = gather_rows(a, {2, 0, 2});           // repeated index
        auto s = scatter_rows(g, {1, 0, 2}, 3);       // permutation scatter
        auto left = slice_cols(s, 0, 1);
        auto right = slice_cols(s, 1, 1);
        auto cat = concat_cols(std::vector<tensor<double>>{right, left});
        auto rows = concat_rows(std::vector<tensor<double>>{cat, cat});
        return mean_all(mul(rows, rows));
    };
    CHECK(grad_check(f, {&a}, 1e-6) <= 1e-6);
}

TEST_CASE("forward ops are deterministic bit for bit") {
    rng gen(5);
    auto a = tensor<float>::zeros({4, 4});
    auto b = tensor<float>::zeros({4, 4});
    for (std::size_t i = 0; i < 16; ++i) {
        a.data()[i] = static_cast<float>(gen.normal());
        b.data()[i] = static_cast<float>(gen.normal());
    }
    auto r1 = softmax_lastdim(matmul(relu(a), b));
    auto r2 = softmax_lastdim(matmul(relu(a), b));
    for (std::size_t i = 0; i < 16; ++i) CHECK(r1.data()[i] == r2.data()[i]);
}

TEST_CASE("allocation counters track live payload bytes") {
    reset_peak_allocation();
    const auto before = live_allocation_bytes();
    {
        auto t = tensor<float>::zeros({64, 64});
        CHECK(live_allocation_bytes() == before + 64 * 64 * sizeof(float));
        CHECK(peak_allocation_bytes() >= before + 64 * 64 * sizeof(float));
    }
    CHECK(live_allocation_bytes() == before);
}

TEST_CASE("matmul flop counter counts 2mnk") {
    reset_matmul_flops();
    auto a = tensor<float>::zeros({3, 4});
    auto b = tensor<float>::zeros({4, 5});
    (void)matmul(a, b);
    CHECK(matmul_flops() == 2u * 3u * 4u * 5u);
}
