#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace vsens {

// ---------------------------------------------------------------------------
// instrumentation counters
// ---------------------------------------------------------------------------

namespace detail {

struct alloc_stats {
    std::uint64_t live_bytes = 0;
    std::uint64_t peak_bytes = 0;
};

inline alloc_stats& allocs() {
    static alloc_stats s;
    return s;
}

inline std::uint64_t& matmul_flop_counter() {
    static std::uint64_t n = 0;
    return n;
}

// Tensor payload buffer; tracks live/peak bytes for the memory proxy.
template <class T>
struct payload {
    std::vector<T> v;
    explicit payload(std::size_t n) : v(n) {
        auto& a = allocs();
        a.live_bytes += n * sizeof(T);
        if (a.live_bytes > a.peak_bytes) a.peak_bytes = a.live_bytes;
    }
    payload(const payload&) = delete;
    ~payload() {
        allocs().live_bytes -= v.size() * sizeof(T);
    }
};

template <class T>
struct grad_slot {
    std::vector<T> g; // empty means zero
};

inline bool& grad_enabled_flag() {
    thread_local bool f = true;
    return f;
}

} // namespace detail

inline void reset_peak_allocation() { detail::allocs().peak_bytes = detail::allocs().live_bytes; }
inline std::uint64_t peak_allocation_bytes() { return detail::allocs().peak_bytes; }
inline std::uint64_t live_allocation_bytes() { return detail::allocs().live_bytes; }

inline void reset_matmul_flops() { detail::matmul_flop_counter() = 0; }
inline std::uint64_t matmul_flops() { return detail::matmul_flop_counter(); }

// Disables tape recording in scope (inference paths).
class no_grad_guard {
public:
    no_grad_guard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~no_grad_guard() { detail::grad_enabled_flag() = prev_; }
    no_grad_guard(const no_grad_guard&) = delete;

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// ---------------------------------------------------------------------------
// shapes
// ---------------------------------------------------------------------------

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Boolean allow-matrix used by masked attention; not differentiable.
struct bool_matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> v;

    static bool_matrix full(std::size_t r, std::size_t c, bool value) {
        return bool_matrix{r, c, std::vector<std::uint8_t>(r * c, value ? 1 : 0)};
    }
    bool at(std::size_t r, std::size_t c) const { return v[r * cols + c] != 0; }
    void set(std::size_t r, std::size_t c, bool value) { v[r * cols + c] = value ? 1 : 0; }
};

// ---------------------------------------------------------------------------
// tensor + tape
// ---------------------------------------------------------------------------

template <class T>
class tensor;

template <class T>
struct tape_node {
    std::string_view op;
    std::vector<tensor<T>> parents;
    std::shared_ptr<detail::grad_slot<T>> out_grad;
    std::size_t out_numel = 0;
    // consumes out_grad, accumulates into parents; nulled once run
    std::function<void(tape_node<T>&)> backprop;
};

// Dense row-major tensor of rank 1 or 2. Copies share storage; forward ops
// never mutate their inputs, so shared storage is safe for concurrent reads.
template <class T>
class tensor {
public:
    using value_type = T;

    tensor() = default;

    static tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        tensor t;
        t.shape_ = std::move(shape);
        t.check_shape();
        t.data_ = std::make_shared<detail::payload<T>>(t.numel_of(t.shape_));
        t.set_requires_grad(requires_grad);
        return t;
    }

    static tensor full(std::vector<std::size_t> shape, T value, bool requires_grad = false) {
        tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.data(), t.data() + t.numel(), value);
        return t;
    }

    static tensor from(std::vector<std::size_t> shape, std::vector<T> values, bool requires_grad = false) {
        tensor t;
        t.shape_ = std::move(shape);
        t.check_shape();
        if (t.numel_of(t.shape_) != values.size())
            throw std::invalid_argument("tensor::from: " + std::to_string(values.size()) +
                                        " values for shape " + shape_str(t.shape_));
        t.data_ = std::make_shared<detail::payload<T>>(values.size());
        std::copy(values.begin(), values.end(), t.data());
        t.set_requires_grad(requires_grad);
        return t;
    }

    static tensor scalar(T value) { return from({1}, {value}); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_ ? data_->v.size() : 0; }
    bool defined() const { return static_cast<bool>(data_); }

    // rank-1 tensors are treated as a single row
    std::pair<std::size_t, std::size_t> as2d() const {
        if (rank() == 1) return {1, shape_[0]};
        if (rank() == 2) return {shape_[0], shape_[1]};
        throw std::invalid_argument("tensor: rank " + std::to_string(rank()) + " not supported");
    }

    T* data() { return data_->v.data(); }
    const T* data() const { return data_->v.data(); }
    std::vector<T>& values() { return data_->v; }
    const std::vector<T>& values() const { return data_->v; }
    T at(std::size_t r, std::size_t c) const {
        auto [rows, cols] = as2d();
        (void)rows;
        return data_->v[r * cols + c];
    }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool f) {
        requires_grad_ = f;
        if (f && !grad_) grad_ = std::make_shared<detail::grad_slot<T>>();
    }

    // empty vector means an all-zero gradient
    const std::vector<T>& grad() const {
        static const std::vector<T> none;
        return grad_ ? grad_->g : none;
    }
    std::vector<T>& grad_buffer() {
        if (!grad_) grad_ = std::make_shared<detail::grad_slot<T>>();
        if (grad_->g.size() != numel()) grad_->g.assign(numel(), T(0));
        return grad_->g;
    }
    void zero_grad() {
        if (grad_) grad_->g.clear();
    }

    std::shared_ptr<detail::grad_slot<T>> grad_slot_ptr() const { return grad_; }
    std::shared_ptr<tape_node<T>>& node() { return node_; }
    const std::shared_ptr<tape_node<T>>& node() const { return node_; }

    tensor detach() const {
        tensor t;
        t.shape_ = shape_;
        t.data_ = data_;
        return t;
    }

    tensor clone() const {
        tensor t = zeros(shape_, requires_grad_);
        std::copy(data(), data() + numel(), t.data());
        return t;
    }

    // shares storage, new shape; used by reshape()
    tensor with_shape(std::vector<std::size_t> shape) const {
        tensor t;
        t.shape_ = std::move(shape);
        t.check_shape();
        if (t.numel_of(t.shape_) != numel())
            throw std::invalid_argument("reshape: cannot view " + shape_str(shape_) + " as " +
                                        shape_str(t.shape_));
        t.data_ = data_;
        return t;
    }

private:
    void check_shape() const {
        if (shape_.empty() || shape_.size() > 2)
            throw std::invalid_argument("tensor: rank must be 1 or 2, got " + shape_str(shape_));
        for (auto e : shape_)
            if (e == 0) throw std::invalid_argument("tensor: zero extent in " + shape_str(shape_));
    }
    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (auto e : s) n *= e;
        return n;
    }

    std::vector<std::size_t> shape_;
    std::shared_ptr<detail::payload<T>> data_;
    std::shared_ptr<detail::grad_slot<T>> grad_;
    std::shared_ptr<tape_node<T>> node_;
    bool requires_grad_ = false;
};

// ---------------------------------------------------------------------------
// gemm kernel (accumulating). ta/tb flip the stored layout of a/b.
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
          const T* a, const T* b, T* c) {
    matmul_flop_counter() += static_cast<std::uint64_t>(2) * m * n * k;
    if (!ta && !tb) {
        for (std::size_t i = 0; i < m; ++i) {
            T* ci = c + i * n;
            const T* ai = a + i * k;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const T av = ai[kk];
                const T* bk = b + kk * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += av * bk[j];
            }
        }
    } else if (!ta && tb) {
        // b stored [n x k]
        for (std::size_t i = 0; i < m; ++i) {
            const T* ai = a + i * k;
            T* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const T* bj = b + j * k;
                T acc = T(0);
                for (std::size_t kk = 0; kk < k; ++kk) acc += ai[kk] * bj[kk];
                ci[j] += acc;
            }
        }
    } else if (ta && !tb) {
        // a stored [k x m]
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T* ak = a + kk * m;
            const T* bk = b + kk * n;
            for (std::size_t i = 0; i < m; ++i) {
                const T av = ak[i];
                T* ci = c + i * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += av * bk[j];
            }
        }
    } else {
        throw std::invalid_argument("gemm: double-transposed form not used");
    }
}

template <class T>
std::shared_ptr<tape_node<T>> make_node(std::string_view op, std::vector<tensor<T>> parents,
                                        tensor<T>& out) {
    auto nd = std::make_shared<tape_node<T>>();
    nd->op = op;
    nd->parents = std::move(parents);
    nd->out_grad = out.grad_slot_ptr();
    nd->out_numel = out.numel();
    return nd;
}

template <class T>
bool any_requires_grad(std::initializer_list<const tensor<T>*> ts) {
    if (!grad_enabled_flag()) return false;
    for (auto* t : ts)
        if (t->requires_grad()) return true;
    return false;
}

} // namespace detail

// ---------------------------------------------------------------------------
// forward ops
//
// Broadcasting is deliberately minimal: all elementwise ops require exact
// shape equality; the only broadcast form is add_rowvec (a row-vector bias
// added to every row of a matrix). Anything else is a shape error.
// ---------------------------------------------------------------------------

template <class T>
tensor<T> matmul(const tensor<T>& a, const tensor<T>& b) {
    auto [m, k] = a.as2d();
    auto [k2, n] = b.as2d();
    if (k != k2)
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    tensor<T> out = tensor<T>::zeros({m, n});
    detail::gemm<T>(false, false, m, n, k, a.data(), b.data(), out.data());
    if (detail::any_requires_grad<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto nd = detail::make_node<T>("matmul", {a, b}, out);
        nd->backprop = [m, n, k](tape_node<T>& node) {
            const auto& go = node.out_grad->g;
            if (go.empty()) return;
            tensor<T>& pa = node.parents[0];
            tensor<T>& pb = node.parents[1];
            if (pa.requires_grad())
                detail::gemm<T>(false, true, m, k, n, go.data(), pb.data(), pa.grad_buffer().data());
            if (pb.requires_grad())
                detail::gemm<T>(true, false, k, n, m, pa.data(), go.data(), pb.grad_buffer().data());
        };
        out.node() = nd;
    }
    return out;
}

template <class T>
tensor<T> add(const tensor<T>& a, const tensor<T>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    tensor<T> out = tensor<T>::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::any_requires_grad<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto nd = detail::make_node<T>("add", {a, b}, out);
        nd->backprop = [](tape_node<T>& node) {
            const auto& go = node.out_grad->g;
            if (go.empty()) return;
            for (int p = 0; p < 2; ++p) {
                tensor<T>& t = node.parents[p];
                if (!t.requires_grad()) continue;
                auto& g = t.grad_buffer();
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
            }
        };
        out.node() = nd;
    }
    return out;
}

// a[m,n] + row-vector b[n] broadcast over rows (the bias-add form)
template <class T>
tensor<T> add_rowvec(const tensor<T>& a, const tensor<T>& b) {
    auto [m, n] = a.as2d();
    auto [br, bn] = b.as2d();
    if (br != 1 || bn != n)
        throw std::invalid_argument("add_rowvec: bias " + shape_str(b.shape()) +
                                    " does not match trailing axis of " + shape_str(a.shape()));
    tensor<T> out = tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out.data()[i * n + j] = a.data()[i * n + j] + b.data()[j];
    if (detail::any_requires_grad<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto nd = detail::make_node<T>("add_rowvec", {a, b}, out);
        nd->backprop = [m, n](tape_node<T>& node) {
            const auto& go = node.out_grad->g;
            if (go.empty()) return;
            tensor<T>& pa = node.parents[0];
            tensor<T>& pb = node.parents[1];
            if (pa.requires_grad()) {
                auto& g = pa.grad_buffer();
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
            }
            if (pb.requires_grad()) {
                auto& g = pb.grad_buffer();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) g[j] += go[i * n + j];
            }
        };
        out.node() = nd;
    }
    return out;
}

template <class T>
tensor<T> mul(const tensor<T>& a, const tensor<T>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    tensor<T> out = tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::any_requires_grad<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto nd = detail::make_node<T>("mul", {a, b}, out);
        nd->backprop = [](tape_node<T>& node) {
            const auto& go = node.out_grad->g;
            if (go.empty()) return;
            tensor<T>& pa = node.parents[0];
            tensor<T>& pb = node.parents[1];
            if (pa.requires_grad()) {
                auto& g = pa.grad_buffer();
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * pb.data()[i];
            }
            if (pb.requires_grad()) {
                auto& g = pb.grad_buffer();
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * pa.data()[i];
            }
        };
        out.node() = nd;
    }
    return out;
}

template <class T>
tensor<T> scale(const tensor<T>& a, T c) {
    tensor<T> out = tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * c;
    if (detail::any_requires_grad<T>({&a})) {
        out.set_requires_grad(true);
        auto nd = detail::make_node<T>("scale", {a}, out);
        nd->backprop = [c](tape_node<T>& node) {
            const auto& go = node.out_grad->g;
            if (go.empty()) return;
            tensor<T>& pa = node.parents[0];
            if (!pa.requires_grad()) return;
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * c;
        };
        out.node() = nd;
    }
    return out;
}

template <class T>
tensor<T> sub(const tensor<T>& a, const tensor<T>& b) {
    return add(a, scale(b, T(-1)));
}

template <class T>
tensor<T> relu(const tensor<T>& a) {
    tensor<T> out = tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data()[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
    if (detail::any_requires_grad<T>({&a})) {
        out.set_requires_grad(true);
        auto nd = detail::make_node<T>("relu", {a}, out);
        nd->backprop = [](tape_node<T>& node) {
            const auto& go = node.out_grad->g;
            if (go.empty()) return;
            tensor<T>& pa = node.parents[0];
            if (!pa.requires_grad()) return;
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < go.size(); ++i)
                if (pa.data()[i] > T(0)) g[i] += go[i];
        };
        out.node() = nd;
    }
    return out;
}

namespace detail {

// shared softmax backward: dx = p * (dy - sum(dy * p)) per row
template <class T>
void softmax_backward_rows(const std::vector<T>& p, const std::vector<T>& go,
                           std::size_t m, std::size_t n, std::vector<T>& gx) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* pi = p.data() + i * n;
        const T* gi = go.data() + i * n;
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += gi[j] * pi[j];
        T* gxi = gx.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) gxi[j] += pi[j] * (gi[j] - dot);
    }
}

} // namespace detail

// softmax over the last axis, max-subtracted for stability
template <class T>
tensor<T> softmax_lastdim(const tensor<T>& a) {
    auto [m, n] = a.as2d();
    tensor<T> out = tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < m; ++i) {
        const T* x = a.data() + i * n;
        T* y = out.data() + i * n;
        T mx = x[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        for (std::size_t j = 0; j < n; ++j) y[j] /= sum;
    }
    if (detail::any_requires_grad<T>({&a})) {
        out.set_requires_grad(true);
        auto nd = detail::make_node<T>("softmax", {a}, out);
        std::vector<T> p(out.data(), out.data() + out.numel());
        nd->backprop = [m, n, p = std::move(p)](tape_node<T>& node) {
            const auto& go = node.out_grad->g;
            if (go.empty()) return;
            tensor<T>& pa = node.parents[0];
            if (!pa.requires_grad()) return;
            detail::softmax_backward_rows(p, go, m, n, pa.grad_buffer());
        };
        out.node() = nd;
    }
    return out;
}

// softmax over the allowed entries of each row; disallowed entries get
// probability (and gradient) exactly zero. A row with no allowed entry is an
// error: the block-causal mask always permits same-slot self-attention.
template <class T>
tensor<T> masked_softmax_lastdim(const tensor<T>& a, const bool_matrix& allow) {
    auto [m, n] = a.as2d();
    if (allow.rows != m || allow.cols != n)
        throw std::invalid_argument("masked_softmax: mask " + std::to_string(allow.rows) + "x" +
                                    std::to_string(allow.cols) + " vs scores " + shape_str(a.shape()));
    tensor<T> out = tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < m; ++i) {
        const T* x = a.data() + i * n;
        T* y = out.data() + i * n;
        T mx = std::numeric_limits<T>::lowest();
        bool any = false;
        for (std::size_t j = 0; j < n; ++j)
            if (allow.at(i, j)) {
                mx = any ? std::max(mx, x[j]) : x[j];
                any = true;
            }
        if (!any)
            throw std::runtime_error("masked_softmax: query row " + std::to_string(i) +
                                     " has no allowed keys");
        T sum = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            if (allow.at(i, j)) {
                y[j] = std::exp(x[j] - mx);
                sum += y[j];
            }
        }
        for (std::size_t j = 0; j < n; ++j)
            if (allow.at(i, j)) y[j] /= sum;
    }
    if (detail::any_requires_grad<T>({&a})) {
        out.set_requires_grad(true);
        auto nd = detail::make_node<T>("masked_softmax", {a}, out);
        std::vector<T> p(out.data(), out.data() + out.numel());
        nd->backprop = [m, n, p = std::move(p)](tape_node<T>& node) {
            const auto& go = node.out_grad->g;
            if (go.empty()) return;
            tensor<T>& pa = node.parents[0];
            if (!pa.requires_grad()) return;
            detail::softmax_backward_rows(p, go, m, n, pa.grad_buffer());
        };
        out.node() = nd;
    }
    return out;
}

// layer normalization over the last axis with learned gain/offset
template <class T>
tensor<T> layernorm_lastdim(const tensor<T>& a, const tensor<T>& gain, const tensor<T>& offset,
                            T eps = T(1e-5)) {
    auto [m, n] = a.as2d();
    auto [gr, gn] = gain.as2d();
    auto [or_, on] = offset.as2d();
    if (gr != 1 || gn != n || or_ != 1 || on != n)
        throw std::invalid_argument("layernorm: gain/offset must be length-" + std::to_string(n) +
                                    " rows, got " + shape_str(gain.shape()) + ", " +
                                    shape_str(offset.shape()));
    tensor<T> out = tensor<T>::zeros(a.shape());
    std::vector<T> xhat(m * n), inv(m);
    for (std::size_t i = 0; i < m; ++i) {
        const T* x = a.data() + i * n;
        T mu = T(0);
        for (std::size_t j = 0; j < n; ++j) mu += x[j];
        mu /= T(n);
        T var = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            const T d = x[j] - mu;
            var += d * d;
        }
        var /= T(n);
        const T iv = T(1) / std::sqrt(var + eps);
        inv[i] = iv;
        T* y = out.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (x[j] - mu) * iv;
            y[j] = gain.data()[j] * xhat[i * n + j] + offset.data()[j];
        }
    }
    if (detail::any_requires_grad<T>({&a, &gain, &offset})) {
        out.set_requires_grad(true);
        auto nd = detail::make_node<T>("layernorm", {a, gain, offset}, out);
        nd->backprop = [m, n, xhat = std::move(xhat), inv = std::move(inv)](tape_node<T>& node) {
            const auto& go = node.out_grad->g;
            if (go.empty()) return;
            tensor<T>& pa = node.parents[0];
            tensor<T>& pg = node.parents[1];
            tensor<T>& po = node.parents[2];
            for (std::size_t i = 0; i < m; ++i) {
                const T* gi = go.data() + i * n;
                const T* xh = xhat.data() + i * n;
                if (pg.requires_grad()) {
                    auto& g = pg.grad_buffer();
                    for (std::size_t j = 0; j < n; ++j) g[j] += gi[j] * xh[j];
                }
                if (po.requires_grad()) {
                    auto& g = po.grad_buffer();
                    for (std::size_t j = 0; j < n; ++j) g[j] += gi[j];
                }
                if (pa.requires_grad()) {
                    T m1 = T(0), m2 = T(0);
                    std::vector<T> dxhat(n);
                    for (std::size_t j = 0; j < n; ++j) {
                        dxhat[j] = gi[j] * pg.data()[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xh[j];
                    }
                    m1 /= T(n);
                    m2 /= T(n);
                    auto& g = pa.grad_buffer();
                    for (std::size_t j = 0; j < n; ++j)
                        g[i * n + j] += inv[i] * (dxhat[j] - m1 - xh[j] * m2);
                }
            }
        };
        out.node() = nd;
    }
    return out;
}

template <class T>
tensor<T> transpose(const tensor<T>& a) {
    auto [m, n] = a.as2d();
    tensor<T> out = tensor<T>::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
    if (detail::any_requires_grad<T>({&a})) {
        out.set_requires_grad(true);
        auto nd = detail::make_node<T>("transpose", {a}, out);
        nd->backprop = [m, n](tape_node<T>& node) {
            const auto& go = node.out_grad->g;
            if (go.empty()) return;
            tensor<T>& pa = node.parents[0];
            if (!pa.requires_grad()) return;
            auto& g = pa.grad_buffer();
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t i = 0; i < m; ++i) g[i * n + j] += go[j * m + i];
        };
        out.node() = nd;
    }
    return out;
}

template <class T>
tensor<T> reshape(const tensor<T>& a, std::vector<std::size_t> shape) {
    tensor<T> out = a.detach().with_shape(std::move(shape));
    if (detail::any_requires_grad<T>({&a})) {
        out.set_requires_grad(true);
        auto nd = detail::make_node<T>("reshape", {a}, out);
        nd->backprop = [](tape_node<T>& node) {
            const auto& go = node.out_grad->g;
            if (go.empty()) return;
            tensor<T>& pa = node.parents[0];
            if (!pa.requires_grad()) return;
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
        };
        out.node() = nd;
    }
    return out;
}

template <class T>
tensor<T> mean_all(const tensor<T>& a) {
    const std::size_t n = a.numel();
    T sum = T(0);
    for (std::size_t i = 0; i < n; ++i) sum += a.data()[i];
    tensor<T> out = tensor<T>::from({1}, {sum / T(n)});
    if (detail::any_requires_grad<T>({&a})) {
        out.set_requires_grad(true);
        auto nd = detail::make_node<T>("mean", {a}, out);
        nd->backprop = [n](tape_node<T>& node) {
            const auto& go = node.out_grad->g;
            if (go.empty()) return;
            tensor<T>& pa = node.parents[0];
            if (!pa.requires_grad()) return;
            auto& g = pa.grad_buffer();
            const T d = go[0] / T(n);
            for (std::size_t i = 0; i < n; ++i) g[i] += d;
        };
        out.node() = nd;
    }
    return out;
}

// mean squared error over all elements (mean convention: d/dpred = 2(pred-target)/n)
template <class T>
tensor<T> mse(const tensor<T>& pred, const tensor<T>& target) {
    if (pred.shape() != target.shape())
        throw std::invalid_argument("mse: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                    shape_str(target.shape()));
    const std::size_t n = pred.numel();
    T sum = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        const T d = pred.data()[i] - target.data()[i];
        sum += d * d;
    }
    tensor<T> out = tensor<T>::from({1}, {sum / T(n)});
    if (detail::any_requires_grad<T>({&pred, &target})) {
        out.set_requires_grad(true);
        auto nd = detail::make_node<T>("mse", {pred, target}, out);
        nd->backprop = [n](tape_node<T>& node) {
            const auto& go = node.out_grad->g;
            if (go.empty()) return;
            tensor<T>& pp = node.parents[0];
            tensor<T>& pt = node.parents[1];
            const T s = T(2) * go[0] / T(n);
            if (pp.requires_grad()) {
                auto& g = pp.grad_buffer();
                for (std::size_t i = 0; i < n; ++i) g[i] += s * (pp.data()[i] - pt.data()[i]);
            }
            if (pt.requires_grad()) {
                auto& g = pt.grad_buffer();
                for (std::size_t i = 0; i < n; ++i) g[i] -= s * (pp.data()[i] - pt.data()[i]);
            }
        };
        out.node() = nd;
    }
    return out;
}

template <class T>
tensor<T> slice_cols(const tensor<T>& a, std::size_t c0, std::size_t len) {
    auto [m, n] = a.as2d();
    if (c0 + len > n)
        throw std::invalid_argument("slice_cols: [" + std::to_string(c0) + ", " +
                                    std::to_string(c0 + len) + ") out of " + shape_str(a.shape()));
    tensor<T> out = tensor<T>::zeros({m, len});
    for (std::size_t i = 0; i < m; ++i)
        std::copy(a.data() + i * n + c0, a.data() + i * n + c0 + len, out.data() + i * len);
    if (detail::any_requires_grad<T>({&a})) {
        out.set_requires_grad(true);
        auto nd = detail::make_node<T>("slice_cols", {a}, out);
        nd->backprop = [m, n, c0, len](tape_node<T>& node) {
            const auto& go = node.out_grad->g;
            if (go.empty()) return;
            tensor<T>& pa = node.parents[0];
            if (!pa.requires_grad()) return;
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < len; ++j) g[i * n + c0 + j] += go[i * len + j];
        };
        out.node() = nd;
    }
    return out;
}

template <class T>
tensor<T> concat_cols(const std::vector<tensor<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    const std::size_t m = parts[0].as2d().first;
    std::size_t n = 0;
    for (const auto& p : parts) {
        if (p.as2d().first != m)
            throw std::invalid_argument("concat_cols: row mismatch " + shape_str(p.shape()));
        n += p.as2d().second;
    }
    tensor<T> out = tensor<T>::zeros({m, n});
    std::size_t off = 0;
    bool rq = false;
    for (const auto& p : parts) {
        const std::size_t pn = p.as2d().second;
        for (std::size_t i = 0; i < m; ++i)
            std::copy(p.data() + i * pn, p.data() + (i + 1) * pn, out.data() + i * n + off);
        off += pn;
        rq = rq || (grad_enabled() && p.requires_grad());
    }
    if (rq) {
        out.set_requires_grad(true);
        auto nd = detail::make_node<T>("concat_cols", parts, out);
        nd->backprop = [m, n](tape_node<T>& node) {
            const auto& go = node.out_grad->g;
            if (go.empty()) return;
            std::size_t off = 0;
            for (auto& p : node.parents) {
                const std::size_t pn = p.as2d().second;
                if (p.requires_grad()) {
                    auto& g = p.grad_buffer();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < pn; ++j) g[i * pn + j] += go[i * n + off + j];
                }
                off += pn;
            }
        };
        out.node() = nd;
    }
    return out;
}

template <class T>
tensor<T> concat_rows(const std::vector<tensor<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    const std::size_t n = parts[0].as2d().second;
    std::size_t m = 0;
    for (const auto& p : parts) {
        if (p.as2d().second != n)
            throw std::invalid_argument("concat_rows: col mismatch " + shape_str(p.shape()));
        m += p.as2d().first;
    }
    tensor<T> out = tensor<T>::zeros({m, n});
    std::size_t off = 0;
    bool rq = false;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.numel(), out.data() + off * n);
        off += p.as2d().first;
        rq = rq || (grad_enabled() && p.requires_grad());
    }
    if (rq) {
        out.set_requires_grad(true);
        auto nd = detail::make_node<T>("concat_rows", parts, out);
        nd->backprop = [n](tape_node<T>& node) {
            const auto& go = node.out_grad->g;
            if (go.empty()) return;
            std::size_t off = 0;
            for (auto& p : node.parents) {
                const std::size_t pm = p.as2d().first;
                if (p.requires_grad()) {
                    auto& g = p.grad_buffer();
                    for (std::size_t i = 0; i < pm * n; ++i) g[i] += go[off * n + i];
                }
                off += pm;
            }
        };
        out.node() = nd;
    }
    return out;
}

// out[r] = a[idx[r]]; repeated indices allowed (backward scatter-adds)
template <class T>
tensor<T> gather_rows(const tensor<T>& a, std::vector<std::size_t> idx) {
    auto [m, n] = a.as2d();
    if (idx.empty()) throw std::invalid_argument("gather_rows: empty index list");
    for (auto i : idx)
        if (i >= m)
            throw std::invalid_argument("gather_rows: index " + std::to_string(i) + " out of " +
                                        std::to_string(m) + " rows");
    tensor<T> out = tensor<T>::zeros({idx.size(), n});
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy(a.data() + idx[r] * n, a.data() + (idx[r] + 1) * n, out.data() + r * n);
    if (detail::any_requires_grad<T>({&a})) {
        out.set_requires_grad(true);
        auto nd = detail::make_node<T>("gather_rows", {a}, out);
        nd->backprop = [n, idx = std::move(idx)](tape_node<T>& node) {
            const auto& go = node.out_grad->g;
            if (go.empty()) return;
            tensor<T>& pa = node.parents[0];
            if (!pa.requires_grad()) return;
            auto& g = pa.grad_buffer();
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t j = 0; j < n; ++j) g[idx[r] * n + j] += go[r * n + j];
        };
        out.node() = nd;
    }
    return out;
}

// out[idx[r]] = a[r], zeros elsewhere; indices must be distinct
template <class T>
tensor<T> scatter_rows(const tensor<T>& a, std::vector<std::size_t> idx, std::size_t total_rows) {
    auto [m, n] = a.as2d();
    if (idx.size() != m)
        throw std::invalid_argument("scatter_rows: " + std::to_string(idx.size()) +
                                    " indices for " + std::to_string(m) + " rows");
    std::vector<std::uint8_t> seen(total_rows, 0);
    for (auto i : idx) {
        if (i >= total_rows)
            throw std::invalid_argument("scatter_rows: index " + std::to_string(i) + " out of " +
                                        std::to_string(total_rows));
        if (seen[i]++) throw std::invalid_argument("scatter_rows: duplicate index " + std::to_string(i));
    }
    tensor<T> out = tensor<T>::zeros({total_rows, n});
    for (std::size_t r = 0; r < m; ++r)
        std::copy(a.data() + r * n, a.data() + (r + 1) * n, out.data() + idx[r] * n);
    if (detail::any_requires_grad<T>({&a})) {
        out.set_requires_grad(true);
        auto nd = detail::make_node<T>("scatter_rows", {a}, out);
        nd->backprop = [n, idx = std::move(idx)](tape_node<T>& node) {
            const auto& go = node.out_grad->g;
            if (go.empty()) return;
            tensor<T>& pa = node.parents[0];
            if (!pa.requires_grad()) return;
            auto& g = pa.grad_buffer();
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t j = 0; j < n; ++j) g[r * n + j] += go[idx[r] * n + j];
        };
        out.node() = nd;
    }
    return out;
}

// ---------------------------------------------------------------------------
// op dispatcher (used by the random-graph property tests)
// ---------------------------------------------------------------------------

enum class op_kind {
    matmul,
    add,
    add_rowvec,
    mul,
    relu,
    softmax,
    layernorm,
    transpose,
    reshape,
    mean,
    mse,
};

inline std::string_view op_name(op_kind k) {
    switch (k) {
        case op_kind::matmul: return "matmul";
        case op_kind::add: return "add";
        case op_kind::add_rowvec: return "add_rowvec";
        case op_kind::mul: return "mul";
        case op_kind::relu: return "relu";
        case op_kind::softmax: return "softmax";
        case op_kind::layernorm: return "layernorm";
        case op_kind::transpose: return "transpose";
        case op_kind::reshape: return "reshape";
        case op_kind::mean: return "mean";
        case op_kind::mse: return "mse";
    }
    return "?";
}

// `arg` carries the target shape for reshape; unused otherwise.
template <class T>
tensor<T> forward_op(op_kind kind, std::span<const tensor<T>> inputs,
                     std::vector<std::size_t> arg = {}) {
    auto need = [&](std::size_t n) {
        if (inputs.size() != n)
            throw std::invalid_argument(std::string(op_name(kind)) + ": expected " +
                                        std::to_string(n) + " inputs, got " +
                                        std::to_string(inputs.size()));
    };
    switch (kind) {
        case op_kind::matmul: need(2); return matmul(inputs[0], inputs[1]);
        case op_kind::add: need(2); return add(inputs[0], inputs[1]);
        case op_kind::add_rowvec: need(2); return add_rowvec(inputs[0], inputs[1]);
        case op_kind::mul: need(2); return mul(inputs[0], inputs[1]);
        case op_kind::relu: need(1); return relu(inputs[0]);
        case op_kind::softmax: need(1); return softmax_lastdim(inputs[0]);
        case op_kind::layernorm: need(3); return layernorm_lastdim(inputs[0], inputs[1], inputs[2]);
        case op_kind::transpose: need(1); return transpose(inputs[0]);
        case op_kind::reshape: need(1); return reshape(inputs[0], std::move(arg));
        case op_kind::mean: need(1); return mean_all(inputs[0]);
        case op_kind::mse: need(2); return mse(inputs[0], inputs[1]);
    }
    throw std::invalid_argument("forward_op: unknown kind");
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Visits each tape node exactly once
// in reverse topological order, then consumes the tape (closures are freed;
// a second sweep over the same graph is an error).
template <class T>
void backward(tensor<T>& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.node()) {
        if (loss.requires_grad()) {
            loss.grad_buffer()[0] += T(1);
            return;
        }
        throw std::invalid_argument("backward: loss is not attached to a tape");
    }
    if (!loss.node()->backprop)
        throw std::runtime_error("backward: tape already consumed");

    // iterative post-order DFS
    std::vector<tape_node<T>*> order;
    std::unordered_set<tape_node<T>*> visited;
    struct frame {
        tape_node<T>* node;
        std::size_t next_parent;
    };
    std::vector<frame> stack;
    stack.push_back({loss.node().get(), 0});
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        frame& f = stack.back();
        bool descended = false;
        while (f.next_parent < f.node->parents.size()) {
            auto& pn = f.node->parents[f.next_parent++].node();
            if (pn && pn->backprop && !visited.count(pn.get())) {
                visited.insert(pn.get());
                stack.push_back({pn.get(), 0});
                descended = true;
                break;
            }
        }
        if (!descended && f.next_parent >= f.node->parents.size()) {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    loss.grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        tape_node<T>* nd = *it;
        nd->backprop(*nd);
        nd->backprop = nullptr; // consume; frees saved activations with the closure
    }
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

// Central-difference check of reverse-mode gradients for a scalar function of
// the given parameters. Returns max over coordinates of
// |autodiff - central| / (|central| + 1e-12). The finite-difference side never
// touches the tape.
template <class F>
double grad_check(F&& f, std::vector<tensor<double>*> params, double step = 1e-5) {
    for (auto* p : params) p->zero_grad();
    {
        tensor<double> loss = f();
        if (loss.numel() != 1) throw std::invalid_argument("grad_check: function must be scalar");
        backward(loss);
    }
    std::vector<std::vector<double>> ad;
    ad.reserve(params.size());
    for (auto* p : params) {
        std::vector<double> g = p->grad();
        g.resize(p->numel(), 0.0);
        ad.push_back(std::move(g));
    }
    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        tensor<double>& p = *params[pi];
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double saved = p.data()[i];
            double f1, f2;
            {
                no_grad_guard ng;
                p.data()[i] = saved + step;
                f1 = f().data()[0];
                p.data()[i] = saved - step;
                f2 = f().data()[0];
                p.data()[i] = saved;
            }
            const double fd = (f1 - f2) / (2.0 * step);
            const double err = std::abs(ad[pi][i] - fd) / (std::abs(fd) + 1e-12);
            worst = std::max(worst, err);
        }
    }
    return worst;
}

template <class F>
double grad_check(F&& f, tensor<double>& point, double step = 1e-5) {
    return grad_check([&] { return f(point); }, std::vector<tensor<double>*>{&point}, step);
}

} // namespace vsens
