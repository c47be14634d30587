#pragma once

// Minimal dense-array engine with reverse-mode differentiation.
//
// Design notes:
//  - Tensors are immutable once produced by an operation; only sgd_step
//    mutates data in place (and it never runs while a tape is live).
//  - Every kernel reduces sequentially over the contraction axis, so two
//    runs with identical inputs are bitwise identical.
//  - Every operation validates its output for NaN/Inf and fails fast,
//    naming the producing operation.
//  - The scalar type is a template parameter: float for training and
//    inference, double for finite-difference gradient checks.

#include "vicl/errors.hpp"
#include "vicl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace vicl {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw DimensionError("dimension sizes must be positive, got " + shape_str(s));
        n *= d;
    }
    return n;
}

template <class S>
struct TensorImpl {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad; // empty until a backward pass touches this tensor
    bool requires_grad = false;
    bool leaf = true;
};

namespace detail {

inline thread_local int nograd_depth = 0;

template <class S>
void check_finite(const char* op, const std::vector<S>& v) {
    for (const S x : v) {
        if (!std::isfinite(static_cast<double>(x))) {
            throw NumericError(std::string("operation '") + op + "' produced a non-finite value");
        }
    }
}

} // namespace detail

// Disables gradient recording for the current thread while alive.
struct NoGradGuard {
    NoGradGuard() { ++detail::nograd_depth; }
    ~NoGradGuard() { --detail::nograd_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::nograd_depth == 0; }

template <class S>
class TensorT {
public:
    using Scalar = S;

    TensorT() = default;

    explicit TensorT(Shape shape) : impl_(std::make_shared<TensorImpl<S>>()) {
        impl_->shape = std::move(shape);
        impl_->data.assign(static_cast<std::size_t>(shape_numel(impl_->shape)), S(0));
    }

    TensorT(Shape shape, std::vector<S> data) : impl_(std::make_shared<TensorImpl<S>>()) {
        const std::int64_t n = shape_numel(shape);
        if (static_cast<std::int64_t>(data.size()) != n) {
            throw DimensionError("buffer length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
    }

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

    static TensorT full(Shape shape, S value) {
        TensorT t(std::move(shape));
        std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
        return t;
    }

    static TensorT scalar(S value) { return TensorT({1}, {value}); }

    // Uniform in [-s, s] with s = sqrt(6 / (fan_in + fan_out)).
    static TensorT glorot(Shape shape, int fan_in, int fan_out, Rng& rng) {
        TensorT t(std::move(shape));
        const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (auto& x : t.impl_->data) x = static_cast<S>(rng.uniform(-s, s));
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }
    int dim(int i) const { return impl_->shape.at(static_cast<std::size_t>(i)); }
    int rank() const { return static_cast<int>(impl_->shape.size()); }

    // Row/column view: all leading axes collapsed, last axis is the column.
    std::int64_t rows() const { return numel() / cols(); }
    std::int64_t cols() const { return impl_->shape.empty() ? 1 : impl_->shape.back(); }

    const std::vector<S>& data() const { return impl_->data; }
    std::vector<S>& mutable_data() { return impl_->data; }

    S item() const {
        if (numel() != 1) throw ContractError("item() requires a scalar tensor, got " + shape_str(shape()));
        return impl_->data[0];
    }

    S at(std::int64_t r, std::int64_t c) const { return impl_->data[static_cast<std::size_t>(r * cols() + c)]; }
    S operator[](std::int64_t i) const { return impl_->data[static_cast<std::size_t>(i)]; }

    bool requires_grad() const { return impl_->requires_grad; }
    TensorT& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }
    bool is_leaf() const { return impl_->leaf; }

    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<S>& grad() const {
        if (impl_->grad.empty()) throw ContractError("tensor has no gradient");
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.clear(); }

    TensorImpl<S>* impl() const { return impl_.get(); }
    std::shared_ptr<TensorImpl<S>> impl_ptr() const { return impl_; }

private:
    std::shared_ptr<TensorImpl<S>> impl_;
};

// Redirection target for leaf gradients; lets independent examples in a batch
// compute gradients concurrently and merge them deterministically afterwards.
template <class S>
using LeafGradMap = std::unordered_map<TensorImpl<S>*, std::vector<S>>;

template <class S>
class Tape {
public:
    static Tape& active() {
        static thread_local Tape tape;
        return tape;
    }

    bool recording() const { return grad_enabled(); }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    void record(std::function<void(LeafGradMap<S>*)> fn) { nodes_.push_back(std::move(fn)); }

    // Replays the tape in reverse once, accumulating gradients additively into
    // every tensor that requires them (or into `sink` for leaves), then clears.
    void backward(const TensorT<S>& loss, LeafGradMap<S>* sink = nullptr) {
        if (loss.numel() != 1) {
            throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
        }
        loss.impl()->grad.assign(1, S(1));
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)(sink);
        nodes_.clear();
    }

private:
    std::vector<std::function<void(LeafGradMap<S>*)>> nodes_;
};

namespace detail {

// Resolves the gradient buffer a backward rule accumulates into.
template <class S>
std::vector<S>* grad_buf(TensorImpl<S>* t, LeafGradMap<S>* sink) {
    if (t->leaf && sink != nullptr) {
        auto& buf = (*sink)[t];
        if (buf.empty()) buf.assign(t->data.size(), S(0));
        return &buf;
    }
    if (t->grad.empty()) t->grad.assign(t->data.size(), S(0));
    return &t->grad;
}

// Output gradient of a node, or nullptr when nothing flowed into it.
template <class S>
const std::vector<S>* out_grad(TensorImpl<S>* t) {
    return t->grad.empty() ? nullptr : &t->grad;
}

template <class S>
TensorT<S> make_result(const char* op, Shape shape, std::vector<S> data, bool requires_grad) {
    check_finite(op, data);
    TensorT<S> out(std::move(shape), std::move(data));
    if (requires_grad && grad_enabled()) {
        out.set_requires_grad(true);
        out.impl()->leaf = false;
    }
    return out;
}

template <class S>
bool track(std::initializer_list<const TensorT<S>*> inputs) {
    if (!grad_enabled()) return false;
    for (const auto* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations
// ---------------------------------------------------------------------------

template <class S>
void require_same_shape(const char* op, const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    require_same_shape("add", a, b);
    const std::size_t n = a.data().size();
    std::vector<S> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] + b.data()[i];
    const bool rec = detail::track<S>({&a, &b});
    TensorT<S> y = detail::make_result("add", a.shape(), std::move(out), rec);
    if (rec) {
        auto ai = a.impl_ptr(), bi = b.impl_ptr(), yi = y.impl_ptr();
        Tape<S>::active().record([ai, bi, yi](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g) return;
            if (ai->requires_grad) {
                auto* da = detail::grad_buf(ai.get(), sink);
                for (std::size_t i = 0; i < g->size(); ++i) (*da)[i] += (*g)[i];
            }
            if (bi->requires_grad) {
                auto* db = detail::grad_buf(bi.get(), sink);
                for (std::size_t i = 0; i < g->size(); ++i) (*db)[i] += (*g)[i];
            }
        });
    }
    return y;
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    require_same_shape("sub", a, b);
    const std::size_t n = a.data().size();
    std::vector<S> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] - b.data()[i];
    const bool rec = detail::track<S>({&a, &b});
    TensorT<S> y = detail::make_result("sub", a.shape(), std::move(out), rec);
    if (rec) {
        auto ai = a.impl_ptr(), bi = b.impl_ptr(), yi = y.impl_ptr();
        Tape<S>::active().record([ai, bi, yi](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g) return;
            if (ai->requires_grad) {
                auto* da = detail::grad_buf(ai.get(), sink);
                for (std::size_t i = 0; i < g->size(); ++i) (*da)[i] += (*g)[i];
            }
            if (bi->requires_grad) {
                auto* db = detail::grad_buf(bi.get(), sink);
                for (std::size_t i = 0; i < g->size(); ++i) (*db)[i] -= (*g)[i];
            }
        });
    }
    return y;
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    require_same_shape("mul", a, b);
    const std::size_t n = a.data().size();
    std::vector<S> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * b.data()[i];
    const bool rec = detail::track<S>({&a, &b});
    TensorT<S> y = detail::make_result("mul", a.shape(), std::move(out), rec);
    if (rec) {
        auto ai = a.impl_ptr(), bi = b.impl_ptr(), yi = y.impl_ptr();
        Tape<S>::active().record([ai, bi, yi](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g) return;
            if (ai->requires_grad) {
                auto* da = detail::grad_buf(ai.get(), sink);
                for (std::size_t i = 0; i < g->size(); ++i) (*da)[i] += (*g)[i] * bi->data[i];
            }
            if (bi->requires_grad) {
                auto* db = detail::grad_buf(bi.get(), sink);
                for (std::size_t i = 0; i < g->size(); ++i) (*db)[i] += (*g)[i] * ai->data[i];
            }
        });
    }
    return y;
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, double c) {
    const std::size_t n = a.data().size();
    std::vector<S> out(n);
    const S cs = static_cast<S>(c);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * cs;
    const bool rec = detail::track<S>({&a});
    TensorT<S> y = detail::make_result("scale", a.shape(), std::move(out), rec);
    if (rec) {
        auto ai = a.impl_ptr();
        auto yi = y.impl_ptr();
        Tape<S>::active().record([ai, yi, cs](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g || !ai->requires_grad) return;
            auto* da = detail::grad_buf(ai.get(), sink);
            for (std::size_t i = 0; i < g->size(); ++i) (*da)[i] += (*g)[i] * cs;
        });
    }
    return y;
}

template <class S>
TensorT<S> relu(const TensorT<S>& a) {
    const std::size_t n = a.data().size();
    std::vector<S> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] > S(0) ? a.data()[i] : S(0);
    const bool rec = detail::track<S>({&a});
    TensorT<S> y = detail::make_result("relu", a.shape(), std::move(out), rec);
    if (rec) {
        auto ai = a.impl_ptr();
        auto yi = y.impl_ptr();
        Tape<S>::active().record([ai, yi](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g || !ai->requires_grad) return;
            auto* da = detail::grad_buf(ai.get(), sink);
            for (std::size_t i = 0; i < g->size(); ++i) {
                if (ai->data[i] > S(0)) (*da)[i] += (*g)[i];
            }
        });
    }
    return y;
}

template <class S>
TensorT<S> sigmoid(const TensorT<S>& a) {
    const std::size_t n = a.data().size();
    std::vector<S> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const S x = a.data()[i];
        if (x >= S(0)) {
            out[i] = S(1) / (S(1) + std::exp(-x));
        } else {
            const S e = std::exp(x);
            out[i] = e / (S(1) + e);
        }
    }
    const bool rec = detail::track<S>({&a});
    TensorT<S> y = detail::make_result("sigmoid", a.shape(), std::move(out), rec);
    if (rec) {
        auto ai = a.impl_ptr();
        auto yi = y.impl_ptr();
        Tape<S>::active().record([ai, yi](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g || !ai->requires_grad) return;
            auto* da = detail::grad_buf(ai.get(), sink);
            for (std::size_t i = 0; i < g->size(); ++i) {
                const S s = yi->data[i];
                (*da)[i] += (*g)[i] * s * (S(1) - s);
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Matrix operations (rank-2)
// ---------------------------------------------------------------------------

template <class S>
void require_rank2(const char* op, const TensorT<S>& t) {
    if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    require_rank2("matmul", a);
    require_rank2("matmul", b);
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    std::vector<S> out(static_cast<std::size_t>(m) * n, S(0));
    {
        const S* A = a.data().data();
        const S* B = b.data().data();
        S* C = out.data();
        for (int i = 0; i < m; ++i) {
            const S* arow = A + static_cast<std::size_t>(i) * k;
            S* crow = C + static_cast<std::size_t>(i) * n;
            for (int kk = 0; kk < k; ++kk) {
                const S av = arow[kk];
                const S* brow = B + static_cast<std::size_t>(kk) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
    const bool rec = detail::track<S>({&a, &b});
    TensorT<S> y = detail::make_result("matmul", Shape{m, n}, std::move(out), rec);
    if (rec) {
        auto ai = a.impl_ptr(), bi = b.impl_ptr(), yi = y.impl_ptr();
        Tape<S>::active().record([ai, bi, yi, m, k, n](LeafGradMap<S>* sink) {
            const auto* gv = detail::out_grad(yi.get());
            if (!gv) return;
            const S* G = gv->data();
            if (ai->requires_grad) {
                // dA[i,kk] = sum_j G[i,j] * B[kk,j]; iterate j ascending per element.
                auto* da = detail::grad_buf(ai.get(), sink);
                const S* B = bi->data.data();
                std::vector<S> bt(static_cast<std::size_t>(n) * k);
                for (int kk = 0; kk < k; ++kk) {
                    for (int j = 0; j < n; ++j) bt[static_cast<std::size_t>(j) * k + kk] = B[static_cast<std::size_t>(kk) * n + j];
                }
                for (int i = 0; i < m; ++i) {
                    const S* grow = G + static_cast<std::size_t>(i) * n;
                    S* drow = da->data() + static_cast<std::size_t>(i) * k;
                    for (int j = 0; j < n; ++j) {
                        const S gv2 = grow[j];
                        const S* btrow = bt.data() + static_cast<std::size_t>(j) * k;
                        for (int kk = 0; kk < k; ++kk) drow[kk] += gv2 * btrow[kk];
                    }
                }
            }
            if (bi->requires_grad) {
                // dB[kk,j] = sum_i A[i,kk] * G[i,j]; iterate i ascending per element.
                auto* db = detail::grad_buf(bi.get(), sink);
                const S* A = ai->data.data();
                for (int i = 0; i < m; ++i) {
                    const S* arow = A + static_cast<std::size_t>(i) * k;
                    const S* grow = G + static_cast<std::size_t>(i) * n;
                    for (int kk = 0; kk < k; ++kk) {
                        const S av = arow[kk];
                        S* drow = db->data() + static_cast<std::size_t>(kk) * n;
                        for (int j = 0; j < n; ++j) drow[j] += av * grow[j];
                    }
                }
            }
        });
    }
    return y;
}

template <class S>
TensorT<S> transpose2d(const TensorT<S>& a) {
    require_rank2("transpose2d", a);
    const int m = a.dim(0), n = a.dim(1);
    std::vector<S> out(static_cast<std::size_t>(m) * n);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j) * m + i] = a.data()[static_cast<std::size_t>(i) * n + j];
    }
    const bool rec = detail::track<S>({&a});
    TensorT<S> y = detail::make_result("transpose2d", Shape{n, m}, std::move(out), rec);
    if (rec) {
        auto ai = a.impl_ptr();
        auto yi = y.impl_ptr();
        Tape<S>::active().record([ai, yi, m, n](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g || !ai->requires_grad) return;
            auto* da = detail::grad_buf(ai.get(), sink);
            for (int j = 0; j < n; ++j) {
                for (int i = 0; i < m; ++i) {
                    (*da)[static_cast<std::size_t>(i) * n + j] += (*g)[static_cast<std::size_t>(j) * m + i];
                }
            }
        });
    }
    return y;
}

// Adds a [1 x d] bias row to every row of x.
template <class S>
TensorT<S> add_bias(const TensorT<S>& x, const TensorT<S>& b) {
    require_rank2("add_bias", x);
    if (b.numel() != x.cols()) {
        throw DimensionError("add_bias: bias length " + shape_str(b.shape()) + " does not match columns of " +
                             shape_str(x.shape()));
    }
    const std::int64_t rows = x.rows(), d = x.cols();
    std::vector<S> out(x.data().size());
    for (std::int64_t i = 0; i < rows; ++i) {
        for (std::int64_t j = 0; j < d; ++j) {
            out[static_cast<std::size_t>(i * d + j)] = x.data()[static_cast<std::size_t>(i * d + j)] + b.data()[static_cast<std::size_t>(j)];
        }
    }
    const bool rec = detail::track<S>({&x, &b});
    TensorT<S> y = detail::make_result("add_bias", x.shape(), std::move(out), rec);
    if (rec) {
        auto xi = x.impl_ptr(), bi = b.impl_ptr(), yi = y.impl_ptr();
        Tape<S>::active().record([xi, bi, yi, rows, d](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g) return;
            if (xi->requires_grad) {
                auto* dx = detail::grad_buf(xi.get(), sink);
                for (std::size_t i = 0; i < g->size(); ++i) (*dx)[i] += (*g)[i];
            }
            if (bi->requires_grad) {
                auto* db = detail::grad_buf(bi.get(), sink);
                for (std::int64_t i = 0; i < rows; ++i) {
                    for (std::int64_t j = 0; j < d; ++j) (*db)[static_cast<std::size_t>(j)] += (*g)[static_cast<std::size_t>(i * d + j)];
                }
            }
        });
    }
    return y;
}

// Repeats a [1 x d] row n times.
template <class S>
TensorT<S> broadcast_row(const TensorT<S>& v, int n) {
    const std::int64_t d = v.numel();
    if (n <= 0) throw DimensionError("broadcast_row: row count must be positive");
    std::vector<S> out(static_cast<std::size_t>(n) * d);
    for (int i = 0; i < n; ++i) {
        std::copy(v.data().begin(), v.data().end(), out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    const bool rec = detail::track<S>({&v});
    TensorT<S> y = detail::make_result("broadcast_row", Shape{n, static_cast<int>(d)}, std::move(out), rec);
    if (rec) {
        auto vi = v.impl_ptr();
        auto yi = y.impl_ptr();
        Tape<S>::active().record([vi, yi, n, d](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g || !vi->requires_grad) return;
            auto* dv = detail::grad_buf(vi.get(), sink);
            for (int i = 0; i < n; ++i) {
                for (std::int64_t j = 0; j < d; ++j) (*dv)[static_cast<std::size_t>(j)] += (*g)[static_cast<std::size_t>(i * d + j)];
            }
        });
    }
    return y;
}

// Gathers rows of x by (0-based) indices; backward scatter-adds in index order.
template <class S>
TensorT<S> gather_rows(const TensorT<S>& x, const std::vector<int>& idx) {
    require_rank2("gather_rows", x);
    const std::int64_t rows = x.rows(), d = x.cols();
    std::vector<S> out(idx.size() * static_cast<std::size_t>(d));
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= rows) throw IndexError("gather_rows: row index " + std::to_string(idx[i]) + " out of range");
        std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(i * static_cast<std::size_t>(d)));
    }
    const bool rec = detail::track<S>({&x});
    TensorT<S> y = detail::make_result("gather_rows", Shape{static_cast<int>(idx.size()), static_cast<int>(d)},
                                       std::move(out), rec);
    if (rec) {
        auto xi = x.impl_ptr();
        auto yi = y.impl_ptr();
        Tape<S>::active().record([xi, yi, idx, d](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g || !xi->requires_grad) return;
            auto* dx = detail::grad_buf(xi.get(), sink);
            for (std::size_t i = 0; i < idx.size(); ++i) {
                for (std::int64_t j = 0; j < d; ++j) {
                    (*dx)[static_cast<std::size_t>(idx[i] * d + j)] += (*g)[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
                }
            }
        });
    }
    return y;
}

// Stacks rank-2 tensors with equal column counts along the row axis.
template <class S>
TensorT<S> concat_rows(const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: empty input list");
    const std::int64_t d = parts[0].cols();
    std::int64_t rows = 0;
    bool rec = false;
    for (const auto& p : parts) {
        require_rank2("concat_rows", p);
        if (p.cols() != d) {
            throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        rows += p.rows();
        rec = rec || (grad_enabled() && p.requires_grad());
    }
    std::vector<S> out;
    out.reserve(static_cast<std::size_t>(rows * d));
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    TensorT<S> y = detail::make_result("concat_rows", Shape{static_cast<int>(rows), static_cast<int>(d)},
                                       std::move(out), rec);
    if (rec) {
        std::vector<std::shared_ptr<TensorImpl<S>>> impls;
        impls.reserve(parts.size());
        for (const auto& p : parts) impls.push_back(p.impl_ptr());
        auto yi = y.impl_ptr();
        Tape<S>::active().record([impls, yi](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g) return;
            std::size_t off = 0;
            for (const auto& pi : impls) {
                const std::size_t n = pi->data.size();
                if (pi->requires_grad) {
                    auto* dp = detail::grad_buf(pi.get(), sink);
                    for (std::size_t i = 0; i < n; ++i) (*dp)[i] += (*g)[off + i];
                }
                off += n;
            }
        });
    }
    return y;
}

template <class S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    const bool rec = detail::track<S>({&x});
    TensorT<S> y = detail::make_result("reshape", std::move(shape), std::vector<S>(x.data()), rec);
    if (rec) {
        auto xi = x.impl_ptr();
        auto yi = y.impl_ptr();
        Tape<S>::active().record([xi, yi](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g || !xi->requires_grad) return;
            auto* dx = detail::grad_buf(xi.get(), sink);
            for (std::size_t i = 0; i < g->size(); ++i) (*dx)[i] += (*g)[i];
        });
    }
    return y;
}

// Constant copy; gradients never flow through.
template <class S>
TensorT<S> detach(const TensorT<S>& x) {
    return TensorT<S>(x.shape(), std::vector<S>(x.data()));
}

// ---------------------------------------------------------------------------
// Reductions and normalizations
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> sum_all(const TensorT<S>& x) {
    S acc = S(0);
    for (const S v : x.data()) acc += v;
    const bool rec = detail::track<S>({&x});
    TensorT<S> y = detail::make_result("sum_all", Shape{1}, std::vector<S>{acc}, rec);
    if (rec) {
        auto xi = x.impl_ptr();
        auto yi = y.impl_ptr();
        Tape<S>::active().record([xi, yi](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g || !xi->requires_grad) return;
            auto* dx = detail::grad_buf(xi.get(), sink);
            for (auto& v : *dx) v += (*g)[0];
        });
    }
    return y;
}

template <class S>
TensorT<S> mean_all(const TensorT<S>& x) {
    return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// Column means over rows: [n x d] -> [1 x d].
template <class S>
TensorT<S> mean_rows(const TensorT<S>& x) {
    require_rank2("mean_rows", x);
    const std::int64_t rows = x.rows(), d = x.cols();
    std::vector<S> out(static_cast<std::size_t>(d), S(0));
    for (std::int64_t i = 0; i < rows; ++i) {
        for (std::int64_t j = 0; j < d; ++j) out[static_cast<std::size_t>(j)] += x.data()[static_cast<std::size_t>(i * d + j)];
    }
    const S inv = S(1) / static_cast<S>(rows);
    for (auto& v : out) v *= inv;
    const bool rec = detail::track<S>({&x});
    TensorT<S> y = detail::make_result("mean_rows", Shape{1, static_cast<int>(d)}, std::move(out), rec);
    if (rec) {
        auto xi = x.impl_ptr();
        auto yi = y.impl_ptr();
        Tape<S>::active().record([xi, yi, rows, d, inv](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g || !xi->requires_grad) return;
            auto* dx = detail::grad_buf(xi.get(), sink);
            for (std::int64_t i = 0; i < rows; ++i) {
                for (std::int64_t j = 0; j < d; ++j) (*dx)[static_cast<std::size_t>(i * d + j)] += (*g)[static_cast<std::size_t>(j)] * inv;
            }
        });
    }
    return y;
}

// Row-wise RMS normalization: each row is divided by sqrt(mean(row^2) + eps),
// making downstream consumers invariant to the row's scale.
template <class S>
TensorT<S> rms_norm_rows(const TensorT<S>& x, double eps = 1e-6) {
    require_rank2("rms_norm_rows", x);
    const std::int64_t rows = x.rows(), d = x.cols();
    std::vector<S> out(x.data().size());
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* row = x.data().data() + r * d;
        S q = S(0);
        for (std::int64_t j = 0; j < d; ++j) q += row[j] * row[j];
        const S inv = S(1) / std::sqrt(q / static_cast<S>(d) + static_cast<S>(eps));
        for (std::int64_t j = 0; j < d; ++j) out[static_cast<std::size_t>(r * d + j)] = row[j] * inv;
    }
    const bool rec = detail::track<S>({&x});
    TensorT<S> y = detail::make_result("rms_norm_rows", x.shape(), std::move(out), rec);
    if (rec) {
        auto xi = x.impl_ptr();
        auto yi = y.impl_ptr();
        const S epss = static_cast<S>(eps);
        Tape<S>::active().record([xi, yi, rows, d, epss](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g || !xi->requires_grad) return;
            auto* dx = detail::grad_buf(xi.get(), sink);
            for (std::int64_t r = 0; r < rows; ++r) {
                const S* row = xi->data.data() + r * d;
                const S* grow = g->data() + r * d;
                S q = S(0), dot = S(0);
                for (std::int64_t j = 0; j < d; ++j) {
                    q += row[j] * row[j];
                    dot += grow[j] * row[j];
                }
                const S r2 = q / static_cast<S>(d) + epss;
                const S inv = S(1) / std::sqrt(r2);
                const S inv3 = inv / r2;
                S* drow = dx->data() + r * d;
                for (std::int64_t j = 0; j < d; ++j) {
                    drow[j] += grow[j] * inv - row[j] * dot * inv3 / static_cast<S>(d);
                }
            }
        });
    }
    return y;
}

// Numerically stabilized softmax over the last axis.
template <class S>
TensorT<S> softmax_lastdim(const TensorT<S>& x) {
    if (x.rank() < 1) throw DimensionError("softmax_lastdim: rank must be >= 1");
    const std::int64_t rows = x.rows(), n = x.cols();
    if (n < 1) throw DimensionError("softmax_lastdim: empty last axis");
    std::vector<S> out(x.data().size());
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* row = x.data().data() + r * n;
        S* orow = out.data() + r * n;
        S m = row[0];
        for (std::int64_t j = 1; j < n; ++j) m = std::max(m, row[j]);
        S denom = S(0);
        for (std::int64_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - m);
            denom += orow[j];
        }
        const S inv = S(1) / denom;
        for (std::int64_t j = 0; j < n; ++j) orow[j] *= inv;
    }
    const bool rec = detail::track<S>({&x});
    TensorT<S> y = detail::make_result("softmax_lastdim", x.shape(), std::move(out), rec);
    if (rec) {
        auto xi = x.impl_ptr();
        auto yi = y.impl_ptr();
        Tape<S>::active().record([xi, yi, rows, n](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g || !xi->requires_grad) return;
            auto* dx = detail::grad_buf(xi.get(), sink);
            for (std::int64_t r = 0; r < rows; ++r) {
                const S* yrow = yi->data.data() + r * n;
                const S* grow = g->data() + r * n;
                S dot = S(0);
                for (std::int64_t j = 0; j < n; ++j) dot += grow[j] * yrow[j];
                S* drow = dx->data() + r * n;
                for (std::int64_t j = 0; j < n; ++j) drow[j] += yrow[j] * (grow[j] - dot);
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Loss kernels
// ---------------------------------------------------------------------------

// Mean cross-entropy from logits over rows. Targets are 1-based class indices.
template <class S>
TensorT<S> cross_entropy_mean(const TensorT<S>& logits, const std::vector<int>& targets) {
    require_rank2("cross_entropy_mean", logits);
    const std::int64_t rows = logits.rows(), c = logits.cols();
    if (static_cast<std::int64_t>(targets.size()) != rows) {
        throw DimensionError("cross_entropy_mean: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(rows) + " rows");
    }
    for (const int t : targets) {
        if (t < 1 || t > c) {
            throw IndexError("cross_entropy_mean: target index " + std::to_string(t) + " outside [1.." +
                             std::to_string(c) + "]");
        }
    }
    S acc = S(0);
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* row = logits.data().data() + r * c;
        S m = row[0];
        for (std::int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
        S denom = S(0);
        for (std::int64_t j = 0; j < c; ++j) denom += std::exp(row[j] - m);
        acc += (m + std::log(denom)) - row[targets[static_cast<std::size_t>(r)] - 1];
    }
    const S loss = acc / static_cast<S>(rows);
    const bool rec = detail::track<S>({&logits});
    TensorT<S> y = detail::make_result("cross_entropy_mean", Shape{1}, std::vector<S>{loss}, rec);
    if (rec) {
        auto li = logits.impl_ptr();
        auto yi = y.impl_ptr();
        Tape<S>::active().record([li, yi, targets, rows, c](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g || !li->requires_grad) return;
            auto* dl = detail::grad_buf(li.get(), sink);
            const S w = (*g)[0] / static_cast<S>(rows);
            for (std::int64_t r = 0; r < rows; ++r) {
                const S* row = li->data.data() + r * c;
                S m = row[0];
                for (std::int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
                S denom = S(0);
                for (std::int64_t j = 0; j < c; ++j) denom += std::exp(row[j] - m);
                const S inv = S(1) / denom;
                S* drow = dl->data() + r * c;
                for (std::int64_t j = 0; j < c; ++j) drow[j] += w * std::exp(row[j] - m) * inv;
                drow[targets[static_cast<std::size_t>(r)] - 1] -= w;
            }
        });
    }
    return y;
}

// -log softmax(logits)[target]; target is 1-based.
template <class S>
TensorT<S> cross_entropy_from_logits(const TensorT<S>& logits, int target_index) {
    TensorT<S> row = reshape(logits, Shape{1, static_cast<int>(logits.numel())});
    return cross_entropy_mean(row, std::vector<int>{target_index});
}

// Weighted mean cross-entropy: sum_i w_i * ce_i / sum_i w_i.
template <class S>
TensorT<S> cross_entropy_mean_weighted(const TensorT<S>& logits, const std::vector<int>& targets,
                                       const std::vector<double>& row_weights) {
    require_rank2("cross_entropy_mean_weighted", logits);
    const std::int64_t rows = logits.rows(), c = logits.cols();
    if (static_cast<std::int64_t>(targets.size()) != rows ||
        static_cast<std::int64_t>(row_weights.size()) != rows) {
        throw DimensionError("cross_entropy_mean_weighted: targets/weights do not match rows");
    }
    double wsum = 0;
    for (const double w : row_weights) {
        if (w < 0) throw ContractError("cross_entropy_mean_weighted: negative row weight");
        wsum += w;
    }
    if (wsum <= 0) throw ContractError("cross_entropy_mean_weighted: weights sum to zero");
    for (const int t : targets) {
        if (t < 1 || t > c) {
            throw IndexError("cross_entropy_mean_weighted: target index " + std::to_string(t) +
                             " outside [1.." + std::to_string(c) + "]");
        }
    }
    S acc = S(0);
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* row = logits.data().data() + r * c;
        S m = row[0];
        for (std::int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
        S denom = S(0);
        for (std::int64_t j = 0; j < c; ++j) denom += std::exp(row[j] - m);
        acc += static_cast<S>(row_weights[static_cast<std::size_t>(r)]) *
               ((m + std::log(denom)) - row[targets[static_cast<std::size_t>(r)] - 1]);
    }
    const S loss = acc / static_cast<S>(wsum);
    const bool rec = detail::track<S>({&logits});
    TensorT<S> y = detail::make_result("cross_entropy_mean_weighted", Shape{1}, std::vector<S>{loss}, rec);
    if (rec) {
        auto li = logits.impl_ptr();
        auto yi = y.impl_ptr();
        Tape<S>::active().record([li, yi, targets, row_weights, rows, c, wsum](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g || !li->requires_grad) return;
            auto* dl = detail::grad_buf(li.get(), sink);
            for (std::int64_t r = 0; r < rows; ++r) {
                const S w = (*g)[0] * static_cast<S>(row_weights[static_cast<std::size_t>(r)] / wsum);
                const S* row = li->data.data() + r * c;
                S m = row[0];
                for (std::int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
                S denom = S(0);
                for (std::int64_t j = 0; j < c; ++j) denom += std::exp(row[j] - m);
                const S inv = S(1) / denom;
                S* drow = dl->data() + r * c;
                for (std::int64_t j = 0; j < c; ++j) drow[j] += w * std::exp(row[j] - m) * inv;
                drow[targets[static_cast<std::size_t>(r)] - 1] -= w;
            }
        });
    }
    return y;
}

// Mean over rows of cosine similarity between paired rows of a and b.
// Zero-vector degeneracy is handled by flooring each norm at eps.
template <class S>
TensorT<S> cosine_rows_mean(const TensorT<S>& a, const TensorT<S>& b, double eps = 1e-8) {
    require_same_shape("cosine_rows_mean", a, b);
    const std::int64_t rows = a.rows(), d = a.cols();
    const S e = static_cast<S>(eps);
    S acc = S(0);
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* ar = a.data().data() + r * d;
        const S* br = b.data().data() + r * d;
        S s = S(0), qa = S(0), qb = S(0);
        for (std::int64_t j = 0; j < d; ++j) {
            s += ar[j] * br[j];
            qa += ar[j] * ar[j];
            qb += br[j] * br[j];
        }
        const S na = std::sqrt(qa), nb = std::sqrt(qb);
        acc += s / (std::max(na, e) * std::max(nb, e));
    }
    const S value = acc / static_cast<S>(rows);
    const bool rec = detail::track<S>({&a, &b});
    TensorT<S> y = detail::make_result("cosine_rows_mean", Shape{1}, std::vector<S>{value}, rec);
    if (rec) {
        auto ai = a.impl_ptr(), bi = b.impl_ptr(), yi = y.impl_ptr();
        Tape<S>::active().record([ai, bi, yi, rows, d, e](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g) return;
            const S w = (*g)[0] / static_cast<S>(rows);
            std::vector<S>* da = ai->requires_grad ? detail::grad_buf(ai.get(), sink) : nullptr;
            std::vector<S>* db = bi->requires_grad ? detail::grad_buf(bi.get(), sink) : nullptr;
            for (std::int64_t r = 0; r < rows; ++r) {
                const S* ar = ai->data.data() + r * d;
                const S* br = bi->data.data() + r * d;
                S s = S(0), qa = S(0), qb = S(0);
                for (std::int64_t j = 0; j < d; ++j) {
                    s += ar[j] * br[j];
                    qa += ar[j] * ar[j];
                    qb += br[j] * br[j];
                }
                const S na = std::sqrt(qa), nb = std::sqrt(qb);
                const S ma = std::max(na, e), mb = std::max(nb, e);
                const S inv = S(1) / (ma * mb);
                for (std::int64_t j = 0; j < d; ++j) {
                    if (da) {
                        S t = br[j] * inv;
                        if (na > e) t -= s * ar[j] / (na * ma * ma * mb);
                        (*da)[static_cast<std::size_t>(r * d + j)] += w * t;
                    }
                    if (db) {
                        S t = ar[j] * inv;
                        if (nb > e) t -= s * br[j] / (nb * mb * mb * ma);
                        (*db)[static_cast<std::size_t>(r * d + j)] += w * t;
                    }
                }
            }
        });
    }
    return y;
}

// Cosine similarity of two equal-length vectors; result in [-1, 1].
template <class S>
TensorT<S> cosine_similarity(const TensorT<S>& a, const TensorT<S>& b, double eps = 1e-8) {
    if (a.numel() != b.numel()) {
        throw DimensionError("cosine_similarity: length mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const int d = static_cast<int>(a.numel());
    return cosine_rows_mean(reshape(a, Shape{1, d}), reshape(b, Shape{1, d}), eps);
}

// ---------------------------------------------------------------------------
// Backward entry point and optimizer
// ---------------------------------------------------------------------------

template <class S>
void backward(const TensorT<S>& loss, LeafGradMap<S>* sink = nullptr) {
    Tape<S>::active().backward(loss, sink);
}

// p <- p - lr * grad(p); gradients are zeroed afterwards.
template <class S>
void sgd_step(std::span<TensorT<S>> params, double lr) {
    for (auto& p : params) {
        if (!p.has_grad()) {
            throw ContractError("sgd_step: parameter of shape " + shape_str(p.shape()) + " has no gradient");
        }
    }
    const S lrs = static_cast<S>(lr);
    for (auto& p : params) {
        auto& data = p.mutable_data();
        const auto& g = p.grad();
        for (std::size_t i = 0; i < data.size(); ++i) data[i] -= lrs * g[i];
        detail::check_finite("sgd_step", data);
        p.zero_grad();
    }
}

template <class S>
void sgd_step(std::vector<TensorT<S>>& params, double lr) {
    sgd_step(std::span<TensorT<S>>(params), lr);
}

// Adds per-example leaf gradients into the parameters' own grad buffers.
// Callers merge example contributions in example-index order so batched and
// sequential training produce bitwise-identical gradients.
template <class S>
void accumulate_leaf_grads(const LeafGradMap<S>& contribution) {
    for (const auto& [impl, buf] : contribution) {
        if (impl->grad.empty()) impl->grad.assign(impl->data.size(), S(0));
        for (std::size_t i = 0; i < buf.size(); ++i) impl->grad[i] += buf[i];
    }
}

using Tensor = TensorT<float>;

} // namespace vicl
