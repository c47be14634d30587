#include "vicl/tensor.hpp"

#include <doctest.h>

#include <cmath>
#include <functional>
#include <optional>
#include <vector>

using namespace vicl;

namespace {

using T = TensorT<double>;

T randt(Shape shape, Rng& rng, double lo = -1.5, double hi = 1.5) {
    T t(std::move(shape));
    for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
    return t;
}

// Central finite differences (h = 1e-5) against reverse-mode gradients.
// fn maps the inputs to an output tensor; the output is projected to a scalar
// through fixed random weights so every element contributes to the loss.
// Relative error must stay below 1e-4; near-zero pairs compare absolutely.
void fd_check(const std::function<T(std::vector<T>&)>& fn, std::vector<T> inputs, Rng& rng,
              double h = 1e-5, double tol = 1e-4) {
    std::optional<T> proj;
    auto scalarize = [&](std::vector<T>& args) {
        T out = fn(args);
        if (out.numel() == 1) return out;
        if (!proj) {
            T r(out.shape());
            for (auto& v : r.mutable_data()) v = rng.uniform(-1, 1);
            proj = r;
        }
        return sum_all(mul(out, *proj));
    };

    for (auto& in : inputs) in.set_requires_grad(true);
    T loss = scalarize(inputs);
    backward(loss);
    for (auto& in : inputs) {
        std::vector<double> analytic = in.has_grad() ? in.grad() : std::vector<double>(in.data().size(), 0.0);
        for (std::size_t i = 0; i < in.data().size(); ++i) {
            auto probe = [&](double delta) {
                NoGradGuard ng;
                std::vector<T> shifted;
                shifted.reserve(inputs.size());
                for (const auto& t : inputs) shifted.emplace_back(t.shape(), std::vector<double>(t.data()));
                for (std::size_t k = 0; k < inputs.size(); ++k) {
                    if (inputs[k].impl() == in.impl()) shifted[k].mutable_data()[i] += delta;
                }
                return scalarize(shifted).item();
            };
            const double fd = (probe(h) - probe(-h)) / (2 * h);
            const double ad = analytic[i];
            const double denom = std::max(std::abs(fd), std::abs(ad));
            if (denom < 1e-7) {
                CHECK(std::abs(fd - ad) < 1e-7);
            } else {
                CHECK(std::abs(fd - ad) / denom < tol);
            }
        }
        in.zero_grad();
    }
}

} // namespace

TEST_CASE("gradcheck: every registered operation on 100 random instances") {
    Rng rng(101);
    for (int trial = 0; trial < 100; ++trial) {
        const int m = 2 + rng.uniform_index(3);
        const int k = 2 + rng.uniform_index(3);
        const int n = 2 + rng.uniform_index(3);

        fd_check([](std::vector<T>& in) { return add(in[0], in[1]); },
                 {randt({m, n}, rng), randt({m, n}, rng)}, rng);
        fd_check([](std::vector<T>& in) { return sub(in[0], in[1]); },
                 {randt({m, n}, rng), randt({m, n}, rng)}, rng);
        fd_check([](std::vector<T>& in) { return mul(in[0], in[1]); },
                 {randt({m, n}, rng), randt({m, n}, rng)}, rng);
        fd_check([](std::vector<T>& in) { return scale(in[0], 0.37); }, {randt({m, n}, rng)}, rng);
        fd_check([](std::vector<T>& in) { return matmul(in[0], in[1]); },
                 {randt({m, k}, rng), randt({k, n}, rng)}, rng);
        fd_check([](std::vector<T>& in) { return transpose2d(in[0]); }, {randt({m, n}, rng)}, rng);
        fd_check([](std::vector<T>& in) { return softmax_lastdim(in[0]); }, {randt({m, n}, rng, -3, 3)}, rng);
        fd_check([](std::vector<T>& in) { return add_bias(in[0], in[1]); },
                 {randt({m, n}, rng), randt({1, n}, rng)}, rng);
        fd_check([m](std::vector<T>& in) { return broadcast_row(in[0], m); }, {randt({1, n}, rng)}, rng);
        fd_check([](std::vector<T>& in) { return mean_rows(in[0]); }, {randt({m, n}, rng)}, rng);
        fd_check([](std::vector<T>& in) { return rms_norm_rows(in[0]); }, {randt({m, n}, rng, 0.2, 1.6)}, rng);
        fd_check([m, n](std::vector<T>& in) { return reshape(in[0], {n, m}); }, {randt({m, n}, rng)}, rng);
        fd_check([](std::vector<T>& in) { return mean_all(in[0]); }, {randt({m, n}, rng)}, rng);
        fd_check([](std::vector<T>& in) { return sigmoid(in[0]); }, {randt({m, n}, rng, -3, 3)}, rng);

        // relu: keep samples away from the kink.
        {
            T x = randt({m, n}, rng);
            for (auto& v : x.mutable_data()) {
                if (std::abs(v) < 0.05) v = v < 0 ? v - 0.1 : v + 0.1;
            }
            fd_check([](std::vector<T>& in) { return relu(in[0]); }, {x}, rng);
        }

        {
            std::vector<int> idx(static_cast<std::size_t>(m + 1));
            for (auto& v : idx) v = rng.uniform_index(m);
            fd_check([idx](std::vector<T>& in) { return gather_rows(in[0], idx); }, {randt({m, n}, rng)},
                     rng);
        }

        fd_check(
            [](std::vector<T>& in) {
                std::vector<T> parts{in[0], in[1]};
                return concat_rows(parts);
            },
            {randt({m, n}, rng), randt({k, n}, rng)}, rng);

        {
            std::vector<int> targets(static_cast<std::size_t>(m));
            for (auto& t : targets) t = 1 + rng.uniform_index(n);
            fd_check([targets](std::vector<T>& in) { return cross_entropy_mean(in[0], targets); },
                     {randt({m, n}, rng, -2, 2)}, rng);
            std::vector<double> rw(static_cast<std::size_t>(m));
            for (auto& w : rw) w = rng.uniform(0.1, 2.0);
            fd_check([targets, rw](std::vector<T>& in) { return cross_entropy_mean_weighted(in[0], targets, rw); },
                     {randt({m, n}, rng, -2, 2)}, rng);
        }

        // cosine: keep norms clear of the eps floor.
        fd_check([](std::vector<T>& in) { return cosine_rows_mean(in[0], in[1]); },
                 {randt({m, n}, rng, 0.3, 1.5), randt({m, n}, rng, 0.3, 1.5)}, rng);
        fd_check([](std::vector<T>& in) { return cosine_similarity(in[0], in[1]); },
                 {randt({n}, rng, 0.2, 1.4), randt({n}, rng, 0.2, 1.4)}, rng);
    }
}

TEST_CASE("gradcheck: composite attention-style graph") {
    Rng rng(202);
    for (int trial = 0; trial < 10; ++trial) {
        auto attention = [](std::vector<T>& in) {
            const T& x = in[0];
            auto q = matmul(x, in[1]);
            auto k = matmul(x, in[2]);
            auto v = matmul(x, in[3]);
            auto a = softmax_lastdim(scale(matmul(q, transpose2d(k)), 0.5));
            return add(x, matmul(a, v));
        };
        fd_check(attention, {randt({5, 4}, rng), randt({4, 4}, rng), randt({4, 4}, rng), randt({4, 4}, rng)},
                 rng);
    }
}
