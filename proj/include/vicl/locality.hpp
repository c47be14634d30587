#pragma once

// Spatial locality priors for fusion attention. Grid coordinates are 1-based
// throughout this module, matching the locality-matrix convention used by the
// rest of the pipeline.

#include "vicl/errors.hpp"
#include "vicl/tensor.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <tuple>
#include <vector>

namespace vicl {

enum class PriorKind { Gaussian, Laplacian };

inline std::string prior_name(PriorKind kind) { return kind == PriorKind::Gaussian ? "gaussian" : "laplacian"; }

inline PriorKind prior_from_name(const std::string& name) {
    if (name == "gaussian") return PriorKind::Gaussian;
    if (name == "laplacian") return PriorKind::Laplacian;
    throw ConfigError("unknown locality prior '" + name + "' (expected gaussian|laplacian)");
}

struct LocalityConfig {
    PriorKind kind = PriorKind::Gaussian;
    double sigma = 0.65;
    bool adaptive = false; // query-conditioned sigma
};

inline void validate(const LocalityConfig& cfg) {
    if (!(cfg.sigma > 0)) throw ConfigError("locality sigma must be positive");
}

// Prior weight of key cell (x, y) for a query centered at (h, w).
inline double psi(int h, int w, int x, int y, const LocalityConfig& cfg) {
    validate(cfg);
    const double dx = x - h;
    const double dy = y - w;
    const double d2 = dx * dx + dy * dy;
    if (cfg.kind == PriorKind::Gaussian) return std::exp(-d2 / (2.0 * cfg.sigma * cfg.sigma));
    return std::exp(-std::sqrt(d2) / cfg.sigma);
}

// Per-query-position weight grid; weights[center] is exactly 1.
struct LocalityMatrix {
    int center_h = 1, center_w = 1;
    int gh = 0, gw = 0;
    std::vector<double> weights; // gh * gw, row-major

    double at(int x, int y) const { return weights[static_cast<std::size_t>(x - 1) * gw + (y - 1)]; }
};

inline LocalityMatrix build_locality_matrix(int h, int w, int gh, int gw, const LocalityConfig& cfg) {
    if (h < 1 || h > gh || w < 1 || w > gw) {
        throw IndexError("locality center (" + std::to_string(h) + "," + std::to_string(w) +
                         ") outside grid " + std::to_string(gh) + "x" + std::to_string(gw));
    }
    LocalityMatrix m;
    m.center_h = h;
    m.center_w = w;
    m.gh = gh;
    m.gw = gw;
    m.weights.resize(static_cast<std::size_t>(gh) * gw);
    for (int x = 1; x <= gh; ++x) {
        for (int y = 1; y <= gw; ++y) m.weights[static_cast<std::size_t>(x - 1) * gw + (y - 1)] = psi(h, w, x, y, cfg);
    }
    return m;
}

// Locality matrices for every center of a grid, cached per (grid, prior, sigma).
// Entries are write-once; concurrent readers are safe after insertion.
class LocalityCache {
public:
    const std::vector<LocalityMatrix>& get(int gh, int gw, const LocalityConfig& cfg) {
        const Key key{gh, gw, static_cast<int>(cfg.kind), cfg.sigma};
        std::lock_guard<std::mutex> lock(mutex_);
        auto it = cache_.find(key);
        if (it == cache_.end()) {
            std::vector<LocalityMatrix> all;
            all.reserve(static_cast<std::size_t>(gh) * gw);
            for (int h = 1; h <= gh; ++h) {
                for (int w = 1; w <= gw; ++w) all.push_back(build_locality_matrix(h, w, gh, gw, cfg));
            }
            it = cache_.emplace(key, std::move(all)).first;
        }
        return it->second;
    }

private:
    using Key = std::tuple<int, int, int, double>;
    std::map<Key, std::vector<LocalityMatrix>> cache_;
    std::mutex mutex_;
};

// Learned query-conditioned sigma: mean over grid positions, a linear layer,
// and a sigmoid keeping the output strictly inside (0, 1).
template <class S>
struct AdaptiveSigmaHeadT {
    TensorT<S> projection; // [D, 1]
    TensorT<S> bias;       // [1]

    static AdaptiveSigmaHeadT init(int dim, Rng& rng) {
        AdaptiveSigmaHeadT head;
        head.projection = TensorT<S>::glorot({dim, 1}, dim, 1, rng);
        head.projection.set_requires_grad(true);
        head.bias = TensorT<S>::zeros({1});
        head.bias.set_requires_grad(true);
        return head;
    }

    std::vector<TensorT<S>> parameters() const { return {projection, bias}; }
};

// sigma = sigmoid(<mean over positions of query features, projection> + bias).
template <class S>
TensorT<S> adaptive_sigma(const TensorT<S>& query_features, const AdaptiveSigmaHeadT<S>& head) {
    auto pooled = mean_rows(query_features);               // [1, D]
    auto score = matmul(pooled, head.projection);          // [1, 1]
    return sigmoid(add(reshape(score, {1}), head.bias));   // scalar in (0, 1)
}

// Differentiable prior map: psi of each entry of a constant squared-distance
// matrix under a (possibly learned) sigma.
//   Gaussian:  psi = exp(-d2 / (2 s^2)),    d psi / d s = psi * d2 / s^3
//   Laplacian: psi = exp(-sqrt(d2) / s),    d psi / d s = psi * sqrt(d2) / s^2
template <class S>
TensorT<S> locality_map(const TensorT<S>& sigma, const TensorT<S>& dist_sq, PriorKind kind) {
    if (sigma.numel() != 1) throw DimensionError("locality_map: sigma must be a scalar tensor");
    const S s = sigma.item();
    if (!(s > S(0))) throw ConfigError("locality_map: sigma must be positive");
    const std::size_t n = dist_sq.data().size();
    std::vector<S> out(n);
    if (kind == PriorKind::Gaussian) {
        const S inv = S(1) / (S(2) * s * s);
        for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(-dist_sq.data()[i] * inv);
    } else {
        const S inv = S(1) / s;
        for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(-std::sqrt(dist_sq.data()[i]) * inv);
    }
    const bool rec = detail::track<S>({&sigma});
    TensorT<S> y = detail::make_result("locality_map", dist_sq.shape(), std::move(out), rec);
    if (rec) {
        auto si = sigma.impl_ptr();
        auto di = dist_sq.impl_ptr();
        auto yi = y.impl_ptr();
        Tape<S>::active().record([si, di, yi, kind, s](LeafGradMap<S>* sink) {
            const auto* g = detail::out_grad(yi.get());
            if (!g || !si->requires_grad) return;
            auto* ds = detail::grad_buf(si.get(), sink);
            S acc = S(0);
            if (kind == PriorKind::Gaussian) {
                const S inv3 = S(1) / (s * s * s);
                for (std::size_t i = 0; i < g->size(); ++i) acc += (*g)[i] * yi->data[i] * di->data[i] * inv3;
            } else {
                const S inv2 = S(1) / (s * s);
                for (std::size_t i = 0; i < g->size(); ++i) acc += (*g)[i] * yi->data[i] * std::sqrt(di->data[i]) * inv2;
            }
            (*ds)[0] += acc;
        });
    }
    return y;
}

} // namespace vicl
