#pragma once

// The three cooperative training objectives and their weighted combination.
// All operands are continuous tokens: per-cell logit grids over the codebook,
// shaped [cells, N_c]. Token targets are 1-based codebook indices.

#include "vicl/backbone.hpp"
#include "vicl/errors.hpp"
#include "vicl/tensor.hpp"

#include <vector>

namespace vicl {

struct LossWeights {
    double lambda = 0.5;   // semantic integrity weight
    double gamma = 0.2;    // utilization weight
    double p_weight = 1.0; // label-prediction gate (0 disables its gradient)
};

inline void validate(const LossWeights& w) {
    if (w.lambda < 0 || w.gamma < 0) throw ConfigError("loss weights lambda and gamma must be non-negative");
    if (w.p_weight < 0) throw ConfigError("loss p_weight must be non-negative");
}

template <class S>
struct LossReportT {
    TensorT<S> l_p, l_s, l_u, total;
};

namespace detail_losses {
template <class S>
void require_grid(const char* op, const TensorT<S>& logits, const IndexGrid& targets) {
    if (logits.rank() != 2 || logits.dim(0) != targets.gh * targets.gw) {
        throw DimensionError(std::string(op) + ": logits " + shape_str(logits.shape()) +
                             " do not match a " + std::to_string(targets.gh) + "x" +
                             std::to_string(targets.gw) + " target grid");
    }
}
} // namespace detail_losses

// Mean cross-entropy between masked-quadrant logits and target tokens.
template <class S>
TensorT<S> label_prediction_loss(const TensorT<S>& masked_logits, const IndexGrid& target_tokens) {
    detail_losses::require_grid("label_prediction_loss", masked_logits, target_tokens);
    return cross_entropy_mean(masked_logits, target_tokens.idx);
}

// Mean over cells of the two fused-stream cross-entropies against the query
// pair's as-prompt tokens.
template <class S>
TensorT<S> semantic_integrity_loss(const TensorT<S>& fused_x_logits, const TensorT<S>& fused_y_logits,
                                   const IndexGrid& target_x, const IndexGrid& target_y) {
    detail_losses::require_grid("semantic_integrity_loss", fused_x_logits, target_x);
    detail_losses::require_grid("semantic_integrity_loss", fused_y_logits, target_y);
    return add(cross_entropy_mean(fused_x_logits, target_x.idx), cross_entropy_mean(fused_y_logits, target_y.idx));
}

// Negative mean cosine alignment between the fused streams and the query
// pair's continuous tokens; range [-2, 2].
template <class S>
TensorT<S> utilization_loss(const TensorT<S>& fused_x, const TensorT<S>& fused_y, const TensorT<S>& query_x,
                            const TensorT<S>& masked) {
    return scale(add(cosine_rows_mean(fused_x, query_x), cosine_rows_mean(fused_y, masked)), -1.0);
}

// total = p_weight * l_p + lambda * l_s + gamma * l_u.
template <class S>
LossReportT<S> total_loss(const TensorT<S>& l_p, const TensorT<S>& l_s, const TensorT<S>& l_u,
                          const LossWeights& w) {
    validate(w);
    LossReportT<S> report;
    report.l_p = l_p;
    report.l_s = l_s;
    report.l_u = l_u;
    report.total = add(add(scale(l_p, w.p_weight), scale(l_s, w.lambda)), scale(l_u, w.gamma));
    return report;
}

} // namespace vicl
