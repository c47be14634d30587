#pragma once

// Locality-aware prompt fusion: embeds query and prompt sub-images into patch
// space, aligns them with one shared self-attention block, scores prompt-image
// keys against each query position under a spatial prior, and produces the
// fused prompt pair as attention-weighted value projections.
//
// Grid tensors are stored as [positions, D] with positions row-major over the
// sub-image grid. Stacked prompt tensors are [N * positions, D], prompt-major.

#include "vicl/backbone.hpp"
#include "vicl/data.hpp"
#include "vicl/locality.hpp"
#include "vicl/tensor.hpp"

#include <cmath>
#include <optional>
#include <vector>

namespace vicl {

template <class S>
struct FusionWeightsT {
    TensorT<S> w_q, w_k;    // query / key projections of the fusion attention
    TensorT<S> w_vx, w_vy;  // value projections for the image and label streams
    TensorT<S> sa_q, sa_k, sa_v, sa_out; // shared self-alignment block
    std::optional<AdaptiveSigmaHeadT<S>> adaptive_head;
    int dim = 0;

    // Aligned (default): query/key/value projections start at the identity
    // and the self-align output projection at zero, so attention scores are
    // raw feature similarities and the fused prompt is an attention-weighted
    // average of real embeddings from the first step. Uniform glorot scores
    // die under the multiplicative locality prior (psi ~ 1e-2..1e-5 off
    // center annihilates near-zero scores), starving W_Q/W_K of gradient and
    // collapsing the fused label quadrant to a constant token.
    // Reference: every matrix uniform in [-s, s], s = sqrt(6/(fan_in+fan_out));
    // kept for cold-start optimization regression tests.
    enum class Init { Aligned, Reference };

    static FusionWeightsT init(int dim, std::uint64_t seed, bool adaptive, Init style = Init::Aligned) {
        Rng rng(mix_seed(seed, 0xf5));
        FusionWeightsT w;
        w.dim = dim;
        auto glorot = [&] {
            auto t = TensorT<S>::glorot({dim, dim}, dim, dim, rng);
            t.set_requires_grad(true);
            return t;
        };
        auto identity = [&] {
            TensorT<S> t({dim, dim});
            for (int i = 0; i < dim; ++i) t.mutable_data()[static_cast<std::size_t>(i) * dim + i] = S(1);
            t.set_requires_grad(true);
            return t;
        };
        if (style == Init::Reference) {
            w.w_q = glorot();
            w.w_k = glorot();
            w.w_vx = glorot();
            w.w_vy = glorot();
            w.sa_q = glorot();
            w.sa_k = glorot();
            w.sa_v = glorot();
            w.sa_out = glorot();
        } else {
            w.w_q = identity();
            w.w_k = identity();
            w.w_vx = identity();
            w.w_vy = identity();
            w.sa_q = glorot();
            w.sa_k = glorot();
            w.sa_v = glorot();
            w.sa_out = TensorT<S>::zeros({dim, dim});
            w.sa_out.set_requires_grad(true);
        }
        if (adaptive) w.adaptive_head = AdaptiveSigmaHeadT<S>::init(dim, rng);
        return w;
    }

    std::vector<std::pair<std::string, TensorT<S>>> named_tensors() const {
        std::vector<std::pair<std::string, TensorT<S>>> out{
            {"w_q", w_q},   {"w_k", w_k},   {"w_vx", w_vx},   {"w_vy", w_vy},
            {"sa_q", sa_q}, {"sa_k", sa_k}, {"sa_v", sa_v},   {"sa_out", sa_out}};
        if (adaptive_head) {
            out.push_back({"adaptive.projection", adaptive_head->projection});
            out.push_back({"adaptive.bias", adaptive_head->bias});
        }
        return out;
    }

    std::vector<TensorT<S>> parameters() const {
        std::vector<TensorT<S>> out{w_q, w_k, w_vx, w_vy, sa_q, sa_k, sa_v, sa_out};
        if (adaptive_head) {
            out.push_back(adaptive_head->projection);
            out.push_back(adaptive_head->bias);
        }
        return out;
    }
};

template <class S>
struct FusedPromptT {
    TensorT<S> fx; // F_Xf, [gh*gw, D]
    TensorT<S> fy; // F_Yf, [gh*gw, D]
};

// Locality-enhanced attention weights per query position over all
// N * gh * gw key positions (prompt-major key order).
template <class S>
struct AttentionRecordT {
    TensorT<S> weights; // [gh*gw, N*gh*gw], rows sum to 1
    int num_prompts = 0;
    int gh = 0, gw = 0;
};

// Patch embedding through the frozen backbone: flatten -> linear -> + bias
// -> + per-position term. Gradients never flow into the embedding during
// fusion training because its tensors do not require gradients.
template <class S>
TensorT<S> embed_patches(const Image& img, const BackboneT<S>& bb) {
    const TensorT<S> patches = patch_matrix<S>(img, bb.patch);
    return add(add_bias(matmul(patches, bb.embed_w), bb.embed_b), bb.pos_sub);
}

// One shared single-head self-attention block with residual connection,
// applied independently per sub-image.
template <class S>
TensorT<S> self_align(const TensorT<S>& features, const FusionWeightsT<S>& w) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(w.dim));
    auto q = matmul(features, w.sa_q);
    auto k = matmul(features, w.sa_k);
    auto v = matmul(features, w.sa_v);
    auto a = softmax_lastdim(scale(matmul(q, transpose2d(k)), inv_sqrt_d));
    return add(features, matmul(matmul(a, v), w.sa_out));
}

// Squared grid distances between every query position (rows) and every key
// position of N stacked prompts (columns). Constant per (gh, gw, N).
template <class S>
TensorT<S> tiled_distance_sq(int gh, int gw, int num_prompts) {
    const int cells = gh * gw;
    TensorT<S> out({cells, num_prompts * cells});
    auto& buf = out.mutable_data();
    int row = 0;
    for (int h = 1; h <= gh; ++h) {
        for (int w = 1; w <= gw; ++w, ++row) {
            for (int n = 0; n < num_prompts; ++n) {
                int col = n * cells;
                for (int x = 1; x <= gh; ++x) {
                    for (int y = 1; y <= gw; ++y, ++col) {
                        buf[static_cast<std::size_t>(row) * (num_prompts * cells) + col] =
                            static_cast<S>((x - h) * (x - h) + (y - w) * (y - w));
                    }
                }
            }
        }
    }
    return out;
}

// Prior weights as a [cells, N*cells] constant built from cached matrices.
template <class S>
TensorT<S> tiled_prior(int gh, int gw, int num_prompts, const LocalityConfig& cfg, LocalityCache& cache) {
    const auto& mats = cache.get(gh, gw, cfg);
    const int cells = gh * gw;
    TensorT<S> out({cells, num_prompts * cells});
    auto& buf = out.mutable_data();
    for (int row = 0; row < cells; ++row) {
        const auto& m = mats[static_cast<std::size_t>(row)];
        for (int n = 0; n < num_prompts; ++n) {
            for (int c = 0; c < cells; ++c) {
                buf[static_cast<std::size_t>(row) * (num_prompts * cells) + n * cells + c] =
                    static_cast<S>(m.weights[static_cast<std::size_t>(c)]);
            }
        }
    }
    return out;
}

// Eq-style locality attention: scores from prompt-image keys, multiplied
// elementwise by the prior before one softmax over every key jointly.
// `prior` must already be tiled to [cells, N*cells].
template <class S>
AttentionRecordT<S> locality_attention_with_prior(const TensorT<S>& fq, const TensorT<S>& fx_stack,
                                                  const TensorT<S>& prior, const FusionWeightsT<S>& w,
                                                  int gh, int gw) {
    const int cells = gh * gw;
    if (fq.rank() != 2 || fq.dim(0) != cells || fq.dim(1) != w.dim) {
        throw DimensionError("locality_attention: query grid must be [" + std::to_string(cells) + "," +
                             std::to_string(w.dim) + "], got " + shape_str(fq.shape()));
    }
    if (fx_stack.rows() == 0 || fx_stack.rows() % cells != 0) {
        throw CapacityError("locality_attention: empty or misshapen prompt stack");
    }
    const int num_prompts = static_cast<int>(fx_stack.rows() / cells);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(w.dim));
    auto qp = matmul(fq, w.w_q);
    auto kp = matmul(fx_stack, w.w_k);
    auto scores = scale(matmul(qp, transpose2d(kp)), inv_sqrt_d);
    auto weighted = mul(scores, prior);
    AttentionRecordT<S> rec;
    rec.weights = softmax_lastdim(weighted);
    rec.num_prompts = num_prompts;
    rec.gh = gh;
    rec.gw = gw;
    return rec;
}

template <class S>
AttentionRecordT<S> locality_attention(const TensorT<S>& fq, const TensorT<S>& fx_stack,
                                       const LocalityConfig& cfg, const FusionWeightsT<S>& w, int gh,
                                       int gw, LocalityCache& cache) {
    const int cells = gh * gw;
    if (fx_stack.rows() == 0 || fx_stack.rows() % cells != 0) {
        throw CapacityError("locality_attention: empty prompt set");
    }
    const int num_prompts = static_cast<int>(fx_stack.rows() / cells);
    TensorT<S> prior;
    if (cfg.adaptive) {
        if (!w.adaptive_head) throw ConfigError("adaptive sigma requested but the head is not initialized");
        auto sigma = adaptive_sigma(fq, *w.adaptive_head);
        prior = locality_map(sigma, tiled_distance_sq<S>(gh, gw, num_prompts), cfg.kind);
    } else {
        validate(cfg);
        prior = tiled_prior<S>(gh, gw, num_prompts, cfg, cache);
    }
    return locality_attention_with_prior(fq, fx_stack, prior, w, gh, gw);
}

// Fused prompt pair: the same attention weights select from both value
// streams, preserving image-label correspondence.
template <class S>
FusedPromptT<S> fuse(const AttentionRecordT<S>& rec, const TensorT<S>& fx_stack, const TensorT<S>& fy_stack,
                     const FusionWeightsT<S>& w) {
    if (fx_stack.shape() != fy_stack.shape()) {
        throw DimensionError("fuse: image/label prompt stacks differ, " + shape_str(fx_stack.shape()) +
                             " vs " + shape_str(fy_stack.shape()));
    }
    if (rec.weights.dim(1) != fx_stack.dim(0)) {
        throw DimensionError("fuse: attention keys " + shape_str(rec.weights.shape()) +
                             " do not match prompt stack " + shape_str(fx_stack.shape()));
    }
    FusedPromptT<S> out;
    out.fx = matmul(rec.weights, matmul(fx_stack, w.w_vx));
    out.fy = matmul(rec.weights, matmul(fy_stack, w.w_vy));
    return out;
}

template <class S>
struct FusionForwardT {
    FusedPromptT<S> fused;
    TensorT<S> query_features; // F_Xq after self-alignment
    AttentionRecordT<S> attention;
};

// End-to-end fusion for one query: embed -> self-align (per sub-image)
// -> locality attention -> fuse.
template <class S>
FusionForwardT<S> fusion_forward(const Image& query_image, const std::vector<PromptPair>& prompts,
                                 const LocalityConfig& cfg, const FusionWeightsT<S>& w,
                                 const BackboneT<S>& bb, LocalityCache& cache) {
    if (prompts.empty()) throw CapacityError("fusion_forward: empty prompt set");
    FusionForwardT<S> out;
    out.query_features = self_align(embed_patches(query_image, bb), w);
    std::vector<TensorT<S>> fx_parts, fy_parts;
    fx_parts.reserve(prompts.size());
    fy_parts.reserve(prompts.size());
    for (const auto& p : prompts) {
        fx_parts.push_back(self_align(embed_patches(p.image, bb), w));
        fy_parts.push_back(self_align(embed_patches(p.label, bb), w));
    }
    auto fx_stack = concat_rows(fx_parts);
    auto fy_stack = concat_rows(fy_parts);
    out.attention = locality_attention(out.query_features, fx_stack, cfg, w, bb.gh, bb.gw, cache);
    out.fused = fuse(out.attention, fx_stack, fy_stack, w);
    return out;
}

enum class Quadrant { TopLeft, TopRight, BottomLeft, BottomRight };

// Row indices (into a [4*gh*gw, D] canvas laid out row-major over the
// 2gh x 2gw grid) of one quadrant, row-major within the quadrant.
inline std::vector<int> quadrant_indices(int gh, int gw, Quadrant q) {
    const int row_off = (q == Quadrant::BottomLeft || q == Quadrant::BottomRight) ? gh : 0;
    const int col_off = (q == Quadrant::TopRight || q == Quadrant::BottomRight) ? gw : 0;
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(gh) * gw);
    for (int r = 0; r < gh; ++r) {
        for (int c = 0; c < gw; ++c) out.push_back((row_off + r) * 2 * gw + (col_off + c));
    }
    return out;
}

// Assembles the 2x2 token canvas from four quadrant feature grids.
template <class S>
TensorT<S> assemble_canvas_quadrants(const TensorT<S>& tl, const TensorT<S>& tr, const TensorT<S>& bl,
                                     const TensorT<S>& br, int gh, int gw) {
    const int cells = gh * gw;
    for (const auto* t : {&tl, &tr, &bl, &br}) {
        if (t->rank() != 2 || t->dim(0) != cells || t->dim(1) != tl.dim(1)) {
            throw DimensionError("assemble_canvas: quadrant shape " + shape_str(t->shape()) +
                                 " does not match [" + std::to_string(cells) + "," +
                                 std::to_string(tl.dim(1)) + "]");
        }
    }
    auto stacked = concat_rows(std::vector<TensorT<S>>{tl, tr, bl, br});
    // Interleave quadrant rows into canvas row-major order.
    std::vector<int> map(static_cast<std::size_t>(4) * cells);
    const auto fill = [&](Quadrant q, int base) {
        const auto idx = quadrant_indices(gh, gw, q);
        for (int i = 0; i < cells; ++i) map[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = base + i;
    };
    fill(Quadrant::TopLeft, 0);
    fill(Quadrant::TopRight, cells);
    fill(Quadrant::BottomLeft, 2 * cells);
    fill(Quadrant::BottomRight, 3 * cells);
    return gather_rows(stacked, map);
}

// Spec layout: top-left F_Xf, top-right F_Yf, bottom-left F_Xq, bottom-right
// the mask token broadcast to every cell.
template <class S>
TensorT<S> assemble_canvas(const FusedPromptT<S>& fused, const TensorT<S>& fq, const TensorT<S>& mask_token,
                           int gh, int gw) {
    return assemble_canvas_quadrants(fused.fx, fused.fy, fq, broadcast_row(mask_token, gh * gw), gh, gw);
}

// Extracts one quadrant of a [4*gh*gw, C] canvas-shaped tensor.
template <class S>
TensorT<S> canvas_quadrant(const TensorT<S>& canvas, int gh, int gw, Quadrant q) {
    return gather_rows(canvas, quadrant_indices(gh, gw, q));
}

// Quadrant of an index grid over the 2gh x 2gw token canvas.
inline IndexGrid index_quadrant(const IndexGrid& grid, int gh, int gw, Quadrant q) {
    if (grid.gh != 2 * gh || grid.gw != 2 * gw) {
        throw DimensionError("index_quadrant: grid is not a 2x2 canvas of the requested quadrant size");
    }
    IndexGrid out;
    out.gh = gh;
    out.gw = gw;
    out.idx.reserve(static_cast<std::size_t>(gh) * gw);
    for (const int row : quadrant_indices(gh, gw, q)) out.idx.push_back(grid.idx[static_cast<std::size_t>(row)]);
    return out;
}

using FusionWeights = FusionWeightsT<float>;

} // namespace vicl
