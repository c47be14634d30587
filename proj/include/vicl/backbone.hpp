#pragma once

// Frozen surrogate inpainting backbone: a patch embedding, a small
// transformer encoder whose per-cell outputs are logits over a vector
// quantizer's codebook, and a pixel decoder. The codebook size equals the
// feature dimension (N_c = D) by construction.

#include "vicl/checkpoint.hpp"
#include "vicl/errors.hpp"
#include "vicl/image.hpp"
#include "vicl/tensor.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace vicl {

// Discrete token grid; values are 1-based codebook indices.
struct IndexGrid {
    int gh = 0, gw = 0;
    std::vector<int> idx;

    int at(int r, int c) const { return idx[static_cast<std::size_t>(r) * gw + c]; }
};

template <class S>
struct BackboneT {
    // Geometry: sub-images are (gh*patch) x (gw*patch); canvases double both.
    int patch = 4;
    int dim = 32;
    int gh = 8;
    int gw = 8;

    // Patch embedding: flatten -> linear map + per-position term (sub-image grid).
    TensorT<S> embed_w; // [patch^2*3, D]
    TensorT<S> embed_b; // [1, D]
    TensorT<S> pos_sub; // [gh*gw, D]

    // Canvas encoder.
    TensorT<S> pos_canvas; // [4*gh*gw, D]
    struct Block {
        TensorT<S> wq, wk, wv, wo;   // [D, D]
        TensorT<S> attn_bias;        // [4*gh*gw, 4*gh*gw], added to scores
        TensorT<S> ff1_w;            // [D, 4D]
        TensorT<S> ff1_b;            // [1, 4D]
        TensorT<S> ff2_w;            // [4D, D]
        TensorT<S> ff2_b;            // [1, D]
    };
    std::vector<Block> blocks;
    TensorT<S> head_w; // [D, N_c]
    TensorT<S> head_b; // [1, N_c]
    TensorT<S> mask_token; // [1, D]

    // Vector quantizer.
    TensorT<S> q_enc_w; // [patch^2*3, D]
    TensorT<S> q_enc_b; // [1, D]
    TensorT<S> q_dec_w; // [D, patch^2*3]
    TensorT<S> q_dec_b; // [1, patch^2*3]
    TensorT<S> codebook; // [N_c, D]

    int codebook_size() const { return dim; } // N_c = D

    static BackboneT random_init(int patch, int dim, int gh, int gw, std::uint64_t seed, int layers = 2) {
        BackboneT bb;
        bb.patch = patch;
        bb.dim = dim;
        bb.gh = gh;
        bb.gw = gw;
        Rng rng(mix_seed(seed, 0xbb));
        const int pc = patch * patch * 3;
        const int cells = gh * gw;
        bb.embed_w = TensorT<S>::glorot({pc, dim}, pc, dim, rng);
        bb.embed_b = TensorT<S>::zeros({1, dim});
        bb.pos_sub = TensorT<S>::glorot({cells, dim}, cells, dim, rng);
        bb.pos_canvas = TensorT<S>::glorot({4 * cells, dim}, 4 * cells, dim, rng);
        for (int l = 0; l < layers; ++l) {
            Block blk;
            blk.wq = TensorT<S>::glorot({dim, dim}, dim, dim, rng);
            blk.wk = TensorT<S>::glorot({dim, dim}, dim, dim, rng);
            blk.wv = TensorT<S>::glorot({dim, dim}, dim, dim, rng);
            blk.wo = TensorT<S>::glorot({dim, dim}, dim, dim, rng);
            blk.attn_bias = TensorT<S>::zeros({4 * cells, 4 * cells});
            blk.ff1_w = TensorT<S>::glorot({dim, 4 * dim}, dim, 4 * dim, rng);
            blk.ff1_b = TensorT<S>::zeros({1, 4 * dim});
            blk.ff2_w = TensorT<S>::glorot({4 * dim, dim}, 4 * dim, dim, rng);
            blk.ff2_b = TensorT<S>::zeros({1, dim});
            bb.blocks.push_back(std::move(blk));
        }
        bb.head_w = TensorT<S>::glorot({dim, dim}, dim, dim, rng);
        bb.head_b = TensorT<S>::zeros({1, dim});
        bb.mask_token = TensorT<S>::glorot({1, dim}, 1, dim, rng);
        bb.q_enc_w = TensorT<S>::glorot({pc, dim}, pc, dim, rng);
        bb.q_enc_b = TensorT<S>::zeros({1, dim});
        bb.q_dec_w = TensorT<S>::glorot({dim, pc}, dim, pc, rng);
        bb.q_dec_b = TensorT<S>::zeros({1, pc});
        bb.codebook = TensorT<S>::glorot({dim, dim}, dim, dim, rng);
        return bb;
    }

    std::vector<std::pair<std::string, TensorT<S>>> named_tensors() const {
        std::vector<std::pair<std::string, TensorT<S>>> out;
        out.push_back({"embed_w", embed_w});
        out.push_back({"embed_b", embed_b});
        out.push_back({"pos_sub", pos_sub});
        out.push_back({"pos_canvas", pos_canvas});
        for (std::size_t l = 0; l < blocks.size(); ++l) {
            const std::string p = "blocks." + std::to_string(l) + ".";
            out.push_back({p + "wq", blocks[l].wq});
            out.push_back({p + "wk", blocks[l].wk});
            out.push_back({p + "wv", blocks[l].wv});
            out.push_back({p + "wo", blocks[l].wo});
            out.push_back({p + "attn_bias", blocks[l].attn_bias});
            out.push_back({p + "ff1_w", blocks[l].ff1_w});
            out.push_back({p + "ff1_b", blocks[l].ff1_b});
            out.push_back({p + "ff2_w", blocks[l].ff2_w});
            out.push_back({p + "ff2_b", blocks[l].ff2_b});
        }
        out.push_back({"head_w", head_w});
        out.push_back({"head_b", head_b});
        out.push_back({"mask_token", mask_token});
        out.push_back({"q_enc_w", q_enc_w});
        out.push_back({"q_enc_b", q_enc_b});
        out.push_back({"q_dec_w", q_dec_w});
        out.push_back({"q_dec_b", q_dec_b});
        out.push_back({"codebook", codebook});
        return out;
    }

    std::vector<TensorT<S>> all_tensors() const {
        std::vector<TensorT<S>> out;
        for (auto& [name, t] : named_tensors()) out.push_back(t);
        return out;
    }

    std::vector<TensorT<S>> quantizer_params() const { return {q_enc_w, q_enc_b, q_dec_w, q_dec_b}; }

    std::vector<TensorT<S>> encoder_params() const {
        std::vector<TensorT<S>> out{embed_w, embed_b, pos_sub, pos_canvas};
        for (const auto& blk : blocks) {
            out.insert(out.end(), {blk.wq, blk.wk, blk.wv, blk.wo, blk.attn_bias, blk.ff1_w, blk.ff1_b,
                                   blk.ff2_w, blk.ff2_b});
        }
        out.insert(out.end(), {head_w, head_b, mask_token});
        return out;
    }

    void set_trainable(bool trainable) {
        for (auto t : all_tensors()) t.set_requires_grad(trainable);
    }

    void freeze() { set_trainable(false); }

    std::uint64_t checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& t : all_tensors()) h = fnv1a(t.data().data(), t.data().size() * sizeof(S), h);
        return h;
    }
};

// Flattens non-overlapping patch x patch x 3 blocks into rows (row-major
// within the patch, channels interleaved); rows ordered row-major over the
// patch grid. Pure data movement, never recorded on the tape.
template <class S>
TensorT<S> patch_matrix(const Image& img, int patch) {
    if (img.h % patch != 0 || img.w % patch != 0) {
        throw DimensionError("image " + std::to_string(img.h) + "x" + std::to_string(img.w) +
                             " is not divisible by patch size " + std::to_string(patch));
    }
    const int grows = img.h / patch, gcols = img.w / patch;
    const int pc = patch * patch * 3;
    TensorT<S> out({grows * gcols, pc});
    auto& buf = out.mutable_data();
    std::size_t k = 0;
    for (int gr = 0; gr < grows; ++gr) {
        for (int gc = 0; gc < gcols; ++gc) {
            for (int py = 0; py < patch; ++py) {
                for (int px = 0; px < patch; ++px) {
                    for (int c = 0; c < 3; ++c) {
                        buf[k++] = static_cast<S>(img.at(gr * patch + py, gc * patch + px, c));
                    }
                }
            }
        }
    }
    return out;
}

// Canvas of continuous tokens: per-cell logits over the codebook.
template <class S>
TensorT<S> encode_continuous(const TensorT<S>& canvas, const BackboneT<S>& bb) {
    const int cells = 4 * bb.gh * bb.gw;
    if (canvas.rank() != 2 || canvas.dim(0) != cells || canvas.dim(1) != bb.dim) {
        throw DimensionError("encode_continuous: expected canvas [" + std::to_string(cells) + "," +
                             std::to_string(bb.dim) + "], got " + shape_str(canvas.shape()));
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(bb.dim));
    // Per-cell RMS normalization makes the encoder scale-invariant to its
    // input features; without it, cross-entropy terms on upstream features
    // could win by inflating magnitudes instead of fixing directions.
    TensorT<S> x = add(rms_norm_rows(canvas), bb.pos_canvas);
    for (const auto& blk : bb.blocks) {
        auto q = matmul(x, blk.wq);
        auto k = matmul(x, blk.wk);
        auto v = matmul(x, blk.wv);
        // Content scores plus a learned per-position-pair bias.
        auto a = softmax_lastdim(add(scale(matmul(q, transpose2d(k)), inv_sqrt_d), blk.attn_bias));
        x = add(x, matmul(matmul(a, v), blk.wo));
        auto h = relu(add_bias(matmul(x, blk.ff1_w), blk.ff1_b));
        x = add(x, add_bias(matmul(h, blk.ff2_w), blk.ff2_b));
    }
    return add_bias(matmul(x, bb.head_w), bb.head_b);
}

// Quantizer feature map for a patch matrix (rows of flattened patches).
template <class S>
TensorT<S> quantizer_features(const TensorT<S>& patches, const BackboneT<S>& bb) {
    return add_bias(matmul(patches, bb.q_enc_w), bb.q_enc_b);
}

// Nearest codebook entry per row by squared Euclidean distance; ties break
// toward the lowest index. Returns 1-based indices.
template <class S>
std::vector<int> nearest_codebook(const TensorT<S>& features, const BackboneT<S>& bb) {
    const int nc = bb.codebook_size();
    const std::int64_t rows = features.rows();
    std::vector<int> out(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* f = features.data().data() + r * bb.dim;
        S best = S(0);
        int best_j = 0;
        for (int j = 0; j < nc; ++j) {
            const S* e = bb.codebook.data().data() + static_cast<std::size_t>(j) * bb.dim;
            S d = S(0);
            for (int c = 0; c < bb.dim; ++c) {
                const S diff = f[c] - e[c];
                d += diff * diff;
            }
            if (j == 0 || d < best) {
                best = d;
                best_j = j;
            }
        }
        out[static_cast<std::size_t>(r)] = best_j + 1;
    }
    return out;
}

// Discrete tokens of a pixel canvas (or sub-image) through the frozen quantizer.
template <class S>
IndexGrid quantize(const Image& pixels, const BackboneT<S>& bb) {
    NoGradGuard ng;
    IndexGrid grid;
    grid.gh = pixels.h / bb.patch;
    grid.gw = pixels.w / bb.patch;
    const TensorT<S> patches = patch_matrix<S>(pixels, bb.patch);
    const TensorT<S> feats = quantizer_features(patches, bb);
    grid.idx = nearest_codebook(feats, bb);
    return grid;
}

// Per-cell codebook lookup, linear pixel map, clamp to [0, 1].
template <class S>
Image decode(const IndexGrid& indices, const BackboneT<S>& bb) {
    NoGradGuard ng;
    const int nc = bb.codebook_size();
    for (const int v : indices.idx) {
        if (v < 1 || v > nc) {
            throw IndexError("decode: token index " + std::to_string(v) + " outside [1.." + std::to_string(nc) + "]");
        }
    }
    Image out(indices.gh * bb.patch, indices.gw * bb.patch);
    const int pc = bb.patch * bb.patch * 3;
    for (int gr = 0; gr < indices.gh; ++gr) {
        for (int gc = 0; gc < indices.gw; ++gc) {
            const int code = indices.at(gr, gc) - 1;
            const S* e = bb.codebook.data().data() + static_cast<std::size_t>(code) * bb.dim;
            for (int p = 0; p < pc; ++p) {
                S v = bb.q_dec_b[p];
                for (int c = 0; c < bb.dim; ++c) v += e[c] * bb.q_dec_w.at(c, p);
                const int py = p / (bb.patch * 3);
                const int rem = p % (bb.patch * 3);
                const int px = rem / 3;
                const int ch = rem % 3;
                out.at(gr * bb.patch + py, gc * bb.patch + px, ch) =
                    std::clamp(static_cast<float>(v), 0.0f, 1.0f);
            }
        }
    }
    return out;
}

template <class S>
void save_backbone(const std::filesystem::path& base, const BackboneT<S>& bb, nlohmann::json extra_meta = {}) {
    NamedTensors<S> tensors;
    for (auto& [name, t] : bb.named_tensors()) tensors.add(name, t);
    nlohmann::json meta = std::move(extra_meta);
    meta["backbone_version"] = 1;
    meta["patch"] = bb.patch;
    meta["dim"] = bb.dim;
    meta["gh"] = bb.gh;
    meta["gw"] = bb.gw;
    meta["layers"] = bb.blocks.size();
    save_checkpoint(base, tensors, meta);
}

template <class S>
BackboneT<S> load_backbone(const std::filesystem::path& base, nlohmann::json* meta_out = nullptr) {
    nlohmann::json meta;
    NamedTensors<S> tensors = load_checkpoint<S>(base, &meta);
    if (!meta.contains("backbone_version")) throw DataError("not a backbone checkpoint: " + base.string());
    BackboneT<S> bb;
    bb.patch = meta.at("patch").get<int>();
    bb.dim = meta.at("dim").get<int>();
    bb.gh = meta.at("gh").get<int>();
    bb.gw = meta.at("gw").get<int>();
    const int layers = meta.at("layers").get<int>();
    bb.embed_w = tensors.find("embed_w");
    bb.embed_b = tensors.find("embed_b");
    bb.pos_sub = tensors.find("pos_sub");
    bb.pos_canvas = tensors.find("pos_canvas");
    for (int l = 0; l < layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        typename BackboneT<S>::Block blk;
        blk.wq = tensors.find(p + "wq");
        blk.wk = tensors.find(p + "wk");
        blk.wv = tensors.find(p + "wv");
        blk.wo = tensors.find(p + "wo");
        blk.attn_bias = tensors.find(p + "attn_bias");
        blk.ff1_w = tensors.find(p + "ff1_w");
        blk.ff1_b = tensors.find(p + "ff1_b");
        blk.ff2_w = tensors.find(p + "ff2_w");
        blk.ff2_b = tensors.find(p + "ff2_b");
        bb.blocks.push_back(std::move(blk));
    }
    bb.head_w = tensors.find("head_w");
    bb.head_b = tensors.find("head_b");
    bb.mask_token = tensors.find("mask_token");
    bb.q_enc_w = tensors.find("q_enc_w");
    bb.q_enc_b = tensors.find("q_enc_b");
    bb.q_dec_w = tensors.find("q_dec_w");
    bb.q_dec_b = tensors.find("q_dec_b");
    bb.codebook = tensors.find("codebook");
    if (meta_out != nullptr) *meta_out = meta;
    return bb;
}

using Backbone = BackboneT<float>;

} // namespace vicl
