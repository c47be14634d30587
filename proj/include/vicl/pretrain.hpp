#pragma once

// Surrogate backbone pretraining.
//
// Stage (a) trains the vector quantizer as an autoencoder with the
// straight-through estimator plus codebook and commitment losses.
// Stage (b) trains the encoder on masked-quadrant canvas reconstruction,
// where targets are the quantizer's discrete tokens; the mask token is
// learned here as well. Everything is frozen afterwards.
//
// Canvases pair two scenes from the task generator. Their label quadrants are
// recolored consistently within each canvas (polarity inversion for masks,
// channel permutation for colorization), so the label semantics of a canvas
// can only be read off its prompt row. That keeps the prompt quadrants
// load-bearing for the inpainting task, mirroring how the inherited backbone
// depends on its prompt.

#include "vicl/backbone.hpp"
#include "vicl/data.hpp"
#include "vicl/fusion.hpp"
#include "vicl/losses.hpp"
#include "vicl/util.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <vector>

namespace vicl {

struct PretrainConfig {
    int num_canvases = 256;
    int quantizer_warmup_epochs = 3;
    int quantizer_epochs = 12;
    int encoder_epochs = 20;
    int batch = 16;
    int patch_batch = 256;
    double lr_quantizer = 0.15;
    double lr_encoder = 0.1;
    double commitment = 0.25;
    double holdout_fraction = 0.1;
    double recolor_prob = 0.5;
    double recon_gate = 0.05; // hard failure above this reconstruction MSE
    std::uint64_t seed = 1;
    int threads = 0;
    bool verbose = false;
};

struct PretrainReport {
    double recon_mse = 0.0;       // held-out decode(quantize(canvas)) pixel MSE
    double masked_accuracy = 0.0; // held-out masked-quadrant token accuracy
    double final_encoder_ce = 0.0;
    double dq_consistency = 0.0;  // fraction of codes with quantize(decode(idx)) == idx
    int canvases = 0;
};

struct PretrainCanvas {
    Image xp, yp; // prompt pair quadrants
    Image xq, yq; // query pair quadrants
    IndexGrid tokens;  // discrete tokens of the full pixel canvas
    int recolor_id = 0; // label recoloring applied to this canvas
};

namespace pretrain_detail {

inline Image invert(const Image& img) {
    Image out(img.h, img.w);
    for (std::size_t i = 0; i < img.px.size(); ++i) out.px[i] = 1.0f - img.px[i];
    return out;
}

// Recolors a binary mask label: foreground pixels take fg, the rest bg.
inline Image recolor_mask(const Image& label, const float fg[3], const float bg[3]) {
    Image out(label.h, label.w);
    for (int y = 0; y < label.h; ++y) {
        for (int x = 0; x < label.w; ++x) {
            const bool on = label.at(y, x, 0) > 0.5f;
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = on ? fg[c] : bg[c];
        }
    }
    return out;
}

// Label color pairs used during pretraining. A canvas' label semantics
// (which colors mean foreground and background) can only be read off its
// prompt row, which keeps the prompt quadrants load-bearing.
constexpr float kLabelPairs[5][2][3] = {
    {{1.0f, 1.0f, 1.0f}, {0.0f, 0.0f, 0.0f}},               // white on black (task default)
    {{0.0f, 0.0f, 0.0f}, {1.0f, 1.0f, 1.0f}},               // inverted
    {{0.851f, 0.149f, 0.149f}, {0.149f, 0.251f, 0.851f}},   // red on blue
    {{0.102f, 0.749f, 0.2f}, {0.078f, 0.078f, 0.078f}},     // green on near-black
    {{0.902f, 0.851f, 0.149f}, {0.149f, 0.251f, 0.851f}},   // yellow on blue
};

inline Image permute_channels(const Image& img, int perm_id) {
    static const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    const int* p = perms[perm_id];
    Image out(img.h, img.w);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, x, p[c]);
        }
    }
    return out;
}

inline Image gray_of(const Image& label) {
    Image gray(label.h, label.w);
    for (int y = 0; y < label.h; ++y) {
        for (int x = 0; x < label.w; ++x) {
            const std::uint8_t g = luma8(to_byte(label.at(y, x, 0)), to_byte(label.at(y, x, 1)),
                                         to_byte(label.at(y, x, 2)));
            for (int c = 0; c < 3; ++c) gray.at(y, x, c) = from_byte(g);
        }
    }
    return gray;
}

inline Image assemble_pixels(const PretrainCanvas& c) {
    const int h = c.xp.h, w = c.xp.w;
    Image canvas(2 * h, 2 * w);
    auto blit = [&](const Image& src, int oy, int ox) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                for (int ch = 0; ch < 3; ++ch) canvas.at(oy + y, ox + x, ch) = src.at(y, x, ch);
            }
        }
    };
    blit(c.xp, 0, 0);
    blit(c.yp, 0, w);
    blit(c.xq, h, 0);
    blit(c.yq, h, w);
    return canvas;
}

inline std::vector<PretrainCanvas> build_canvases(const TaskSpec& task, const PretrainConfig& cfg) {
    TaskSpec scene_spec = task;
    scene_spec.seed = mix_seed(cfg.seed, 0x5ce);
    std::vector<PretrainCanvas> out;
    out.reserve(static_cast<std::size_t>(cfg.num_canvases));
    for (int i = 0; i < cfg.num_canvases; ++i) {
        PromptPair prompt = generate_pair(scene_spec, 2 * i);
        PromptPair query = generate_pair(scene_spec, 2 * i + 1);
        Rng rng(mix_seed(cfg.seed, 0xa06 + static_cast<std::uint64_t>(i)));
        PretrainCanvas c;
        c.xp = prompt.image;
        c.yp = prompt.label;
        c.xq = query.image;
        c.yq = query.label;
        if (task.kind == TaskKind::Colorization) {
            const int perm = rng.uniform_index(6);
            c.recolor_id = perm;
            if (perm != 0) {
                c.yp = permute_channels(c.yp, perm);
                c.yq = permute_channels(c.yq, perm);
                c.xp = gray_of(c.yp);
                c.xq = gray_of(c.yq);
            }
        } else if (rng.uniform() < cfg.recolor_prob) {
            const int pair = 1 + rng.uniform_index(4); // any non-default pair
            c.recolor_id = pair;
            c.yp = recolor_mask(c.yp, kLabelPairs[pair][0], kLabelPairs[pair][1]);
            c.yq = recolor_mask(c.yq, kLabelPairs[pair][0], kLabelPairs[pair][1]);
        }
        out.push_back(std::move(c));
    }
    return out;
}

// Mean squared pixel error between two equally sized images.
inline double image_mse(const Image& a, const Image& b) {
    double acc = 0;
    for (std::size_t i = 0; i < a.px.size(); ++i) {
        const double d = static_cast<double>(a.px[i]) - b.px[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.px.size());
}

template <class S>
TensorT<S> mse_loss(const TensorT<S>& a, const TensorT<S>& b) {
    auto d = sub(a, b);
    return mean_all(mul(d, d));
}

} // namespace pretrain_detail

// Trains the quantizer and encoder in place, freezes the backbone, and
// returns the gate metrics. Throws PretrainError when reconstruction fails
// to converge below cfg.recon_gate.
template <class S>
PretrainReport pretrain_backbone(BackboneT<S>& bb, const TaskSpec& task, const PretrainConfig& cfg) {
    using pretrain_detail::assemble_pixels;
    using pretrain_detail::image_mse;
    using pretrain_detail::mse_loss;

    if (cfg.num_canvases < 8) throw ConfigError("pretraining needs at least 8 canvases");
    const int threads = resolve_threads(cfg.threads);

    std::vector<PretrainCanvas> canvases = pretrain_detail::build_canvases(task, cfg);
    const int held = std::max(1, static_cast<int>(std::lround(cfg.num_canvases * cfg.holdout_fraction)));
    const int n_train = cfg.num_canvases - held;

    // ---- Stage (a): vector quantizer -------------------------------------
    // One big matrix of flattened patches from the training canvases.
    std::vector<TensorT<S>> patch_rows;
    for (int i = 0; i < n_train; ++i) {
        patch_rows.push_back(patch_matrix<S>(assemble_pixels(canvases[static_cast<std::size_t>(i)]), bb.patch));
    }
    TensorT<S> all_patches = concat_rows(patch_rows);
    patch_rows.clear();
    const int total_rows = static_cast<int>(all_patches.rows());
    const int pc = bb.patch * bb.patch * 3;

    for (auto t : bb.quantizer_params()) t.set_requires_grad(true);
    bb.codebook.set_requires_grad(true);

    Rng order_rng(mix_seed(cfg.seed, 0x0a));
    std::vector<int> row_order(static_cast<std::size_t>(total_rows));
    std::iota(row_order.begin(), row_order.end(), 0);

    auto quantizer_params = bb.quantizer_params();
    auto run_ae_epoch = [&](bool with_vq, std::vector<int>* usage) {
        order_rng.shuffle(row_order);
        double epoch_loss = 0;
        int batches = 0;
        for (int start = 0; start < total_rows; start += cfg.patch_batch) {
            const int stop = std::min(total_rows, start + cfg.patch_batch);
            std::vector<int> batch_idx(row_order.begin() + start, row_order.begin() + stop);
            auto x = gather_rows(all_patches, batch_idx);
            auto z_e = quantizer_features(x, bb);
            TensorT<S> loss;
            if (with_vq) {
                std::vector<int> codes = nearest_codebook(z_e, bb);
                if (usage != nullptr) {
                    for (const int c : codes) ++(*usage)[static_cast<std::size_t>(c - 1)];
                }
                std::vector<int> codes0(codes.size());
                for (std::size_t i = 0; i < codes.size(); ++i) codes0[i] = codes[i] - 1;
                auto e = gather_rows(bb.codebook, codes0);
                auto z_q = add(z_e, detach(sub(e, z_e))); // straight-through
                auto recon = add_bias(matmul(z_q, bb.q_dec_w), bb.q_dec_b);
                auto codebook_loss = mse_loss(e, detach(z_e));
                auto commit_loss = mse_loss(z_e, detach(e));
                loss = add(add(mse_loss(recon, x), codebook_loss), scale(commit_loss, cfg.commitment));
            } else {
                auto recon = add_bias(matmul(z_e, bb.q_dec_w), bb.q_dec_b);
                loss = mse_loss(recon, x);
            }
            epoch_loss += static_cast<double>(loss.item());
            ++batches;
            backward(loss);
            std::vector<TensorT<S>> params = quantizer_params;
            if (with_vq) params.push_back(bb.codebook);
            sgd_step(params, cfg.lr_quantizer);
        }
        if (cfg.verbose) {
            std::fprintf(stderr, "[pretrain] quantizer %s loss %.6f\n", with_vq ? "vq" : "ae",
                         epoch_loss / std::max(1, batches));
        }
    };

    for (int epoch = 0; epoch < cfg.quantizer_warmup_epochs; ++epoch) run_ae_epoch(false, nullptr);

    // Exact k-means M-step over every training patch feature: each used code
    // moves to the centroid of its assigned features; unused codes are
    // revived from a deterministic random feature.
    auto refresh_codebook = [&](std::uint64_t revive_tag) {
        NoGradGuard ng;
        auto feats = quantizer_features(all_patches, bb);
        const std::vector<int> assign = nearest_codebook(feats, bb);
        const int nc = bb.codebook_size();
        std::vector<double> sums(static_cast<std::size_t>(nc) * bb.dim, 0.0);
        std::vector<int> counts(static_cast<std::size_t>(nc), 0);
        for (int r = 0; r < total_rows; ++r) {
            const int j = assign[static_cast<std::size_t>(r)] - 1;
            ++counts[static_cast<std::size_t>(j)];
            for (int c = 0; c < bb.dim; ++c) {
                sums[static_cast<std::size_t>(j) * bb.dim + c] += static_cast<double>(feats.at(r, c));
            }
        }
        Rng revive_rng(mix_seed(cfg.seed, revive_tag));
        for (int j = 0; j < nc; ++j) {
            if (counts[static_cast<std::size_t>(j)] > 0) {
                for (int c = 0; c < bb.dim; ++c) {
                    bb.codebook.mutable_data()[static_cast<std::size_t>(j) * bb.dim + c] =
                        static_cast<S>(sums[static_cast<std::size_t>(j) * bb.dim + c] / counts[static_cast<std::size_t>(j)]);
                }
            } else {
                const int row = revive_rng.uniform_index(total_rows);
                for (int c = 0; c < bb.dim; ++c) {
                    bb.codebook.mutable_data()[static_cast<std::size_t>(j) * bb.dim + c] = feats.at(row, c);
                }
            }
        }
    };

    // Codebook init: sample seeds, then Lloyd iterations on the feature pool.
    {
        NoGradGuard ng;
        Rng pick_rng(mix_seed(cfg.seed, 0x0b));
        for (int j = 0; j < bb.codebook_size(); ++j) {
            const int row = pick_rng.uniform_index(total_rows);
            auto f = quantizer_features(gather_rows(all_patches, {row}), bb);
            for (int c = 0; c < bb.dim; ++c) {
                bb.codebook.mutable_data()[static_cast<std::size_t>(j) * bb.dim + c] = f.at(0, c);
            }
        }
        for (int iter = 0; iter < 8; ++iter) refresh_codebook(0x1000 + static_cast<std::uint64_t>(iter));
    }

    for (int epoch = 0; epoch < cfg.quantizer_epochs; ++epoch) {
        std::vector<int> usage(static_cast<std::size_t>(bb.codebook_size()), 0);
        run_ae_epoch(true, &usage);
        refresh_codebook(0x2000 + static_cast<std::uint64_t>(epoch));
    }

    // Final decoder refit: weighted least squares mapping each code vector to
    // the pixel centroid of its assigned patches. With N_c codes and N_c + 1
    // decoder parameters per output, the fit is essentially exact, so the
    // quantizer reaches the k-means reconstruction error of its assignment.
    {
        NoGradGuard ng;
        auto feats = quantizer_features(all_patches, bb);
        const std::vector<int> assign = nearest_codebook(feats, bb);
        const int nc = bb.codebook_size();
        std::vector<double> cent(static_cast<std::size_t>(nc) * pc, 0.0);
        std::vector<double> counts(static_cast<std::size_t>(nc), 0.0);
        for (int r = 0; r < total_rows; ++r) {
            const int j = assign[static_cast<std::size_t>(r)] - 1;
            counts[static_cast<std::size_t>(j)] += 1.0;
            for (int c = 0; c < pc; ++c) {
                cent[static_cast<std::size_t>(j) * pc + c] += static_cast<double>(all_patches.at(r, c));
            }
        }
        for (int j = 0; j < nc; ++j) {
            if (counts[static_cast<std::size_t>(j)] > 0) {
                for (int c = 0; c < pc; ++c) cent[static_cast<std::size_t>(j) * pc + c] /= counts[static_cast<std::size_t>(j)];
            }
        }
        // Normal equations over the design [codebook | 1], ridge-stabilized.
        const int m = bb.dim + 1;
        std::vector<double> gram(static_cast<std::size_t>(m) * m, 0.0);
        std::vector<double> rhs(static_cast<std::size_t>(m) * pc, 0.0);
        auto x_of = [&](int j, int a) {
            return a < bb.dim ? static_cast<double>(bb.codebook.at(j, a)) : 1.0;
        };
        for (int j = 0; j < nc; ++j) {
            const double wj = std::max(counts[static_cast<std::size_t>(j)], 1e-3);
            for (int a = 0; a < m; ++a) {
                for (int b = 0; b < m; ++b) gram[static_cast<std::size_t>(a) * m + b] += wj * x_of(j, a) * x_of(j, b);
                for (int c = 0; c < pc; ++c) {
                    const double y = counts[static_cast<std::size_t>(j)] > 0
                                         ? cent[static_cast<std::size_t>(j) * pc + c]
                                         : 0.5;
                    rhs[static_cast<std::size_t>(a) * pc + c] += wj * x_of(j, a) * y;
                }
            }
        }
        for (int a = 0; a < m; ++a) gram[static_cast<std::size_t>(a) * m + a] += 1e-8;
        // Gaussian elimination with partial pivoting on [gram | rhs].
        for (int col = 0; col < m; ++col) {
            int pivot = col;
            for (int r = col + 1; r < m; ++r) {
                if (std::abs(gram[static_cast<std::size_t>(r) * m + col]) >
                    std::abs(gram[static_cast<std::size_t>(pivot) * m + col])) {
                    pivot = r;
                }
            }
            if (pivot != col) {
                for (int b = 0; b < m; ++b) std::swap(gram[static_cast<std::size_t>(col) * m + b], gram[static_cast<std::size_t>(pivot) * m + b]);
                for (int c = 0; c < pc; ++c) std::swap(rhs[static_cast<std::size_t>(col) * pc + c], rhs[static_cast<std::size_t>(pivot) * pc + c]);
            }
            const double diag = gram[static_cast<std::size_t>(col) * m + col];
            for (int r = 0; r < m; ++r) {
                if (r == col || gram[static_cast<std::size_t>(r) * m + col] == 0.0) continue;
                const double f = gram[static_cast<std::size_t>(r) * m + col] / diag;
                for (int b = col; b < m; ++b) gram[static_cast<std::size_t>(r) * m + b] -= f * gram[static_cast<std::size_t>(col) * m + b];
                for (int c = 0; c < pc; ++c) rhs[static_cast<std::size_t>(r) * pc + c] -= f * rhs[static_cast<std::size_t>(col) * pc + c];
            }
        }
        for (int a = 0; a < m; ++a) {
            const double diag = gram[static_cast<std::size_t>(a) * m + a];
            for (int c = 0; c < pc; ++c) {
                const double beta = rhs[static_cast<std::size_t>(a) * pc + c] / diag;
                if (a < bb.dim) {
                    bb.q_dec_w.mutable_data()[static_cast<std::size_t>(a) * pc + c] = static_cast<S>(beta);
                } else {
                    bb.q_dec_b.mutable_data()[static_cast<std::size_t>(c)] = static_cast<S>(beta);
                }
            }
        }
    }
    for (auto t : bb.quantizer_params()) t.set_requires_grad(false);
    bb.codebook.set_requires_grad(false);

    PretrainReport report;
    report.canvases = cfg.num_canvases;
    {
        NoGradGuard ng;
        double mse = 0;
        for (int i = n_train; i < cfg.num_canvases; ++i) {
            const Image canvas = assemble_pixels(canvases[static_cast<std::size_t>(i)]);
            mse += image_mse(decode(quantize(canvas, bb), bb), canvas);
        }
        report.recon_mse = mse / held;
    }
    if (report.recon_mse > cfg.recon_gate) {
        throw PretrainError("quantizer failed to converge: held-out reconstruction MSE " +
                            std::to_string(report.recon_mse) + " exceeds " + std::to_string(cfg.recon_gate));
    }

    // ---- Stage (b): masked-canvas encoder --------------------------------
    for (auto& c : canvases) c.tokens = quantize(assemble_pixels(c), bb);

    for (auto t : bb.encoder_params()) t.set_requires_grad(true);

    // Fused prompts downstream are attention-weighted mixtures of embeddings,
    // not clean single-scene embeddings. A share of pretraining examples
    // therefore blends the prompt row with a second canvas of the SAME label
    // recoloring in feature space (same blend for image and label). Shapes
    // blur but the color semantics stay crisp, exactly like fused prompts at
    // inference, so the encoder stays calibrated and committed on them.
    const double p_mix = 0.35;
    std::vector<std::vector<int>> recolor_groups;
    {
        int max_id = 0;
        for (int i = 0; i < n_train; ++i) max_id = std::max(max_id, canvases[static_cast<std::size_t>(i)].recolor_id);
        recolor_groups.assign(static_cast<std::size_t>(max_id + 1), {});
        for (int i = 0; i < n_train; ++i) {
            recolor_groups[static_cast<std::size_t>(canvases[static_cast<std::size_t>(i)].recolor_id)].push_back(i);
        }
    }
    const auto br_rows = quadrant_indices(bb.gh, bb.gw, Quadrant::BottomRight);
    auto example_loss = [&](const PretrainCanvas& c, const PretrainCanvas* mix_with, double alpha) {
        auto xp = embed_patches(c.xp, bb);
        auto yp = embed_patches(c.yp, bb);
        if (mix_with != nullptr) {
            xp = add(scale(xp, alpha), scale(embed_patches(mix_with->xp, bb), 1.0 - alpha));
            yp = add(scale(yp, alpha), scale(embed_patches(mix_with->yp, bb), 1.0 - alpha));
        }
        auto feats = assemble_canvas_quadrants(xp, yp, embed_patches(c.xq, bb),
                                               broadcast_row(bb.mask_token, bb.gh * bb.gw), bb.gh, bb.gw);
        auto logits = encode_continuous(feats, bb);
        auto full_ce = cross_entropy_mean(logits, c.tokens.idx);
        std::vector<int> br_targets;
        br_targets.reserve(br_rows.size());
        for (const int r : br_rows) br_targets.push_back(c.tokens.idx[static_cast<std::size_t>(r)]);
        auto masked_ce = cross_entropy_mean(gather_rows(logits, br_rows), br_targets);
        return add(full_ce, masked_ce);
    };

    auto encoder_params = bb.encoder_params();
    Rng shuffle_rng(mix_seed(cfg.seed, 0x0d));
    std::vector<int> order(static_cast<std::size_t>(n_train));
    std::iota(order.begin(), order.end(), 0);

    // Momentum SGD with a one-epoch linear warmup and cosine decay. Velocity
    // buffers are keyed by parameter position, merged in a fixed order.
    std::vector<std::vector<S>> velocity(encoder_params.size());
    for (std::size_t i = 0; i < encoder_params.size(); ++i) {
        velocity[i].assign(encoder_params[i].data().size(), S(0));
    }
    const double momentum = 0.9;
    const int steps_per_epoch = (n_train + cfg.batch - 1) / cfg.batch;
    const long total_steps = static_cast<long>(steps_per_epoch) * cfg.encoder_epochs;
    long step = 0;

    double last_ce = 0;
    for (int epoch = 0; epoch < cfg.encoder_epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_ce = 0;
        for (int start = 0; start < n_train; start += cfg.batch) {
            const int stop = std::min(n_train, start + cfg.batch);
            const int bsz = stop - start;
            std::vector<LeafGradMap<S>> sinks(static_cast<std::size_t>(bsz));
            std::vector<double> losses(static_cast<std::size_t>(bsz), 0.0);
            parallel_for(bsz, threads, [&](int k) {
                const int ci = order[static_cast<std::size_t>(start + k)];
                const auto& c = canvases[static_cast<std::size_t>(ci)];
                Rng mix_rng(mix_seed(cfg.seed,
                                     0x3000 + static_cast<std::uint64_t>(epoch) * 100000 +
                                         static_cast<std::uint64_t>(ci)));
                const PretrainCanvas* mix_with = nullptr;
                double alpha = 1.0;
                const auto& group = recolor_groups[static_cast<std::size_t>(c.recolor_id)];
                if (mix_rng.uniform() < p_mix && group.size() > 1) {
                    int other = group[mix_rng.uniform_int(group.size())];
                    while (other == ci) other = group[mix_rng.uniform_int(group.size())];
                    mix_with = &canvases[static_cast<std::size_t>(other)];
                    alpha = mix_rng.uniform(0.5, 0.9);
                }
                auto loss = example_loss(c, mix_with, alpha);
                losses[static_cast<std::size_t>(k)] = static_cast<double>(loss.item());
                backward(loss, &sinks[static_cast<std::size_t>(k)]);
            });
            for (int k = 0; k < bsz; ++k) {
                accumulate_leaf_grads(sinks[static_cast<std::size_t>(k)]);
                epoch_ce += losses[static_cast<std::size_t>(k)];
            }
            const double warmup = std::min(1.0, static_cast<double>(step + 1) / steps_per_epoch);
            const double decay = 0.5 * (1.0 + std::cos(3.14159265358979323846 *
                                                       static_cast<double>(step) / total_steps));
            const S lr = static_cast<S>(cfg.lr_encoder * warmup * decay);
            // Global-norm clip of the batch-mean gradient keeps the norm-free
            // transformer stable under momentum.
            double grad_sq = 0;
            for (auto& p : encoder_params) {
                if (!p.has_grad()) continue;
                for (const S g : p.impl()->grad) {
                    const double gm = static_cast<double>(g) / bsz;
                    grad_sq += gm * gm;
                }
            }
            const double gnorm = std::sqrt(grad_sq);
            const double clip = gnorm > 1.0 ? 1.0 / gnorm : 1.0;
            for (std::size_t i = 0; i < encoder_params.size(); ++i) {
                auto& p = encoder_params[i];
                if (!p.has_grad()) continue;
                auto& g = p.impl()->grad;
                auto& v = velocity[i];
                auto& data = p.mutable_data();
                for (std::size_t j = 0; j < data.size(); ++j) {
                    v[j] = static_cast<S>(momentum) * v[j] +
                           static_cast<S>(clip) * g[j] / static_cast<S>(bsz);
                    data[j] -= lr * v[j];
                }
                detail::check_finite("pretrain_encoder_step", data);
                p.zero_grad();
            }
            ++step;
        }
        last_ce = epoch_ce / n_train;
        if (cfg.verbose) std::fprintf(stderr, "[pretrain] encoder epoch %d ce %.6f\n", epoch, last_ce);
    }
    report.final_encoder_ce = last_ce;

    bb.freeze();

    // Gate: masked-quadrant token accuracy on held-out canvases.
    {
        NoGradGuard ng;
        long correct = 0, total = 0;
        for (int i = n_train; i < cfg.num_canvases; ++i) {
            const auto& c = canvases[static_cast<std::size_t>(i)];
            auto feats = assemble_canvas_quadrants(embed_patches(c.xp, bb), embed_patches(c.yp, bb),
                                                   embed_patches(c.xq, bb),
                                                   broadcast_row(bb.mask_token, bb.gh * bb.gw), bb.gh, bb.gw);
            auto logits = encode_continuous(feats, bb);
            for (const int r : br_rows) {
                const S* row = logits.data().data() + static_cast<std::size_t>(r) * bb.codebook_size();
                int arg = 0;
                for (int j = 1; j < bb.codebook_size(); ++j) {
                    if (row[j] > row[arg]) arg = j;
                }
                correct += (arg + 1 == c.tokens.idx[static_cast<std::size_t>(r)]) ? 1 : 0;
                ++total;
            }
        }
        report.masked_accuracy = static_cast<double>(correct) / static_cast<double>(total);
    }

    // Codebook self-consistency: quantize(decode(idx)) == idx per code.
    {
        NoGradGuard ng;
        IndexGrid grid;
        grid.gh = bb.codebook_size();
        grid.gw = 1;
        grid.idx.resize(static_cast<std::size_t>(bb.codebook_size()));
        for (int j = 0; j < bb.codebook_size(); ++j) grid.idx[static_cast<std::size_t>(j)] = j + 1;
        const IndexGrid back = quantize(decode(grid, bb), bb);
        int match = 0;
        for (int j = 0; j < bb.codebook_size(); ++j) {
            match += back.idx[static_cast<std::size_t>(j)] == grid.idx[static_cast<std::size_t>(j)] ? 1 : 0;
        }
        report.dq_consistency = static_cast<double>(match) / bb.codebook_size();
    }
    return report;
}

} // namespace vicl
