#include "vicl/harness.hpp"

#include "vicl/util.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace vicl {

double lr_at(long step, const TrainConfig& cfg, int steps_per_epoch) {
    if (step < 0) throw ContractError("lr_at: step must be non-negative");
    if (steps_per_epoch <= 0) throw ContractError("lr_at: steps_per_epoch must be positive");
    const double epoch_pos = static_cast<double>(step) / steps_per_epoch;
    double cycle_start = 0;
    double cycle_len = cfg.scheduler.t0_epochs;
    while (epoch_pos >= cycle_start + cycle_len) {
        cycle_start += cycle_len;
        cycle_len *= cfg.scheduler.t_mult;
    }
    const double t = (epoch_pos - cycle_start) / cycle_len;
    return cfg.scheduler.eta_min +
           0.5 * (cfg.lr_init - cfg.scheduler.eta_min) * (1.0 + std::cos(3.14159265358979323846 * t));
}

std::vector<PromptPair> retrieve_for_training(const PromptPair& query, const PromptDatabase& db, int n) {
    if (n + 1 > db.size()) {
        throw CapacityError("training retrieval needs at least N+1 database pairs (leave-one-out)");
    }
    std::vector<PromptPair> ranked = retrieve_topN(query.image, db, n + 1);
    std::vector<PromptPair> out;
    out.reserve(static_cast<std::size_t>(n));
    for (auto& p : ranked) {
        if (p.id == query.id) continue;
        out.push_back(std::move(p));
        if (static_cast<int>(out.size()) == n) break;
    }
    out.resize(static_cast<std::size_t>(n));
    return out;
}

namespace {

// Per-run context shared between training and holdout evaluation.
struct RunContext {
    const TrainConfig* cfg = nullptr;
    const Dataset* ds = nullptr;
    const Backbone* bb = nullptr;
    LocalityCache cache;
    std::vector<std::optional<TargetTokens>> target_cache;     // by train index
    std::vector<std::optional<std::vector<int>>> prompt_cache; // db indices, by train index

    const PromptPair& train_pair(int idx) const { return ds->train.pair(idx); }

    // Top-N db indices for a training query, leave-one-out, cached per run.
    const std::vector<int>& prompts_for(int idx) {
        auto& slot = prompt_cache[static_cast<std::size_t>(idx)];
        if (!slot) {
            const auto pairs = retrieve_for_training(train_pair(idx), ds->train, cfg->fusion.num_prompts);
            std::vector<int> ids;
            ids.reserve(pairs.size());
            for (const auto& p : pairs) {
                for (int k = 0; k < ds->train.size(); ++k) {
                    if (ds->train.pair(k).id == p.id) {
                        ids.push_back(k);
                        break;
                    }
                }
            }
            slot = std::move(ids);
        }
        return *slot;
    }

    const TargetTokens& targets_for(int idx) {
        auto& slot = target_cache[static_cast<std::size_t>(idx)];
        if (!slot) slot = quantize_target_canvas(train_pair(idx), *bb);
        return *slot;
    }
};

double holdout_metric(const TrainConfig& cfg, const Dataset& ds, const std::vector<int>& holdout_idx,
                      const FusionWeights& weights, const Backbone& bb) {
    if (holdout_idx.empty()) return 0.0;
    std::vector<PromptPair> queries;
    queries.reserve(holdout_idx.size());
    for (const int i : holdout_idx) queries.push_back(ds.train.pair(i));
    TrainConfig eval_cfg = cfg;
    eval_cfg.eval_limit = 0; // the holdout is already the full selection set
    const EvalResult r = evaluate(queries, ds.train, eval_cfg, weights, bb, /*exclude_self=*/true);
    return cfg.task == TaskKind::Colorization ? -r.mean : r.mean;
}

FusionWeights clone_weights(const FusionWeights& w) {
    FusionWeights out = w;
    out.w_q = detach(w.w_q);
    out.w_k = detach(w.w_k);
    out.w_vx = detach(w.w_vx);
    out.w_vy = detach(w.w_vy);
    out.sa_q = detach(w.sa_q);
    out.sa_k = detach(w.sa_k);
    out.sa_v = detach(w.sa_v);
    out.sa_out = detach(w.sa_out);
    if (w.adaptive_head) {
        AdaptiveSigmaHeadT<float> head;
        head.projection = detach(w.adaptive_head->projection);
        head.bias = detach(w.adaptive_head->bias);
        out.adaptive_head = head;
    }
    return out;
}

} // namespace

TrainOutput run_training(const TrainConfig& cfg, const Dataset& ds, const Backbone& bb,
                         const MetricsSink& sink, const FusionWeights* initial) {
    validate(cfg);
    if (ds.spec.kind != cfg.task) throw ConfigError("dataset task does not match config task");
    if (bb.dim != cfg.fusion.dim || bb.patch != cfg.fusion.patch_size) {
        throw ConfigError("backbone geometry (patch " + std::to_string(bb.patch) + ", dim " +
                          std::to_string(bb.dim) + ") does not match fusion config");
    }
    if (ds.train.size() < cfg.fusion.num_prompts + 1) {
        throw CapacityError("training needs at least num_prompts+1 pairs in the database");
    }
    for (const auto& t : bb.all_tensors()) {
        if (t.requires_grad()) throw ContractError("backbone must be frozen before fusion training");
    }

    const int threads = resolve_threads(cfg.threads);

    // Train/holdout split of example indices (retrieval still sees everything).
    std::vector<int> all_idx(static_cast<std::size_t>(ds.train.size()));
    std::iota(all_idx.begin(), all_idx.end(), 0);
    Rng split_rng(mix_seed(cfg.seed, 0x51));
    split_rng.shuffle(all_idx);
    const int holdout_n = static_cast<int>(std::lround(cfg.holdout_fraction * ds.train.size()));
    std::vector<int> holdout_idx(all_idx.begin(), all_idx.begin() + holdout_n);
    std::vector<int> train_idx(all_idx.begin() + holdout_n, all_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(holdout_idx.begin(), holdout_idx.end());
    if (cfg.train_limit > 0 && cfg.train_limit < static_cast<int>(train_idx.size())) {
        train_idx.resize(static_cast<std::size_t>(cfg.train_limit));
    }
    if (train_idx.empty()) throw ConfigError("no training examples left after split and limit");

    RunContext ctx;
    ctx.cfg = &cfg;
    ctx.ds = &ds;
    ctx.bb = &bb;
    ctx.target_cache.resize(static_cast<std::size_t>(ds.train.size()));
    ctx.prompt_cache.resize(static_cast<std::size_t>(ds.train.size()));
    // Warm the caches up front so worker threads only read them.
    for (const int i : train_idx) {
        ctx.prompts_for(i);
        ctx.targets_for(i);
    }
    // Locality cache likewise (non-adaptive path only).
    if (!cfg.locality.adaptive) {
        tiled_prior<float>(bb.gh, bb.gw, cfg.fusion.num_prompts, cfg.locality, ctx.cache);
    }

    TrainOutput out;
    out.weights = initial != nullptr ? clone_weights(*initial)
                                     : FusionWeights::init(cfg.fusion.dim, cfg.seed, cfg.locality.adaptive);
    for (auto p : out.weights.parameters()) p.set_requires_grad(true);
    auto params = out.weights.parameters();

    const int steps_per_epoch = static_cast<int>((train_idx.size() + cfg.batch_size - 1) / cfg.batch_size);
    long step = 0;
    double best_metric = -1e300;
    FusionWeights best = clone_weights(out.weights);
    bool have_best = false;

    Rng order_rng(mix_seed(cfg.seed, 0x0e));
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order = train_idx;
        order_rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const int bsz = static_cast<int>(stop - start);
            std::vector<LeafGradMap<float>> sinks(static_cast<std::size_t>(bsz));
            struct Parts {
                double l_p = 0, l_s = 0, l_u = 0;
            };
            std::vector<Parts> parts(static_cast<std::size_t>(bsz));

            try {
                parallel_for(bsz, threads, [&](int k) {
                    const int idx = order[start + static_cast<std::size_t>(k)];
                    const PromptPair& query = ctx.train_pair(idx);
                    std::vector<PromptPair> prompts;
                    prompts.reserve(static_cast<std::size_t>(cfg.fusion.num_prompts));
                    for (const int dbi : ctx.prompts_for(idx)) prompts.push_back(ds.train.pair(dbi));
                    const std::uint64_t stream =
                        mix_seed(static_cast<std::uint64_t>(epoch) << 24, static_cast<std::uint64_t>(idx));
                    prompts = augment(prompts, query, ds.train, cfg.augment, stream, /*training=*/true);
                    auto ex = run_example(query.image, prompts, ctx.targets_for(idx), cfg.locality, cfg.loss,
                                          out.weights, bb, ctx.cache);
                    parts[static_cast<std::size_t>(k)] = {static_cast<double>(ex.report.l_p.item()),
                                                          static_cast<double>(ex.report.l_s.item()),
                                                          static_cast<double>(ex.report.l_u.item())};
                    backward(ex.report.total, &sinks[static_cast<std::size_t>(k)]);
                });
            } catch (const NumericError& e) {
                throw NumericError("training aborted at step " + std::to_string(step) + ": " + e.what());
            }

            for (int k = 0; k < bsz; ++k) accumulate_leaf_grads(sinks[static_cast<std::size_t>(k)]);
            for (auto& p : params) {
                if (p.has_grad()) {
                    for (auto& g : p.impl()->grad) g /= static_cast<float>(bsz);
                }
            }
            const double lr = lr_at(step, cfg, steps_per_epoch);
            try {
                sgd_step(params, lr);
            } catch (const NumericError& e) {
                throw NumericError("training aborted at step " + std::to_string(step) + ": " + e.what());
            }

            StepRecord rec;
            rec.step = step;
            rec.epoch = epoch;
            rec.lr = lr;
            for (const auto& p : parts) {
                rec.l_p += p.l_p;
                rec.l_s += p.l_s;
                rec.l_u += p.l_u;
            }
            rec.l_p /= bsz;
            rec.l_s /= bsz;
            rec.l_u /= bsz;
            rec.total = cfg.loss.p_weight * rec.l_p + cfg.loss.lambda * rec.l_s + cfg.loss.gamma * rec.l_u;
            out.records.push_back(rec);
            if (sink) sink(rec);
            ++step;
        }

        if (!holdout_idx.empty()) {
            const double metric = holdout_metric(cfg, ds, holdout_idx, out.weights, bb);
            if (!have_best || metric > best_metric) {
                best_metric = metric;
                best = clone_weights(out.weights);
                have_best = true;
            }
        }
    }

    out.steps = step;
    if (!have_best) {
        best = clone_weights(out.weights);
        best_metric = holdout_metric(cfg, ds, holdout_idx, out.weights, bb);
    }
    out.best_weights = best;
    out.best_metric = best_metric;
    return out;
}

Image infer(const Image& query_image, const PromptDatabase& db, const TrainConfig& cfg,
            const FusionWeights& weights, const Backbone& bb) {
    NoGradGuard ng;
    LocalityCache cache;
    const std::vector<PromptPair> prompts = retrieve_topN(query_image, db, cfg.fusion.num_prompts);
    auto fwd = fusion_forward(query_image, prompts, cfg.locality, weights, bb, cache);
    auto canvas = assemble_canvas(fwd.fused, fwd.query_features, bb.mask_token, bb.gh, bb.gw);
    auto logits = encode_continuous(canvas, bb);
    auto br = canvas_quadrant(logits, bb.gh, bb.gw, Quadrant::BottomRight);
    IndexGrid indices;
    indices.gh = bb.gh;
    indices.gw = bb.gw;
    indices.idx.resize(static_cast<std::size_t>(bb.gh) * bb.gw);
    const int nc = bb.codebook_size();
    for (int r = 0; r < bb.gh * bb.gw; ++r) {
        int arg = 0;
        for (int j = 1; j < nc; ++j) {
            if (br.at(r, j) > br.at(r, arg)) arg = j;
        }
        indices.idx[static_cast<std::size_t>(r)] = arg + 1;
    }
    return decode(indices, bb);
}

double mask_iou(const Image& pred, const Image& truth) {
    if (!pred.same_size(truth)) throw DimensionError("mask_iou: image sizes differ");
    long inter = 0, uni = 0;
    for (int y = 0; y < pred.h; ++y) {
        for (int x = 0; x < pred.w; ++x) {
            const bool p = luminance(pred.at(y, x, 0), pred.at(y, x, 1), pred.at(y, x, 2)) > 0.5f;
            const bool t = luminance(truth.at(y, x, 0), truth.at(y, x, 1), truth.at(y, x, 2)) > 0.5f;
            inter += (p && t) ? 1 : 0;
            uni += (p || t) ? 1 : 0;
        }
    }
    if (uni == 0) return 1.0; // both empty
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double pixel_mse(const Image& pred, const Image& truth) {
    if (!pred.same_size(truth)) throw DimensionError("pixel_mse: image sizes differ");
    double acc = 0;
    for (std::size_t i = 0; i < pred.px.size(); ++i) {
        const double d = static_cast<double>(pred.px[i]) - truth.px[i];
        acc += d * d;
    }
    return acc / static_cast<double>(pred.px.size());
}

EvalResult evaluate(const std::vector<PromptPair>& testset, const PromptDatabase& db, const TrainConfig& cfg,
                    const FusionWeights& weights, const Backbone& bb, bool exclude_self) {
    if (testset.empty()) throw ConfigError("evaluate: empty test set");
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<PromptPair> queries = testset;
    if (cfg.eval_limit > 0 && cfg.eval_limit < static_cast<int>(queries.size())) {
        queries.resize(static_cast<std::size_t>(cfg.eval_limit));
    }

    EvalResult result;
    result.task = cfg.task;
    result.per_example.resize(queries.size());
    const int threads = resolve_threads(cfg.threads);
    // Shared locality cache warmed before the fan-out.
    LocalityCache cache;
    if (!cfg.locality.adaptive) {
        tiled_prior<float>(bb.gh, bb.gw, cfg.fusion.num_prompts, cfg.locality, cache);
    }

    parallel_for(static_cast<int>(queries.size()), threads, [&](int i) {
        NoGradGuard ng;
        const PromptPair& q = queries[static_cast<std::size_t>(i)];
        std::vector<PromptPair> prompts =
            exclude_self ? retrieve_for_training(q, db, cfg.fusion.num_prompts)
                         : retrieve_topN(q.image, db, cfg.fusion.num_prompts);
        auto fwd = fusion_forward(q.image, prompts, cfg.locality, weights, bb, cache);
        auto canvas = assemble_canvas(fwd.fused, fwd.query_features, bb.mask_token, bb.gh, bb.gw);
        auto logits = encode_continuous(canvas, bb);
        auto br = canvas_quadrant(logits, bb.gh, bb.gw, Quadrant::BottomRight);
        IndexGrid indices;
        indices.gh = bb.gh;
        indices.gw = bb.gw;
        indices.idx.resize(static_cast<std::size_t>(bb.gh) * bb.gw);
        for (int r = 0; r < bb.gh * bb.gw; ++r) {
            int arg = 0;
            for (int j = 1; j < bb.codebook_size(); ++j) {
                if (br.at(r, j) > br.at(r, arg)) arg = j;
            }
            indices.idx[static_cast<std::size_t>(r)] = arg + 1;
        }
        const Image pred = decode(indices, bb);
        auto& rec = result.per_example[static_cast<std::size_t>(i)];
        rec.id = q.id;
        rec.class_tag = q.class_tag;
        rec.value = cfg.task == TaskKind::Colorization ? pixel_mse(pred, q.label) : mask_iou(pred, q.label);
    });

    std::map<std::string, std::pair<double, int>> acc;
    for (const auto& e : result.per_example) {
        acc[e.class_tag].first += e.value;
        acc[e.class_tag].second += 1;
    }
    double sum = 0;
    for (const auto& [tag, pair] : acc) {
        const double mean = pair.first / pair.second;
        result.per_class[tag] = mean;
        sum += mean;
    }
    result.mean = sum / static_cast<double>(result.per_class.size());
    result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

nlohmann::json to_json(const EvalResult& r) {
    nlohmann::json j;
    j["task"] = task_name(r.task);
    j["metric"] = r.task == TaskKind::Colorization ? "mse" : "miou";
    j["mean"] = r.mean;
    j["per_class"] = r.per_class;
    nlohmann::json examples = nlohmann::json::array();
    for (const auto& e : r.per_example) {
        examples.push_back({{"id", e.id}, {"class", e.class_tag}, {"value", e.value}});
    }
    j["per_example"] = examples;
    j["wall_seconds"] = r.wall_seconds;
    return j;
}

namespace {

IndexGrid argmax_grid(const Tensor& logits, int gh, int gw, int nc) {
    IndexGrid grid;
    grid.gh = gh;
    grid.gw = gw;
    grid.idx.resize(static_cast<std::size_t>(gh) * gw);
    for (int r = 0; r < gh * gw; ++r) {
        int arg = 0;
        for (int j = 1; j < nc; ++j) {
            if (logits.at(r, j) > logits.at(r, arg)) arg = j;
        }
        grid.idx[static_cast<std::size_t>(r)] = arg + 1;
    }
    return grid;
}

} // namespace

FusedExport export_fused_prompt(const PromptPair& query, const PromptDatabase& db, const TrainConfig& cfg,
                                const FusionWeights& weights, const Backbone& bb,
                                const std::filesystem::path& out_path) {
    NoGradGuard ng;
    LocalityCache cache;
    const std::vector<PromptPair> prompts = retrieve_topN(query.image, db, cfg.fusion.num_prompts);
    auto fwd = fusion_forward(query.image, prompts, cfg.locality, weights, bb, cache);
    auto canvas = assemble_canvas(fwd.fused, fwd.query_features, bb.mask_token, bb.gh, bb.gw);
    auto logits = encode_continuous(canvas, bb);
    const int nc = bb.codebook_size();
    auto tl = canvas_quadrant(logits, bb.gh, bb.gw, Quadrant::TopLeft);
    auto tr = canvas_quadrant(logits, bb.gh, bb.gw, Quadrant::TopRight);
    const Image fused_img = decode(argmax_grid(tl, bb.gh, bb.gw, nc), bb);
    const Image fused_lbl = decode(argmax_grid(tr, bb.gh, bb.gw, nc), bb);

    const int h = fused_img.h, w = fused_img.w;
    if (query.image.h != h || query.image.w != w) {
        throw DimensionError("export_fused_prompt: query size does not match the backbone geometry");
    }
    FusedExport out;
    out.composite = Image(h, 4 * w);
    auto blit = [&](const Image& src, int ox) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                for (int c = 0; c < 3; ++c) out.composite.at(y, ox + x, c) = src.at(y, x, c);
            }
        }
    };
    blit(fused_img, 0);
    blit(fused_lbl, w);
    blit(query.image, 2 * w);
    blit(query.label, 3 * w);
    out.fused_label_iou = mask_iou(fused_lbl, query.label);

    write_image(out_path, out.composite);
    nlohmann::json side;
    side["fused_label_iou"] = out.fused_label_iou;
    side["query_id"] = query.id;
    side["num_prompts"] = cfg.fusion.num_prompts;
    std::filesystem::path side_path = out_path;
    side_path.replace_extension();
    side_path += "_metrics.json";
    write_file_atomic(side_path, side.dump(2) + "\n");
    return out;
}

AttentionHeat attention_heatmaps(const AttentionRecordT<float>& record) {
    const int cells = record.gh * record.gw;
    AttentionHeat heat;
    heat.raw.assign(static_cast<std::size_t>(record.num_prompts), std::vector<double>(static_cast<std::size_t>(cells), 0.0));
    for (int row = 0; row < cells; ++row) {
        for (int n = 0; n < record.num_prompts; ++n) {
            for (int c = 0; c < cells; ++c) {
                heat.raw[static_cast<std::size_t>(n)][static_cast<std::size_t>(c)] +=
                    static_cast<double>(record.weights.at(row, n * cells + c));
            }
        }
    }
    heat.normalized = heat.raw;
    for (auto& map : heat.normalized) {
        const auto [lo_it, hi_it] = std::minmax_element(map.begin(), map.end());
        const double lo = *lo_it, hi = *hi_it;
        if (hi - lo < 1e-15) {
            std::fill(map.begin(), map.end(), 0.0);
        } else {
            for (auto& v : map) v = (v - lo) / (hi - lo);
        }
    }
    return heat;
}

std::vector<std::filesystem::path> export_attention_map(const PromptPair& query, const PromptDatabase& db,
                                                        const TrainConfig& cfg, const FusionWeights& weights,
                                                        const Backbone& bb,
                                                        const std::filesystem::path& out_prefix) {
    NoGradGuard ng;
    LocalityCache cache;
    const std::vector<PromptPair> prompts = retrieve_topN(query.image, db, cfg.fusion.num_prompts);
    auto fwd = fusion_forward(query.image, prompts, cfg.locality, weights, bb, cache);
    const AttentionHeat heat = attention_heatmaps(fwd.attention);

    std::vector<std::filesystem::path> files;
    for (int n = 0; n < fwd.attention.num_prompts; ++n) {
        Image img(bb.gh * bb.patch, bb.gw * bb.patch);
        for (int gy = 0; gy < bb.gh; ++gy) {
            for (int gx = 0; gx < bb.gw; ++gx) {
                const float v = static_cast<float>(heat.normalized[static_cast<std::size_t>(n)]
                                                                  [static_cast<std::size_t>(gy) * bb.gw + gx]);
                for (int py = 0; py < bb.patch; ++py) {
                    for (int px = 0; px < bb.patch; ++px) {
                        for (int c = 0; c < 3; ++c) img.at(gy * bb.patch + py, gx * bb.patch + px, c) = v;
                    }
                }
            }
        }
        std::filesystem::path path = out_prefix;
        path += "_p" + std::to_string(n) + ".png";
        write_image(path, img);
        files.push_back(path);
    }
    return files;
}

void save_fusion_checkpoint(const std::filesystem::path& base, const FusionWeights& weights,
                            const TrainConfig& cfg, std::uint64_t backbone_checksum) {
    NamedTensors<float> tensors;
    for (auto& [name, t] : weights.named_tensors()) tensors.add(name, t);
    nlohmann::json meta;
    meta["kind"] = "fusion";
    meta["config"] = to_json(cfg);
    meta["backbone_checksum"] = backbone_checksum;
    save_checkpoint(base, tensors, meta);
}

FusionWeights load_fusion_checkpoint(const std::filesystem::path& base, nlohmann::json* meta_out) {
    nlohmann::json meta;
    NamedTensors<float> tensors = load_checkpoint<float>(base, &meta);
    if (meta.value("kind", "") != "fusion") throw DataError("not a fusion checkpoint: " + base.string());
    FusionWeights w;
    w.w_q = tensors.find("w_q");
    w.w_k = tensors.find("w_k");
    w.w_vx = tensors.find("w_vx");
    w.w_vy = tensors.find("w_vy");
    w.sa_q = tensors.find("sa_q");
    w.sa_k = tensors.find("sa_k");
    w.sa_v = tensors.find("sa_v");
    w.sa_out = tensors.find("sa_out");
    w.dim = w.w_q.dim(0);
    for (const auto& [name, t] : tensors.items) {
        if (name == "adaptive.projection") {
            if (!w.adaptive_head) w.adaptive_head = AdaptiveSigmaHeadT<float>{};
            w.adaptive_head->projection = t;
        } else if (name == "adaptive.bias") {
            if (!w.adaptive_head) w.adaptive_head = AdaptiveSigmaHeadT<float>{};
            w.adaptive_head->bias = t;
        }
    }
    if (meta_out != nullptr) *meta_out = meta;
    return w;
}

} // namespace vicl
