#pragma once

// Training loop, evaluation, inference, and visualization exports.

#include "vicl/config.hpp"
#include "vicl/fusion.hpp"
#include "vicl/losses.hpp"
#include "vicl/pretrain.hpp"

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace vicl {

// Cosine annealing with warm restarts, evaluated per optimizer step.
// Positions inside a cycle are measured in fractional epochs.
double lr_at(long step, const TrainConfig& cfg, int steps_per_epoch);

// Discrete-token targets of the replicated query canvas S_q = [X_q Y_q; X_q Y_q].
struct TargetTokens {
    IndexGrid prompt_x, prompt_y; // top row: the query pair in prompt position
    IndexGrid query_x, query_y;   // bottom row: the query pair in query position
};

template <class S>
TargetTokens quantize_target_canvas(const PromptPair& query, const BackboneT<S>& bb) {
    PretrainCanvas c;
    c.xp = query.image;
    c.yp = query.label;
    c.xq = query.image;
    c.yq = query.label;
    const IndexGrid grid = quantize(pretrain_detail::assemble_pixels(c), bb);
    TargetTokens t;
    t.prompt_x = index_quadrant(grid, bb.gh, bb.gw, Quadrant::TopLeft);
    t.prompt_y = index_quadrant(grid, bb.gh, bb.gw, Quadrant::TopRight);
    t.query_x = index_quadrant(grid, bb.gh, bb.gw, Quadrant::BottomLeft);
    t.query_y = index_quadrant(grid, bb.gh, bb.gw, Quadrant::BottomRight);
    return t;
}

template <class S>
struct ExampleOutput {
    LossReportT<S> report;
    FusionForwardT<S> forward;
    TensorT<S> canvas_logits;
};

// One training example end to end: fuse, assemble the canvas, encode,
// and compute the three losses against the cached target tokens.
template <class S>
ExampleOutput<S> run_example(const Image& query_image, const std::vector<PromptPair>& prompts,
                             const TargetTokens& targets, const LocalityConfig& locality,
                             const LossWeights& weights, const FusionWeightsT<S>& fusion_weights,
                             const BackboneT<S>& bb, LocalityCache& cache) {
    ExampleOutput<S> out;
    out.forward = fusion_forward(query_image, prompts, locality, fusion_weights, bb, cache);
    auto canvas = assemble_canvas(out.forward.fused, out.forward.query_features, bb.mask_token, bb.gh, bb.gw);
    out.canvas_logits = encode_continuous(canvas, bb);
    auto tl = canvas_quadrant(out.canvas_logits, bb.gh, bb.gw, Quadrant::TopLeft);
    auto tr = canvas_quadrant(out.canvas_logits, bb.gh, bb.gw, Quadrant::TopRight);
    auto bl = canvas_quadrant(out.canvas_logits, bb.gh, bb.gw, Quadrant::BottomLeft);
    auto br = canvas_quadrant(out.canvas_logits, bb.gh, bb.gw, Quadrant::BottomRight);
    auto l_p = label_prediction_loss(br, targets.query_y);
    auto l_s = semantic_integrity_loss(tl, tr, targets.prompt_x, targets.prompt_y);
    auto l_u = utilization_loss(tl, tr, bl, br);
    out.report = total_loss(l_p, l_s, l_u, weights);
    return out;
}

// One metrics record per optimizer step (batch means of the loss terms).
struct StepRecord {
    long step = 0;
    int epoch = 0;
    double lr = 0;
    double l_p = 0, l_s = 0, l_u = 0, total = 0;
};

using MetricsSink = std::function<void(const StepRecord&)>;

struct TrainOutput {
    FusionWeights weights;      // final
    FusionWeights best_weights; // by holdout metric (== final when no holdout)
    double best_metric = 0;     // holdout mIoU (or negated MSE) of best_weights
    long steps = 0;
    std::vector<StepRecord> records;
};

// Trains fusion weights against a frozen backbone. Deterministic given
// (cfg, dataset, backbone); examples inside a batch may run concurrently and
// merge gradients in example-index order. `initial` overrides the default
// weight initialization when provided.
TrainOutput run_training(const TrainConfig& cfg, const Dataset& ds, const Backbone& bb,
                         const MetricsSink& sink = nullptr, const FusionWeights* initial = nullptr);

// Retrieval for training queries: top-N excluding the query itself.
std::vector<PromptPair> retrieve_for_training(const PromptPair& query, const PromptDatabase& db, int n);

// Predicted label image for one query through a trained checkpoint.
Image infer(const Image& query_image, const PromptDatabase& db, const TrainConfig& cfg,
            const FusionWeights& weights, const Backbone& bb);

struct EvalResult {
    TaskKind task = TaskKind::Segmentation;
    std::map<std::string, double> per_class; // class tag -> mean IoU (or MSE)
    double mean = 0;                         // arithmetic mean of per-class entries
    struct Example {
        int id = 0;
        std::string class_tag;
        double value = 0;
    };
    std::vector<Example> per_example;
    double wall_seconds = 0;
};

// Mask IoU after binarizing both images at 0.5 luminance.
double mask_iou(const Image& pred, const Image& truth);
double pixel_mse(const Image& pred, const Image& truth);

EvalResult evaluate(const std::vector<PromptPair>& testset, const PromptDatabase& db, const TrainConfig& cfg,
                    const FusionWeights& weights, const Backbone& bb, bool exclude_self = false);

nlohmann::json to_json(const EvalResult& r);

// Decoded fused prompt pair next to the query pair (H x 4W composite) plus a
// sidecar metrics JSON with the fused-label vs query-label IoU.
struct FusedExport {
    Image composite;
    double fused_label_iou = 0;
};
FusedExport export_fused_prompt(const PromptPair& query, const PromptDatabase& db, const TrainConfig& cfg,
                                const FusionWeights& weights, const Backbone& bb,
                                const std::filesystem::path& out_path);

// Per-prompt attention mass summed over query positions. Raw masses before
// normalization; min-max normalized heat per prompt for rendering.
struct AttentionHeat {
    std::vector<std::vector<double>> raw;        // [prompt][cell]
    std::vector<std::vector<double>> normalized; // [prompt][cell] in [0, 1]
};
AttentionHeat attention_heatmaps(const AttentionRecordT<float>& record);

std::vector<std::filesystem::path> export_attention_map(const PromptPair& query, const PromptDatabase& db,
                                                        const TrainConfig& cfg, const FusionWeights& weights,
                                                        const Backbone& bb,
                                                        const std::filesystem::path& out_prefix);

// Fusion checkpoint IO (manifest + blob with the resolved config embedded).
void save_fusion_checkpoint(const std::filesystem::path& base, const FusionWeights& weights,
                            const TrainConfig& cfg, std::uint64_t backbone_checksum);
FusionWeights load_fusion_checkpoint(const std::filesystem::path& base, nlohmann::json* meta_out = nullptr);

} // namespace vicl
