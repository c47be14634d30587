#include "vicl/harness.hpp"

#include <doctest.h>

#include <cmath>

using namespace vicl;

namespace {

TrainConfig base_cfg() {
    TrainConfig cfg;
    cfg.lr_init = 0.04;
    cfg.scheduler = {10, 2, 0.0};
    return cfg;
}

Image fill_mask(int size, int x0, int y0, int x1, int y1) {
    Image img(size, size);
    for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = 1.0f;
        }
    }
    return img;
}

} // namespace

TEST_CASE("lr schedule starts at the configured initial rate") {
    CHECK(lr_at(0, base_cfg(), 10) == doctest::Approx(0.04).epsilon(1e-12));
}

TEST_CASE("lr schedule reaches half the initial rate at the cycle midpoint") {
    // 10 steps per epoch, first cycle 10 epochs -> midpoint at step 50.
    CHECK(lr_at(50, base_cfg(), 10) == doctest::Approx(0.02).epsilon(1e-9));
}

TEST_CASE("lr schedule restarts at the start of the second cycle") {
    // First cycle covers epochs [0, 10); step 100 begins the second cycle.
    CHECK(lr_at(100, base_cfg(), 10) == doctest::Approx(0.04).epsilon(1e-9));
    // Second cycle has length 20 epochs; its midpoint is at epoch 20.
    CHECK(lr_at(200, base_cfg(), 10) == doctest::Approx(0.02).epsilon(1e-9));
    // Third cycle starts at epoch 30.
    CHECK(lr_at(300, base_cfg(), 10) == doctest::Approx(0.04).epsilon(1e-9));
}

TEST_CASE("lr schedule respects eta_min") {
    TrainConfig cfg = base_cfg();
    cfg.scheduler.eta_min = 0.01;
    CHECK(lr_at(0, cfg, 10) == doctest::Approx(0.04).epsilon(1e-12));
    // End of first cycle approaches eta_min.
    CHECK(lr_at(99, cfg, 10) > 0.01);
    CHECK(lr_at(99, cfg, 10) < 0.0104);
}

TEST_CASE("mask IoU on exact, complementary, and half-covering predictions") {
    const Image gt = fill_mask(16, 4, 4, 12, 12);
    CHECK(mask_iou(gt, gt) == doctest::Approx(1.0).epsilon(1e-12));

    // Complement of the ground truth (both regions nonempty).
    Image comp(16, 16);
    for (int y = 0; y < 16; ++y) {
        for (int x = 0; x < 16; ++x) {
            const float v = gt.at(y, x, 0) > 0.5f ? 0.0f : 1.0f;
            for (int c = 0; c < 3; ++c) comp.at(y, x, c) = v;
        }
    }
    CHECK(mask_iou(comp, gt) == doctest::Approx(0.0).epsilon(1e-12));

    // Prediction covering exactly half the ground-truth region, no false positives.
    const Image half = fill_mask(16, 4, 4, 8, 12);
    CHECK(mask_iou(half, gt) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("config defaults resolve per task") {
    TrainConfig seg = parse_train_config({{"task", "seg"}});
    CHECK(seg.locality.sigma == doctest::Approx(0.65));
    CHECK(seg.epochs == 50);
    CHECK(seg.lr_init == doctest::Approx(0.04));
    CHECK(seg.loss.lambda == doctest::Approx(0.5));
    CHECK(seg.loss.gamma == doctest::Approx(0.2));
    CHECK(seg.batch_size == 16);
    CHECK(seg.scheduler.t0_epochs == doctest::Approx(10));
    CHECK(seg.scheduler.t_mult == doctest::Approx(2));

    TrainConfig det = parse_train_config({{"task", "det"}});
    CHECK(det.locality.sigma == doctest::Approx(0.5));

    TrainConfig color = parse_train_config({{"task", "color"}});
    CHECK(color.locality.sigma == doctest::Approx(2.5));
    CHECK(color.epochs == 5);
}

TEST_CASE("config rejects unknown keys and bad values") {
    CHECK_THROWS_AS(parse_train_config({{"task", "seg"}, {"typo_key", 1}}), ConfigError);
    CHECK_THROWS_AS(parse_train_config({{"task", "flight"}}), ConfigError);
    CHECK_THROWS_AS(parse_train_config({{"loss", {{"lambda", -0.5}}}}), ConfigError);
    CHECK_THROWS_AS(parse_train_config({{"locality", {{"sigma", 0.0}}}}), ConfigError);
    CHECK_THROWS_AS(parse_train_config({{"epochs", 0}}), ConfigError);
    CHECK_THROWS_AS(parse_train_config({{"augment", {{"p_q", 0.8}, {"p_r", 0.8}}}}), ConfigError);
}

TEST_CASE("config JSON round-trip preserves every field") {
    nlohmann::json j = {{"task", "det"},
                        {"seed", 777},
                        {"epochs", 9},
                        {"batch_size", 4},
                        {"lr_init", 0.05},
                        {"scheduler", {{"t0_epochs", 3}, {"t_mult", 2}, {"eta_min", 0.001}}},
                        {"loss", {{"lambda", 0.25}, {"gamma", 0.1}, {"p_weight", 1.0}}},
                        {"locality", {{"kind", "laplacian"}, {"sigma", 0.4}, {"adaptive", true}}},
                        {"fusion", {{"num_prompts", 2}, {"patch_size", 4}, {"dim", 16}}},
                        {"augment", {{"p_q", 0.2}, {"p_r", 0.1}}},
                        {"holdout_fraction", 0.0},
                        {"train_limit", 12},
                        {"eval_limit", 6},
                        {"paths", {{"data_dir", "/d"}, {"backbone", "/b"}, {"out_dir", "/o"}}}};
    const TrainConfig cfg = parse_train_config(j);
    const TrainConfig back = parse_train_config(to_json(cfg));
    CHECK(back.task == cfg.task);
    CHECK(back.seed == cfg.seed);
    CHECK(back.epochs == cfg.epochs);
    CHECK(back.locality.kind == PriorKind::Laplacian);
    CHECK(back.locality.adaptive);
    CHECK(back.locality.sigma == doctest::Approx(0.4));
    CHECK(back.fusion.dim == 16);
    CHECK(back.train_limit == 12);
    CHECK(back.paths.data_dir == "/d");
}

TEST_CASE("ablation presets set the documented knobs") {
    TrainConfig cfg = parse_train_config({{"task", "seg"}});
    TrainConfig t = cfg;
    apply_preset(t, "no_lu");
    CHECK(t.loss.gamma == 0.0);
    t = cfg;
    apply_preset(t, "no_ls");
    CHECK(t.loss.lambda == 0.0);
    t = cfg;
    apply_preset(t, "no_lp");
    CHECK(t.loss.p_weight == 0.0);
    t = cfg;
    apply_preset(t, "no_aug");
    CHECK(t.augment.p_q == 0.0);
    CHECK(t.augment.p_r == 0.0);
    t = cfg;
    apply_preset(t, "global");
    CHECK(t.locality.sigma == doctest::Approx(1e6));
    t = cfg;
    apply_preset(t, "patchwise");
    CHECK(t.locality.sigma == doctest::Approx(0.01));
    t = cfg;
    apply_preset(t, "laplacian");
    CHECK(t.locality.kind == PriorKind::Laplacian);
    t = cfg;
    CHECK_THROWS_AS(apply_preset(t, "nonsense"), ConfigError);
}

TEST_CASE("config overrides follow dotted paths") {
    nlohmann::json j = {{"task", "seg"}};
    apply_override(j, "loss.lambda=0");
    apply_override(j, "locality.kind=laplacian");
    apply_override(j, "epochs=3");
    const TrainConfig cfg = parse_train_config(j);
    CHECK(cfg.loss.lambda == 0.0);
    CHECK(cfg.locality.kind == PriorKind::Laplacian);
    CHECK(cfg.epochs == 3);
    CHECK_THROWS_AS(apply_override(j, "no-equals-sign"), ConfigError);
}

TEST_CASE("training retrieval excludes the query itself") {
    TaskSpec spec;
    spec.kind = TaskKind::Segmentation;
    spec.train_size = 10;
    spec.test_size = 2;
    spec.seed = 5;
    const Dataset ds = generate_dataset(spec);
    const PromptPair& query = ds.train.pair(3);
    const auto prompts = retrieve_for_training(query, ds.train, 4);
    REQUIRE(prompts.size() == 4);
    for (const auto& p : prompts) CHECK(p.id != query.id);
    CHECK_THROWS_AS(retrieve_for_training(query, ds.train, 10), CapacityError);
}

TEST_CASE("attention heat maps normalize to [0,1] and conserve total mass") {
    AttentionRecordT<float> rec;
    rec.num_prompts = 2;
    rec.gh = 2;
    rec.gw = 2;
    // 4 query cells x 8 keys, uniform rows.
    rec.weights = TensorT<float>::full({4, 8}, 0.125f);
    const AttentionHeat heat = attention_heatmaps(rec);
    REQUIRE(heat.raw.size() == 2);
    double total = 0;
    for (const auto& map : heat.raw) {
        for (const double v : map) total += v;
    }
    // Averaged over query positions the mass is exactly 1.
    CHECK(total / 4.0 == doctest::Approx(1.0).epsilon(1e-6));
    // Degenerate (uniform) maps normalize to a constant.
    for (const auto& map : heat.normalized) {
        for (const double v : map) CHECK(v == 0.0);
    }

    // Non-degenerate: spike one key.
    auto w = rec.weights.mutable_data();
    rec.weights.mutable_data()[3] = 0.5f;
    const AttentionHeat heat2 = attention_heatmaps(rec);
    double lo = 1e300, hi = -1e300;
    for (const double v : heat2.normalized[0]) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    CHECK(lo == 0.0);
    CHECK(hi == 1.0);
}
