#pragma once

#include "vicl/data.hpp"
#include "vicl/locality.hpp"
#include "vicl/losses.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>

namespace vicl {

struct SchedulerConfig {
    double t0_epochs = 10; // first cycle length, in epochs
    double t_mult = 2;     // geometric cycle growth
    double eta_min = 0.0;
};

struct FusionConfig {
    int num_prompts = 4;
    int patch_size = 4;
    int dim = 32;
};

struct PathsConfig {
    std::filesystem::path data_dir;
    std::filesystem::path backbone;
    std::filesystem::path out_dir;
};

struct TrainConfig {
    TaskKind task = TaskKind::Segmentation;
    std::uint64_t seed = 1234;
    int epochs = 50;
    int batch_size = 16;
    int threads = 0; // 0 = hardware concurrency
    double lr_init = 0.04;
    SchedulerConfig scheduler;
    LossWeights loss;
    LocalityConfig locality;
    FusionConfig fusion;
    AugmentConfig augment;
    double holdout_fraction = 0.1;
    int train_limit = 0; // 0 = use the full training split
    int eval_limit = 0;  // 0 = evaluate every test query
    PathsConfig paths;
};

// Task-default sigma when the config does not pin one.
double default_sigma(TaskKind task);

// Default epoch budget per task (10:1 between mask tasks and colorization).
int default_epochs(TaskKind task);

// Strict parser: unknown keys fail, absent keys take defaults, and
// task-dependent defaults (sigma, epochs) resolve from the task field.
TrainConfig parse_train_config(const nlohmann::json& j);
TrainConfig load_train_config(const std::filesystem::path& path);
nlohmann::json to_json(const TrainConfig& cfg);
void validate(const TrainConfig& cfg);

// Named ablation presets (Table-style configurations). Unknown name fails.
void apply_preset(TrainConfig& cfg, const std::string& preset);

// Applies a "dotted.path=value" override to a config JSON.
void apply_override(nlohmann::json& j, const std::string& assignment);

} // namespace vicl
