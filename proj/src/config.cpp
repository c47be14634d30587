#include "vicl/config.hpp"

#include "vicl/errors.hpp"
#include "vicl/util.hpp"

#include <set>

namespace vicl {

using nlohmann::json;

double default_sigma(TaskKind task) {
    switch (task) {
        case TaskKind::Segmentation: return 0.65;
        case TaskKind::Detection: return 0.5;
        case TaskKind::Colorization: return 2.5;
    }
    return 0.65;
}

int default_epochs(TaskKind task) { return task == TaskKind::Colorization ? 5 : 50; }

namespace {

void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError("config section '" + where + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        if (!allowed.count(key)) throw ConfigError("unknown config key '" + where + key + "'");
    }
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string("config key '") + key + "' has the wrong type");
    }
}

} // namespace

TrainConfig parse_train_config(const json& j) {
    check_keys(j, "", {"task", "seed", "epochs", "batch_size", "threads", "lr_init", "scheduler", "loss",
                       "locality", "fusion", "augment", "holdout_fraction", "train_limit", "eval_limit",
                       "paths"});
    TrainConfig cfg;
    cfg.task = task_from_name(get_or<std::string>(j, "task", "seg"));
    cfg.seed = get_or<std::uint64_t>(j, "seed", 1234);
    cfg.epochs = get_or<int>(j, "epochs", default_epochs(cfg.task));
    cfg.batch_size = get_or<int>(j, "batch_size", 16);
    cfg.threads = get_or<int>(j, "threads", 0);
    cfg.lr_init = get_or<double>(j, "lr_init", 0.04);

    if (j.contains("scheduler")) {
        const auto& s = j.at("scheduler");
        check_keys(s, "scheduler.", {"t0_epochs", "t_mult", "eta_min"});
        cfg.scheduler.t0_epochs = get_or<double>(s, "t0_epochs", 10);
        cfg.scheduler.t_mult = get_or<double>(s, "t_mult", 2);
        cfg.scheduler.eta_min = get_or<double>(s, "eta_min", 0.0);
    }
    if (j.contains("loss")) {
        const auto& s = j.at("loss");
        check_keys(s, "loss.", {"lambda", "gamma", "p_weight"});
        cfg.loss.lambda = get_or<double>(s, "lambda", 0.5);
        cfg.loss.gamma = get_or<double>(s, "gamma", 0.2);
        cfg.loss.p_weight = get_or<double>(s, "p_weight", 1.0);
    }
    if (j.contains("locality")) {
        const auto& s = j.at("locality");
        check_keys(s, "locality.", {"kind", "sigma", "adaptive"});
        cfg.locality.kind = prior_from_name(get_or<std::string>(s, "kind", "gaussian"));
        cfg.locality.sigma = get_or<double>(s, "sigma", default_sigma(cfg.task));
        cfg.locality.adaptive = get_or<bool>(s, "adaptive", false);
    } else {
        cfg.locality.sigma = default_sigma(cfg.task);
    }
    if (j.contains("fusion")) {
        const auto& s = j.at("fusion");
        check_keys(s, "fusion.", {"num_prompts", "patch_size", "dim"});
        cfg.fusion.num_prompts = get_or<int>(s, "num_prompts", 4);
        cfg.fusion.patch_size = get_or<int>(s, "patch_size", 4);
        cfg.fusion.dim = get_or<int>(s, "dim", 32);
    }
    if (j.contains("augment")) {
        const auto& s = j.at("augment");
        check_keys(s, "augment.", {"p_q", "p_r"});
        cfg.augment.p_q = get_or<double>(s, "p_q", 0.3);
        cfg.augment.p_r = get_or<double>(s, "p_r", 0.15);
    }
    cfg.augment.seed = cfg.seed;
    cfg.holdout_fraction = get_or<double>(j, "holdout_fraction", 0.1);
    cfg.train_limit = get_or<int>(j, "train_limit", 0);
    cfg.eval_limit = get_or<int>(j, "eval_limit", 0);
    if (j.contains("paths")) {
        const auto& s = j.at("paths");
        check_keys(s, "paths.", {"data_dir", "backbone", "out_dir"});
        cfg.paths.data_dir = get_or<std::string>(s, "data_dir", "");
        cfg.paths.backbone = get_or<std::string>(s, "backbone", "");
        cfg.paths.out_dir = get_or<std::string>(s, "out_dir", "");
    }
    validate(cfg);
    return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
    json j;
    try {
        j = json::parse(read_file_text(path));
    } catch (const json::exception& e) {
        throw ConfigError("malformed config JSON: " + std::string(e.what()));
    }
    return parse_train_config(j);
}

json to_json(const TrainConfig& cfg) {
    json j;
    j["task"] = task_name(cfg.task);
    j["seed"] = cfg.seed;
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["threads"] = cfg.threads;
    j["lr_init"] = cfg.lr_init;
    j["scheduler"] = {{"t0_epochs", cfg.scheduler.t0_epochs},
                      {"t_mult", cfg.scheduler.t_mult},
                      {"eta_min", cfg.scheduler.eta_min}};
    j["loss"] = {{"lambda", cfg.loss.lambda}, {"gamma", cfg.loss.gamma}, {"p_weight", cfg.loss.p_weight}};
    j["locality"] = {{"kind", prior_name(cfg.locality.kind)},
                     {"sigma", cfg.locality.sigma},
                     {"adaptive", cfg.locality.adaptive}};
    j["fusion"] = {{"num_prompts", cfg.fusion.num_prompts},
                   {"patch_size", cfg.fusion.patch_size},
                   {"dim", cfg.fusion.dim}};
    j["augment"] = {{"p_q", cfg.augment.p_q}, {"p_r", cfg.augment.p_r}};
    j["holdout_fraction"] = cfg.holdout_fraction;
    j["train_limit"] = cfg.train_limit;
    j["eval_limit"] = cfg.eval_limit;
    j["paths"] = {{"data_dir", cfg.paths.data_dir.string()},
                  {"backbone", cfg.paths.backbone.string()},
                  {"out_dir", cfg.paths.out_dir.string()}};
    return j;
}

void validate(const TrainConfig& cfg) {
    if (cfg.epochs <= 0) throw ConfigError("epochs must be positive");
    if (cfg.batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (cfg.lr_init <= 0) throw ConfigError("lr_init must be positive");
    if (cfg.scheduler.t0_epochs <= 0) throw ConfigError("scheduler.t0_epochs must be positive");
    if (cfg.scheduler.t_mult < 1) throw ConfigError("scheduler.t_mult must be at least 1");
    if (cfg.scheduler.eta_min < 0) throw ConfigError("scheduler.eta_min must be non-negative");
    if (cfg.fusion.num_prompts <= 0) throw ConfigError("fusion.num_prompts must be positive");
    if (cfg.fusion.patch_size <= 0) throw ConfigError("fusion.patch_size must be positive");
    if (cfg.fusion.dim <= 0) throw ConfigError("fusion.dim must be positive");
    if (cfg.holdout_fraction < 0 || cfg.holdout_fraction >= 1) {
        throw ConfigError("holdout_fraction must lie in [0, 1)");
    }
    if (cfg.train_limit < 0 || cfg.eval_limit < 0) throw ConfigError("limits must be non-negative");
    vicl::validate(cfg.loss);
    vicl::validate(cfg.locality);
    vicl::validate(cfg.augment);
}

void apply_preset(TrainConfig& cfg, const std::string& preset) {
    if (preset == "full") {
        return;
    } else if (preset == "no_lu") {
        cfg.loss.gamma = 0.0;
    } else if (preset == "no_ls") {
        cfg.loss.lambda = 0.0;
    } else if (preset == "no_lp") {
        cfg.loss.p_weight = 0.0;
    } else if (preset == "no_aug") {
        cfg.augment.p_q = 0.0;
        cfg.augment.p_r = 0.0;
    } else if (preset == "global") {
        cfg.locality.kind = PriorKind::Gaussian;
        cfg.locality.sigma = 1e6;
    } else if (preset == "patchwise") {
        cfg.locality.sigma = 0.01;
    } else if (preset == "laplacian") {
        cfg.locality.kind = PriorKind::Laplacian;
    } else {
        throw ConfigError("unknown ablation preset '" + preset +
                          "' (expected full|no_lu|no_ls|no_lp|no_aug|global|patchwise|laplacian)");
    }
}

void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override must look like key.path=value: " + assignment);
    const std::string path = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);
    json* node = &j;
    std::size_t start = 0;
    for (;;) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError("bad override path: " + assignment);
        if (dot == std::string::npos) {
            json parsed;
            try {
                parsed = json::parse(value);
            } catch (const json::exception&) {
                parsed = value; // plain string
            }
            (*node)[key] = parsed;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

} // namespace vicl
