// Command-line front end: dataset generation, backbone pretraining, fusion
// training, evaluation, inference, ablation presets, and visualization
// exports. Exit codes: 0 success, 2 configuration error, 3 data error,
// 4 numeric failure, 1 anything else.

#include "vicl/config.hpp"
#include "vicl/harness.hpp"
#include "vicl/pretrain.hpp"
#include "vicl/util.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace {

using namespace vicl;

TrainConfig config_from_cli(const std::string& config_path, const std::vector<std::string>& overrides) {
    if (config_path.empty()) throw ConfigError("--config is required");
    if (!std::filesystem::exists(config_path)) throw ConfigError("config file not found: " + config_path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file_text(config_path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed config JSON: " + std::string(e.what()));
    }
    for (const auto& o : overrides) apply_override(j, o);
    return parse_train_config(j);
}

struct LoadedRun {
    Dataset dataset;
    Backbone backbone;
};

LoadedRun load_run_inputs(const TrainConfig& cfg) {
    if (cfg.paths.data_dir.empty()) throw ConfigError("paths.data_dir is required");
    if (cfg.paths.backbone.empty()) throw DataError("paths.backbone is required (pretrain a backbone first)");
    LoadedRun run;
    run.dataset = load_dataset(cfg.paths.data_dir);
    run.backbone = load_backbone<float>(cfg.paths.backbone);
    run.backbone.freeze();
    return run;
}

int run_train(const TrainConfig& cfg, const std::string& preset_label = "") {
    LoadedRun run = load_run_inputs(cfg);
    const std::filesystem::path out_dir =
        preset_label.empty() ? cfg.paths.out_dir : cfg.paths.out_dir / preset_label;
    if (out_dir.empty()) throw ConfigError("paths.out_dir is required");
    std::filesystem::create_directories(out_dir);

    std::string metrics_buf;
    {
        nlohmann::json head;
        head["type"] = "config";
        head["config"] = to_json(cfg);
        if (!preset_label.empty()) head["preset"] = preset_label;
        metrics_buf += head.dump() + "\n";
    }
    MetricsSink sink = [&](const StepRecord& r) {
        nlohmann::json line;
        line["type"] = "step";
        line["step"] = r.step;
        line["epoch"] = r.epoch;
        line["lr"] = r.lr;
        line["l_p"] = r.l_p;
        line["l_s"] = r.l_s;
        line["l_u"] = r.l_u;
        line["total"] = r.total;
        metrics_buf += line.dump() + "\n";
    };

    TrainOutput out = run_training(cfg, run.dataset, run.backbone, sink);

    write_file_atomic(out_dir / "metrics.ndjson", metrics_buf);
    write_file_atomic(out_dir / "config.json", to_json(cfg).dump(2) + "\n");
    const std::uint64_t bb_sum = run.backbone.checksum();
    save_fusion_checkpoint(out_dir / "ckpt_final", out.weights, cfg, bb_sum);
    save_fusion_checkpoint(out_dir / "ckpt_best", out.best_weights, cfg, bb_sum);
    std::cout << "trained " << out.steps << " steps; checkpoints and metrics in " << out_dir.string()
              << "\n";
    return 0;
}

int run_eval(const TrainConfig& cfg, const std::string& ckpt, const std::string& out_file) {
    LoadedRun run = load_run_inputs(cfg);
    const FusionWeights weights = load_fusion_checkpoint(ckpt);
    const EvalResult r = evaluate(run.dataset.test, run.dataset.train, cfg, weights, run.backbone);
    const nlohmann::json j = to_json(r);
    if (!out_file.empty()) write_file_atomic(out_file, j.dump(2) + "\n");
    std::cout << (r.task == TaskKind::Colorization ? "mse " : "miou ") << r.mean << "\n";
    return 0;
}

const PromptPair& find_test_pair(const Dataset& ds, int id) {
    for (const auto& p : ds.test) {
        if (p.id == id) return p;
    }
    throw DataError("query id " + std::to_string(id) + " not found in the test split");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"locality-aware multi-prompt fusion for visual in-context learning"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic task dataset");
    std::string gen_task = "seg", gen_out;
    std::uint64_t gen_seed = 0;
    int gen_train = 512, gen_test = 128, gen_size = 32;
    bool gen_ppm = false;
    gen->add_option("--task", gen_task, "seg|det|color");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--train", gen_train, "training pairs");
    gen->add_option("--test", gen_test, "test queries");
    gen->add_option("--size", gen_size, "sub-image side length");
    gen->add_flag("--ppm", gen_ppm, "write PPM instead of PNG");

    // pretrain-backbone
    auto* pre = app.add_subcommand("pretrain-backbone", "pretrain and freeze the surrogate backbone");
    std::string pre_task = "seg", pre_out;
    std::uint64_t pre_seed = 1;
    int pre_canvases = 256, pre_q_epochs = 12, pre_e_epochs = 20, pre_threads = 0, pre_size = 32;
    double pre_lr = 0.03;
    bool pre_verbose = false;
    pre->add_option("--task", pre_task, "seg|det|color");
    pre->add_option("--out", pre_out, "checkpoint base path")->required();
    pre->add_option("--seed", pre_seed, "pretraining seed");
    pre->add_option("--canvases", pre_canvases, "number of pretraining canvases");
    pre->add_option("--quantizer-epochs", pre_q_epochs, "quantizer training epochs");
    pre->add_option("--encoder-epochs", pre_e_epochs, "encoder training epochs");
    pre->add_option("--lr", pre_lr, "encoder learning rate");
    pre->add_option("--threads", pre_threads, "worker threads (0 = auto)");
    pre->add_option("--size", pre_size, "sub-image side length");
    pre->add_flag("--verbose", pre_verbose, "log per-epoch losses");

    // train / ablate
    auto* train_cmd = app.add_subcommand("train", "train the fusion module");
    std::string train_config;
    std::vector<std::string> train_sets;
    train_cmd->add_option("--config", train_config, "config JSON")->required();
    train_cmd->add_option("--set", train_sets, "dotted-path overrides, e.g. loss.lambda=0");

    auto* ablate_cmd = app.add_subcommand("ablate", "train + evaluate one ablation preset");
    std::string ablate_preset, ablate_config;
    std::vector<std::string> ablate_sets;
    ablate_cmd->add_option("preset", ablate_preset, "full|no_lu|no_ls|no_lp|no_aug|global|patchwise|laplacian")
        ->required();
    ablate_cmd->add_option("--config", ablate_config, "config JSON")->required();
    ablate_cmd->add_option("--set", ablate_sets, "dotted-path overrides");

    // eval / infer / exports
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    std::string eval_config, eval_ckpt, eval_out;
    std::vector<std::string> eval_sets;
    eval_cmd->add_option("--config", eval_config, "config JSON")->required();
    eval_cmd->add_option("--checkpoint", eval_ckpt, "fusion checkpoint base path")->required();
    eval_cmd->add_option("--out", eval_out, "result JSON path");
    eval_cmd->add_option("--set", eval_sets, "dotted-path overrides");

    auto* infer_cmd = app.add_subcommand("infer", "predict the label for one query image");
    std::string infer_config, infer_ckpt, infer_query, infer_out;
    infer_cmd->add_option("--config", infer_config, "config JSON")->required();
    infer_cmd->add_option("--checkpoint", infer_ckpt, "fusion checkpoint base path")->required();
    infer_cmd->add_option("--query", infer_query, "query image file")->required();
    infer_cmd->add_option("--out", infer_out, "output image file")->required();

    auto* exf = app.add_subcommand("export-fused", "decode and export the fused prompt pair");
    std::string exf_config, exf_ckpt, exf_out;
    int exf_query_id = -1;
    exf->add_option("--config", exf_config, "config JSON")->required();
    exf->add_option("--checkpoint", exf_ckpt, "fusion checkpoint base path")->required();
    exf->add_option("--query-id", exf_query_id, "test-split query id")->required();
    exf->add_option("--out", exf_out, "output image path (.png/.ppm)")->required();

    auto* exa = app.add_subcommand("export-attn", "export per-prompt attention heat maps");
    std::string exa_config, exa_ckpt, exa_out;
    int exa_query_id = -1;
    exa->add_option("--config", exa_config, "config JSON")->required();
    exa->add_option("--checkpoint", exa_ckpt, "fusion checkpoint base path")->required();
    exa->add_option("--query-id", exa_query_id, "test-split query id")->required();
    exa->add_option("--out", exa_out, "output path prefix")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            TaskSpec spec;
            spec.kind = task_from_name(gen_task);
            spec.seed = gen_seed;
            spec.train_size = gen_train;
            spec.test_size = gen_test;
            spec.image_size = gen_size;
            const Dataset ds = generate_dataset(spec);
            save_dataset(gen_out, ds, gen_ppm);
            std::cout << "wrote " << ds.train.size() << " train pairs and " << ds.test.size()
                      << " test queries to " << gen_out << "\n";
        } else if (pre->parsed()) {
            TaskSpec task;
            task.kind = task_from_name(pre_task);
            task.image_size = pre_size;
            PretrainConfig pcfg;
            pcfg.num_canvases = pre_canvases;
            pcfg.quantizer_epochs = pre_q_epochs;
            pcfg.encoder_epochs = pre_e_epochs;
            pcfg.lr_encoder = pre_lr;
            pcfg.seed = pre_seed;
            pcfg.threads = pre_threads;
            pcfg.verbose = pre_verbose;
            Backbone bb = Backbone::random_init(4, 32, pre_size / 8, pre_size / 8, pre_seed);
            const PretrainReport report = pretrain_backbone(bb, task, pcfg);
            nlohmann::json gates;
            gates["recon_mse"] = report.recon_mse;
            gates["masked_accuracy"] = report.masked_accuracy;
            gates["dq_consistency"] = report.dq_consistency;
            gates["final_encoder_ce"] = report.final_encoder_ce;
            save_backbone(pre_out, bb,
                          {{"task", pre_task}, {"seed", pre_seed}, {"gates", gates}});
            std::cout << "backbone ready: recon_mse=" << report.recon_mse
                      << " masked_acc=" << report.masked_accuracy << " -> " << pre_out << "\n";
        } else if (train_cmd->parsed()) {
            return run_train(config_from_cli(train_config, train_sets));
        } else if (ablate_cmd->parsed()) {
            TrainConfig cfg = config_from_cli(ablate_config, ablate_sets);
            apply_preset(cfg, ablate_preset);
            const int rc = run_train(cfg, ablate_preset);
            if (rc != 0) return rc;
            LoadedRun run = load_run_inputs(cfg);
            const FusionWeights weights =
                load_fusion_checkpoint(cfg.paths.out_dir / ablate_preset / "ckpt_best");
            const EvalResult r = evaluate(run.dataset.test, run.dataset.train, cfg, weights, run.backbone);
            nlohmann::json j = to_json(r);
            j["preset"] = ablate_preset;
            write_file_atomic(cfg.paths.out_dir / ablate_preset / "eval.json", j.dump(2) + "\n");
            std::cout << "preset " << ablate_preset
                      << (r.task == TaskKind::Colorization ? " mse " : " miou ") << r.mean << "\n";
        } else if (eval_cmd->parsed()) {
            return run_eval(config_from_cli(eval_config, eval_sets), eval_ckpt, eval_out);
        } else if (infer_cmd->parsed()) {
            const TrainConfig cfg = config_from_cli(infer_config, {});
            LoadedRun run = load_run_inputs(cfg);
            const FusionWeights weights = load_fusion_checkpoint(infer_ckpt);
            const Image query = read_image(infer_query);
            const Image pred = infer(query, run.dataset.train, cfg, weights, run.backbone);
            write_image(infer_out, pred);
            std::cout << "wrote " << infer_out << "\n";
        } else if (exf->parsed()) {
            const TrainConfig cfg = config_from_cli(exf_config, {});
            LoadedRun run = load_run_inputs(cfg);
            const FusionWeights weights = load_fusion_checkpoint(exf_ckpt);
            const auto& query = find_test_pair(run.dataset, exf_query_id);
            const FusedExport out = export_fused_prompt(query, run.dataset.train, cfg, weights,
                                                        run.backbone, exf_out);
            std::cout << "fused_label_iou " << out.fused_label_iou << " -> " << exf_out << "\n";
        } else if (exa->parsed()) {
            const TrainConfig cfg = config_from_cli(exa_config, {});
            LoadedRun run = load_run_inputs(cfg);
            const FusionWeights weights = load_fusion_checkpoint(exa_ckpt);
            const auto& query = find_test_pair(run.dataset, exa_query_id);
            const auto files = export_attention_map(query, run.dataset.train, cfg, weights, run.backbone,
                                                    exa_out);
            std::cout << "wrote " << files.size() << " attention maps\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
