// Command-line front end: train / sharpness / eval / landscape / sweep.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "safer/attacks.hpp"
#include "safer/checkpoint.hpp"
#include "safer/data.hpp"
#include "safer/errors.hpp"
#include "safer/kernels.hpp"
#include "safer/landscape.hpp"
#include "safer/ops.hpp"
#include "safer/rng.hpp"
#include "safer/runconfig.hpp"
#include "safer/sharpness.hpp"
#include "safer/trainer.hpp"
#include "safer/vit.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace safer;

namespace {

struct GlobalOpts {
    std::optional<std::uint64_t> seed;
    std::string output_dir;
    bool force = false;
    std::string backend = "auto";
};

void apply_overrides(RunConfig& cfg, const GlobalOpts& g) {
    if (g.seed) cfg.seed = *g.seed;
    if (!g.output_dir.empty()) cfg.output_dir = g.output_dir;
    cfg.resolve();
}

void ensure_run_dir(const std::string& dir, bool force) {
    if (fs::exists(dir) && !fs::is_directory(dir))
        throw ConfigError("output path '" + dir + "' exists and is not a directory");
    if (fs::is_directory(dir) && !fs::is_empty(dir) && !force)
        throw ConfigError("run directory '" + dir + "' is not empty; pass --force to overwrite");
    fs::create_directories(dir);
}

void atomic_write(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
        if (!out) throw IoError("cannot write '" + tmp + "'");
        out << content;
    }
    fs::rename(tmp, path);
}

Dataset build_dataset(const std::string& source, const std::string& path, std::size_t n,
                      const ViTConfig& model, std::uint64_t seed) {
    if (source == "synthetic")
        return synth_dataset(n, model.num_classes, model.image_size, Rng::derive(seed, "data"));
    if (source == "cifar10") return load_cifar10_binary(path, Dataset::Split::train);
    throw ConfigError("unknown data source '" + source + "'");
}

AttackConfig preset_attack(const std::string& name) {
    AttackConfig cfg;  // defaults: linf, eps 0.03, alpha 0.007, 20 steps, random start
    if (name == "pgd20") return cfg;
    if (name == "clean" || name == "steps0") {
        cfg.steps = 0;
        cfg.random_start = false;
        return cfg;
    }
    if (name == "pgd50") {
        cfg.steps = 50;
        return cfg;
    }
    if (name == "pgd100") {
        cfg.steps = 100;
        return cfg;
    }
    if (name == "eps05") {
        cfg.epsilon = 0.05;
        return cfg;
    }
    if (name == "eps07") {
        cfg.epsilon = 0.07;
        return cfg;
    }
    if (name == "l2") {
        cfg.norm = Norm::l2;
        return cfg;
    }
    throw ConfigError("unknown attack preset '" + name +
                      "' (want clean|pgd20|pgd50|pgd100|eps05|eps07|l2)");
}

std::vector<std::string> split_csv(const std::string& csv) {
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

json attack_json(const AttackConfig& a) {
    return json{{"norm", norm_name(a.norm)}, {"eps", a.epsilon}, {"alpha", a.alpha}, {"steps", a.steps}};
}

// ---------------------------------------------------------------------------

int cmd_train(const std::string& config_path, const GlobalOpts& g, const std::string& resume_path) {
    RunConfig cfg = parse_run_config(config_path);
    apply_overrides(cfg, g);
    ensure_run_dir(cfg.output_dir, g.force);
    atomic_write((fs::path(cfg.output_dir) / "config.resolved").string(), serialize_run_config(cfg));

    const Dataset full = build_dataset(cfg.data_source, cfg.data_path, cfg.data_n, cfg.model, cfg.seed);
    auto [train_set, val_set] = split_train_val(full, cfg.val_fraction, cfg.seed);

    Model model = Model::build(cfg.model);
    if (cfg.adapter.kind != AdapterConfig::Kind::none) model.wrap_adapters(cfg.adapter);

    TrainOptions opts;
    opts.batch_size = cfg.batch_size;
    opts.eval_samples = cfg.eval_samples;
    opts.seed = cfg.seed;
    opts.augment = cfg.augment;
    opts.run_dir = cfg.output_dir;

    if (!resume_path.empty()) {
        Checkpoint ck = load_checkpoint(resume_path);
        const ViTConfig& a = ck.model.config();
        const ViTConfig& b = cfg.model;
        if (a.image_size != b.image_size || a.patch_size != b.patch_size || a.channels != b.channels ||
            a.embed_dim != b.embed_dim || a.depth != b.depth || a.heads != b.heads ||
            a.num_classes != b.num_classes || a.seed != b.seed)
            throw ConfigError("--resume checkpoint was written for a different model config");
        model = std::move(ck.model);
        opts.resume = ck.state;
    }

    SaferSchedule schedule = cfg.schedule;
    SharpnessConfig sharp = cfg.sharpness;
    sharp.attack = cfg.attack;
    const TrainResult result = train(model, train_set, val_set, schedule, cfg.attack, cfg.optimizer,
                                     sharp, opts);

    // final sharpness report over a fresh training batch
    {
        std::vector<std::size_t> idx(std::min(sharp.batch_size, train_set.size()));
        std::iota(idx.begin(), idx.end(), 0);
        auto [images, labels] = gather(train_set, idx);
        SharpnessConfig final_cfg = sharp;
        final_cfg.seed = Rng::derive(cfg.seed, "final-sharpness");
        const SharpnessReport report = layer_sharpness_estimator(model, images, labels, final_cfg);
        atomic_write((fs::path(cfg.output_dir) / "sharpness_final.json").string(),
                     report_to_json(report, model) + "\n");
        atomic_write((fs::path(cfg.output_dir) / "sharpness_final.txt").string(),
                     report_to_table(report, model));
    }

    if (!result.log.epochs.empty()) {
        const EpochRecord& last = result.log.epochs.back();
        std::printf("trained %zu epochs: clean %.4f robust %.4f (run dir %s)\n",
                    result.log.epochs.size(), last.clean_acc, last.robust_acc, cfg.output_dir.c_str());
    } else {
        std::printf("schedule has zero epochs: wrote initial checkpoint to %s\n", cfg.output_dir.c_str());
    }
    return 0;
}

// ---------------------------------------------------------------------------

int cmd_sharpness(const std::string& ckpt, const GlobalOpts& g, const std::string& method,
                  const std::string& batch_sizes_csv, const std::string& data_source,
                  const std::string& data_path, std::size_t data_n, double rho, double fraction,
                  std::size_t microbatch, bool normalize) {
    Checkpoint ck = load_checkpoint(ckpt);
    const std::uint64_t seed = g.seed.value_or(42);
    const std::string outdir = g.output_dir.empty() ? "." : g.output_dir;
    fs::create_directories(outdir);

    const Dataset data = build_dataset(data_source, data_path, data_n, ck.model.config(), seed);

    std::vector<std::size_t> batch_sizes;
    for (const std::string& s : split_csv(batch_sizes_csv)) batch_sizes.push_back(std::stoull(s));
    if (batch_sizes.empty()) throw ConfigError("--batch-sizes is empty");

    SharpnessConfig cfg;
    cfg.rho = rho;
    cfg.fraction = fraction;
    cfg.microbatch = microbatch;
    cfg.normalize_by_param_count = normalize;

    for (const std::size_t bs : batch_sizes) {
        if (bs > data.size())
            throw ConfigError("batch size " + std::to_string(bs) + " exceeds dataset size " +
                              std::to_string(data.size()));
        std::vector<std::size_t> idx(data.size());
        std::iota(idx.begin(), idx.end(), 0);
        Rng rng(Rng::derive(seed, "sharpness-batch", bs));
        for (std::size_t i = 0; i < bs; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
        idx.resize(bs);
        auto [images, labels] = gather(data, idx);

        cfg.batch_size = bs;
        cfg.seed = Rng::derive(seed, "sharpness", bs);
        const bool want_estimator = method == "estimator" || method == "both";
        const bool want_oracle = method == "oracle" || method == "both";
        if (!want_estimator && !want_oracle)
            throw ConfigError("--method must be estimator|oracle|both, got '" + method + "'");

        if (want_estimator) {
            const SharpnessReport rep = layer_sharpness_estimator(ck.model, images, labels, cfg);
            const std::string stem = "sharpness_estimator_bs" + std::to_string(bs);
            atomic_write((fs::path(outdir) / (stem + ".json")).string(), report_to_json(rep, ck.model) + "\n");
            atomic_write((fs::path(outdir) / (stem + ".txt")).string(), report_to_table(rep, ck.model));
            std::printf("%s", report_to_table(rep, ck.model).c_str());
            std::printf("  wall time: %.3fs\n", rep.wall_seconds);
        }
        if (want_oracle) {
            const SharpnessReport rep = layer_sharpness_oracle(ck.model, images, labels, cfg);
            const std::string stem = "sharpness_oracle_bs" + std::to_string(bs);
            atomic_write((fs::path(outdir) / (stem + ".json")).string(), report_to_json(rep, ck.model) + "\n");
            atomic_write((fs::path(outdir) / (stem + ".txt")).string(), report_to_table(rep, ck.model));
            std::printf("%s", report_to_table(rep, ck.model).c_str());
            std::printf("  wall time: %.3fs\n", rep.wall_seconds);
        }
    }
    return 0;
}

// ---------------------------------------------------------------------------

int cmd_eval(const std::vector<std::string>& ckpts, const GlobalOpts& g, const std::string& presets_csv,
             const std::string& data_source, const std::string& data_path, std::size_t data_n,
             std::size_t batch_size) {
    if (ckpts.empty()) throw ConfigError("eval: need at least one --checkpoint");
    const std::uint64_t seed = g.seed.value_or(42);
    const std::string outdir = g.output_dir.empty() ? "." : g.output_dir;
    fs::create_directories(outdir);

    std::vector<Checkpoint> models;
    std::vector<std::string> ids;
    for (const std::string& path : ckpts) {
        models.push_back(load_checkpoint(path));
        ids.push_back(fs::path(path).stem().string());
        const ViTConfig& a = models.front().model.config();
        const ViTConfig& b = models.back().model.config();
        if (a.image_size != b.image_size || a.channels != b.channels || a.num_classes != b.num_classes)
            throw DimensionError("eval: checkpoints have incompatible input shapes");
    }

    const Dataset data = build_dataset(data_source, data_path, data_n, models[0].model.config(), seed);
    auto [images, labels] = take(data, std::min<std::size_t>(data_n, data.size()));

    json out;
    out["records"] = json::array();
    for (const std::string& preset : split_csv(presets_csv)) {
        AttackConfig attack = preset_attack(preset).with_seed(Rng::derive(seed, "eval", 0));
        for (std::size_t m = 0; m < models.size(); ++m) {
            const EvalResult r = evaluate_robustness(models[m].model, images, labels, attack, batch_size);
            out["records"].push_back(json{{"model_id", ids[m]},
                                          {"attack", attack_json(attack)},
                                          {"preset", preset},
                                          {"clean_acc", r.clean_acc},
                                          {"robust_acc", r.robust_acc},
                                          {"n_samples", r.n},
                                          {"seed", seed}});
            std::printf("%-12s %-8s clean %.4f robust %.4f (n=%zu)\n", ids[m].c_str(), preset.c_str(),
                        r.clean_acc, r.robust_acc, r.n);
        }
        if (models.size() >= 2) {
            json matrix = json::array();
            for (std::size_t a = 0; a < models.size(); ++a) {
                json row = json::array();
                for (std::size_t v = 0; v < models.size(); ++v) {
                    row.push_back(transfer_eval(models[a].model, models[v].model, data, attack, batch_size));
                }
                matrix.push_back(row);
            }
            out["transfer"][preset] = json{{"attacker_rows", ids}, {"robust_acc", matrix}};
        }
    }
    atomic_write((fs::path(outdir) / "eval_results.json").string(), out.dump(2) + "\n");
    return 0;
}

// ---------------------------------------------------------------------------

int cmd_landscape(const std::string& ckpt, const GlobalOpts& g, const std::string& layer,
                  const std::string& data_source, const std::string& data_path, std::size_t data_n,
                  double extent, std::size_t resolution) {
    Checkpoint ck = load_checkpoint(ckpt);
    const std::uint64_t seed = g.seed.value_or(42);
    const std::string outdir = g.output_dir.empty() ? "." : g.output_dir;
    fs::create_directories(outdir);

    int handle = -1;
    try {
        handle = std::stoi(layer);
    } catch (const std::exception&) {
        handle = ck.model.handle_index(layer);
    }
    const Dataset data = build_dataset(data_source, data_path, std::max<std::size_t>(data_n, 16),
                                       ck.model.config(), seed);
    auto [images, labels] = take(data, data_n);

    const AttackConfig attack = AttackConfig{}.with_seed(Rng::derive(seed, "landscape-attack"));
    const LandscapeGrid grid = adversarial_loss_landscape(ck.model, handle, images, labels, attack,
                                                          extent, extent, resolution, seed);
    std::string name = ck.model.handle(handle).name;
    for (char& c : name)
        if (c == '/' || c == '.') c = '_';
    const std::string path = (fs::path(outdir) / ("landscape_" + name + ".csv")).string();
    write_landscape_csv(grid, path);
    std::printf("landscape for %s: center loss %.6f, grid %zux%zu -> %s\n",
                ck.model.handle(handle).name.c_str(), grid.center_value(), resolution, resolution,
                path.c_str());
    return 0;
}

// ---------------------------------------------------------------------------

int cmd_sweep(const std::string& config_path, const GlobalOpts& g, const std::string& axis_name,
              const std::string& grid_csv) {
    RunConfig cfg = parse_run_config(config_path);
    apply_overrides(cfg, g);
    ensure_run_dir(cfg.output_dir, g.force);
    atomic_write((fs::path(cfg.output_dir) / "config.resolved").string(), serialize_run_config(cfg));

    const AblationAxis axis = ablation_axis_from_name(axis_name);
    std::vector<double> grid;
    for (const std::string& s : split_csv(grid_csv)) grid.push_back(std::stod(s));

    const Dataset full = build_dataset(cfg.data_source, cfg.data_path, cfg.data_n, cfg.model, cfg.seed);
    auto [train_set, val_set] = split_train_val(full, cfg.val_fraction, cfg.seed);

    TrainOptions opts;
    opts.batch_size = cfg.batch_size;
    opts.eval_samples = cfg.eval_samples;
    opts.seed = cfg.seed;
    opts.augment = cfg.augment;

    SharpnessConfig sharp = cfg.sharpness;
    sharp.attack = cfg.attack;
    const std::vector<SweepPoint> points = ablation_sweep(cfg.model, train_set, val_set, cfg.schedule,
                                                          cfg.attack, cfg.optimizer, sharp, opts, axis,
                                                          grid);

    std::ostringstream csv;
    csv << "value,failed,final_clean,final_robust,error\n";
    json jpoints = json::array();
    for (const SweepPoint& p : points) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%.17g,%d,%.17g,%.17g,%s\n", p.value, p.failed ? 1 : 0,
                      p.final_clean, p.final_robust, p.error.c_str());
        csv << buf;
        jpoints.push_back(json{{"value", p.value},
                               {"failed", p.failed},
                               {"final_clean", p.final_clean},
                               {"final_robust", p.final_robust},
                               {"error", p.error}});
        std::printf("%s=%g  %s  clean %.4f robust %.4f %s\n", axis_name.c_str(), p.value,
                    p.failed ? "FAILED" : "ok", p.final_clean, p.final_robust, p.error.c_str());
    }
    const std::string stem = "sweep_" + axis_name;
    atomic_write((fs::path(cfg.output_dir) / (stem + ".csv")).string(), csv.str());
    atomic_write((fs::path(cfg.output_dir) / (stem + ".json")).string(), jpoints.dump(2) + "\n");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sharpness-ranked layer-selective adversarial fine-tuning for tiny ViTs"};
    app.require_subcommand(1);

    GlobalOpts g;
    std::uint64_t seed_value = 0;
    auto* seed_opt = app.add_option("--seed", seed_value, "override the run seed");
    app.add_option("--output-dir", g.output_dir, "override the output directory");
    app.add_flag("--force", g.force, "overwrite existing run directories");
    app.add_option("--backend", g.backend, "kernel backend: auto|scalar|avx2")->default_val("auto");

    // train
    auto* train_cmd = app.add_subcommand("train", "run the full schedule from a config file");
    train_cmd->fallthrough();
    std::string train_config, resume_path;
    train_cmd->add_option("--config", train_config, "run config file")->required();
    train_cmd->add_option("--resume", resume_path, "checkpoint to resume from");

    // sharpness
    auto* sharp_cmd = app.add_subcommand("sharpness", "rank layers of a checkpoint by sharpness");
    sharp_cmd->fallthrough();
    std::string sharp_ckpt, sharp_method = "estimator", sharp_bs = "50";
    std::string sharp_source = "synthetic", sharp_path;
    std::size_t sharp_n = 1024, sharp_mb = 1;
    double sharp_rho = 0.05, sharp_fraction = 0.05;
    bool sharp_norm = false;
    sharp_cmd->add_option("--checkpoint", sharp_ckpt)->required();
    sharp_cmd->add_option("--method", sharp_method, "estimator|oracle|both");
    sharp_cmd->add_option("--batch-sizes", sharp_bs, "comma list, e.g. 50,100,200,300,500");
    sharp_cmd->add_option("--data", sharp_source, "synthetic|cifar10");
    sharp_cmd->add_option("--data-path", sharp_path, "cifar10 file or directory");
    sharp_cmd->add_option("--n", sharp_n, "synthetic dataset size");
    sharp_cmd->add_option("--rho", sharp_rho, "perturbation radius");
    sharp_cmd->add_option("--fraction", sharp_fraction, "selected layer fraction");
    sharp_cmd->add_option("--microbatch", sharp_mb, "gradient-norm microbatch (0 = whole batch)");
    sharp_cmd->add_flag("--normalize", sharp_norm, "divide gamma by sqrt(param count)");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "clean/robust accuracy under attack presets");
    eval_cmd->fallthrough();
    std::vector<std::string> eval_ckpts;
    std::string eval_presets = "clean,pgd20", eval_source = "synthetic", eval_path;
    std::size_t eval_n = 512, eval_bs = 64;
    eval_cmd->add_option("--checkpoint", eval_ckpts, "checkpoint(s); two or more add a transfer matrix")
        ->required();
    eval_cmd->add_option("--presets", eval_presets, "clean|pgd20|pgd50|pgd100|eps05|eps07|l2 (csv)");
    eval_cmd->add_option("--data", eval_source, "synthetic|cifar10");
    eval_cmd->add_option("--data-path", eval_path);
    eval_cmd->add_option("--n", eval_n, "evaluation sample count");
    eval_cmd->add_option("--batch-size", eval_bs);

    // landscape
    auto* land_cmd = app.add_subcommand("landscape", "adversarial loss surface of one layer");
    land_cmd->fallthrough();
    std::string land_ckpt, land_layer, land_source = "synthetic", land_path;
    std::size_t land_n = 64, land_res = 11;
    double land_extent = 0.05;
    land_cmd->add_option("--checkpoint", land_ckpt)->required();
    land_cmd->add_option("--layer", land_layer, "layer name or registry index")->required();
    land_cmd->add_option("--data", land_source, "synthetic|cifar10");
    land_cmd->add_option("--data-path", land_path);
    land_cmd->add_option("--n", land_n, "batch size for the fixed adversarial batch");
    land_cmd->add_option("--extent", land_extent, "per-axis offset extent (+-)");
    land_cmd->add_option("--resolution", land_res, "odd grid resolution >= 3");

    // sweep
    auto* sweep_cmd = app.add_subcommand("sweep", "ablation sweep over one axis");
    sweep_cmd->fallthrough();
    std::string sweep_config, sweep_axis, sweep_grid;
    sweep_cmd->add_option("--config", sweep_config)->required();
    sweep_cmd->add_option("--axis", sweep_axis, "layer_count|pretrain_split|dynamic_vs_fixed")->required();
    sweep_cmd->add_option("--grid", sweep_grid, "comma list of grid values")->required();

    try {
        app.parse(argc, argv);
        if (*seed_opt) g.seed = seed_value;
        kernels::force_backend(g.backend);

        if (*train_cmd) return cmd_train(train_config, g, resume_path);
        if (*sharp_cmd)
            return cmd_sharpness(sharp_ckpt, g, sharp_method, sharp_bs, sharp_source, sharp_path,
                                 sharp_n, sharp_rho, sharp_fraction, sharp_mb, sharp_norm);
        if (*eval_cmd) return cmd_eval(eval_ckpts, g, eval_presets, eval_source, eval_path, eval_n, eval_bs);
        if (*land_cmd)
            return cmd_landscape(land_ckpt, g, land_layer, land_source, land_path, land_n, land_extent,
                                 land_res);
        if (*sweep_cmd) return cmd_sweep(sweep_config, g, sweep_axis, sweep_grid);
        return 2;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const VersionError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const IoError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime failure: %s\n", e.what());
        return 4;
    }
}
