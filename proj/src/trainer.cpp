#include "safer/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"
#include "safer/errors.hpp"
#include "safer/kernels.hpp"
#include "safer/ops.hpp"
#include "safer/rng.hpp"
#include "safer/tape.hpp"

namespace safer {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

// ---------------------------------------------------------------------------
// SAM geometry

std::vector<HandleEps> sam_perturbation(const Model& model, const std::vector<int>& selected,
                                        double rho, OptimizerConfig::SamNorm norm) {
    std::vector<HandleEps> out;
    double joint_sq = 0.0;
    for (const int h : selected) {
        HandleEps he;
        he.handle = h;
        double sq = 0.0;
        for (const int pid : model.params_of(h)) {
            const auto& g = model.params()[static_cast<std::size_t>(pid)].tensor.grad_vec();
            he.eps.push_back(g);  // starts as the raw gradient block
            sq += kernels::active().dot(g.data(), g.data(), g.size());
        }
        he.grad_norm = std::sqrt(sq);
        joint_sq += sq;
        out.push_back(std::move(he));
    }
    for (HandleEps& he : out) {
        const double denom = norm == OptimizerConfig::SamNorm::per_layer ? he.grad_norm : std::sqrt(joint_sq);
        const double scale = (denom > 0.0 && rho > 0.0) ? rho / denom : 0.0;
        for (auto& block : he.eps) kernels::active().scale(scale, block.data(), block.size());
    }
    return out;
}

WeightSnapshot::WeightSnapshot(const Model& model, const std::vector<int>& handles) {
    for (const int h : handles)
        for (const int pid : model.params_of(h))
            saved_.emplace_back(pid, model.params()[static_cast<std::size_t>(pid)].tensor.vec());
}

void WeightSnapshot::restore(Model& model) const {
    for (const auto& [pid, bytes] : saved_)
        model.params()[static_cast<std::size_t>(pid)].tensor.vec() = bytes;
}

void apply_eps(Model& model, const std::vector<HandleEps>& eps) {
    for (const HandleEps& he : eps) {
        const auto& pids = model.params_of(he.handle);
        for (std::size_t i = 0; i < pids.size(); ++i) {
            auto& w = model.params()[static_cast<std::size_t>(pids[i])].tensor.vec();
            kernels::active().axpy(1.0, he.eps[i].data(), w.data(), w.size());
        }
    }
}

// ---------------------------------------------------------------------------
// steps

namespace {

double backward_adv_loss(const Model& model, const Tensor& adversarial,
                         const std::vector<std::int64_t>& labels) {
    model.zero_grads();
    Tape tape;
    Tape::Scope scope(tape);
    const Tensor loss = ops::cross_entropy_with_logits(model.forward(adversarial), labels);
    tape.backward(loss);
    return loss.item();
}

}  // namespace

StepMetrics safer_step(Model& model, const Tensor& images, const std::vector<std::int64_t>& labels,
                       const std::vector<int>& selected, const AttackConfig& attack,
                       const OptimizerConfig& opt, Sgd& sgd, double lr) {
    if (selected.empty()) throw ContractError("safer_step: empty layer selection");
    const AdvBatch adv = pgd(model, images, labels, attack);

    StepMetrics metrics;
    metrics.loss = backward_adv_loss(model, adv.adversarial, labels);
    metrics.weight_backwards = 1;

    const std::vector<HandleEps> eps = sam_perturbation(model, selected, opt.rho, opt.sam_norm);
    const WeightSnapshot snapshot(model, selected);
    apply_eps(model, eps);

    model.zero_grads();
    double perturbed = 0.0;
    {
        Tape tape;
        Tape::Scope scope(tape);
        const Tensor loss = ops::cross_entropy_with_logits(model.forward(adv.adversarial), labels);
        perturbed = loss.item();
        if (!std::isfinite(perturbed)) {
            snapshot.restore(model);
            model.zero_grads();
            metrics.skipped = true;
            return metrics;
        }
        tape.backward(loss);
        metrics.weight_backwards = 2;
    }
    snapshot.restore(model);
    metrics.perturbed_loss = perturbed;

    sgd.step(model, lr);  // gradients from the perturbed point, selected layers only
    return metrics;
}

StepMetrics at_step(Model& model, const Tensor& images, const std::vector<std::int64_t>& labels,
                    const AttackConfig& attack, const OptimizerConfig& opt, Sgd& sgd, double lr) {
    if (opt.kind == OptimizerConfig::Kind::sam_over_sgd) {
        // textbook full-model SAM: one joint normalization over everything trainable
        OptimizerConfig sam_opt = opt;
        sam_opt.sam_norm = OptimizerConfig::SamNorm::joint;
        return safer_step(model, images, labels, model.trainable_handles(), attack, sam_opt, sgd, lr);
    }
    const AdvBatch adv = pgd(model, images, labels, attack);
    StepMetrics metrics;
    metrics.loss = backward_adv_loss(model, adv.adversarial, labels);
    metrics.weight_backwards = 1;
    sgd.step(model, lr);
    return metrics;
}

StepMetrics clean_step(Model& model, const Tensor& images, const std::vector<std::int64_t>& labels,
                       Sgd& sgd, double lr) {
    StepMetrics metrics;
    metrics.loss = backward_adv_loss(model, images, labels);
    metrics.weight_backwards = 1;
    sgd.step(model, lr);
    return metrics;
}

// ---------------------------------------------------------------------------
// schedule + logs

void SaferSchedule::validate() const {
    if (reselect_interval < 1) throw ConfigError("schedule: reselect_interval must be >= 1");
    if (fraction <= 0.0 || fraction > 1.0) throw ConfigError("schedule: fraction must be in (0,1]");
}

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string selected_str(const std::vector<int>& selected) {
    std::string out;
    for (std::size_t i = 0; i < selected.size(); ++i) {
        if (i) out += '+';
        out += std::to_string(selected[i]);
    }
    return out;
}

}  // namespace

void write_train_log_csv(const TrainLog& log, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << "epoch,phase,clean_acc,robust_acc,loss,lr,selected\n";
    for (const EpochRecord& r : log.epochs) {
        out << r.epoch << ',' << r.phase << ',' << fmt_double(r.clean_acc) << ','
            << fmt_double(r.robust_acc) << ',' << fmt_double(r.mean_loss) << ',' << fmt_double(r.lr)
            << ',' << selected_str(r.selected) << '\n';
    }
}

void write_train_log_jsonl(const TrainLog& log, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    for (const EpochRecord& r : log.epochs) {
        json j{{"epoch", r.epoch},         {"phase", r.phase},
               {"clean_acc", r.clean_acc}, {"robust_acc", r.robust_acc},
               {"mean_loss", r.mean_loss}, {"lr", r.lr},
               {"wall_time", r.wall_time}, {"selected_layers", r.selected}};
        out << j.dump() << '\n';
    }
}

// ---------------------------------------------------------------------------
// training loop

TrainResult train(Model& model, const Dataset& train_set, const Dataset& val_set,
                  const SaferSchedule& schedule, const AttackConfig& attack,
                  const OptimizerConfig& opt, const SharpnessConfig& sharp, const TrainOptions& options) {
    schedule.validate();
    opt.validate();
    attack.validate();
    if (train_set.size() == 0) throw ConfigError("train: empty dataset");
    if (options.batch_size == 0) throw ConfigError("train: batch_size must be positive");
    const std::size_t crop = options.augment.crop == 0 ? train_set.image_size() : options.augment.crop;
    if (crop != model.config().image_size)
        throw ConfigError("train: augment crop must keep the model input size");

    const std::size_t total = schedule.total_epochs();
    const std::size_t safer_start = schedule.pretrain_clean_epochs + schedule.pretrain_adv_epochs;
    const std::uint64_t seed = options.seed;

    Sgd sgd(model, opt);
    std::size_t start_epoch = 0;
    std::vector<int> requested;  // current safer selection (base handles)
    if (options.resume && options.resume->present) {
        start_epoch = options.resume->epoch;
        sgd.set_momentum(options.resume->momentum);
        requested.assign(options.resume->selected.begin(), options.resume->selected.end());
        if (start_epoch >= safer_start && !requested.empty())
            model.set_trainable(model.resolve_selection(requested));
    }

    const auto save_ckpt = [&](const std::string& name, std::size_t epoch, std::uint8_t phase) {
        if (options.run_dir.empty()) return;
        TrainerState state;
        state.present = true;
        state.epoch = epoch;
        state.phase = phase;
        state.selected.assign(requested.begin(), requested.end());
        state.momentum = sgd.momentum();
        state.rng = Rng(Rng::derive(seed, "trainer-rng", epoch)).state();
        save_checkpoint((std::filesystem::path(options.run_dir) / name).string(), model, state);
    };

    // fixed evaluation subset; identical across epochs and re-runs
    Tensor eval_images;
    std::vector<std::int64_t> eval_labels;
    if (options.evaluate_epochs && val_set.size() > 0) {
        auto taken = take(val_set, std::min(options.eval_samples, val_set.size()));
        eval_images = std::move(taken.first);
        eval_labels = std::move(taken.second);
    }
    const AttackConfig eval_attack = attack.with_seed(Rng::derive(seed, "eval-attack"));

    TrainResult result;
    for (std::size_t e = start_epoch; e < total; ++e) {
        const bool in_clean = e < schedule.pretrain_clean_epochs;
        const bool in_safer = e >= safer_start;
        const std::uint8_t phase_id = in_clean ? 1 : (in_safer ? 3 : 2);
        const char* phase = in_clean ? "clean-pretrain" : (in_safer ? "safer" : "pgd-at");

        if (!in_safer) {
            model.set_all_trainable();
            requested.clear();
        } else if (options.fixed_layer_count == 0) {
            model.set_all_trainable();
            requested.clear();
        } else {
            const std::size_t relative = e - safer_start;
            const bool boundary = relative % schedule.reselect_interval == 0;
            const bool need_select =
                (relative == 0) || (schedule.dynamic && boundary) || requested.empty();
            if (need_select) {
                std::vector<std::size_t> idx(train_set.size());
                std::iota(idx.begin(), idx.end(), 0);
                Rng rng(Rng::derive(seed, "sharp-batch", e));
                const std::size_t bs = std::min(sharp.batch_size, train_set.size());
                for (std::size_t i = 0; i < bs; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
                idx.resize(bs);
                auto [sharp_images, sharp_labels] = gather(train_set, idx);

                SharpnessConfig cfg = sharp;
                cfg.seed = Rng::derive(seed, "sharp-seed", e);
                cfg.fraction = schedule.fraction;
                const SharpnessReport report =
                    layer_sharpness_estimator(model, sharp_images, sharp_labels, cfg);

                std::vector<int> next;
                if (options.fixed_layer_count > 0) {
                    const auto k = static_cast<std::size_t>(options.fixed_layer_count);
                    next.assign(report.ranking.begin(),
                                report.ranking.begin() +
                                    static_cast<long>(std::min(k, report.ranking.size())));
                } else {
                    next = report.selected;
                }

                const std::vector<int> prev_resolved = model.trainable_handles();
                const std::set<int> prev_set(prev_resolved.begin(), prev_resolved.end());
                requested = next;
                const std::vector<int> resolved = model.resolve_selection(requested);
                if (resolved.empty())
                    throw ConfigError("train: selection resolves to no trainable handles");
                model.set_trainable(resolved);
                for (const int h : resolved)
                    if (!prev_set.count(h)) sgd.zero_momentum(model, h);  // stale moments are meaningless

                if (!options.run_dir.empty()) {
                    std::ofstream rep((std::filesystem::path(options.run_dir) /
                                       ("sharpness_epoch_" + std::to_string(e) + ".json"))
                                          .string(),
                                      std::ios::trunc);
                    rep << report_to_json(report, model) << '\n';
                }
                save_ckpt("ckpt_epoch_" + std::to_string(e) + ".bin", e, phase_id);
            }
        }

        // ------ step loop (timed; evaluation excluded) ------
        const auto t0 = Clock::now();
        std::vector<std::size_t> order(train_set.size());
        std::iota(order.begin(), order.end(), 0);
        {
            Rng rng(Rng::derive(seed, "order", e));
            for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[rng.below(i + 1)]);
        }
        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < order.size(); start += options.batch_size, ++steps) {
            const std::size_t count = std::min(options.batch_size, order.size() - start);
            auto [images, labels] =
                gather(train_set, std::span<const std::size_t>(order.data() + start, count));
            AugmentConfig aug = options.augment;
            aug.seed = Rng::derive(seed, "aug", e, start);
            const Tensor augmented = augment(images, aug);
            const AttackConfig batch_attack = attack.with_seed(Rng::derive(seed, "attack", e, start));
            const double lr = cosine_lr(opt.lr, opt.decay_factor, e, total);

            StepMetrics m;
            if (in_clean) {
                m = clean_step(model, augmented, labels, sgd, lr);
            } else if (!in_safer || options.fixed_layer_count == 0) {
                OptimizerConfig phase_opt = opt;
                if (in_safer) phase_opt.kind = OptimizerConfig::Kind::sam_over_sgd;
                m = at_step(model, augmented, labels, batch_attack, phase_opt, sgd, lr);
            } else {
                m = safer_step(model, augmented, labels, model.trainable_handles(), batch_attack, opt,
                               sgd, lr);
            }
            loss_sum += m.loss;
        }
        const double wall = std::chrono::duration<double>(Clock::now() - t0).count();

        EpochRecord rec;
        rec.epoch = e;
        rec.phase = phase;
        rec.mean_loss = steps ? loss_sum / static_cast<double>(steps) : 0.0;
        rec.lr = cosine_lr(opt.lr, opt.decay_factor, e, total);
        rec.wall_time = wall;
        rec.selected = in_safer ? requested : std::vector<int>{};
        if (options.evaluate_epochs && !eval_labels.empty()) {
            const EvalResult er = evaluate_robustness(model, eval_images, eval_labels, eval_attack,
                                                      options.batch_size);
            rec.clean_acc = er.clean_acc;
            rec.robust_acc = er.robust_acc;
        }
        result.log.epochs.push_back(std::move(rec));
    }

    result.last_selected = requested;
    result.final_state.present = true;
    result.final_state.epoch = total;
    result.final_state.phase = total == 0 ? 0 : (total <= safer_start ? 2 : 3);
    result.final_state.selected.assign(requested.begin(), requested.end());
    result.final_state.momentum = sgd.momentum();
    result.final_state.rng = Rng(Rng::derive(seed, "trainer-rng", total)).state();

    if (!options.run_dir.empty()) {
        save_checkpoint((std::filesystem::path(options.run_dir) / "final.bin").string(), model,
                        result.final_state);
        write_train_log_csv(result.log, (std::filesystem::path(options.run_dir) / "train_log.csv").string());
        write_train_log_jsonl(result.log,
                              (std::filesystem::path(options.run_dir) / "train_log.jsonl").string());
    }
    return result;
}

// ---------------------------------------------------------------------------
// ablation sweeps

AblationAxis ablation_axis_from_name(const std::string& name) {
    if (name == "layer_count") return AblationAxis::layer_count;
    if (name == "pretrain_split") return AblationAxis::pretrain_split;
    if (name == "dynamic_vs_fixed") return AblationAxis::dynamic_vs_fixed;
    throw ConfigError("unknown ablation axis '" + name +
                      "' (want layer_count|pretrain_split|dynamic_vs_fixed)");
}

const char* ablation_axis_name(AblationAxis axis) {
    switch (axis) {
        case AblationAxis::layer_count: return "layer_count";
        case AblationAxis::pretrain_split: return "pretrain_split";
        case AblationAxis::dynamic_vs_fixed: return "dynamic_vs_fixed";
    }
    return "?";
}

std::vector<SweepPoint> ablation_sweep(const ViTConfig& model_cfg, const Dataset& train_set,
                                       const Dataset& val_set, const SaferSchedule& schedule,
                                       const AttackConfig& attack, const OptimizerConfig& opt,
                                       const SharpnessConfig& sharp, const TrainOptions& options,
                                       AblationAxis axis, std::span<const double> grid) {
    if (grid.empty()) throw ConfigError("ablation_sweep: empty grid");
    std::vector<SweepPoint> points;
    for (const double value : grid) {
        SweepPoint point;
        point.value = value;
        try {
            SaferSchedule sched = schedule;
            TrainOptions opts = options;
            opts.run_dir.clear();  // per-point artifacts are summarized, not checkpointed
            switch (axis) {
                case AblationAxis::layer_count:
                    if (value < 0.0) throw ConfigError("layer_count must be >= 0");
                    opts.fixed_layer_count = static_cast<int>(value);
                    break;
                case AblationAxis::pretrain_split: {
                    const std::size_t budget = schedule.pretrain_adv_epochs + schedule.finetune_epochs;
                    const auto adv = static_cast<std::size_t>(value);
                    if (adv > budget) throw ConfigError("pretrain epochs exceed the epoch budget");
                    sched.pretrain_adv_epochs = adv;
                    sched.finetune_epochs = budget - adv;
                    break;
                }
                case AblationAxis::dynamic_vs_fixed:
                    sched.dynamic = value != 0.0;
                    break;
            }
            Model model = Model::build(model_cfg);
            const TrainResult r = train(model, train_set, val_set, sched, attack, opt, sharp, opts);
            auto [images, labels] = take(val_set, std::min(options.eval_samples, val_set.size()));
            const EvalResult er = evaluate_robustness(
                model, images, labels, attack.with_seed(Rng::derive(options.seed, "sweep-eval")),
                options.batch_size);
            point.final_clean = er.clean_acc;
            point.final_robust = er.robust_acc;
        } catch (const std::exception& ex) {
            point.failed = true;
            point.error = ex.what();
        }
        points.push_back(std::move(point));
    }
    return points;
}

}  // namespace safer
