#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "safer/attacks.hpp"
#include "safer/checkpoint.hpp"
#include "safer/data.hpp"
#include "safer/optim.hpp"
#include "safer/sharpness.hpp"
#include "safer/vit.hpp"

namespace safer {

// eps_i = rho * g_i / ||g_i||_2 from the model's current gradients, one block
// per selected handle (per-layer norm), or one shared normalization over the
// concatenated selection (joint). Zero gradient gives eps_i = 0.
struct HandleEps {
    int handle = -1;
    std::vector<std::vector<double>> eps;  // aligned with the handle's params
    double grad_norm = 0.0;
};

std::vector<HandleEps> sam_perturbation(const Model& model, const std::vector<int>& selected,
                                        double rho, OptimizerConfig::SamNorm norm);

// Byte-exact snapshot/restore of a handle set's parameters.
class WeightSnapshot {
  public:
    WeightSnapshot(const Model& model, const std::vector<int>& handles);
    void restore(Model& model) const;

  private:
    std::vector<std::pair<int, std::vector<double>>> saved_;  // param id -> bytes
};

void apply_eps(Model& model, const std::vector<HandleEps>& eps);

struct StepMetrics {
    double loss = 0.0;            // adversarial loss at the unperturbed point
    double perturbed_loss = 0.0;  // SAM path only
    bool skipped = false;         // non-finite at the perturbed point
    int weight_backwards = 0;     // excludes attack-internal input passes
};

// One SAFER update: craft the adversarial batch once, backward at w, apply
// eps to the selected layers, backward again on the same batch, restore w
// bit-exactly, then SGD with the perturbed-point gradients on the selected
// layers only. Exactly one extra backward versus plain adversarial training.
StepMetrics safer_step(Model& model, const Tensor& images, const std::vector<std::int64_t>& labels,
                       const std::vector<int>& selected, const AttackConfig& attack,
                       const OptimizerConfig& opt, Sgd& sgd, double lr);

// Plain adversarial-training update; with kind = sam-over-sgd this is the
// full-model SAM baseline (joint normalization over all trainable handles).
StepMetrics at_step(Model& model, const Tensor& images, const std::vector<std::int64_t>& labels,
                    const AttackConfig& attack, const OptimizerConfig& opt, Sgd& sgd, double lr);

StepMetrics clean_step(Model& model, const Tensor& images, const std::vector<std::int64_t>& labels,
                       Sgd& sgd, double lr);

struct SaferSchedule {
    std::size_t pretrain_clean_epochs = 2;
    std::size_t pretrain_adv_epochs = 5;
    std::size_t finetune_epochs = 10;
    std::size_t reselect_interval = 10;
    double fraction = 0.05;
    bool dynamic = true;

    void validate() const;
    std::size_t total_epochs() const {
        return pretrain_clean_epochs + pretrain_adv_epochs + finetune_epochs;
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    std::string phase;  // clean-pretrain | pgd-at | safer
    double clean_acc = 0.0;
    double robust_acc = 0.0;
    double mean_loss = 0.0;
    double lr = 0.0;
    double wall_time = 0.0;        // step loop only, evaluation excluded
    std::vector<int> selected;     // requested selection; empty outside safer
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
};

// CSV columns are exactly (epoch, phase, clean_acc, robust_acc, loss, lr,
// selected) so identical runs produce byte-identical files; wall time and
// other non-deterministic fields live in the JSONL stream only.
void write_train_log_csv(const TrainLog& log, const std::string& path);
void write_train_log_jsonl(const TrainLog& log, const std::string& path);

struct TrainOptions {
    std::size_t batch_size = 64;
    std::size_t eval_samples = 256;
    std::uint64_t seed = 0;
    AugmentConfig augment{};     // crop must keep the model's input size
    std::string run_dir;         // when set: checkpoints + sharpness reports
    int fixed_layer_count = -1;  // ablation override: 0 = full-model SAM fine-tune, k>0 = top-k
    bool evaluate_epochs = true;
    std::optional<TrainerState> resume;
};

struct TrainResult {
    TrainLog log;
    TrainerState final_state;
    std::vector<int> last_selected;
};

TrainResult train(Model& model, const Dataset& train_set, const Dataset& val_set,
                  const SaferSchedule& schedule, const AttackConfig& attack,
                  const OptimizerConfig& opt, const SharpnessConfig& sharp, const TrainOptions& options);

enum class AblationAxis { layer_count, pretrain_split, dynamic_vs_fixed };

AblationAxis ablation_axis_from_name(const std::string& name);
const char* ablation_axis_name(AblationAxis axis);

struct SweepPoint {
    double value = 0.0;
    bool failed = false;
    std::string error;
    double final_clean = 0.0;
    double final_robust = 0.0;
};

// One full training run per grid point, shared seed; failures are recorded
// and the sweep continues.
std::vector<SweepPoint> ablation_sweep(const ViTConfig& model_cfg, const Dataset& train_set,
                                       const Dataset& val_set, const SaferSchedule& schedule,
                                       const AttackConfig& attack, const OptimizerConfig& opt,
                                       const SharpnessConfig& sharp, const TrainOptions& options,
                                       AblationAxis axis, std::span<const double> grid);

}  // namespace safer
