#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "safer/data.hpp"
#include "safer/tensor.hpp"
#include "safer/vit.hpp"

namespace safer {

enum class Norm { linf, l2 };

const char* norm_name(Norm norm);
Norm norm_from_name(const std::string& name);

struct AttackConfig {
    Norm norm = Norm::linf;
    double epsilon = 0.03;
    double alpha = 0.007;
    int steps = 20;
    bool random_start = true;
    std::uint64_t seed = 0;

    void validate() const;
    AttackConfig with_seed(std::uint64_t s) const {
        AttackConfig c = *this;
        c.seed = s;
        return c;
    }
};

struct AdvBatch {
    Tensor clean;
    Tensor adversarial;
    std::vector<std::int64_t> labels;
    std::vector<double> loss_trace;  // mean loss after each ascent step
};

// Multi-step PGD (steps=1, random_start=false gives FGSM). Input-gradient
// only: model parameters, their gradients and any optimizer state are left
// untouched. Every emitted sample satisfies the norm budget (<= eps + 1e-9)
// and exact [0,1] clipping.
AdvBatch pgd(const Model& model, const Tensor& images, const std::vector<std::int64_t>& labels,
             const AttackConfig& cfg);

double accuracy(const Model& model, const Tensor& images, const std::vector<std::int64_t>& labels,
                std::size_t batch_size = 64);

struct EvalResult {
    double clean_acc = 0.0;
    double robust_acc = 0.0;
    std::size_t n = 0;
};

EvalResult evaluate_robustness(const Model& model, const Tensor& images,
                               const std::vector<std::int64_t>& labels, const AttackConfig& cfg,
                               std::size_t batch_size = 64);

struct StepAccuracy {
    int steps = 0;
    double robust_acc = 0.0;
};

// Robust accuracy per attack step count, shared eps/alpha/seed.
std::vector<StepAccuracy> attack_convergence(const Model& model, const Dataset& data,
                                             const AttackConfig& cfg, std::span<const int> step_grid,
                                             std::size_t batch_size = 64);

// Black-box transfer: craft on `attacker`, measure on `victim`.
double transfer_eval(const Model& attacker, const Model& victim, const Dataset& data,
                     const AttackConfig& cfg, std::size_t batch_size = 64);

}  // namespace safer
