#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "safer/attacks.hpp"
#include "safer/data.hpp"
#include "safer/vit.hpp"

namespace safer {

struct SharpnessConfig {
    double rho = 0.05;
    std::size_t batch_size = 50;
    int oracle_steps = 10;
    double fraction = 0.05;
    std::uint64_t seed = 0;

    // Per-sample gradient-norm sums are approximated at microbatch
    // granularity; 1 is the faithful default, 0 means one whole-batch norm
    // (the cheap variant, which measures ||sum of per-sample grads|| instead).
    std::size_t microbatch = 1;
    bool normalize_by_param_count = false;  // gamma / sqrt(param_count) variant
    bool gamma_on_adapters = false;         // PEFT mode: rank adapters instead of base weights
    std::set<Role> rankable_roles = default_rankable_roles();
    AttackConfig attack{};

    void validate() const;
};

struct LayerGamma {
    int handle = -1;
    double gamma = 0.0;
    bool failed = false;  // oracle ascent did not produce a finite value
};

struct SharpnessReport {
    enum class Method { estimator, oracle };
    Method method = Method::estimator;
    double rho = 0.0;
    std::size_t batch_size = 0;
    std::size_t microbatch = 1;
    bool normalized = false;
    std::string batch_digest;
    std::vector<LayerGamma> per_layer;  // rankable handles in registry order
    std::vector<int> ranking;           // handle indices, gamma descending, ties by lower index
    std::vector<int> selected;          // top-K of the ranking
    bool degenerate = false;            // all gammas zero
    double wall_seconds = 0.0;
};

const char* method_name(SharpnessReport::Method method);

// Fast estimator: gamma_i = sum over microbatches of
// microbatch_size * || d L_adv / d w_i || restricted to each handle.
// One backward per microbatch; model weights and optimizer state untouched.
SharpnessReport layer_sharpness_estimator(const Model& model, const Tensor& images,
                                          const std::vector<std::int64_t>& labels,
                                          const SharpnessConfig& cfg);

// Exact oracle: per (layer, sample), projected gradient ascent of the
// adversarial loss over the rho-ball around that layer's weights; gamma_i is
// the summed per-sample loss gap. Weights are restored bit-exactly.
SharpnessReport layer_sharpness_oracle(Model& model, const Tensor& images,
                                       const std::vector<std::int64_t>& labels,
                                       const SharpnessConfig& cfg);

// K = max(1, round(fraction * rankable count)); ties already resolved in the
// report's ranking.
std::vector<int> select_top_k(const SharpnessReport& report, double fraction);

// Assembles ranking (gamma descending, ties by lower index, failed handles
// excluded), the degenerate flag and the top-K selection from per_layer.
void finalize_report(SharpnessReport& report, double fraction);

struct StabilityEntry {
    std::size_t batch_size = 0;
    double agreement = 0.0;                 // fraction of draw pairs with identical top-K
    double median_gamma_spread = 0.0;       // median over draws of max/min gamma
    std::map<int, double> selection_frequency;  // handle -> fraction of draws selected
};

struct StabilityResult {
    std::vector<StabilityEntry> entries;
    int draws = 0;
    std::size_t k = 0;
    bool low_confidence = false;  // near-uniform gammas or unstable rankings
};

StabilityResult ranking_stability(const Model& model, const Dataset& data, const SharpnessConfig& cfg,
                                  std::span<const std::size_t> batch_sizes, int draws);

std::string report_to_json(const SharpnessReport& report, const Model& model);
std::string report_to_table(const SharpnessReport& report, const Model& model);

// Rankable handle set under this config (adapter handles in PEFT mode when
// gamma_on_adapters is set, base handles otherwise).
std::vector<int> rankable_for(const Model& model, const SharpnessConfig& cfg);

}  // namespace safer
