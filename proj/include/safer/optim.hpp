#pragma once

#include <string>
#include <vector>

#include "safer/vit.hpp"

namespace safer {

struct OptimizerConfig {
    enum class Kind { sgd, sam_over_sgd };
    enum class SamNorm { per_layer, joint };

    Kind kind = Kind::sgd;
    double lr = 0.015;
    double momentum = 0.9;
    double weight_decay = 0.0;
    double rho = 0.05;  // SAM radius
    double decay_factor = 2.0;
    SamNorm sam_norm = SamNorm::per_layer;

    void validate() const;
};

const char* optimizer_kind_name(OptimizerConfig::Kind kind);
OptimizerConfig::Kind optimizer_kind_from_name(const std::string& name);
const char* sam_norm_name(OptimizerConfig::SamNorm norm);
OptimizerConfig::SamNorm sam_norm_from_name(const std::string& name);

// lr(t) = lr0 * [0.5 (1 + cos(pi t/T))]^(f/2). Factor 2 is plain cosine
// annealing: lr(0) = lr0, monotone, lr(T) = 0 exactly.
double cosine_lr(double lr0, double decay_factor, std::size_t epoch, std::size_t horizon);

// SGD with momentum over the model's trainable handles:
//   v <- mu v + g + wd w;  w <- w - lr v
class Sgd {
  public:
    Sgd(const Model& model, const OptimizerConfig& cfg);

    void step(Model& model, double lr);
    void zero_momentum(const Model& model, int handle);

    const std::vector<std::vector<double>>& momentum() const { return momentum_; }
    void set_momentum(std::vector<std::vector<double>> m);

  private:
    OptimizerConfig cfg_;
    std::vector<std::vector<double>> momentum_;  // aligned with model.params()
};

}  // namespace safer
