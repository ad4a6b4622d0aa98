#include "safer/optim.hpp"

#include <cmath>

#include "safer/errors.hpp"
#include "safer/kernels.hpp"

namespace safer {

void OptimizerConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("optimizer: lr must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("optimizer: momentum must be in [0,1)");
    if (weight_decay < 0.0) throw ConfigError("optimizer: weight_decay must be >= 0");
    if (kind == Kind::sam_over_sgd && rho <= 0.0)
        throw ConfigError("optimizer: rho must be positive for sam-over-sgd");
    if (decay_factor <= 0.0) throw ConfigError("optimizer: decay_factor must be positive");
}

const char* optimizer_kind_name(OptimizerConfig::Kind kind) {
    return kind == OptimizerConfig::Kind::sgd ? "sgd" : "sam-over-sgd";
}

OptimizerConfig::Kind optimizer_kind_from_name(const std::string& name) {
    if (name == "sgd") return OptimizerConfig::Kind::sgd;
    if (name == "sam-over-sgd" || name == "sam") return OptimizerConfig::Kind::sam_over_sgd;
    throw ConfigError("unknown optimizer kind '" + name + "' (want sgd|sam-over-sgd)");
}

const char* sam_norm_name(OptimizerConfig::SamNorm norm) {
    return norm == OptimizerConfig::SamNorm::per_layer ? "per-layer" : "joint";
}

OptimizerConfig::SamNorm sam_norm_from_name(const std::string& name) {
    if (name == "per-layer") return OptimizerConfig::SamNorm::per_layer;
    if (name == "joint") return OptimizerConfig::SamNorm::joint;
    throw ConfigError("unknown sam normalization '" + name + "' (want per-layer|joint)");
}

double cosine_lr(double lr0, double decay_factor, std::size_t epoch, std::size_t horizon) {
    if (horizon == 0) return lr0;
    const double t = std::min(static_cast<double>(epoch), static_cast<double>(horizon));
    const double base = 0.5 * (1.0 + std::cos(M_PI * t / static_cast<double>(horizon)));
    return lr0 * std::pow(base, decay_factor / 2.0);
}

Sgd::Sgd(const Model& model, const OptimizerConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    momentum_.reserve(model.params().size());
    for (const Param& p : model.params()) momentum_.emplace_back(p.tensor.size(), 0.0);
}

void Sgd::step(Model& model, double lr) {
    if (momentum_.size() != model.params().size())
        throw ContractError("sgd: optimizer bound to a different model");
    const auto& k = kernels::active();
    for (std::size_t i = 0; i < model.params().size(); ++i) {
        Param& p = model.params()[i];
        if (!model.trainable(p.handle)) continue;
        auto& v = momentum_[i];
        auto& w = p.tensor.vec();
        const auto& g = p.tensor.grad_vec();
        k.scale(cfg_.momentum, v.data(), v.size());
        k.axpy(1.0, g.data(), v.data(), v.size());
        if (cfg_.weight_decay != 0.0) k.axpy(cfg_.weight_decay, w.data(), v.data(), v.size());
        k.axpy(-lr, v.data(), w.data(), w.size());
    }
}

void Sgd::zero_momentum(const Model& model, int handle) {
    for (const int pid : model.params_of(handle))
        std::fill(momentum_[static_cast<std::size_t>(pid)].begin(),
                  momentum_[static_cast<std::size_t>(pid)].end(), 0.0);
}

void Sgd::set_momentum(std::vector<std::vector<double>> m) {
    if (!m.empty() && m.size() != momentum_.size())
        throw ContractError("sgd: momentum state not aligned with parameters");
    if (!m.empty()) momentum_ = std::move(m);
}

}  // namespace safer
