#pragma once

#include <cstdint>
#include <string>

#include "safer/attacks.hpp"
#include "safer/data.hpp"
#include "safer/optim.hpp"
#include "safer/sharpness.hpp"
#include "safer/trainer.hpp"
#include "safer/vit.hpp"

namespace safer {

// Resolved experiment configuration. The file format is line-oriented
// `key = value` with `#` comments; unknown keys are errors. The full key list
// is documented in the README and reproduced by serialize_run_config().
struct RunConfig {
    std::uint64_t seed = 42;
    std::string output_dir = "runs/default";

    ViTConfig model;                 // model.seed 0 means: derive from the run seed
    std::string data_source = "synthetic";  // synthetic | cifar10
    std::string data_path;                  // cifar10 file or directory
    std::size_t data_n = 2048;               // synthetic sample count
    double val_fraction = 0.1;
    AugmentConfig augment;
    AttackConfig attack;
    OptimizerConfig optimizer;
    SaferSchedule schedule;
    SharpnessConfig sharpness;
    AdapterConfig adapter;
    std::size_t batch_size = 64;
    std::size_t eval_samples = 256;

    void validate() const;
    // model.seed resolved against the run seed (applied once, at load).
    void resolve();
};

RunConfig parse_run_config_text(const std::string& text, const std::string& origin);
RunConfig parse_run_config(const std::string& path);
std::string serialize_run_config(const RunConfig& cfg);

}  // namespace safer
