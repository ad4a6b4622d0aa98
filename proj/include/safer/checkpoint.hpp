#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "safer/vit.hpp"

namespace safer {

// Versioned binary checkpoint container, all fields little-endian:
//
//   magic   "SAFERCKPT"                                  9 bytes
//   u32     format version (currently 1)
//   u64 x6  image_size, patch_size, channels, embed_dim, depth, heads
//   f64     mlp_ratio
//   u64 x2  num_classes, seed
//   u8      adapter kind (0 none, 1 lora, 2 dora)
//   u32     adapter rank
//   f64     adapter alpha
//   u32     adapter target-role bitmask (bit = Role enum value)
//   u32     parameter count
//   each parameter, in registry order:
//     u32 name length, name bytes, u32 ndim, u64 x ndim extents, f64 x numel data
//   u8      trainer-state flag
//   when set:
//     u64 epoch, u8 phase, u32 selected count, u32 x count handle indices,
//     u8 momentum flag (then f64 momentum per parameter, same order/sizes),
//     u64 x4 RNG state
//
// Round-trips are bit-exact.
struct TrainerState {
    bool present = false;
    std::uint64_t epoch = 0;
    std::uint8_t phase = 0;  // 0 none, 1 clean pretrain, 2 pgd-at, 3 safer
    std::vector<std::uint32_t> selected;             // requested (base) handles
    std::vector<std::vector<double>> momentum;       // aligned with model params; may be empty
    std::array<std::uint64_t, 4> rng{};
};

void save_checkpoint(const std::string& path, const Model& model, const TrainerState& state = {});

struct Checkpoint {
    Model model;
    TrainerState state;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace safer
