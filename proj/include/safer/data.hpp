#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "safer/tensor.hpp"

namespace safer {

struct Dataset {
    enum class Split { train, val, test };
    enum class Source { cifar10_binary, synthetic };

    Tensor images;  // [n, channels, h, w], values in [0,1]
    std::vector<std::int64_t> labels;
    std::size_t num_classes = 0;
    Split split = Split::train;
    Source source = Source::synthetic;

    std::size_t size() const { return labels.size(); }
    std::size_t channels() const { return images.shape()[1]; }
    std::size_t image_size() const { return images.shape()[2]; }
};

const char* split_name(Dataset::Split split);

// CIFAR-10 binary records: 1 label byte then channel-major pixel planes
// (R, G, B), `image_size`^2 bytes each; pixels map to byte/255. `path` may be
// one .bin file or the official directory layout (data_batch_1..5.bin for
// train, test_batch.bin for test).
Dataset load_cifar10_binary(const std::string& path, Dataset::Split split,
                            std::size_t image_size = 32, std::size_t channels = 3);

// Writes the same record layout (bytes are round(v*255)); loading it back
// reproduces a loaded dataset bit-exactly.
void save_cifar10_binary(const Dataset& ds, const std::string& file);

// Class-conditional colored shapes on textured noise backgrounds. Learnable
// by the tiny ViT yet not linearly separable to 100%.
Dataset synth_dataset(std::size_t n, std::size_t classes, std::size_t image_size, std::uint64_t seed);

// Disjoint, seeded-deterministic split; the validation set takes
// round(val_fraction * n) samples.
std::pair<Dataset, Dataset> split_train_val(const Dataset& ds, double val_fraction, std::uint64_t seed);

struct AugmentConfig {
    std::size_t pad = 4;
    std::size_t crop = 0;  // 0: keep the input size
    double hflip_prob = 0.5;
    std::uint64_t seed = 0;

    void validate(std::size_t image_size) const;
};

// Reflect-pad, uniform random crop, horizontal flip; per-sample seeded RNG.
Tensor augment(const Tensor& batch, const AugmentConfig& cfg);

// Batch assembly by sample indices.
std::pair<Tensor, std::vector<std::int64_t>> gather(const Dataset& ds, std::span<const std::size_t> idx);

// First `count` rows of an image tensor + label list.
std::pair<Tensor, std::vector<std::int64_t>> take(const Dataset& ds, std::size_t count);

std::string batch_digest(const Tensor& images, const std::vector<std::int64_t>& labels);

}  // namespace safer
