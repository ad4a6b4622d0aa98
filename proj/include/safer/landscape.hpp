#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "safer/attacks.hpp"
#include "safer/vit.hpp"

namespace safer {

// Adversarial-loss surface of one layer along two random orthonormal
// directions in that layer's weight space. `values` is resolution^2
// row-major over (a, b) offsets; NaN marks a non-finite loss (missing).
struct LandscapeGrid {
    int layer = -1;
    std::vector<double> dir1, dir2;  // unit norm, mutually orthogonal
    double min_a = 0.0, max_a = 0.0;
    double min_b = 0.0, max_b = 0.0;
    std::size_t resolution = 0;
    std::vector<double> values;

    double center_value() const { return values[(resolution / 2) * resolution + resolution / 2]; }
};

// Directions regenerate identically from (seed, layer shape). Resolution must
// be odd and >= 3 so the unperturbed point is on the grid; extents are
// symmetric per axis. Weights are restored bit-exactly afterwards.
LandscapeGrid adversarial_loss_landscape(Model& model, int handle, const Tensor& images,
                                         const std::vector<std::int64_t>& labels,
                                         const AttackConfig& attack, double extent_a, double extent_b,
                                         std::size_t resolution, std::uint64_t seed);

// CSV rows (a, b, loss); missing values have an empty loss field.
void write_landscape_csv(const LandscapeGrid& grid, const std::string& path);

}  // namespace safer
