#include "safer/landscape.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "safer/errors.hpp"
#include "safer/kernels.hpp"
#include "safer/ops.hpp"
#include "safer/rng.hpp"

namespace safer {

LandscapeGrid adversarial_loss_landscape(Model& model, int handle, const Tensor& images,
                                         const std::vector<std::int64_t>& labels,
                                         const AttackConfig& attack, double extent_a, double extent_b,
                                         std::size_t resolution, std::uint64_t seed) {
    if (resolution < 3 || resolution % 2 == 0)
        throw ConfigError("landscape: resolution must be odd and >= 3");
    if (extent_a <= 0.0 || extent_b <= 0.0) throw ConfigError("landscape: extents must be positive");
    const LayerHandle& h = model.handle(handle);
    const std::size_t n = h.param_count;
    if (n < 2) throw ConfigError("landscape: layer '" + h.name + "' is too small for two directions");

    // Directions are a pure function of (seed, layer shape).
    std::uint64_t stream = Rng::derive(seed, "landscape", n);
    for (const int pid : model.params_of(handle))
        for (const std::size_t extent : model.params()[static_cast<std::size_t>(pid)].tensor.shape())
            stream = Rng::derive(stream, "dim", extent);
    Rng rng(stream);

    LandscapeGrid grid;
    grid.layer = handle;
    grid.resolution = resolution;
    grid.min_a = -extent_a;
    grid.max_a = extent_a;
    grid.min_b = -extent_b;
    grid.max_b = extent_b;
    grid.dir1.resize(n);
    grid.dir2.resize(n);
    for (double& v : grid.dir1) v = rng.normal();
    for (double& v : grid.dir2) v = rng.normal();

    const auto& k = kernels::active();
    const double n1 = std::sqrt(k.dot(grid.dir1.data(), grid.dir1.data(), n));
    k.scale(1.0 / n1, grid.dir1.data(), n);
    const double proj = k.dot(grid.dir1.data(), grid.dir2.data(), n);
    k.axpy(-proj, grid.dir1.data(), grid.dir2.data(), n);  // Gram-Schmidt
    const double n2 = std::sqrt(k.dot(grid.dir2.data(), grid.dir2.data(), n));
    k.scale(1.0 / n2, grid.dir2.data(), n);

    // One fixed adversarial batch, crafted at the unperturbed weights.
    const AdvBatch adv = pgd(model, images, labels, attack);

    const std::vector<int> handles{handle};
    const std::vector<int>& pids = model.params_of(handle);
    std::vector<std::vector<double>> snapshot;
    for (const int pid : pids) snapshot.push_back(model.params()[static_cast<std::size_t>(pid)].tensor.vec());

    const auto write_offset = [&](double a, double b) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < pids.size(); ++i) {
            auto& w = model.params()[static_cast<std::size_t>(pids[i])].tensor.vec();
            w = snapshot[i];
            k.axpy(a, grid.dir1.data() + off, w.data(), w.size());
            k.axpy(b, grid.dir2.data() + off, w.data(), w.size());
            off += w.size();
        }
    };

    grid.values.assign(resolution * resolution, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t ia = 0; ia < resolution; ++ia) {
        const double a = grid.min_a + (grid.max_a - grid.min_a) * static_cast<double>(ia) /
                                          static_cast<double>(resolution - 1);
        for (std::size_t ib = 0; ib < resolution; ++ib) {
            const double b = grid.min_b + (grid.max_b - grid.min_b) * static_cast<double>(ib) /
                                              static_cast<double>(resolution - 1);
            write_offset(a, b);
            const double loss =
                ops::cross_entropy_with_logits(model.forward(adv.adversarial), labels).item();
            if (std::isfinite(loss)) grid.values[ia * resolution + ib] = loss;
            // non-finite stays NaN: recorded as missing, not a failure
        }
    }
    for (std::size_t i = 0; i < pids.size(); ++i)
        model.params()[static_cast<std::size_t>(pids[i])].tensor.vec() = snapshot[i];
    return grid;
}

void write_landscape_csv(const LandscapeGrid& grid, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << "a,b,loss\n";
    for (std::size_t ia = 0; ia < grid.resolution; ++ia) {
        const double a = grid.min_a + (grid.max_a - grid.min_a) * static_cast<double>(ia) /
                                          static_cast<double>(grid.resolution - 1);
        for (std::size_t ib = 0; ib < grid.resolution; ++ib) {
            const double b = grid.min_b + (grid.max_b - grid.min_b) * static_cast<double>(ib) /
                                              static_cast<double>(grid.resolution - 1);
            const double v = grid.values[ia * grid.resolution + ib];
            char buf[96];
            if (std::isfinite(v)) {
                std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g\n", a, b, v);
            } else {
                std::snprintf(buf, sizeof(buf), "%.17g,%.17g,\n", a, b);
            }
            out << buf;
        }
    }
}

}  // namespace safer
