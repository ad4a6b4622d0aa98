#include "safer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "safer/errors.hpp"
#include "safer/rng.hpp"
#include "safer/tape.hpp"

namespace safer {

double grad_check(const ScalarFn& f, const Tensor& point, double h, std::size_t max_coords,
                  std::uint64_t seed) {
    Tensor x = Tensor::from(point.shape(), point.vec());
    x.set_requires_grad(true);

    std::vector<double> analytic;
    {
        Tape tape;
        Tape::Scope scope(tape);
        Tensor loss = f(x);
        if (loss.size() != 1) throw ContractError("grad_check: f must be scalar-valued");
        if (!std::isfinite(loss.item())) throw DomainError("grad_check: f non-finite at the base point");
        // a loss that never touched the graph has zero gradient everywhere
        if (loss.recorded_on(&tape)) tape.backward(loss);
        analytic = x.grad_vec();
    }

    const std::size_t n = x.size();
    std::vector<std::size_t> coords;
    if (max_coords == 0 || max_coords >= n) {
        coords.resize(n);
        std::iota(coords.begin(), coords.end(), 0);
    } else {
        // Sample distinct coordinates.
        Rng rng(Rng::derive(seed, "grad_check"));
        std::vector<std::size_t> all(n);
        std::iota(all.begin(), all.end(), 0);
        for (std::size_t i = 0; i < max_coords; ++i) {
            const std::size_t j = i + rng.below(n - i);
            std::swap(all[i], all[j]);
            coords.push_back(all[i]);
        }
    }

    const auto eval = [&]() {
        const Tensor out = f(x);  // no tape current: pure evaluation
        const double v = out.item();
        if (!std::isfinite(v)) throw DomainError("grad_check: f non-finite at a probe point");
        return v;
    };

    double worst = 0.0;
    for (const std::size_t j : coords) {
        const double orig = x.data()[j];
        x.data()[j] = orig + h;
        const double up = eval();
        x.data()[j] = orig - h;
        const double down = eval();
        x.data()[j] = orig;
        const double central = (up - down) / (2.0 * h);
        const double err = std::fabs(analytic[j] - central) / (std::fabs(central) + 1e-8);
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace safer
