#pragma once

#include <cstdint>
#include <functional>

#include "safer/tensor.hpp"

namespace safer {

// Scalar-valued function of one tensor; may record on the ambient tape.
using ScalarFn = std::function<Tensor(const Tensor&)>;

// Central-difference gradient check.
//
// Runs f once under a fresh tape to get the analytic gradient at `point`,
// then probes coordinates with (f(x+h) - f(x-h)) / 2h and returns
//   max_j |analytic_j - central_j| / (|central_j| + 1e-8).
//
// `max_coords` > 0 limits the probe to that many randomly chosen coordinates
// (seeded); 0 checks all of them. Throws DomainError when f is non-finite at
// a probe point.
double grad_check(const ScalarFn& f, const Tensor& point, double h = 1e-5,
                  std::size_t max_coords = 0, std::uint64_t seed = 0);

}  // namespace safer
