// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pixelpost/graph.hpp"

namespace pixelpost {

// Central-difference gradient of a scalar-valued graph with respect to every
// parameter element. Runs entirely on the double-precision forward path, so
// its error budget (truncation O(step^2) plus ~1e-12 evaluation noise) sits
// far below the 1e-3 tolerance it polices. It never touches the reverse-mode
// code it is used to check.
std::vector<TensorD> finite_difference_gradient(const GraphFnD& fn,
                                                std::vector<TensorD> inputs,
                                                std::vector<TensorD> params, double step);

struct GradCheckReport {
  double max_rel_err = 0.0;
  int64_t checked = 0;
  std::string worst;  // where the worst element lives, for failure messages

  bool ok(double tol) const { return checked > 0 && max_rel_err <= tol; }
};

// Compares reverse-mode gradients (float path) against central differences
// (double path) on the same leaf values. samples_per_tensor == 0 checks every
// element; a positive value checks a seeded random subset, which is what makes
// whole-model checks affordable. Relative error is |a-b| / max(|a|,|b|,1e-4).
GradCheckReport check_gradients(const GraphFn& fn_f, const GraphFnD& fn_d,
                                const std::vector<Tensor>& inputs,
                                const std::vector<Tensor>& params, double step = 1e-3,
                                int samples_per_tensor = 0, uint64_t seed = 0x5eed);

}  // namespace pixelpost
