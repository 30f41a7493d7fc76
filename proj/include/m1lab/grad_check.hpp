#pragma once

#include <functional>
#include <vector>

#include "m1lab/tensor.hpp"

namespace m1lab {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares the backward pass of a scalar function against central finite
// differences. `f` must rebuild its graph from the given leaf tensors on every
// call; each coordinate is perturbed in place by +-h and restored afterwards.
// Error per coordinate is |analytic - numeric| / max(1, |analytic|).
GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h = 1e-5);

// Single-input convenience form.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = 1e-5);

}  // namespace m1lab
