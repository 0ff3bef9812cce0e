#pragma once

// Central finite-difference check of reverse-mode gradients.

#include <functional>
#include <vector>

#include "anyshift/tensor.hpp"

namespace anyshift {

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheck {
  double max_rel_error = 0.0;  // max over inputs of ||analytic - numeric||_inf / ||numeric||_inf
  double max_abs_error = 0.0;
};

/// `f` maps the inputs to a scalar. Inputs are treated as requiring grad.
GradCheck check_gradients(const ScalarFn& f, std::vector<Tensor> inputs, double h = 1e-5);

}  // namespace anyshift
