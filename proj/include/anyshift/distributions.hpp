#pragma once

#include "anyshift/tensor.hpp"

namespace anyshift {

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 4.0;

/// Diagonal Gaussian over a [L x d_p] prompt matrix, parameterized by mean
/// and log-variance. The log-variance is clamped to [kLogVarMin, kLogVarMax]
/// on construction, so exp(log_var) is always positive and finite.
class DiagGaussian {
 public:
  DiagGaussian() = default;
  DiagGaussian(Tensor mean, const Tensor& log_var);

  const Tensor& mean() const { return mean_; }
  const Tensor& log_var() const { return log_var_; }
  const Shape& shape() const { return mean_.shape(); }

 private:
  Tensor mean_;
  Tensor log_var_;
};

enum class PromptSource { Prior, Posterior, Training };

struct PromptSample {
  Tensor value;
  PromptSource source = PromptSource::Training;
};

/// mean + exp(0.5 * log_var) * noise; differentiable in mean and log_var.
PromptSample sample_reparam(const DiagGaussian& dist, const Tensor& noise,
                            PromptSource source = PromptSource::Training);

/// Closed-form KL(q || p) summed over all elements.
Tensor kl_diag_gaussians(const DiagGaussian& q, const DiagGaussian& p);

double log_prob(const DiagGaussian& dist, const Matrix& x);

}  // namespace anyshift
