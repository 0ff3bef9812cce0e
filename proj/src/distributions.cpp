#include "anyshift/distributions.hpp"

#include "anyshift/errors.hpp"
#include "anyshift/kernels.hpp"

namespace anyshift {

DiagGaussian::DiagGaussian(Tensor mean, const Tensor& log_var)
    : mean_(std::move(mean)), log_var_(clamp(log_var, kLogVarMin, kLogVarMax)) {
  if (mean_.shape() != log_var_.shape()) {
    throw DimensionError("DiagGaussian: mean " + shape_string(mean_.shape()) + " vs log_var " +
                         shape_string(log_var_.shape()));
  }
}

PromptSample sample_reparam(const DiagGaussian& dist, const Tensor& noise, PromptSource source) {
  if (noise.shape() != dist.shape()) {
    throw DimensionError("sample_reparam: noise " + shape_string(noise.shape()) + " vs distribution " +
                         shape_string(dist.shape()));
  }
  const Tensor stddev = exp(scale(dist.log_var(), 0.5));
  return {add(dist.mean(), mul(stddev, noise)), source};
}

Tensor kl_diag_gaussians(const DiagGaussian& q, const DiagGaussian& p) {
  if (q.shape() != p.shape()) {
    throw DimensionError("kl_diag_gaussians: q " + shape_string(q.shape()) + " vs p " + shape_string(p.shape()));
  }
  Matrix v(1, 1);
  v(0, 0) = kernels::kl_diag(q.mean().value(), q.log_var().value(), p.mean().value(), p.log_var().value());
  return detail::make_result(Shape{}, std::move(v), {q.mean(), q.log_var(), p.mean(), p.log_var()},
                             [](detail::Node& o) {
                               const double g = o.grad(0, 0);
                               const Matrix& mu_q = o.inputs[0]->value;
                               const Matrix& lv_q = o.inputs[1]->value;
                               const Matrix& mu_p = o.inputs[2]->value;
                               const Matrix& lv_p = o.inputs[3]->value;
                               const Matrix inv_var_p = (-lv_p.array()).exp().matrix();
                               const Matrix ratio = (lv_q - lv_p).array().exp().matrix();
                               const Matrix diff = mu_q - mu_p;
                               const Matrix d_mu = diff.cwiseProduct(inv_var_p) * g;
                               o.inputs[0]->accumulate(d_mu);
                               o.inputs[1]->accumulate((0.5 * g) * (ratio.array() - 1.0).matrix());
                               o.inputs[2]->accumulate(-d_mu);
                               o.inputs[3]->accumulate(
                                   (0.5 * g) *
                                   (1.0 - ratio.array() - diff.array().square() * inv_var_p.array()).matrix());
                             });
}

double log_prob(const DiagGaussian& dist, const Matrix& x) {
  if (x.rows() != dist.mean().rows() || x.cols() != dist.mean().cols()) {
    throw DimensionError("log_prob: x has " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                         " values, distribution " + shape_string(dist.shape()));
  }
  return kernels::diag_log_prob(dist.mean().value(), dist.log_var().value(), x);
}

}  // namespace anyshift
