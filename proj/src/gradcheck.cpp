#include "anyshift/gradcheck.hpp"

#include <algorithm>

namespace anyshift {

GradCheck check_gradients(const ScalarFn& f, std::vector<Tensor> inputs, double h) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  std::vector<Matrix> analytic;
  {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = f(inputs);
    }
    tape.backward(loss);
    for (const auto& t : inputs) analytic.push_back(t.grad());
  }

  GradCheck out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Matrix& v = inputs[k].mutable_value();
    Matrix numeric(v.rows(), v.cols());
    for (Index i = 0; i < v.size(); ++i) {
      const double keep = v.data()[i];
      v.data()[i] = keep + h;
      const double up = f(inputs).item();
      v.data()[i] = keep - h;
      const double down = f(inputs).item();
      v.data()[i] = keep;
      numeric.data()[i] = (up - down) / (2.0 * h);
    }
    const double abs_err = (analytic[k] - numeric).cwiseAbs().maxCoeff();
    const double scale = std::max(numeric.cwiseAbs().maxCoeff(), 1e-8);
    out.max_abs_error = std::max(out.max_abs_error, abs_err);
    out.max_rel_error = std::max(out.max_rel_error, abs_err / scale);
  }
  return out;
}

}  // namespace anyshift
