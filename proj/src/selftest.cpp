#include "anyshift/selftest.hpp"

#include <cmath>
#include <functional>
#include <string>

#include "anyshift/distributions.hpp"
#include "anyshift/encoders.hpp"
#include "anyshift/experiment.hpp"
#include "anyshift/gradcheck.hpp"
#include "anyshift/model.hpp"
#include "anyshift/rng.hpp"
#include "anyshift/shift_bench.hpp"

namespace anyshift {

namespace {

Tensor rand_tensor(Index r, Index c, std::mt19937_64& rng) { return Tensor(standard_normal(r, c, rng)); }

bool grads_ok(const ScalarFn& f, std::vector<Tensor> in) { return check_gradients(f, std::move(in)).max_rel_error <= 1e-5; }

}  // namespace

bool run_selftest(std::ostream& os) {
  int failed = 0;
  const auto report = [&](const std::string& name, const std::function<bool()>& check) {
    bool ok = false;
    std::string why;
    try {
      ok = check();
    } catch (const std::exception& e) {
      why = std::string(" (") + e.what() + ")";
    }
    os << (ok ? "ok   " : "FAIL ") << name << why << "\n";
    if (!ok) ++failed;
  };
  auto rng = make_stream(7, StreamPurpose::Test);

  report("matmul gradient", [&] {
    return grads_ok([](const std::vector<Tensor>& t) { return sum(matmul(t[0], t[1])); },
                    {rand_tensor(3, 4, rng), rand_tensor(4, 2, rng)});
  });
  report("cross-entropy gradient", [&] {
    const std::vector<int> y{0, 2, 1};
    return grads_ok([&](const std::vector<Tensor>& t) { return cross_entropy(t[0], y); }, {rand_tensor(3, 3, rng)});
  });
  report("layer-norm gradient", [&] {
    const Tensor w = rand_tensor(3, 5, rng);
    return grads_ok([&](const std::vector<Tensor>& t) { return sum(mul(layer_norm(t[0], t[1], t[2]), w)); },
                    {rand_tensor(3, 5, rng), Tensor(Shape{5}, standard_normal(1, 5, rng)),
                     Tensor(Shape{5}, standard_normal(1, 5, rng))});
  });
  report("attention gradient", [&] {
    const Tensor w = rand_tensor(3, 4, rng);
    return grads_ok([&](const std::vector<Tensor>& t) { return sum(mul(attention(t[0], t[1], t[2], 2, true), w)); },
                    {rand_tensor(3, 4, rng), rand_tensor(5, 4, rng), rand_tensor(5, 4, rng)});
  });
  report("kl gradient", [&] {
    return grads_ok(
        [](const std::vector<Tensor>& t) { return kl_diag_gaussians(DiagGaussian(t[0], t[1]), DiagGaussian(t[2], t[3])); },
        {rand_tensor(2, 3, rng), rand_tensor(2, 3, rng), rand_tensor(2, 3, rng), rand_tensor(2, 3, rng)});
  });
  report("kl closed form", [] {
    const DiagGaussian q(Tensor(Matrix::Constant(1, 1, 1.0)), Tensor(Matrix::Zero(1, 1)));
    const DiagGaussian p(Tensor(Matrix::Zero(1, 1)), Tensor(Matrix::Zero(1, 1)));
    return std::abs(kl_diag_gaussians(q, p).item() - 0.5) < 1e-15 && kl_diag_gaussians(q, q).item() == 0.0;
  });
  report("softmax stability", [] {
    const Matrix p = softmax(Tensor(Matrix::Constant(1, 3, 1000.0))).value();
    return (p.array() - 1.0 / 3.0).abs().maxCoeff() < 1e-15;
  });
  report("harmonic mean checkpoints", [] {
    return std::abs(harmonic_mean(76.63, 71.33) - 73.88) <= 0.01 && std::abs(harmonic_mean(82.69, 63.22) - 71.66) <= 0.01;
  });
  report("label shift zeroes held-out classes", [] {
    const BaseWorld w = make_base_world(3);
    const auto task = apply_shift(w, ShiftSpec::label({4, 5, 6, 7}));
    for (const auto& ex : sample_dataset(w, task.train, 2000, 1)) {
      if (ex.y >= 4) return false;
    }
    return true;
  });
  report("concept shift leaves inputs unchanged", [] {
    const BaseWorld w = make_base_world(3);
    const auto plain = sample_dataset(w, apply_shift(w, ShiftSpec::identity()).test, 200, 9);
    const auto relabeled = sample_dataset(w, apply_shift(w, ShiftSpec::concept_shift()).test, 200, 9);
    for (std::size_t i = 0; i < plain.size(); ++i) {
      if (plain[i].x != relabeled[i].x) return false;
    }
    return true;
  });

  EncoderConfig ec;
  ec.d_x = 8;
  ec.hidden = 16;
  ec.d = 8;
  ec.heads = 2;
  ec.ffn_hidden = 16;
  ec.seed = 5;
  auto enc = std::make_shared<const FrozenEncoders>(ec, EncoderWeights::init(ec));
  const auto names = make_class_names({"class_0", "class_1", "class_2"}, 1, ec.vocab_size);
  ModelConfig mc;
  mc.net.feature_width = ec.d;
  mc.net.hidden = 16;
  mc.net.ffn_hidden = 32;
  mc.net.prompt_width = 4;
  mc.net.seed = 6;
  TrainState state(enc, mc);
  const ClassSet classes = make_class_set(*enc, {0, 1, 2}, names);
  RawExample ex{standard_normal(1, 8, rng), 1, 0, 0};

  report("zero projection reproduces zero-shot", [&] {
    const RowVector with = predict_with_prompt(state, ex, classes, standard_normal(4, 4, rng));
    return with == zero_shot_prediction(*enc, ex, classes).probs;
  });
  report("prediction is a distribution", [&] {
    state.net().out_proj_image.weight.mutable_value() = standard_normal(4, 8, rng);
    state.net().out_proj_text.weight.mutable_value() = standard_normal(4, 8, rng);
    auto prng = make_stream(1, StreamPurpose::Test, 1);
    const Prediction p = predict(state, ex, classes, PredictOptions{}, prng);
    return std::abs(p.probs.sum() - 1.0) < 1e-9 && p.probs.minCoeff() >= 0.0 && p.samples_used == 16;
  });
  report("loss is ce + kl", [&] {
    auto nrng = make_stream(1, StreamPurpose::Test, 2);
    RawExample a{standard_normal(1, 8, rng), 0, 0, 0};
    const LossBreakdown lb = forward_train(state, {&a, &ex}, classes, draw_train_noise(state.net().cfg, nrng));
    return lb.total == lb.ce + lb.kl_weight * lb.kl && lb.kl >= 0.0;
  });

  os << (failed == 0 ? "selftest passed" : "selftest FAILED: " + std::to_string(failed) + " check(s)") << "\n";
  return failed == 0;
}

}  // namespace anyshift
