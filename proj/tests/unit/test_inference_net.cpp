#include <doctest.h>

#include <sstream>

#include "anyshift/errors.hpp"
#include "anyshift/inference_net.hpp"
#include "anyshift/rng.hpp"
#include "grad_cases.hpp"

using namespace anyshift;
using anyshift::testing::randn;
using anyshift::testing::tiny_net_config;

namespace {

Matrix permute_rows(const Matrix& m, const std::vector<int>& perm) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) out.row(static_cast<Index>(i)) = m.row(perm[i]);
  return out;
}

}  // namespace

TEST_CASE("default configuration has the documented shapes") {
  InferenceNetConfig c;
  const auto net = InferenceNetParams::init(c);
  CHECK(net.blocks.size() == 2);
  CHECK(net.prompt_shape() == Shape{4, 16});
  auto rng = make_stream(61, StreamPurpose::Test);
  const PromptSample v = sample_training_prompt(net, randn(4, 16, rng));
  const DiagGaussian p = infer_prior(net, v, randn(1, 32, rng), randn(8, 32, rng));
  CHECK(p.mean().shape() == Shape{4, 16});
  CHECK(p.log_var().shape() == Shape{4, 16});
  CHECK(net.out_proj_image.weight.value().cwiseAbs().maxCoeff() == 0.0);
  CHECK(net.out_proj_text.weight.value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("posterior is invariant to jointly permuting the batch") {
  const auto net = InferenceNetParams::init(tiny_net_config(3));
  auto rng = make_stream(62, StreamPurpose::Test);
  const Tensor v = randn(2, 3, rng);
  const Matrix z = standard_normal(5, 4, rng), gt = standard_normal(5, 4, rng);
  const std::vector<int> perm{3, 1, 4, 0, 2};
  const DiagGaussian a = infer_posterior(net, {v, PromptSource::Training}, Tensor(z), Tensor(gt));
  const DiagGaussian b =
      infer_posterior(net, {v, PromptSource::Training}, Tensor(permute_rows(z, perm)), Tensor(permute_rows(gt, perm)));
  CHECK((a.mean().value() - b.mean().value()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((a.log_var().value() - b.log_var().value()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("prior is invariant to the order of class features") {
  const auto net = InferenceNetParams::init(tiny_net_config(4));
  auto rng = make_stream(63, StreamPurpose::Test);
  const Tensor v = randn(2, 3, rng), z = randn(1, 4, rng);
  const Matrix t = standard_normal(4, 4, rng);
  const DiagGaussian a = infer_prior(net, {v, PromptSource::Training}, z, Tensor(t));
  const DiagGaussian b = infer_prior(net, {v, PromptSource::Training}, z, Tensor(permute_rows(t, {2, 0, 3, 1})));
  CHECK((a.mean().value() - b.mean().value()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("the prior depends on every unmasked input group") {
  const auto net = InferenceNetParams::init(tiny_net_config(5));
  auto rng = make_stream(64, StreamPurpose::Test);
  const Tensor v = randn(2, 3, rng), z = randn(1, 4, rng), t = randn(3, 4, rng);
  const Matrix base = infer_prior(net, {v, PromptSource::Training}, z, t).mean().value();
  CHECK(infer_prior(net, {randn(2, 3, rng), PromptSource::Training}, z, t).mean().value() != base);
  CHECK(infer_prior(net, {v, PromptSource::Training}, randn(1, 4, rng), t).mean().value() != base);
  CHECK(infer_prior(net, {v, PromptSource::Training}, z, randn(3, 4, rng)).mean().value() != base);

  TokenMask no_prompt;
  no_prompt.training_prompt = false;
  CHECK(infer_prior(net, {v, PromptSource::Training}, z, t, no_prompt).mean().value() ==
        infer_prior(net, {randn(2, 3, rng), PromptSource::Training}, z, t, no_prompt).mean().value());
  TokenMask no_image;
  no_image.image = false;
  CHECK(infer_prior(net, {v, PromptSource::Training}, z, t, no_image).mean().value() ==
        infer_prior(net, {v, PromptSource::Training}, randn(1, 4, rng), t, no_image).mean().value());
  TokenMask no_text;
  no_text.text = false;
  CHECK(assemble_tokens(net, v, z, t, no_text).n_text == 0);
  CHECK(assemble_tokens(net, v, z, t, no_prompt).n_prompt == 2);
}

TEST_CASE("gradients reach every parameter") {
  auto net = InferenceNetParams::init(tiny_net_config(6));
  // nonzero projections so the projection weights see a gradient too
  auto rng = make_stream(65, StreamPurpose::Test);
  net.out_proj_image.weight.mutable_value() = standard_normal(3, 4, rng);
  net.out_proj_text.weight.mutable_value() = standard_normal(3, 4, rng);
  ParamRegistry reg;
  net.register_params(reg);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    const PromptSample v = sample_training_prompt(net, randn(2, 3, rng));
    const DiagGaussian q = infer_posterior(net, v, randn(3, 4, rng), randn(3, 4, rng));
    const DiagGaussian p = infer_prior(net, v, randn(1, 4, rng), randn(2, 4, rng));
    const Tensor vt = sample_reparam(q, randn(2, 3, rng)).value;
    loss = add(kl_diag_gaussians(q, p), add(sum(mul(project_image_prompt(net, vt), randn(2, 4, rng))),
                                            sum(mul(project_text_prompt(net, vt), randn(2, 4, rng)))));
  }
  tape.backward(loss);
  for (const auto& e : reg.entries()) {
    CAPTURE(e.name);
    CHECK(e.tensor.grad().cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("input validation") {
  const auto net = InferenceNetParams::init(tiny_net_config(7));
  auto rng = make_stream(66, StreamPurpose::Test);
  const PromptSample v{randn(2, 3, rng), PromptSource::Training};
  CHECK_THROWS_AS(infer_prior(net, v, randn(2, 4, rng), randn(3, 4, rng)), DimensionError);
  CHECK_THROWS_AS(infer_prior(net, v, randn(1, 5, rng), randn(3, 4, rng)), DimensionError);
  CHECK_THROWS_AS(infer_prior(net, v, randn(1, 4, rng), Tensor(Matrix::Zero(0, 4))), InputError);
  CHECK_THROWS_AS(infer_posterior(net, v, randn(3, 4, rng), randn(2, 4, rng)), DimensionError);
  CHECK_THROWS_AS(infer_prior(net, {randn(3, 3, rng), PromptSource::Training}, randn(1, 4, rng), randn(3, 4, rng)),
                  DimensionError);
}

TEST_CASE("parameters round-trip through an archive") {
  const auto net = InferenceNetParams::init(tiny_net_config(8));
  TensorArchive ar;
  net.save(ar);
  std::stringstream ss;
  write_archive(ss, ar);
  const auto back = InferenceNetParams::load(read_archive(ss));
  ParamRegistry a, b;
  net.register_params(a);
  back.register_params(b);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.entries()[i].name == b.entries()[i].name);
    CHECK(a.entries()[i].tensor.value() == b.entries()[i].tensor.value());
  }
}

TEST_CASE("initialization is deterministic in the seed") {
  const auto a = InferenceNetParams::init(tiny_net_config(9));
  const auto b = InferenceNetParams::init(tiny_net_config(9));
  const auto c = InferenceNetParams::init(tiny_net_config(10));
  CHECK(a.blocks[0].wq.weight.value() == b.blocks[0].wq.weight.value());
  CHECK(a.blocks[0].wq.weight.value() != c.blocks[0].wq.weight.value());
}
