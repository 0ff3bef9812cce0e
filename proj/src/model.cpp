#include "anyshift/model.hpp"

#include <algorithm>

#include "anyshift/errors.hpp"
#include "anyshift/rng.hpp"

namespace anyshift {

std::string to_string(Arm arm) {
  switch (arm) {
    case Arm::ZeroShot: return "zero_shot";
    case Arm::TrainingPromptOnly: return "training_prompt_only";
    case Arm::NoTrainingPrompt: return "no_training_prompt";
    case Arm::NoText: return "no_text";
    case Arm::NoImage: return "no_image";
    case Arm::Full: return "full";
  }
  return "unknown";
}

std::vector<Arm> all_arms() {
  return {Arm::ZeroShot, Arm::TrainingPromptOnly, Arm::NoTrainingPrompt, Arm::NoText, Arm::NoImage, Arm::Full};
}

Arm arm_from_string(const std::string& s) {
  for (Arm a : all_arms()) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("unknown arm '" + s + "'", "train.arm");
}

TokenMask token_mask(Arm arm) {
  TokenMask m;
  if (arm == Arm::NoTrainingPrompt) m.training_prompt = false;
  if (arm == Arm::NoText) m.text = false;
  if (arm == Arm::NoImage) m.image = false;
  return m;
}

int ClassSet::index_of(int label) const {
  const auto it = std::find(label_ids.begin(), label_ids.end(), label);
  return it == label_ids.end() ? -1 : static_cast<int>(it - label_ids.begin());
}

ClassSet make_class_set(const FrozenEncoders& enc, std::vector<int> label_ids, std::vector<ClassName> names) {
  if (label_ids.empty()) throw InputError("class set is empty");
  if (label_ids.size() != names.size()) throw DimensionError("class set: ids and names differ in count");
  ClassSet cs;
  cs.features = enc.encode_texts(names).detach();
  cs.label_ids = std::move(label_ids);
  cs.names = std::move(names);
  return cs;
}

TrainState::TrainState(std::shared_ptr<const FrozenEncoders> encoders, const ModelConfig& cfg)
    : TrainState(encoders, cfg, InferenceNetParams::init(cfg.net)) {}

TrainState::TrainState(std::shared_ptr<const FrozenEncoders> encoders, const ModelConfig& cfg, InferenceNetParams net)
    : encoders_(std::move(encoders)), cfg_(cfg), net_(std::move(net)) {
  if (!encoders_) throw InputError("train state needs encoders");
  if (net_.cfg.feature_width != encoders_->width()) {
    throw DimensionError("inference network feature width " + std::to_string(net_.cfg.feature_width) +
                         " vs encoder width " + std::to_string(encoders_->width()));
  }
  if (cfg_.kl_weight < 0.0) throw ConfigError("kl_weight must be nonnegative", "train.kl_weight");
  net_.register_params(registry_);
  adam_ = Adam(registry_, cfg_.adam);
}

TrainNoise draw_train_noise(const InferenceNetConfig& cfg, std::mt19937_64& rng) {
  TrainNoise n;
  n.training_prompt = standard_normal(cfg.prompt_len, cfg.prompt_width, rng);
  n.posterior = standard_normal(cfg.prompt_len, cfg.prompt_width, rng);
  return n;
}

namespace {

// Logits [B x C] of images x with `prompt` in both encoders.
Tensor prompted_logits(const TrainState& state, const Tensor& x, const ClassSet& classes, const Tensor& prompt) {
  const FrozenEncoders& enc = state.encoders();
  const Tensor z = enc.encode_image(x, project_image_prompt(state.net(), prompt));
  const Tensor t = enc.encode_texts(classes.names, project_text_prompt(state.net(), prompt));
  return zero_shot_logits(enc.logit_scale(), z, t);
}

Tensor row_tensor(const RowVector& v) { return Tensor(Matrix(v)); }

}  // namespace

LossBreakdown forward_train(const TrainState& state, const std::vector<const RawExample*>& batch,
                            const ClassSet& classes, const TrainNoise& noise) {
  if (batch.empty()) throw InputError("forward_train: empty batch");
  std::vector<int> targets;
  targets.reserve(batch.size());
  for (const RawExample* ex : batch) {
    const int k = classes.index_of(ex->y);
    if (k < 0) throw InputError("forward_train: label " + std::to_string(ex->y) + " not in the class set");
    targets.push_back(k);
  }
  const InferenceNetParams& net = state.net();
  const Arm arm = state.config().arm;
  if (arm == Arm::ZeroShot) throw ConfigError("the zero-shot arm has nothing to train", "train.arm");

  const Tensor x = stack_inputs(batch);
  const PromptSample v_s = sample_training_prompt(net, Tensor(noise.training_prompt));

  LossBreakdown out;
  out.kl_weight = state.config().kl_weight;
  if (arm == Arm::TrainingPromptOnly) {
    out.loss = cross_entropy(prompted_logits(state, x, classes, v_s.value), targets);
    out.total = out.ce = out.loss.item();
    return out;
  }

  const TokenMask mask = token_mask(arm);
  const Tensor z = state.encoders().encode_image(x).detach();
  const Tensor gt = gather_rows(classes.features, targets);
  const DiagGaussian q = infer_posterior(net, v_s, z, gt, mask);

  Tensor kl_sum;
  for (Index i = 0; i < z.rows(); ++i) {
    const DiagGaussian p = infer_prior(net, v_s, slice_rows(z, i, 1), classes.features, mask);
    const Tensor k = kl_diag_gaussians(q, p);
    kl_sum = i == 0 ? k : add(kl_sum, k);
  }
  const Tensor kl = scale(kl_sum, 1.0 / static_cast<double>(z.rows()));

  const PromptSample v_t = sample_reparam(q, Tensor(noise.posterior), PromptSource::Posterior);
  const Tensor ce = cross_entropy(prompted_logits(state, x, classes, v_t.value), targets);

  out.loss = add(ce, scale(kl, out.kl_weight));
  out.ce = ce.item();
  out.kl = kl.item();
  out.total = out.loss.item();
  return out;
}

RowVector predict_with_prompt(const TrainState& state, const RawExample& x, const ClassSet& classes,
                              const Matrix& prompt) {
  const Tensor logits = prompted_logits(state, row_tensor(x.x), classes, Tensor(prompt));
  return softmax(logits).value().row(0);
}

Prediction predict(const TrainState& state, const RawExample& x, const ClassSet& classes, const PredictOptions& opts,
                   std::mt19937_64& rng) {
  if (classes.size() == 0) throw InputError("predict: empty class set");
  if (opts.n_s < 1 || opts.n_t < 1) throw ConfigError("predict: sample counts must be >= 1", "eval.n_s");
  const InferenceNetParams& net = state.net();
  const InferenceNetConfig& nc = net.cfg;
  const TokenMask mask = token_mask(state.config().arm);
  const Tensor z = state.encoders().encode_image(row_tensor(x.x));
  const Matrix& mu_s = net.train_prompt_mean.value();
  const Matrix sd_s = (0.5 * net.training_prompt().log_var().value().array()).exp().matrix();

  Prediction out;
  out.n_s = opts.n_s;
  out.n_t = opts.n_t;
  out.arm = state.config().arm;
  out.probs = RowVector::Zero(classes.size());
  for (int j = 0; j < opts.n_s; ++j) {
    Matrix v_s;
    if (opts.fixed_training_prompt) {
      v_s = *opts.fixed_training_prompt;
    } else if (opts.zero_noise) {
      v_s = mu_s;
    } else {
      v_s = mu_s + sd_s.cwiseProduct(standard_normal(nc.prompt_len, nc.prompt_width, rng));
    }
    const DiagGaussian prior = infer_prior(net, {Tensor(v_s), PromptSource::Training}, z, classes.features, mask);
    const Matrix& mu_t = prior.mean().value();
    const Matrix sd_t = (0.5 * prior.log_var().value().array()).exp().matrix();
    for (int i = 0; i < opts.n_t; ++i) {
      const Matrix v_t =
          opts.zero_noise ? mu_t : Matrix(mu_t + sd_t.cwiseProduct(standard_normal(nc.prompt_len, nc.prompt_width, rng)));
      // running mean: identical samples average to themselves bitwise
      ++out.samples_used;
      out.probs += (predict_with_prompt(state, x, classes, v_t) - out.probs) / static_cast<double>(out.samples_used);
    }
  }
  return out;
}

Prediction baseline_training_prompt_predict(const TrainState& state, const RawExample& x, const ClassSet& classes) {
  if (classes.size() == 0) throw InputError("predict: empty class set");
  Prediction out;
  out.probs = predict_with_prompt(state, x, classes, state.net().train_prompt_mean.value());
  out.n_s = 1;
  out.n_t = 0;
  out.samples_used = 1;
  out.arm = Arm::TrainingPromptOnly;
  return out;
}

Prediction zero_shot_prediction(const FrozenEncoders& enc, const RawExample& x, const ClassSet& classes) {
  if (classes.size() == 0) throw InputError("predict: empty class set");
  Prediction out;
  out.probs = zero_shot_predict(enc, enc.encode_image(row_tensor(x.x)), classes.features).row(0);
  out.samples_used = 1;
  out.arm = Arm::ZeroShot;
  return out;
}

Prediction predict_arm(const TrainState& state, const RawExample& x, const ClassSet& classes,
                       const PredictOptions& opts, std::mt19937_64& rng) {
  switch (state.config().arm) {
    case Arm::ZeroShot: return zero_shot_prediction(state.encoders(), x, classes);
    case Arm::TrainingPromptOnly: return baseline_training_prompt_predict(state, x, classes);
    default: return predict(state, x, classes, opts, rng);
  }
}

}  // namespace anyshift
