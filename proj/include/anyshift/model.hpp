#pragma once

// The end-to-end prompt model: the variational training objective (cross
// entropy under a posterior prompt sample plus KL to the per-image priors)
// and the Monte-Carlo predictor over training- and test-prompt samples.

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "anyshift/distributions.hpp"
#include "anyshift/encoders.hpp"
#include "anyshift/inference_net.hpp"
#include "anyshift/nn.hpp"

namespace anyshift {

/// Ablation arms. Full is the method; the others remove one ingredient.
enum class Arm { ZeroShot, TrainingPromptOnly, NoTrainingPrompt, NoText, NoImage, Full };

std::string to_string(Arm arm);
Arm arm_from_string(const std::string& s);
std::vector<Arm> all_arms();
TokenMask token_mask(Arm arm);

/// Class names of a task with their no-prompt text features cached.
struct ClassSet {
  std::vector<int> label_ids;  // label id of each row
  std::vector<ClassName> names;
  Tensor features;  // [C x d], no prompt

  int size() const { return static_cast<int>(label_ids.size()); }
  // Row of a label id, or -1.
  int index_of(int label) const;
};

ClassSet make_class_set(const FrozenEncoders& enc, std::vector<int> label_ids, std::vector<ClassName> names);

struct ModelConfig {
  InferenceNetConfig net;
  AdamConfig adam;
  double kl_weight = 1.0;
  Arm arm = Arm::Full;
};

class TrainState {
 public:
  TrainState(std::shared_ptr<const FrozenEncoders> encoders, const ModelConfig& cfg);
  TrainState(std::shared_ptr<const FrozenEncoders> encoders, const ModelConfig& cfg, InferenceNetParams net);
  TrainState(const TrainState&) = delete;
  TrainState& operator=(const TrainState&) = delete;

  const FrozenEncoders& encoders() const { return *encoders_; }
  std::shared_ptr<const FrozenEncoders> shared_encoders() const { return encoders_; }
  const ModelConfig& config() const { return cfg_; }
  const InferenceNetParams& net() const { return net_; }
  InferenceNetParams& net() { return net_; }
  ParamRegistry& registry() { return registry_; }
  const ParamRegistry& registry() const { return registry_; }
  Adam& optimizer() { return adam_; }
  const Adam& optimizer() const { return adam_; }

 private:
  std::shared_ptr<const FrozenEncoders> encoders_;
  ModelConfig cfg_;
  InferenceNetParams net_;
  ParamRegistry registry_;
  Adam adam_;
};

struct LossBreakdown {
  Tensor loss;  // differentiable total
  double total = 0.0;
  double ce = 0.0;
  double kl = 0.0;
  double kl_weight = 1.0;
};

/// Standard-normal draws consumed by one training step.
struct TrainNoise {
  Matrix training_prompt;  // [L x d_p]
  Matrix posterior;        // [L x d_p]
};

TrainNoise draw_train_noise(const InferenceNetConfig& cfg, std::mt19937_64& rng);

/// Builds the training loss on a batch. Must run inside a TapeScope for
/// gradients. For the TrainingPromptOnly arm the loss is the cross entropy
/// of the injected training-prompt sample, with kl = 0.
LossBreakdown forward_train(const TrainState& state, const std::vector<const RawExample*>& batch,
                            const ClassSet& classes, const TrainNoise& noise);

struct PredictOptions {
  int n_s = 4;
  int n_t = 4;
  bool zero_noise = false;
  // When set, every training-prompt draw is replaced by this [L x d_p] value.
  std::optional<Matrix> fixed_training_prompt;
};

struct Prediction {
  RowVector probs;  // [C]
  int n_s = 0;
  int n_t = 0;
  int samples_used = 0;
  Arm arm = Arm::Full;
};

/// Probabilities of one example with `prompt` injected into both encoders.
RowVector predict_with_prompt(const TrainState& state, const RawExample& x, const ClassSet& classes,
                              const Matrix& prompt);

/// Mean probabilities over n_s training-prompt samples times n_t test-prompt
/// samples from the per-image prior.
Prediction predict(const TrainState& state, const RawExample& x, const ClassSet& classes, const PredictOptions& opts,
                   std::mt19937_64& rng);

/// Control arm: the training prompt injected directly, no inference network.
/// Deterministic variant uses the prompt mean.
Prediction baseline_training_prompt_predict(const TrainState& state, const RawExample& x, const ClassSet& classes);

/// Zero-shot probabilities with no prompt.
Prediction zero_shot_prediction(const FrozenEncoders& enc, const RawExample& x, const ClassSet& classes);

/// Dispatches on the state's arm.
Prediction predict_arm(const TrainState& state, const RawExample& x, const ClassSet& classes,
                       const PredictOptions& opts, std::mt19937_64& rng);

}  // namespace anyshift
