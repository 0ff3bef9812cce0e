#pragma once

// A miniature contrastive image-text model: an MLP image encoder with a
// one-block prompt mixer, and a small transformer text encoder over a
// synthetic token vocabulary. After pretraining the weights are frozen.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "anyshift/nn.hpp"
#include "anyshift/serialize.hpp"
#include "anyshift/shift_bench.hpp"
#include "anyshift/tensor.hpp"

namespace anyshift {

inline constexpr int kTemplateTokens = 4;  // "an image of a"
inline constexpr int kMaxNameTokens = 4;

/// Tokenized class name: the fixed template followed by name tokens derived
/// from the class identity by seeded stable hashing.
struct ClassName {
  std::string identity;
  std::vector<int> token_ids;
};

std::string fine_class_identity(int c);
std::string superclass_identity(int k);

/// Names for `identities`, distinct token sequences guaranteed within the set.
std::vector<ClassName> make_class_names(const std::vector<std::string>& identities, std::uint64_t seed,
                                        int vocab_size = 64);

struct EncoderConfig {
  int d_x = 64;
  int hidden = 128;
  int d = 32;
  int vocab_size = 64;
  int text_blocks = 2;
  int heads = 4;
  int ffn_hidden = 128;
  int max_tokens = kTemplateTokens + kMaxNameTokens;
  double logit_scale = 20.0;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

/// Mutable weights, used only while pretraining.
struct EncoderWeights {
  Linear img_fc1;
  Linear img_fc2;
  // Prompt mixer; never trained (no prompts exist during pretraining).
  Tensor mix_ln_gain, mix_ln_bias;
  Linear mix_q;
  Tensor mix_k, mix_v, mix_o;  // bias-free
  Tensor token_embedding;  // [vocab x d]
  Tensor position_embedding;  // [max_tokens x d]
  std::vector<AttentionBlockParams> text_blocks;
  Tensor text_ln_gain, text_ln_bias;
  Tensor text_proj;  // [d x d]

  static EncoderWeights init(const EncoderConfig& cfg);
  void register_params(ParamRegistry& reg) const;
  // Only the parameters pretraining updates (the mixer is excluded).
  void register_trainable(ParamRegistry& reg) const;
};

class FrozenEncoders {
 public:
  FrozenEncoders(EncoderConfig cfg, EncoderWeights weights);

  const EncoderConfig& config() const { return cfg_; }
  int width() const { return cfg_.d; }
  double logit_scale() const { return cfg_.logit_scale; }

  /// x: [B x d_x]. prompt_tokens, when given, are [L x d] tokens already in
  /// the image token space and are shared by every row. Returns [B x d],
  /// rows L2-normalized.
  Tensor encode_image(const Tensor& x, const std::optional<Tensor>& prompt_tokens = std::nullopt) const;
  /// Returns [1 x d], L2-normalized.
  Tensor encode_text(const ClassName& name, const std::optional<Tensor>& prompt_tokens = std::nullopt) const;
  /// Rows in the order of `names`.
  Tensor encode_texts(const std::vector<ClassName>& names,
                      const std::optional<Tensor>& prompt_tokens = std::nullopt) const;

  /// FNV-1a over every weight's bytes, in registry order.
  std::uint64_t checksum() const;

  void save(TensorArchive& archive) const;
  static FrozenEncoders load(const TensorArchive& archive);

 private:
  EncoderConfig cfg_;
  EncoderWeights weights_;
  ParamRegistry registry_;
};

/// softmax(logit_scale * class_feats * z) for a single feature row z [1 x d]
/// or a batch [B x d]; class_feats is [C x d].
Tensor zero_shot_logits(double logit_scale, const Tensor& z, const Tensor& class_feats);
Matrix zero_shot_predict(const FrozenEncoders& enc, const Tensor& z, const Tensor& class_feats);

struct PretrainConfig {
  int epochs = 30;
  int batch_size = 64;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const PretrainConfig& c);

struct PretrainResult {
  FrozenEncoders encoders;
  std::vector<double> loss_curve;  // one entry per step
};

/// Symmetric InfoNCE over (image, class-text) pairs.
PretrainResult pretrain_contrastive(const Dataset& pretrain_set, const std::vector<ClassName>& class_names,
                                    const EncoderConfig& enc_cfg, const PretrainConfig& cfg);

/// Stacks example inputs into a [B x d_x] tensor.
Tensor stack_inputs(const Dataset& ds);
Tensor stack_inputs(const std::vector<const RawExample*>& batch);

/// Fraction of examples whose zero-shot argmax equals the label; labels map
/// to rows of `names` through their identities (fine ids).
double zero_shot_accuracy(const FrozenEncoders& enc, const Dataset& ds, const std::vector<ClassName>& names,
                          const std::vector<int>& class_ids);

}  // namespace anyshift
