#pragma once

// Transformer inference network: reads [training prompt; image tokens; text
// tokens] and emits a diagonal Gaussian over the test prompt. One parameter
// set serves both the per-image prior and the batch posterior.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "anyshift/distributions.hpp"
#include "anyshift/nn.hpp"
#include "anyshift/serialize.hpp"
#include "anyshift/tensor.hpp"

namespace anyshift {

struct InferenceNetConfig {
  int prompt_len = 4;      // L
  int prompt_width = 16;   // d_p
  int hidden = 64;         // d_h
  int heads = 4;
  int ffn_hidden = 256;
  int blocks = 2;
  int feature_width = 32;  // d, width of encoder features and encoder tokens
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const InferenceNetConfig& c);
InferenceNetConfig inference_net_config_from_json(const nlohmann::json& j);

// Which token groups the network sees; everything on for the full method.
struct TokenMask {
  bool training_prompt = true;
  bool image = true;
  bool text = true;
};

struct InferenceNetParams {
  InferenceNetConfig cfg;
  Linear prompt_adapter;  // d_p -> d_h
  Linear image_adapter;   // d -> d_h
  Linear text_adapter;    // d -> d_h
  Tensor modality_image;  // [d_h]
  Tensor modality_text;   // [d_h]
  std::vector<AttentionBlockParams> blocks;
  Tensor out_ln_gain, out_ln_bias;
  Mlp head_mu;
  Mlp head_sigma;  // emits log-variance
  Tensor train_prompt_mean;     // [L x d_p]
  Tensor train_prompt_log_var;  // [L x d_p]
  Linear out_proj_image;  // d_p -> d, zero-initialized
  Linear out_proj_text;   // d_p -> d, zero-initialized

  static InferenceNetParams init(const InferenceNetConfig& cfg);
  void register_params(ParamRegistry& reg) const;

  DiagGaussian training_prompt() const;
  Shape prompt_shape() const { return {cfg.prompt_len, cfg.prompt_width}; }

  void save(TensorArchive& archive) const;
  static InferenceNetParams load(const TensorArchive& archive);
};

struct TokenAssembly {
  Tensor tokens;  // [T x d_h]
  int n_prompt = 0;
  int n_image = 0;
  int n_text = 0;
};

/// [adapted prompt; adapted images + image embedding; adapted texts + text
/// embedding]. Masked-out groups are dropped, except the prompt group,
/// which is replaced by zeros so the readout slot always exists.
TokenAssembly assemble_tokens(const InferenceNetParams& params, const Tensor& prompt, const Tensor& image_feats,
                              const Tensor& text_feats, const TokenMask& mask = {});

/// Transformer over an assembly; the first prompt position feeds both heads.
DiagGaussian infer_from_tokens(const InferenceNetParams& params, const TokenAssembly& assembly);

PromptSample sample_training_prompt(const InferenceNetParams& params, const Tensor& noise);

/// Prior of the test prompt from one image feature [1 x d] and all class
/// features [C x d].
DiagGaussian infer_prior(const InferenceNetParams& params, const PromptSample& training_prompt, const Tensor& image_feat,
                         const Tensor& class_feats, const TokenMask& mask = {});

/// Variational posterior from a batch of image features [B x d] and the text
/// features of each example's ground-truth class [B x d].
DiagGaussian infer_posterior(const InferenceNetParams& params, const PromptSample& training_prompt,
                             const Tensor& batch_image_feats, const Tensor& gt_class_feats, const TokenMask& mask = {});

// Prompt [L x d_p] mapped into the image / text encoder token spaces.
Tensor project_image_prompt(const InferenceNetParams& params, const Tensor& prompt);
Tensor project_text_prompt(const InferenceNetParams& params, const Tensor& prompt);

}  // namespace anyshift
