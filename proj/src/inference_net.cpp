#include "anyshift/inference_net.hpp"

#include "anyshift/errors.hpp"
#include "anyshift/rng.hpp"

namespace anyshift {

nlohmann::json to_json(const InferenceNetConfig& c) {
  return {{"prompt_len", c.prompt_len}, {"prompt_width", c.prompt_width}, {"hidden", c.hidden},
          {"heads", c.heads},           {"ffn_hidden", c.ffn_hidden},     {"blocks", c.blocks},
          {"feature_width", c.feature_width}, {"seed", c.seed}};
}

InferenceNetConfig inference_net_config_from_json(const nlohmann::json& j) {
  InferenceNetConfig c;
  c.prompt_len = j.at("prompt_len").get<int>();
  c.prompt_width = j.at("prompt_width").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ffn_hidden = j.at("ffn_hidden").get<int>();
  c.blocks = j.at("blocks").get<int>();
  c.feature_width = j.at("feature_width").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

InferenceNetParams InferenceNetParams::init(const InferenceNetConfig& cfg) {
  if (cfg.prompt_len < 1 || cfg.prompt_width < 1 || cfg.hidden < 2 || cfg.blocks < 1) {
    throw ConfigError("inference network sizes must be positive", "model");
  }
  auto rng = make_stream(cfg.seed, StreamPurpose::NetInit);
  const Index dh = cfg.hidden;
  const Index out = static_cast<Index>(cfg.prompt_len) * cfg.prompt_width;
  InferenceNetParams p;
  p.cfg = cfg;
  p.prompt_adapter = Linear::init(cfg.prompt_width, dh, rng);
  p.image_adapter = Linear::init(cfg.feature_width, dh, rng);
  p.text_adapter = Linear::init(cfg.feature_width, dh, rng);
  p.modality_image = Tensor(Shape{dh}, normal_matrix(1, dh, 0.1, rng), true);
  p.modality_text = Tensor(Shape{dh}, normal_matrix(1, dh, 0.1, rng), true);
  for (int b = 0; b < cfg.blocks; ++b) p.blocks.push_back(AttentionBlockParams::init(dh, cfg.heads, cfg.ffn_hidden, rng));
  p.out_ln_gain = Tensor(Shape{dh}, Matrix::Ones(1, dh), true);
  p.out_ln_bias = Tensor::zeros({dh}, true);
  p.head_mu = Mlp::init(dh, dh, out, rng);
  p.head_sigma = Mlp::init(dh, dh, out, rng);
  p.head_sigma.fc2.bias.mutable_value().setConstant(-4.0);
  p.train_prompt_mean = Tensor(Shape{cfg.prompt_len, cfg.prompt_width},
                               normal_matrix(cfg.prompt_len, cfg.prompt_width, 0.02, rng), true);
  p.train_prompt_log_var = Tensor(Shape{cfg.prompt_len, cfg.prompt_width},
                                  Matrix::Constant(cfg.prompt_len, cfg.prompt_width, -4.0), true);
  p.out_proj_image = Linear::zeros(cfg.prompt_width, cfg.feature_width);
  p.out_proj_text = Linear::zeros(cfg.prompt_width, cfg.feature_width);
  return p;
}

void InferenceNetParams::register_params(ParamRegistry& reg) const {
  prompt_adapter.register_params(reg, "net.adapter.prompt");
  image_adapter.register_params(reg, "net.adapter.image");
  text_adapter.register_params(reg, "net.adapter.text");
  reg.add("net.modality.image", modality_image);
  reg.add("net.modality.text", modality_text);
  for (std::size_t b = 0; b < blocks.size(); ++b) blocks[b].register_params(reg, "net.block" + std::to_string(b));
  reg.add("net.out_ln.gain", out_ln_gain);
  reg.add("net.out_ln.bias", out_ln_bias);
  head_mu.register_params(reg, "net.head_mu");
  head_sigma.register_params(reg, "net.head_sigma");
  reg.add("prompt.train.mean", train_prompt_mean);
  reg.add("prompt.train.log_var", train_prompt_log_var);
  out_proj_image.register_params(reg, "prompt.proj.image");
  out_proj_text.register_params(reg, "prompt.proj.text");
}

DiagGaussian InferenceNetParams::training_prompt() const { return {train_prompt_mean, train_prompt_log_var}; }

void InferenceNetParams::save(TensorArchive& archive) const {
  archive.header["inference_net"] = to_json(cfg);
  ParamRegistry reg;
  register_params(reg);
  for (const auto& e : reg.entries()) archive.add("net/" + e.name, e.tensor);
}

InferenceNetParams InferenceNetParams::load(const TensorArchive& archive) {
  if (!archive.header.contains("inference_net")) throw InputError("checkpoint has no inference network section");
  InferenceNetParams p = init(inference_net_config_from_json(archive.header["inference_net"]));
  ParamRegistry reg;
  p.register_params(reg);
  for (const auto& e : reg.entries()) {
    const Tensor& stored = archive.get("net/" + e.name);
    if (stored.shape() != e.tensor.shape()) {
      throw DimensionError("checkpoint tensor net/" + e.name + " has shape " + shape_string(stored.shape()));
    }
    Tensor t = e.tensor;
    t.mutable_value() = stored.value();
  }
  return p;
}

TokenAssembly assemble_tokens(const InferenceNetParams& p, const Tensor& prompt, const Tensor& image_feats,
                              const Tensor& text_feats, const TokenMask& mask) {
  const auto& cfg = p.cfg;
  if (prompt.rows() != cfg.prompt_len || prompt.cols() != cfg.prompt_width) {
    throw DimensionError("assemble_tokens: prompt " + shape_string(prompt.shape()) + " vs expected [" +
                         std::to_string(cfg.prompt_len) + "x" + std::to_string(cfg.prompt_width) + "]");
  }
  for (const Tensor* f : {&image_feats, &text_feats}) {
    if (f->cols() != cfg.feature_width) {
      throw DimensionError("assemble_tokens: feature " + shape_string(f->shape()) + " vs width " +
                           std::to_string(cfg.feature_width));
    }
  }
  TokenAssembly a;
  std::vector<Tensor> parts;
  parts.push_back(p.prompt_adapter(mask.training_prompt ? prompt : Tensor::zeros(prompt.shape())));
  a.n_prompt = cfg.prompt_len;
  if (mask.image) {
    parts.push_back(add_bias(p.image_adapter(image_feats), p.modality_image));
    a.n_image = static_cast<int>(image_feats.rows());
  }
  if (mask.text) {
    parts.push_back(add_bias(p.text_adapter(text_feats), p.modality_text));
    a.n_text = static_cast<int>(text_feats.rows());
  }
  a.tokens = concat_rows(parts);
  return a;
}

DiagGaussian infer_from_tokens(const InferenceNetParams& p, const TokenAssembly& assembly) {
  Tensor x = assembly.tokens;
  for (const auto& block : p.blocks) x = attention_block(x, block);
  const Tensor readout = layer_norm(slice_rows(x, 0, 1), p.out_ln_gain, p.out_ln_bias);
  const Shape shape = p.prompt_shape();
  return {reshape(p.head_mu(readout), shape), reshape(p.head_sigma(readout), shape)};
}

PromptSample sample_training_prompt(const InferenceNetParams& params, const Tensor& noise) {
  return sample_reparam(params.training_prompt(), noise, PromptSource::Training);
}

DiagGaussian infer_prior(const InferenceNetParams& params, const PromptSample& training_prompt, const Tensor& image_feat,
                         const Tensor& class_feats, const TokenMask& mask) {
  if (class_feats.rows() == 0) throw InputError("infer_prior: no class features");
  if (image_feat.rows() != 1) throw DimensionError("infer_prior: expected one image feature, got " + shape_string(image_feat.shape()));
  return infer_from_tokens(params, assemble_tokens(params, training_prompt.value, image_feat, class_feats, mask));
}

DiagGaussian infer_posterior(const InferenceNetParams& params, const PromptSample& training_prompt,
                             const Tensor& batch_image_feats, const Tensor& gt_class_feats, const TokenMask& mask) {
  if (batch_image_feats.rows() == 0) throw InputError("infer_posterior: empty batch");
  if (gt_class_feats.rows() != batch_image_feats.rows()) {
    throw DimensionError("infer_posterior: " + shape_string(batch_image_feats.shape()) + " images vs " +
                         shape_string(gt_class_feats.shape()) + " label features");
  }
  return infer_from_tokens(params, assemble_tokens(params, training_prompt.value, batch_image_feats, gt_class_feats, mask));
}

Tensor project_image_prompt(const InferenceNetParams& params, const Tensor& prompt) {
  return params.out_proj_image(prompt);
}

Tensor project_text_prompt(const InferenceNetParams& params, const Tensor& prompt) {
  return params.out_proj_text(prompt);
}

}  // namespace anyshift
