#include "anyshift/encoders.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>
#include <set>

#include "anyshift/errors.hpp"
#include "anyshift/kernels.hpp"
#include "anyshift/rng.hpp"

namespace anyshift {

std::string fine_class_identity(int c) { return "class_" + std::to_string(c); }
std::string superclass_identity(int k) { return "super_" + std::to_string(k); }

namespace {

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<int> name_tokens(const std::string& identity, std::uint64_t seed, std::uint64_t salt, int vocab) {
  std::uint64_t h = splitmix64(fnv1a(identity.data(), identity.size()) ^ splitmix64(seed) ^ (salt * 0x9e37ULL));
  const int len = 2 + static_cast<int>(h % (kMaxNameTokens - 1));
  std::vector<int> ids(static_cast<std::size_t>(kTemplateTokens));
  std::iota(ids.begin(), ids.end(), 0);
  for (int i = 0; i < len; ++i) {
    h = splitmix64(h);
    ids.push_back(kTemplateTokens + static_cast<int>(h % static_cast<std::uint64_t>(vocab - kTemplateTokens)));
  }
  return ids;
}

}  // namespace

std::vector<ClassName> make_class_names(const std::vector<std::string>& identities, std::uint64_t seed,
                                        int vocab_size) {
  if (vocab_size <= kTemplateTokens + 1) throw ConfigError("vocabulary too small for class names", "encoder.vocab_size");
  std::vector<ClassName> out;
  std::set<std::vector<int>> used;
  for (const auto& id : identities) {
    std::uint64_t salt = 0;
    std::vector<int> tokens = name_tokens(id, seed, salt, vocab_size);
    while (used.count(tokens)) tokens = name_tokens(id, seed, ++salt, vocab_size);
    used.insert(tokens);
    out.push_back({id, std::move(tokens)});
  }
  return out;
}

nlohmann::json to_json(const EncoderConfig& c) {
  return {{"d_x", c.d_x},           {"hidden", c.hidden},         {"d", c.d},
          {"vocab_size", c.vocab_size}, {"text_blocks", c.text_blocks}, {"heads", c.heads},
          {"ffn_hidden", c.ffn_hidden}, {"max_tokens", c.max_tokens}, {"logit_scale", c.logit_scale},
          {"seed", c.seed}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.d_x = j.at("d_x").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.d = j.at("d").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.text_blocks = j.at("text_blocks").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ffn_hidden = j.at("ffn_hidden").get<int>();
  c.max_tokens = j.at("max_tokens").get<int>();
  c.logit_scale = j.at("logit_scale").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

nlohmann::json to_json(const PretrainConfig& c) {
  return {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr}, {"seed", c.seed}};
}

EncoderWeights EncoderWeights::init(const EncoderConfig& cfg) {
  auto rng = make_stream(cfg.seed, StreamPurpose::EncoderInit);
  const Index d = cfg.d;
  EncoderWeights w;
  w.img_fc1 = Linear::init(cfg.d_x, cfg.hidden, rng);
  w.img_fc2 = Linear::init(cfg.hidden, d, rng);
  w.mix_ln_gain = Tensor(Shape{d}, Matrix::Ones(1, d), true);
  w.mix_ln_bias = Tensor::zeros({d}, true);
  w.mix_q = Linear::init(d, d, rng);
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  w.mix_k = Tensor(normal_matrix(d, d, s, rng), true);
  w.mix_v = Tensor(normal_matrix(d, d, s, rng), true);
  w.mix_o = Tensor(normal_matrix(d, d, s, rng), true);
  w.token_embedding = Tensor(normal_matrix(cfg.vocab_size, d, 1.0, rng), true);
  w.position_embedding = Tensor(normal_matrix(cfg.max_tokens, d, 0.1, rng), true);
  for (int b = 0; b < cfg.text_blocks; ++b) w.text_blocks.push_back(AttentionBlockParams::init(d, cfg.heads, cfg.ffn_hidden, rng));
  w.text_ln_gain = Tensor(Shape{d}, Matrix::Ones(1, d), true);
  w.text_ln_bias = Tensor::zeros({d}, true);
  w.text_proj = Tensor(normal_matrix(d, d, s, rng), true);
  return w;
}

void EncoderWeights::register_trainable(ParamRegistry& reg) const {
  img_fc1.register_params(reg, "image.fc1");
  img_fc2.register_params(reg, "image.fc2");
  reg.add("text.token_embedding", token_embedding);
  reg.add("text.position_embedding", position_embedding);
  for (std::size_t b = 0; b < text_blocks.size(); ++b) text_blocks[b].register_params(reg, "text.block" + std::to_string(b));
  reg.add("text.ln_final.gain", text_ln_gain);
  reg.add("text.ln_final.bias", text_ln_bias);
  reg.add("text.proj", text_proj);
}

void EncoderWeights::register_params(ParamRegistry& reg) const {
  register_trainable(reg);
  reg.add("image.mixer.ln.gain", mix_ln_gain);
  reg.add("image.mixer.ln.bias", mix_ln_bias);
  mix_q.register_params(reg, "image.mixer.q");
  reg.add("image.mixer.k", mix_k);
  reg.add("image.mixer.v", mix_v);
  reg.add("image.mixer.o", mix_o);
}

FrozenEncoders::FrozenEncoders(EncoderConfig cfg, EncoderWeights weights)
    : cfg_(cfg), weights_(std::move(weights)) {
  ParamRegistry source;
  weights_.register_params(source);
  for (const auto& e : source.entries()) {
    Tensor t = e.tensor;
    t.set_requires_grad(false);
    t.zero_grad();
  }
  weights_.register_params(registry_);
}

namespace {

Tensor image_forward(const EncoderWeights& w, const EncoderConfig& cfg, const Tensor& x,
                     const std::optional<Tensor>& prompt_tokens) {
  if (x.cols() != cfg.d_x) {
    throw DimensionError("encode_image: input " + shape_string(x.shape()) + " vs d_x " + std::to_string(cfg.d_x));
  }
  Tensor h = w.img_fc2(gelu(w.img_fc1(x)));
  if (prompt_tokens) {
    const Tensor& p = *prompt_tokens;
    if (p.cols() != cfg.d) {
      throw DimensionError("encode_image: prompt tokens " + shape_string(p.shape()) + " vs token width " +
                           std::to_string(cfg.d));
    }
    const Tensor q = w.mix_q(layer_norm(h, w.mix_ln_gain, w.mix_ln_bias));
    const Tensor mixed = attention(q, matmul(p, w.mix_k), matmul(p, w.mix_v), cfg.heads, true);
    h = add(h, matmul(mixed, w.mix_o));
  }
  return l2_normalize_rows(h);
}

Tensor text_forward(const EncoderWeights& w, const EncoderConfig& cfg, const ClassName& name,
                    const std::optional<Tensor>& prompt_tokens) {
  if (name.token_ids.empty()) throw InputError("encode_text: empty token sequence for '" + name.identity + "'");
  if (static_cast<int>(name.token_ids.size()) > cfg.max_tokens) {
    throw InputError("encode_text: '" + name.identity + "' exceeds " + std::to_string(cfg.max_tokens) + " tokens");
  }
  if (prompt_tokens && prompt_tokens->cols() != cfg.d) {
    throw DimensionError("encode_text: prompt tokens " + shape_string(prompt_tokens->shape()) + " vs token width " +
                         std::to_string(cfg.d));
  }
  const auto n = static_cast<Index>(name.token_ids.size());
  Tensor x = add(gather_rows(w.token_embedding, name.token_ids), slice_rows(w.position_embedding, 0, n));
  for (const auto& block : w.text_blocks) {
    x = prompt_tokens ? attention_block_with_memory(x, *prompt_tokens, block) : attention_block(x, block);
  }
  x = layer_norm(x, w.text_ln_gain, w.text_ln_bias);
  return l2_normalize_rows(matmul(mean_rows(x), w.text_proj));
}

Tensor texts_forward(const EncoderWeights& w, const EncoderConfig& cfg, const std::vector<ClassName>& names,
                     const std::optional<Tensor>& prompt_tokens) {
  if (names.empty()) throw InputError("encode_texts: no class names");
  std::vector<Tensor> rows;
  rows.reserve(names.size());
  for (const auto& n : names) rows.push_back(text_forward(w, cfg, n, prompt_tokens));
  return rows.size() == 1 ? rows.front() : concat_rows(rows);
}

}  // namespace

Tensor FrozenEncoders::encode_image(const Tensor& x, const std::optional<Tensor>& prompt_tokens) const {
  return image_forward(weights_, cfg_, x, prompt_tokens);
}

Tensor FrozenEncoders::encode_text(const ClassName& name, const std::optional<Tensor>& prompt_tokens) const {
  return text_forward(weights_, cfg_, name, prompt_tokens);
}

Tensor FrozenEncoders::encode_texts(const std::vector<ClassName>& names,
                                    const std::optional<Tensor>& prompt_tokens) const {
  return texts_forward(weights_, cfg_, names, prompt_tokens);
}

std::uint64_t FrozenEncoders::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& e : registry_.entries()) {
    h = fnv1a(e.name.data(), e.name.size(), h);
    const Matrix& v = e.tensor.value();
    h = fnv1a(v.data(), static_cast<std::size_t>(v.size()) * sizeof(double), h);
  }
  return h;
}

void FrozenEncoders::save(TensorArchive& archive) const {
  archive.header["encoders"] = to_json(cfg_);
  for (const auto& e : registry_.entries()) archive.add("encoders/" + e.name, e.tensor);
}

FrozenEncoders FrozenEncoders::load(const TensorArchive& archive) {
  if (!archive.header.contains("encoders")) throw InputError("checkpoint has no encoder section");
  const EncoderConfig cfg = encoder_config_from_json(archive.header["encoders"]);
  EncoderWeights w = EncoderWeights::init(cfg);
  ParamRegistry reg;
  w.register_params(reg);
  for (const auto& e : reg.entries()) {
    const Tensor& stored = archive.get("encoders/" + e.name);
    if (stored.shape() != e.tensor.shape()) {
      throw DimensionError("checkpoint tensor encoders/" + e.name + " has shape " + shape_string(stored.shape()));
    }
    Tensor t = e.tensor;
    t.mutable_value() = stored.value();
  }
  return FrozenEncoders(cfg, std::move(w));
}

Tensor zero_shot_logits(double logit_scale, const Tensor& z, const Tensor& class_feats) {
  if (class_feats.rows() == 0) throw InputError("zero_shot_predict: no classes");
  if (z.cols() != class_feats.cols()) {
    throw DimensionError("zero_shot_predict: feature " + shape_string(z.shape()) + " vs classes " +
                         shape_string(class_feats.shape()));
  }
  return scale(matmul(z, transpose(class_feats)), logit_scale);
}

Matrix zero_shot_predict(const FrozenEncoders& enc, const Tensor& z, const Tensor& class_feats) {
  return softmax(zero_shot_logits(enc.logit_scale(), z, class_feats)).value();
}

Tensor stack_inputs(const std::vector<const RawExample*>& batch) {
  if (batch.empty()) throw InputError("stack_inputs: empty batch");
  Matrix x(static_cast<Index>(batch.size()), batch.front()->x.size());
  for (std::size_t i = 0; i < batch.size(); ++i) x.row(static_cast<Index>(i)) = batch[i]->x;
  return Tensor(std::move(x));
}

Tensor stack_inputs(const Dataset& ds) {
  std::vector<const RawExample*> ptrs;
  ptrs.reserve(ds.size());
  for (const auto& ex : ds) ptrs.push_back(&ex);
  return stack_inputs(ptrs);
}

double zero_shot_accuracy(const FrozenEncoders& enc, const Dataset& ds, const std::vector<ClassName>& names,
                          const std::vector<int>& class_ids) {
  if (ds.empty()) return 0.0;
  const Tensor t = enc.encode_texts(names);
  const Matrix probs = zero_shot_predict(enc, enc.encode_image(stack_inputs(ds)), t);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Index best = 0;
    probs.row(static_cast<Index>(i)).maxCoeff(&best);
    if (class_ids[static_cast<std::size_t>(best)] == ds[i].y) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

PretrainResult pretrain_contrastive(const Dataset& pretrain_set, const std::vector<ClassName>& class_names,
                                    const EncoderConfig& enc_cfg, const PretrainConfig& cfg) {
  if (class_names.size() < 2) throw ConfigError("pretraining needs at least 2 classes", "pretrain.classes");
  std::set<int> seen;
  for (const auto& ex : pretrain_set) {
    if (ex.y < 0 || ex.y >= static_cast<int>(class_names.size())) {
      throw IndexError("pretrain: label " + std::to_string(ex.y) + " has no class name");
    }
    seen.insert(ex.y);
  }
  if (seen.size() < 2) throw ConfigError("pretraining set covers fewer than 2 classes", "pretrain.classes");
  if (cfg.batch_size < 2) throw ConfigError("pretraining batch size must be >= 2", "pretrain.batch_size");

  EncoderWeights w = EncoderWeights::init(enc_cfg);
  ParamRegistry reg;
  w.register_trainable(reg);
  Adam adam(reg, AdamConfig{cfg.lr});
  std::vector<double> curve;

  std::vector<std::size_t> order(pretrain_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto rng = make_stream(cfg.seed, StreamPurpose::Pretrain, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start + 1 < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const RawExample*> batch;
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&pretrain_set[order[i]]);
        labels.push_back(pretrain_set[order[i]].y);
      }
      if (batch.size() < 2) continue;
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        const Tensor z = image_forward(w, enc_cfg, stack_inputs(batch), std::nullopt);
        const Tensor t = gather_rows(texts_forward(w, enc_cfg, class_names, std::nullopt), labels);
        const Tensor logits = scale(matmul(z, transpose(t)), enc_cfg.logit_scale);
        std::vector<int> diag(batch.size());
        std::iota(diag.begin(), diag.end(), 0);
        loss = scale(add(cross_entropy(logits, diag), cross_entropy(transpose(logits), diag)), 0.5);
      }
      reg.zero_grad();
      tape.backward(loss);
      adam.step(reg);
      curve.push_back(loss.item());
    }
  }
  reg.zero_grad();
  return {FrozenEncoders(enc_cfg, std::move(w)), std::move(curve)};
}

}  // namespace anyshift
