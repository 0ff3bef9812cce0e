#include "anyshift/nn.hpp"

#include <cmath>

#include "anyshift/errors.hpp"

namespace anyshift {

void ParamRegistry::add(std::string name, Tensor tensor) {
  for (const auto& e : entries_) {
    if (e.tensor.node() == tensor.node()) throw ConfigError("parameter registered twice: " + name, name);
    if (e.name == name) throw ConfigError("duplicate parameter name: " + name, name);
  }
  entries_.push_back({std::move(name), std::move(tensor)});
}

void ParamRegistry::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

std::size_t ParamRegistry::total_numel() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += static_cast<std::size_t>(e.tensor.numel());
  return n;
}

Matrix normal_matrix(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Linear Linear::init(Index in, Index out, std::mt19937_64& rng, bool with_bias) {
  Linear l;
  l.weight = Tensor(normal_matrix(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng), true);
  if (with_bias) l.bias = Tensor::zeros({static_cast<std::int64_t>(out)}, true);
  return l;
}

Linear Linear::zeros(Index in, Index out, bool with_bias) {
  Linear l;
  l.weight = Tensor(Matrix::Zero(in, out), true);
  if (with_bias) l.bias = Tensor::zeros({static_cast<std::int64_t>(out)}, true);
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add_bias(y, bias) : y;
}

void Linear::register_params(ParamRegistry& reg, const std::string& prefix) const {
  reg.add(prefix + ".weight", weight);
  if (bias.defined()) reg.add(prefix + ".bias", bias);
}

void Linear::set_requires_grad(bool on) {
  weight.set_requires_grad(on);
  if (bias.defined()) bias.set_requires_grad(on);
}

Mlp Mlp::init(Index in, Index hidden, Index out, std::mt19937_64& rng) {
  return {Linear::init(in, hidden, rng), Linear::init(hidden, out, rng)};
}

Tensor Mlp::operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }

void Mlp::register_params(ParamRegistry& reg, const std::string& prefix) const {
  fc1.register_params(reg, prefix + ".fc1");
  fc2.register_params(reg, prefix + ".fc2");
}

void Mlp::set_requires_grad(bool on) {
  fc1.set_requires_grad(on);
  fc2.set_requires_grad(on);
}

namespace {

Tensor ones_row(Index n) { return Tensor(Shape{static_cast<std::int64_t>(n)}, Matrix::Ones(1, n), true); }

}  // namespace

AttentionBlockParams AttentionBlockParams::init(Index width, int heads, Index ffn_hidden, std::mt19937_64& rng) {
  if (heads < 1 || width % heads != 0) {
    throw DimensionError("attention block: width " + std::to_string(width) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  AttentionBlockParams p;
  p.heads = heads;
  p.ln1_gain = ones_row(width);
  p.ln1_bias = Tensor::zeros({static_cast<std::int64_t>(width)}, true);
  p.wq = Linear::init(width, width, rng);
  p.wk = Linear::init(width, width, rng);
  p.wv = Linear::init(width, width, rng);
  p.wo = Linear::init(width, width, rng);
  p.ln2_gain = ones_row(width);
  p.ln2_bias = Tensor::zeros({static_cast<std::int64_t>(width)}, true);
  p.ffn = Mlp::init(width, ffn_hidden, width, rng);
  return p;
}

AttentionBlockParams AttentionBlockParams::zeros(Index width, int heads, Index ffn_hidden) {
  AttentionBlockParams p;
  p.heads = heads;
  p.ln1_gain = ones_row(width);
  p.ln1_bias = Tensor::zeros({static_cast<std::int64_t>(width)}, true);
  p.wq = Linear::zeros(width, width);
  p.wk = Linear::zeros(width, width);
  p.wv = Linear::zeros(width, width);
  p.wo = Linear::zeros(width, width);
  p.ln2_gain = ones_row(width);
  p.ln2_bias = Tensor::zeros({static_cast<std::int64_t>(width)}, true);
  p.ffn = {Linear::zeros(width, ffn_hidden), Linear::zeros(ffn_hidden, width)};
  return p;
}

void AttentionBlockParams::register_params(ParamRegistry& reg, const std::string& prefix) const {
  reg.add(prefix + ".ln1.gain", ln1_gain);
  reg.add(prefix + ".ln1.bias", ln1_bias);
  wq.register_params(reg, prefix + ".attn.q");
  wk.register_params(reg, prefix + ".attn.k");
  wv.register_params(reg, prefix + ".attn.v");
  wo.register_params(reg, prefix + ".attn.o");
  reg.add(prefix + ".ln2.gain", ln2_gain);
  reg.add(prefix + ".ln2.bias", ln2_bias);
  ffn.register_params(reg, prefix + ".ffn");
}

void AttentionBlockParams::set_requires_grad(bool on) {
  for (Tensor* t : {&ln1_gain, &ln1_bias, &ln2_gain, &ln2_bias}) t->set_requires_grad(on);
  for (Linear* l : {&wq, &wk, &wv, &wo}) l->set_requires_grad(on);
  ffn.set_requires_grad(on);
}

namespace {

void check_block_input(const Tensor& tokens, const AttentionBlockParams& p) {
  if (tokens.rows() < 1) throw DimensionError("attention_block: empty token sequence");
  if (tokens.cols() != p.width()) {
    throw DimensionError("attention_block: tokens " + shape_string(tokens.shape()) + " vs block width " +
                         std::to_string(p.width()));
  }
}

Tensor feed_forward_half(const Tensor& x, const AttentionBlockParams& p) {
  return add(x, p.ffn(layer_norm(x, p.ln2_gain, p.ln2_bias)));
}

}  // namespace

Tensor attention_block(const Tensor& tokens, const AttentionBlockParams& p) {
  check_block_input(tokens, p);
  const Tensor h = layer_norm(tokens, p.ln1_gain, p.ln1_bias);
  const Tensor a = attention(p.wq(h), p.wk(h), p.wv(h), p.heads);
  return feed_forward_half(add(tokens, p.wo(a)), p);
}

Tensor attention_block_with_memory(const Tensor& tokens, const Tensor& memory, const AttentionBlockParams& p) {
  check_block_input(tokens, p);
  if (memory.cols() != p.width()) {
    throw DimensionError("attention_block: memory " + shape_string(memory.shape()) + " vs block width " +
                         std::to_string(p.width()));
  }
  const Tensor h = layer_norm(tokens, p.ln1_gain, p.ln1_bias);
  const Tensor q = p.wq(h);
  const Tensor self = p.wo(attention(q, p.wk(h), p.wv(h), p.heads));
  const Tensor mem = matmul(attention(q, matmul(memory, p.wk.weight), matmul(memory, p.wv.weight), p.heads, true),
                            p.wo.weight);
  return feed_forward_half(add(add(tokens, self), mem), p);
}

Adam::Adam(const ParamRegistry& reg, AdamConfig cfg) : cfg_(cfg) {
  for (const auto& e : reg.entries()) {
    m_.push_back(Matrix::Zero(e.tensor.rows(), e.tensor.cols()));
    v_.push_back(Matrix::Zero(e.tensor.rows(), e.tensor.cols()));
  }
}

void Adam::step(ParamRegistry& reg) {
  if (reg.size() != m_.size()) throw ConfigError("adam: registry changed size since construction");
  ++t_;
  for (std::size_t i = 0; i < m_.size(); ++i) {
    Tensor p = reg.entries()[i].tensor;  // shares storage
    const Matrix g = p.grad();
    adam_step(p.mutable_value(), g, m_[i], v_[i], cfg_, t_);
  }
}

}  // namespace anyshift
