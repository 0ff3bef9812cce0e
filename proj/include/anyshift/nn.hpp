#pragma once

#include <random>
#include <string>
#include <vector>

#include "anyshift/tensor.hpp"

namespace anyshift {

/// Named handles to trainable tensors. Each tensor is registered exactly
/// once; the order of registration is the optimizer's (and checkpoint's)
/// canonical order.
class ParamRegistry {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
  };

  void add(std::string name, Tensor tensor);
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  void zero_grad();
  std::size_t total_numel() const;

 private:
  std::vector<Entry> entries_;
};

// Weight-init helpers; `std` is the element standard deviation.
Matrix normal_matrix(Index rows, Index cols, double stddev, std::mt19937_64& rng);

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  static Linear init(Index in, Index out, std::mt19937_64& rng, bool with_bias = true);
  static Linear zeros(Index in, Index out, bool with_bias = true);
  Tensor operator()(const Tensor& x) const;
  void register_params(ParamRegistry& reg, const std::string& prefix) const;
  void set_requires_grad(bool on);
};

/// Two linear layers with a GELU in between.
struct Mlp {
  Linear fc1;
  Linear fc2;

  static Mlp init(Index in, Index hidden, Index out, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;
  void register_params(ParamRegistry& reg, const std::string& prefix) const;
  void set_requires_grad(bool on);
};

/// Pre-norm transformer block: x + Attn(LN(x)), then x + FFN(LN(x)), with
/// full bidirectional multi-head attention and a GELU FFN.
struct AttentionBlockParams {
  int heads = 4;
  Tensor ln1_gain, ln1_bias;
  Linear wq, wk, wv, wo;
  Tensor ln2_gain, ln2_bias;
  Mlp ffn;

  static AttentionBlockParams init(Index width, int heads, Index ffn_hidden, std::mt19937_64& rng);
  // Every weight and bias zero; layer-norm gains one.
  static AttentionBlockParams zeros(Index width, int heads, Index ffn_hidden);
  Index width() const { return ln1_gain.numel(); }
  void register_params(ParamRegistry& reg, const std::string& prefix) const;
  void set_requires_grad(bool on);
};

Tensor attention_block(const Tensor& tokens, const AttentionBlockParams& params);

// Same block, with `memory` tokens (prompt tokens) additionally offered as
// keys and values through the block's own key/value/output maps (biases
// omitted) behind a null sink; memory rows are not themselves updated. An
// all-zero memory leaves the output bitwise equal to attention_block.
Tensor attention_block_with_memory(const Tensor& tokens, const Tensor& memory, const AttentionBlockParams& params);

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update applied in place. `step` counts from 1.
template <typename DP, typename DG, typename DM, typename DV>
void adam_step(Eigen::MatrixBase<DP>& param, const Eigen::MatrixBase<DG>& grad, Eigen::MatrixBase<DM>& m,
               Eigen::MatrixBase<DV>& v, const AdamConfig& cfg, long step) {
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
  v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseAbs2();
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  param -= (cfg.lr * (m / bc1).array() / ((v / bc2).array().sqrt() + cfg.eps)).matrix();
}

/// Adam over every tensor of a registry, moments keyed by registry order.
class Adam {
 public:
  Adam() = default;
  Adam(const ParamRegistry& reg, AdamConfig cfg);

  // Applies one update using the gradients currently held by the registry.
  void step(ParamRegistry& reg);
  long steps_taken() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  std::vector<Matrix>& first_moments() { return m_; }
  std::vector<Matrix>& second_moments() { return v_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }
  void set_steps_taken(long t) { t_ = t; }

 private:
  AdamConfig cfg_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long t_ = 0;
};

}  // namespace anyshift
