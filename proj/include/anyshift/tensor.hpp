#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Tensor of any rank is stored as a (rows x cols) matrix where
// cols is the last dimension and rows the product of the leading ones.
//
// Recording is explicit: operations are taped only while a Tape is active on
// the calling thread (see TapeScope) and at least one input requires a
// gradient. Without an active tape every op is a plain value computation.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace anyshift {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Shape = std::vector<std::int64_t>;

std::string shape_string(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  Matrix value;
  Matrix grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false);
  Tensor(Shape shape, Matrix value, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor row(const RowVector& v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index numel() const { return node_->value.size(); }

  const Matrix& value() const { return node_->value; }
  // Direct write access for initializers and optimizers; never use on a
  // tensor that a live tape still references.
  Matrix& mutable_value() { return node_->value; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->grad.size() != 0; }
  // Zero matrix of the value's shape when no gradient has been accumulated.
  Matrix grad() const;
  void zero_grad() { node_->grad.resize(0, 0); }

  // Deep copy of value and shape; the copy is a fresh leaf.
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Ordered record of executed operations. Backward replays adjoints in
/// reverse execution order, so repeated replays over identical inputs are
/// bitwise reproducible.
class Tape {
 public:
  void record(std::shared_ptr<detail::Node> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and accumulates into every reachable leaf that
  // requires a gradient. Intermediate gradients are reset first.
  void backward(const Tensor& loss);

  static Tape* active();

 private:
  friend class TapeScope;
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

namespace detail {

// Builds an op result and, when recording, attaches the backward closure.
Tensor make_result(Shape shape, Matrix value, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> backward);
Tensor make_result(Shape shape, Matrix value, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward);

}  // namespace detail

// Element-wise and structural ops.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // Hadamard product
Tensor scale(const Tensor& a, double s);
Tensor exp(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

Tensor matmul(const Tensor& a, const Tensor& b);
// x[R x C] + bias broadcast over rows; bias has C elements.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Column-wise mean over rows: [R x C] -> [1 x C].
Tensor mean_rows(const Tensor& a);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, Index start, Index count);
Tensor gather_rows(const Tensor& a, std::span<const int> indices);

// Softmax over the last dimension.
Tensor softmax(const Tensor& logits);
// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

inline constexpr double kLayerNormEps = 1e-5;
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor l2_normalize_rows(const Tensor& x);

// Scaled dot-product attention with `heads` equal column groups. With
// `null_sink` set, every query also attends to an implicit slot with logit 0
// and a zero value, so an all-zero key/value set contributes exactly nothing.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, bool null_sink = false);

// Attention probabilities for one head (no sink), exposed for inspection.
Matrix attention_probabilities(const Matrix& q, const Matrix& k, int heads, int head);

}  // namespace anyshift
