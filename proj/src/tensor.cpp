#include "anyshift/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "anyshift/errors.hpp"
#include "anyshift/kernels.hpp"

namespace anyshift {

namespace {

thread_local Tape* g_active_tape = nullptr;

Index rows_of(const Shape& shape) {
  if (shape.size() < 2) return 1;
  return static_cast<Index>(std::accumulate(shape.begin(), shape.end() - 1, std::int64_t{1},
                                            std::multiplies<>()));
}

Index cols_of(const Shape& shape) { return shape.empty() ? 1 : static_cast<Index>(shape.back()); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_finite(const Matrix& m, const char* op) {
  if (!m.allFinite()) throw NumericError(std::string(op) + ": non-finite input");
}

Shape matrix_shape(Index r, Index c) { return {static_cast<std::int64_t>(r), static_cast<std::int64_t>(c)}; }

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

void detail::Node::accumulate(const Matrix& g) {
  if (!requires_grad) return;
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->shape = matrix_shape(value.rows(), value.cols());
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, Matrix value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  if (shape_numel(shape) != value.size()) {
    throw DimensionError("tensor: shape " + shape_string(shape) + " does not match " +
                         std::to_string(value.size()) + " values");
  }
  if (value.rows() != rows_of(shape) || value.cols() != cols_of(shape)) {
    value = Eigen::Map<Matrix>(value.data(), rows_of(shape), cols_of(shape)).eval();
  }
  node_->shape = std::move(shape);
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Matrix v = Matrix::Zero(rows_of(shape), cols_of(shape));
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Tensor(Shape{}, std::move(m), requires_grad);
}

Tensor Tensor::row(const RowVector& v, bool requires_grad) {
  return Tensor(Shape{static_cast<std::int64_t>(v.size())}, Matrix(v), requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item: tensor has shape " + shape_string(shape()));
  return node_->value(0, 0);
}

Matrix Tensor::grad() const {
  if (has_grad()) return node_->grad;
  return Matrix::Zero(rows(), cols());
}

Tensor Tensor::detach() const { return Tensor(shape(), value(), false); }

Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) throw DimensionError("backward: loss must be scalar, got " + shape_string(loss.shape()));
  for (auto& n : nodes_) n->grad.resize(0, 0);
  if (!loss.requires_grad()) return;
  loss.node()->grad = Matrix::Ones(1, 1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node& n = **it;
    if (n.grad.size() == 0 || !n.backward) continue;
    n.backward(n);
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tensor detail::make_result(Shape shape, Matrix value, const std::vector<Tensor>& inputs,
                           std::function<void(Node&)> backward) {
  Tensor out(std::move(shape), std::move(value), false);
  Tape* tape = g_active_tape;
  if (tape == nullptr) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  Node* n = out.node();
  n->requires_grad = true;
  n->inputs.reserve(inputs.size());
  for (const auto& t : inputs) n->inputs.push_back(t.node_ptr());
  n->backward = std::move(backward);
  tape->record(out.node_ptr());
  return out;
}

Tensor detail::make_result(Shape shape, Matrix value, std::initializer_list<Tensor> inputs,
                           std::function<void(Node&)> backward) {
  return make_result(std::move(shape), std::move(value), std::vector<Tensor>(inputs), std::move(backward));
}

using detail::make_result;
using detail::Node;

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return make_result(a.shape(), a.value() + b.value(), {a, b}, [](Node& o) {
    o.inputs[0]->accumulate(o.grad);
    o.inputs[1]->accumulate(o.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  return make_result(a.shape(), a.value() - b.value(), {a, b}, [](Node& o) {
    o.inputs[0]->accumulate(o.grad);
    o.inputs[1]->accumulate(-o.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  return make_result(a.shape(), a.value().cwiseProduct(b.value()), {a, b}, [](Node& o) {
    o.inputs[0]->accumulate(o.grad.cwiseProduct(o.inputs[1]->value));
    o.inputs[1]->accumulate(o.grad.cwiseProduct(o.inputs[0]->value));
  });
}

Tensor scale(const Tensor& a, double s) {
  return make_result(a.shape(), a.value() * s, {a}, [s](Node& o) { o.inputs[0]->accumulate(o.grad * s); });
}

Tensor exp(const Tensor& a) {
  Matrix v = a.value().array().exp().matrix();
  return make_result(a.shape(), v, {a}, [](Node& o) { o.inputs[0]->accumulate(o.grad.cwiseProduct(o.value)); });
}

Tensor gelu(const Tensor& a) {
  Matrix v = a.value().unaryExpr([](double x) { return kernels::gelu(x); });
  return make_result(a.shape(), std::move(v), {a}, [](Node& o) {
    const Matrix& x = o.inputs[0]->value;
    o.inputs[0]->accumulate(o.grad.cwiseProduct(x.unaryExpr([](double t) { return kernels::gelu_derivative(t); })));
  });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  Matrix v = a.value().cwiseMax(lo).cwiseMin(hi);
  return make_result(a.shape(), std::move(v), {a}, [lo, hi](Node& o) {
    const Matrix& x = o.inputs[0]->value;
    Matrix g = o.grad;
    for (Index i = 0; i < g.size(); ++i) {
      if (x.data()[i] < lo || x.data()[i] > hi) g.data()[i] = 0.0;
    }
    o.inputs[0]->accumulate(g);
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  Matrix v = Eigen::Map<const Matrix>(a.value().data(), rows_of(shape), cols_of(shape));
  return make_result(std::move(shape), std::move(v), {a}, [](Node& o) {
    const Matrix& in = o.inputs[0]->value;
    o.inputs[0]->accumulate(Eigen::Map<const Matrix>(o.grad.data(), in.rows(), in.cols()));
  });
}

Tensor transpose(const Tensor& a) {
  return make_result(matrix_shape(a.cols(), a.rows()), a.value().transpose(), {a},
                     [](Node& o) { o.inputs[0]->accumulate(o.grad.transpose()); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Matrix v = a.value() * b.value();
  return make_result(matrix_shape(a.rows(), b.cols()), std::move(v), {a, b}, [](Node& o) {
    const Matrix& av = o.inputs[0]->value;
    const Matrix& bv = o.inputs[1]->value;
    if (o.inputs[0]->requires_grad) o.inputs[0]->accumulate(o.grad * bv.transpose());
    if (o.inputs[1]->requires_grad) o.inputs[1]->accumulate(av.transpose() * o.grad);
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.numel() != x.cols()) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match " +
                         shape_string(x.shape()));
  }
  Matrix v = x.value();
  v.rowwise() += Eigen::Map<const RowVector>(bias.value().data(), bias.numel());
  return make_result(x.shape(), std::move(v), {x, bias}, [](Node& o) {
    o.inputs[0]->accumulate(o.grad);
    const Matrix& b = o.inputs[1]->value;
    RowVector gs = o.grad.colwise().sum();
    o.inputs[1]->accumulate(Eigen::Map<const Matrix>(gs.data(), b.rows(), b.cols()));
  });
}

Tensor sum(const Tensor& a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return make_result(Shape{}, std::move(v), {a}, [](Node& o) {
    const Matrix& in = o.inputs[0]->value;
    o.inputs[0]->accumulate(Matrix::Constant(in.rows(), in.cols(), o.grad(0, 0)));
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  Matrix v(1, 1);
  v(0, 0) = a.value().sum() / n;
  return make_result(Shape{}, std::move(v), {a}, [n](Node& o) {
    const Matrix& in = o.inputs[0]->value;
    o.inputs[0]->accumulate(Matrix::Constant(in.rows(), in.cols(), o.grad(0, 0) / n));
  });
}

Tensor mean_rows(const Tensor& a) {
  if (a.rows() == 0) throw InputError("mean_rows: no rows");
  const double n = static_cast<double>(a.rows());
  Matrix v = a.value().colwise().sum() / n;
  return make_result(matrix_shape(1, a.cols()), std::move(v), {a}, [n](Node& o) {
    const Matrix& in = o.inputs[0]->value;
    Matrix g = o.grad.replicate(in.rows(), 1) / n;
    o.inputs[0]->accumulate(g);
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw InputError("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) {
      throw DimensionError("concat_rows: width mismatch " + shape_string(parts.front().shape()) + " vs " +
                           shape_string(p.shape()));
    }
    rows += p.rows();
  }
  Matrix v(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return make_result(matrix_shape(rows, cols), std::move(v), parts, [](Node& o) {
    Index off = 0;
    for (auto& in : o.inputs) {
      const Index r = in->value.rows();
      if (in->requires_grad) in->accumulate(o.grad.middleRows(off, r));
      off += r;
    }
  });
}

Tensor slice_rows(const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of " + shape_string(a.shape()));
  }
  Matrix v = a.value().middleRows(start, count);
  return make_result(matrix_shape(count, a.cols()), std::move(v), {a}, [start, count](Node& o) {
    const Matrix& in = o.inputs[0]->value;
    Matrix g = Matrix::Zero(in.rows(), in.cols());
    g.middleRows(start, count) = o.grad;
    o.inputs[0]->accumulate(g);
  });
}

Tensor gather_rows(const Tensor& a, std::span<const int> indices) {
  Matrix v(static_cast<Index>(indices.size()), a.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= a.rows()) {
      throw IndexError("gather_rows: index " + std::to_string(indices[i]) + " outside [0, " +
                       std::to_string(a.rows()) + ")");
    }
    v.row(static_cast<Index>(i)) = a.value().row(indices[i]);
  }
  std::vector<int> idx(indices.begin(), indices.end());
  Shape shape = matrix_shape(v.rows(), v.cols());
  return make_result(std::move(shape), std::move(v), {a}, [idx = std::move(idx)](Node& o) {
    const Matrix& in = o.inputs[0]->value;
    Matrix g = Matrix::Zero(in.rows(), in.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += o.grad.row(static_cast<Index>(i));
    o.inputs[0]->accumulate(g);
  });
}

Tensor softmax(const Tensor& logits) {
  if (logits.cols() < 1) throw DimensionError("softmax: empty last dimension");
  require_finite(logits.value(), "softmax");
  Matrix v = kernels::softmax_rows(logits.value());
  return make_result(logits.shape(), std::move(v), {logits},
                     [](Node& o) { o.inputs[0]->accumulate(kernels::softmax_rows_backward(o.value, o.grad)); });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != logits.rows() || labels.empty()) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_string(logits.shape()));
  }
  for (int y : labels) {
    if (y < 0 || y >= logits.cols()) {
      throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(logits.cols()) + ")");
    }
  }
  require_finite(logits.value(), "cross_entropy");
  const Matrix logp = kernels::log_softmax_rows(logits.value());
  const double batch = static_cast<double>(labels.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) loss -= logp(static_cast<Index>(i), labels[i]);
  Matrix v(1, 1);
  v(0, 0) = loss / batch;
  std::vector<int> ys(labels.begin(), labels.end());
  return make_result(Shape{}, std::move(v), {logits}, [logp, ys = std::move(ys), batch](Node& o) {
    Matrix g = logp.array().exp().matrix();
    for (std::size_t i = 0; i < ys.size(); ++i) g(static_cast<Index>(i), ys[i]) -= 1.0;
    o.inputs[0]->accumulate(g * (o.grad(0, 0) / batch));
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const Index d = x.cols();
  if (d < 2) throw DimensionError("layer_norm: last dimension must be >= 2, got " + shape_string(x.shape()));
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" + shape_string(bias.shape()) +
                         " do not match " + shape_string(x.shape()));
  }
  Matrix xhat;
  Eigen::VectorXd inv_std;
  kernels::standardize_rows(x.value(), kLayerNormEps, xhat, inv_std);
  const auto g = Eigen::Map<const RowVector>(gain.value().data(), d);
  const auto b = Eigen::Map<const RowVector>(bias.value().data(), d);
  Matrix v = (xhat.array().rowwise() * g.array()).matrix();
  v.rowwise() += b;
  return make_result(x.shape(), std::move(v), {x, gain, bias}, [xhat, inv_std](Node& o) {
    const Index dd = xhat.cols();
    const Matrix& gv = o.inputs[1]->value;
    const auto gr = Eigen::Map<const RowVector>(gv.data(), dd);
    if (o.inputs[0]->requires_grad) {
      Matrix dxhat = (o.grad.array().rowwise() * gr.array()).matrix();
      Matrix dx(xhat.rows(), dd);
      for (Index r = 0; r < xhat.rows(); ++r) {
        const double s1 = dxhat.row(r).sum();
        const double s2 = dxhat.row(r).dot(xhat.row(r));
        dx.row(r) = (inv_std(r) / static_cast<double>(dd)) *
                    (static_cast<double>(dd) * dxhat.row(r).array() - s1 - xhat.row(r).array() * s2).matrix();
      }
      o.inputs[0]->accumulate(dx);
    }
    RowVector dg = o.grad.cwiseProduct(xhat).colwise().sum();
    RowVector db = o.grad.colwise().sum();
    o.inputs[1]->accumulate(Eigen::Map<const Matrix>(dg.data(), gv.rows(), gv.cols()));
    o.inputs[2]->accumulate(Eigen::Map<const Matrix>(db.data(), gv.rows(), gv.cols()));
  });
}

Tensor l2_normalize_rows(const Tensor& x) {
  Eigen::VectorXd norms = x.value().rowwise().norm();
  for (Index r = 0; r < norms.size(); ++r) {
    if (!(norms(r) > 0.0)) throw NumericError("l2_normalize_rows: zero or non-finite row norm");
  }
  Matrix v = x.value().array().colwise() / norms.array();
  return make_result(x.shape(), std::move(v), {x}, [norms](Node& o) {
    Matrix dx(o.value.rows(), o.value.cols());
    for (Index r = 0; r < dx.rows(); ++r) {
      const double dot = o.value.row(r).dot(o.grad.row(r));
      dx.row(r) = (o.grad.row(r) - o.value.row(r) * dot) / norms(r);
    }
    o.inputs[0]->accumulate(dx);
  });
}

namespace {

struct AttentionCache {
  std::vector<Matrix> probs;  // per head, Tq x Tk (sink column dropped)
};

void check_attention_shapes(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  if (heads < 1 || q.cols() % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(q.cols()) + " not divisible into " +
                         std::to_string(heads) + " heads");
  }
  if (k.cols() != q.cols() || v.cols() != q.cols() || k.rows() != v.rows()) {
    throw DimensionError("attention: q/k/v shapes " + shape_string(q.shape()) + ", " + shape_string(k.shape()) +
                         ", " + shape_string(v.shape()) + " disagree");
  }
  if (q.rows() < 1) throw DimensionError("attention: no queries");
}

}  // namespace

Matrix attention_probabilities(const Matrix& q, const Matrix& k, int heads, int head) {
  const Index dh = q.cols() / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix s = q.middleCols(head * dh, dh) * k.middleCols(head * dh, dh).transpose() * inv;
  return kernels::softmax_rows(s);
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, bool null_sink) {
  check_attention_shapes(q, k, v, heads);
  const Index tq = q.rows();
  const Index tk = k.rows();
  const Index d = q.cols();
  const Index dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  AttentionCache cache;
  Matrix out = Matrix::Zero(tq, d);
  for (int h = 0; h < heads; ++h) {
    Matrix s(tq, tk + (null_sink ? 1 : 0));
    s.leftCols(tk) = q.value().middleCols(h * dh, dh) * k.value().middleCols(h * dh, dh).transpose() * inv;
    if (null_sink) s.col(tk).setZero();
    Matrix p = tk + (null_sink ? 1 : 0) > 0 ? kernels::softmax_rows(s) : s;
    Matrix a = p.leftCols(tk);
    if (tk > 0) out.middleCols(h * dh, dh) = a * v.value().middleCols(h * dh, dh);
    cache.probs.push_back(std::move(a));
  }
  return make_result(matrix_shape(tq, d), std::move(out), {q, k, v}, [cache = std::move(cache), heads, dh, inv](Node& o) {
    const Matrix& qv = o.inputs[0]->value;
    const Matrix& kv = o.inputs[1]->value;
    const Matrix& vv = o.inputs[2]->value;
    Matrix dq = Matrix::Zero(qv.rows(), qv.cols());
    Matrix dk = Matrix::Zero(kv.rows(), kv.cols());
    Matrix dv = Matrix::Zero(vv.rows(), vv.cols());
    for (int h = 0; h < heads; ++h) {
      const Matrix& a = cache.probs[static_cast<std::size_t>(h)];
      const auto dout = o.grad.middleCols(h * dh, dh);
      dv.middleCols(h * dh, dh) = a.transpose() * dout;
      Matrix da = dout * vv.middleCols(h * dh, dh).transpose();
      // The sink column has zero value, hence zero upstream gradient; the
      // row-dot therefore runs over the real keys only.
      Matrix ds(a.rows(), a.cols());
      for (Index r = 0; r < a.rows(); ++r) {
        const double dot = a.row(r).dot(da.row(r));
        ds.row(r) = (a.row(r).array() * (da.row(r).array() - dot)).matrix();
      }
      ds *= inv;
      dq.middleCols(h * dh, dh) = ds * kv.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh) = ds.transpose() * qv.middleCols(h * dh, dh);
    }
    if (o.inputs[0]->requires_grad) o.inputs[0]->accumulate(dq);
    if (o.inputs[1]->requires_grad) o.inputs[1]->accumulate(dk);
    if (o.inputs[2]->requires_grad) o.inputs[2]->accumulate(dv);
  });
}

}  // namespace anyshift
