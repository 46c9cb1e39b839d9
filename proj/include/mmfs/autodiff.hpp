#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

// Minimal reverse-mode differentiation over dense matrices. Activations are
// laid out features x batch: one column per example.
namespace mmfs::ad {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

struct Parameter {
  Matrix value;
  Matrix grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape& tape() const { return *tape_; }
  int index() const { return index_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int index) : tape_(tape), index_(index) {}

  Tape* tape_ = nullptr;
  int index_ = -1;
};

class Tape {
 public:
  // Receives the gradient and value of the node's output.
  using Backward = std::function<void(Tape&, const Matrix& out_grad, const Matrix& out_value)>;

  // With record_gradients = false the tape only evaluates; backward() is
  // unavailable and no closures are kept.
  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  // Constant that refers to caller-owned storage, which must outlive the tape.
  Var constant_ref(const Matrix& value);
  // One leaf per parameter per tape; repeated calls return the same Var.
  Var parameter(Parameter& p);

  // Seeds d(root)/d(root) = 1 and accumulates into Parameter::grad.
  void backward(Var root);

  bool recording() const { return recording_; }
  const Matrix& value(int index) const;
  bool needs_grad(Var v) const { return recording_ && nodes_[v.index()].needs_grad; }
  // Gradient buffer of v, zero-initialized on first access.
  Matrix& grad(Var v);

  Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward);

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Parameter* param = nullptr;
    bool needs_grad = false;
    Backward backward;
  };

  bool recording_;
  std::deque<Node> nodes_;
  std::vector<Matrix> grads_;
  std::unordered_map<const Parameter*, int> param_nodes_;
};

struct ConvShape {
  int in_channels = 1;
  int in_h = 0;
  int in_w = 0;
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var add_bias(Var a, Var bias);
Var tanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);
Var rows(Var a, Eigen::Index start, Eigen::Index count);
// Column j of the result is a.col(j) where take_a[j], else b.col(j).
Var select_cols(const std::vector<char>& take_a, Var a, Var b);
// Multiplies column j by the constant weights(j).
Var scale_cols(Var a, const RowVector& weights);
Var sum_squares_cols(Var a);
Var cosine_distance_cols(Var a, Var b);
Var sum(Var a);
Var mean(Var a);
Var softmax_cross_entropy(Var logits, const std::vector<int>& labels);

// x: (in_channels * in_h * in_w) x batch, channel-major per column.
// w: out_channels x (in_channels * k * k), bias: out_channels x 1.
Var conv2d(Var x, Var w, Var bias, const ConvShape& shape);
// Adjoint of conv2d with shape `as_conv`: maps (as_conv.out_channels,
// out_h, out_w) back to (as_conv.in_channels, in_h, in_w).
// w: as_conv.out_channels x (as_conv.in_channels * k * k).
Var conv_transpose2d(Var x, Var w, Var bias, const ConvShape& as_conv);
// 2x2 max pooling, stride 2. Requires even h and w.
Var max_pool2(Var x, int channels, int h, int w);

// Helpers shared with tests.
Matrix im2row(const double* image, const ConvShape& shape);
void row2im_add(const Matrix& rows, const ConvShape& shape, double* image);

}  // namespace mmfs::ad
