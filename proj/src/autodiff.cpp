#include "mmfs/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mmfs/error.hpp"

namespace mmfs::ad {

const Matrix& Var::value() const { return tape_->value(index_); }

const Matrix& Tape::value(int index) const {
  const Node& n = nodes_[static_cast<std::size_t>(index)];
  return n.external ? *n.external : n.value;
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant_ref(const Matrix& value) {
  Node n;
  n.external = &value;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::parameter(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.needs_grad = recording_;
  nodes_.push_back(std::move(n));
  const int index = static_cast<int>(nodes_.size()) - 1;
  param_nodes_.emplace(&p, index);
  return Var(this, index);
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  if (recording_) {
    for (const Var& in : inputs) {
      if (nodes_[static_cast<std::size_t>(in.index())].needs_grad) n.needs_grad = true;
    }
    if (n.needs_grad) n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Matrix& Tape::grad(Var v) {
  Matrix& g = grads_[static_cast<std::size_t>(v.index())];
  if (g.size() == 0) {
    const Matrix& val = value(v.index());
    g.setZero(val.rows(), val.cols());
  }
  return g;
}

void Tape::backward(Var root) {
  if (!recording_) throw StateError("backward() on a tape that does not record gradients");
  if (root.rows() != 1 || root.cols() != 1) throw ShapeError("backward() needs a scalar root");
  grads_.assign(nodes_.size(), Matrix());
  grad(root)(0, 0) = 1.0;
  for (int i = root.index(); i >= 0; --i) {
    const auto k = static_cast<std::size_t>(i);
    Node& n = nodes_[k];
    if (!n.needs_grad || !n.backward || grads_[k].size() == 0) continue;
    const Matrix g = std::move(grads_[k]);
    n.backward(*this, g, value(i));
  }
  for (const auto& [param, index] : param_nodes_) {
    const Matrix& g = grads_[static_cast<std::size_t>(index)];
    if (g.size() == 0) continue;
    Parameter* p = nodes_[static_cast<std::size_t>(index)].param;
    if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()) p->zero_grad();
    p->grad += g;
  }
  grads_.clear();
}

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": operand shapes differ");
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  Matrix out = a.value() * b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (t.needs_grad(a)) t.grad(a).noalias() += g * b.value().transpose();
    if (t.needs_grad(b)) t.grad(b).noalias() += a.value().transpose() * g;
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  return a.tape().record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (t.needs_grad(a)) t.grad(a) += g;
    if (t.needs_grad(b)) t.grad(b) += g;
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  return a.tape().record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (t.needs_grad(a)) t.grad(a) += g;
    if (t.needs_grad(b)) t.grad(b) -= g;
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  return a.tape().record(a.value().cwiseProduct(b.value()), {a, b},
                         [a, b](Tape& t, const Matrix& g, const Matrix&) {
                           if (t.needs_grad(a)) t.grad(a) += g.cwiseProduct(b.value());
                           if (t.needs_grad(b)) t.grad(b) += g.cwiseProduct(a.value());
                         });
}

Var scale(Var a, double s) {
  return a.tape().record(a.value() * s, {a},
                         [a, s](Tape& t, const Matrix& g, const Matrix&) { t.grad(a) += g * s; });
}

Var add_scalar(Var a, double s) {
  Matrix out = a.value().array() + s;
  return a.tape().record(std::move(out), {a},
                         [a](Tape& t, const Matrix& g, const Matrix&) { t.grad(a) += g; });
}

Var add_bias(Var a, Var bias) {
  if (bias.cols() != 1 || bias.rows() != a.rows()) throw ShapeError("add_bias: bias must be rows x 1");
  Matrix out = a.value();
  out.colwise() += bias.value().col(0);
  return a.tape().record(std::move(out), {a, bias}, [a, bias](Tape& t, const Matrix& g, const Matrix&) {
    if (t.needs_grad(a)) t.grad(a) += g;
    if (t.needs_grad(bias)) t.grad(bias) += g.rowwise().sum();
  });
}

Var tanh(Var a) {
  Matrix out = a.value().array().tanh();
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix& y) {
    t.grad(a).array() += g.array() * (1.0 - y.array().square());
  });
}

Var sigmoid(Var a) {
  Matrix out = (1.0 + (-a.value().array()).exp()).inverse();
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix& y) {
    t.grad(a).array() += g.array() * y.array() * (1.0 - y.array());
  });
}

Var relu(Var a) {
  Matrix out = a.value().cwiseMax(0.0);
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.grad(a).array() += (a.value().array() > 0.0).select(g.array(), 0.0);
  });
}

Var rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("rows: slice out of range");
  Matrix out = a.value().middleRows(start, count);
  return a.tape().record(std::move(out), {a}, [a, start, count](Tape& t, const Matrix& g, const Matrix&) {
    t.grad(a).middleRows(start, count) += g;
  });
}

Var select_cols(const std::vector<char>& take_a, Var a, Var b) {
  require_same_shape(a.value(), b.value(), "select_cols");
  if (static_cast<Eigen::Index>(take_a.size()) != a.cols()) throw ShapeError("select_cols: mask length");
  Matrix out(a.rows(), a.cols());
  for (Eigen::Index j = 0; j < a.cols(); ++j) out.col(j) = take_a[j] ? a.value().col(j) : b.value().col(j);
  return a.tape().record(std::move(out), {a, b}, [take_a, a, b](Tape& t, const Matrix& g, const Matrix&) {
    const bool ga = t.needs_grad(a), gb = t.needs_grad(b);
    for (Eigen::Index j = 0; j < g.cols(); ++j) {
      if (take_a[j]) {
        if (ga) t.grad(a).col(j) += g.col(j);
      } else if (gb) {
        t.grad(b).col(j) += g.col(j);
      }
    }
  });
}

Var scale_cols(Var a, const RowVector& weights) {
  if (weights.size() != a.cols()) throw ShapeError("scale_cols: weight count differs from columns");
  Matrix out = a.value() * weights.asDiagonal();
  return a.tape().record(std::move(out), {a}, [a, weights](Tape& t, const Matrix& g, const Matrix&) {
    t.grad(a) += g * weights.asDiagonal();
  });
}

Var sum_squares_cols(Var a) {
  Matrix out = a.value().colwise().squaredNorm();
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.grad(a) += 2.0 * a.value() * g.row(0).asDiagonal();
  });
}

Var cosine_distance_cols(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "cosine_distance_cols");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Eigen::Index n = av.cols();
  RowVector na(n), nb(n), sim(n);
  Matrix out(1, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double aa = av.col(j).squaredNorm(), bb = bv.col(j).squaredNorm();
    if (aa == 0.0 || bb == 0.0) throw DegenerateVectorError("cosine distance of a zero-norm embedding");
    na(j) = std::sqrt(aa);
    nb(j) = std::sqrt(bb);
    sim(j) = av.col(j).dot(bv.col(j)) / std::sqrt(aa * bb);
    out(0, j) = 1.0 - sim(j);
  }
  return a.tape().record(std::move(out), {a, b}, [a, b, na, nb, sim](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    const bool ga = t.needs_grad(a), gb = t.needs_grad(b);
    for (Eigen::Index j = 0; j < g.cols(); ++j) {
      const double inv = 1.0 / (na(j) * nb(j));
      // d(1 - sim)/da = -(b / (|a||b|) - sim * a / |a|^2)
      if (ga) t.grad(a).col(j) -= g(0, j) * (bv.col(j) * inv - sim(j) * av.col(j) / (na(j) * na(j)));
      if (gb) t.grad(b).col(j) -= g(0, j) * (av.col(j) * inv - sim(j) * bv.col(j) / (nb(j) * nb(j)));
    }
  });
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().record(std::move(out), {a},
                         [a](Tape& t, const Matrix& g, const Matrix&) { t.grad(a).array() += g(0, 0); });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean of an empty matrix");
  return scale(sum(a), 1.0 / n);
}

Var softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  const Matrix& z = logits.value();
  if (static_cast<Eigen::Index>(labels.size()) != z.cols()) throw ShapeError("one label per column required");
  Matrix probs(z.rows(), z.cols());
  Matrix out(1, z.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    const int label = labels[static_cast<std::size_t>(j)];
    if (label < 0 || label >= z.rows()) throw ArgumentError("label out of range for classifier head");
    const double mx = z.col(j).maxCoeff();
    const Eigen::VectorXd e = (z.col(j).array() - mx).exp();
    const double total = e.sum();
    probs.col(j) = e / total;
    out(0, j) = std::log(total) + mx - z(label, j);
  }
  return logits.tape().record(std::move(out), {logits},
                              [logits, labels, probs](Tape& t, const Matrix& g, const Matrix&) {
                                Matrix d = probs;
                                for (Eigen::Index j = 0; j < d.cols(); ++j) {
                                  d(labels[static_cast<std::size_t>(j)], j) -= 1.0;
                                  d.col(j) *= g(0, j);
                                }
                                t.grad(logits) += d;
                              });
}

// ---- convolution ----------------------------------------------------------

Matrix im2row(const double* image, const ConvShape& s) {
  const int oh = s.out_h(), ow = s.out_w();
  const int kk = s.kernel * s.kernel;
  Matrix rows = Matrix::Zero(oh * ow, s.in_channels * kk);
  for (int c = 0; c < s.in_channels; ++c) {
    const double* plane = image + static_cast<std::size_t>(c) * s.in_h * s.in_w;
    for (int ky = 0; ky < s.kernel; ++ky) {
      for (int kx = 0; kx < s.kernel; ++kx) {
        const int q = c * kk + ky * s.kernel + kx;
        double* col = rows.col(q).data();
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride - s.pad + ky;
          if (iy < 0 || iy >= s.in_h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride - s.pad + kx;
            if (ix < 0 || ix >= s.in_w) continue;
            col[oy * ow + ox] = plane[iy * s.in_w + ix];
          }
        }
      }
    }
  }
  return rows;
}

void row2im_add(const Matrix& rows, const ConvShape& s, double* image) {
  const int oh = s.out_h(), ow = s.out_w();
  const int kk = s.kernel * s.kernel;
  for (int c = 0; c < s.in_channels; ++c) {
    double* plane = image + static_cast<std::size_t>(c) * s.in_h * s.in_w;
    for (int ky = 0; ky < s.kernel; ++ky) {
      for (int kx = 0; kx < s.kernel; ++kx) {
        const double* col = rows.col(c * kk + ky * s.kernel + kx).data();
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride - s.pad + ky;
          if (iy < 0 || iy >= s.in_h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride - s.pad + kx;
            if (ix < 0 || ix >= s.in_w) continue;
            plane[iy * s.in_w + ix] += col[oy * ow + ox];
          }
        }
      }
    }
  }
}

Var conv2d(Var x, Var w, Var bias, const ConvShape& s) {
  const int in_size = s.in_channels * s.in_h * s.in_w;
  const int p = s.out_h() * s.out_w();
  const int q = s.in_channels * s.kernel * s.kernel;
  if (x.rows() != in_size) throw ShapeError("conv2d: input size does not match shape");
  if (w.rows() != s.out_channels || w.cols() != q) throw ShapeError("conv2d: weight shape");
  if (bias.rows() != s.out_channels || bias.cols() != 1) throw ShapeError("conv2d: bias shape");

  const Eigen::Index batch = x.cols();
  Matrix out(static_cast<Eigen::Index>(p) * s.out_channels, batch);
  const Matrix& wv = w.value();
  const Eigen::RowVectorXd bt = bias.value().col(0).transpose();
  for (Eigen::Index j = 0; j < batch; ++j) {
    const Matrix r = im2row(x.value().col(j).data(), s);
    Eigen::Map<Matrix> yt(out.col(j).data(), p, s.out_channels);
    yt.noalias() = r * wv.transpose();
    yt.rowwise() += bt;
  }
  return x.tape().record(std::move(out), {x, w, bias}, [x, w, bias, s, p](Tape& t, const Matrix& g, const Matrix&) {
    const bool gx = t.needs_grad(x), gw = t.needs_grad(w), gb = t.needs_grad(bias);
    const Matrix& wv = w.value();
    for (Eigen::Index j = 0; j < g.cols(); ++j) {
      Eigen::Map<const Matrix> dyt(g.col(j).data(), p, s.out_channels);
      if (gb) t.grad(bias) += dyt.colwise().sum().transpose();
      if (gw) {
        const Matrix r = im2row(x.value().col(j).data(), s);
        t.grad(w).noalias() += dyt.transpose() * r;
      }
      if (gx) {
        const Matrix dr = dyt * wv;
        row2im_add(dr, s, t.grad(x).col(j).data());
      }
    }
  });
}

Var conv_transpose2d(Var x, Var w, Var bias, const ConvShape& s) {
  // s describes the forward convolution whose adjoint this is.
  const int pin = s.out_h() * s.out_w();
  const int cin = s.out_channels;
  const int cout = s.in_channels;
  const int q = cout * s.kernel * s.kernel;
  const int out_size = cout * s.in_h * s.in_w;
  if (x.rows() != static_cast<Eigen::Index>(pin) * cin) throw ShapeError("conv_transpose2d: input size");
  if (w.rows() != cin || w.cols() != q) throw ShapeError("conv_transpose2d: weight shape");
  if (bias.rows() != cout || bias.cols() != 1) throw ShapeError("conv_transpose2d: bias shape");

  const Eigen::Index batch = x.cols();
  const int plane = s.in_h * s.in_w;
  Matrix out = Matrix::Zero(out_size, batch);
  const Matrix& wv = w.value();
  for (Eigen::Index j = 0; j < batch; ++j) {
    Eigen::Map<const Matrix> xt(x.value().col(j).data(), pin, cin);
    const Matrix m = xt * wv;
    row2im_add(m, s, out.col(j).data());
    for (int c = 0; c < cout; ++c) out.col(j).segment(c * plane, plane).array() += bias.value()(c, 0);
  }
  return x.tape().record(std::move(out), {x, w, bias},
                         [x, w, bias, s, pin, cin, cout, plane](Tape& t, const Matrix& g, const Matrix&) {
                           const bool gx = t.needs_grad(x), gw = t.needs_grad(w), gb = t.needs_grad(bias);
                           const Matrix& wv = w.value();
                           for (Eigen::Index j = 0; j < g.cols(); ++j) {
                             if (gb) {
                               for (int c = 0; c < cout; ++c) t.grad(bias)(c, 0) += g.col(j).segment(c * plane, plane).sum();
                             }
                             if (!gx && !gw) continue;
                             const Matrix dm = im2row(g.col(j).data(), s);
                             if (gx) {
                               Eigen::Map<Matrix> dxt(t.grad(x).col(j).data(), pin, cin);
                               dxt.noalias() += dm * wv.transpose();
                             }
                             if (gw) {
                               Eigen::Map<const Matrix> xt(x.value().col(j).data(), pin, cin);
                               t.grad(w).noalias() += xt.transpose() * dm;
                             }
                           }
                         });
}

Var max_pool2(Var x, int channels, int h, int w) {
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("max_pool2: spatial dims must be even");
  if (x.rows() != static_cast<Eigen::Index>(channels) * h * w) throw ShapeError("max_pool2: input size");
  const int oh = h / 2, ow = w / 2;
  const Eigen::Index batch = x.cols();
  Matrix out(static_cast<Eigen::Index>(channels) * oh * ow, batch);
  std::vector<int> argmax(static_cast<std::size_t>(out.size()));
  const Matrix& xv = x.value();
  for (Eigen::Index j = 0; j < batch; ++j) {
    for (int c = 0; c < channels; ++c) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          int best = c * h * w + (2 * oy) * w + 2 * ox;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const int idx = c * h * w + (2 * oy + dy) * w + 2 * ox + dx;
              if (xv(idx, j) > xv(best, j)) best = idx;
            }
          }
          const Eigen::Index o = c * oh * ow + oy * ow + ox;
          out(o, j) = xv(best, j);
          argmax[static_cast<std::size_t>(j * out.rows() + o)] = best;
        }
      }
    }
  }
  const Eigen::Index out_rows = out.rows();
  return x.tape().record(std::move(out), {x}, [x, argmax, out_rows](Tape& t, const Matrix& g, const Matrix&) {
    Matrix& gx = t.grad(x);
    for (Eigen::Index j = 0; j < g.cols(); ++j) {
      for (Eigen::Index o = 0; o < out_rows; ++o) {
        gx(argmax[static_cast<std::size_t>(j * out_rows + o)], j) += g(o, j);
      }
    }
  });
}

}  // namespace mmfs::ad
