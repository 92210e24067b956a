#include "wsisam/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace wsisam::ad {

const Mat& Var::value() const { return tape_->value(id_); }
const Mat& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Mat value) {
  nodes_.push_back(Node{std::move(value), Mat(), false, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::variable(Mat value) {
  nodes_.push_back(Node{std::move(value), Mat(), true, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::push(Mat value, std::initializer_list<Var> parents, Backward backward) {
  return push(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
              std::move(backward));
}

Var Tape::push(Mat value, std::span<const Var> parents, Backward backward) {
  bool needs = false;
  for (const auto& p : parents) {
    if (p.tape_ != this) throw InvalidArgument("autodiff: mixing variables from different tapes");
    needs = needs || nodes_[p.id_].needs_grad;
  }
  nodes_.push_back(Node{std::move(value), Mat(), needs, needs ? std::move(backward) : Backward{}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

const Mat& Tape::grad(int id) const {
  static const Mat empty;
  const auto& n = nodes_[id];
  return n.grad.size() ? n.grad : empty;
}

void Tape::accumulate(Var v, const Mat& g) {
  auto& n = nodes_[v.id_];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var out) {
  if (out.tape_ != this) throw InvalidArgument("autodiff: backward on foreign variable");
  if (out.rows() != 1 || out.cols() != 1) throw ShapeMismatch("autodiff: backward needs a 1x1 output");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[out.id_].needs_grad) return;
  nodes_[out.id_].grad = Mat::Ones(1, 1);
  for (int i = out.id_; i >= 0; --i) {
    auto& n = nodes_[i];
    if (n.backward && n.grad.size()) n.backward(*this, n.grad);
  }
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeMismatch(std::string("autodiff ") + op + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()));
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw ShapeMismatch("autodiff matmul: inner dimensions differ");
  Mat out = a.value() * b.value();
  return a.tape()->push(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) throw ShapeMismatch("autodiff matmul_nt: inner dimensions differ");
  Mat out = a.value() * b.value().transpose();
  return a.tape()->push(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value());
    if (b.requires_grad()) t.accumulate(b, g.transpose() * a.value());
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Mat out = a.value() + b.value();
  return a.tape()->push(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Mat out = a.value() - b.value();
  return a.tape()->push(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    if (b.requires_grad()) t.accumulate(b, -g);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Mat out = a.value().cwiseProduct(b.value());
  return a.tape()->push(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (a.requires_grad()) t.accumulate(a, g.cwiseProduct(b.value()));
    if (b.requires_grad()) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var maximum(Var a, Var b) {
  require_same_shape(a, b, "maximum");
  Mat out = a.value().cwiseMax(b.value());
  return a.tape()->push(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    // Ties route the gradient to the first operand.
    const Mat& av = a.value();
    const Mat& bv = b.value();
    Mat ga = Mat::Zero(g.rows(), g.cols());
    Mat gb = Mat::Zero(g.rows(), g.cols());
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      if (av.data()[i] >= bv.data()[i]) {
        ga.data()[i] = g.data()[i];
      } else {
        gb.data()[i] = g.data()[i];
      }
    }
    t.accumulate(a, ga);
    t.accumulate(b, gb);
  });
}

Var scale(Var a, double s) {
  Mat out = a.value() * s;
  return a.tape()->push(std::move(out), {a}, [a, s](Tape& t, const Mat& g) { t.accumulate(a, g * s); });
}

Var add_scalar(Var a, double s) {
  Mat out = a.value().array() + s;
  return a.tape()->push(std::move(out), {a}, [a](Tape& t, const Mat& g) { t.accumulate(a, g); });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeMismatch("autodiff add_row: row must be 1 x cols");
  Mat out = a.value().rowwise() + row.value().row(0);
  return a.tape()->push(std::move(out), {a, row}, [a, row](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    if (row.requires_grad()) t.accumulate(row, g.colwise().sum());
  });
}

Var mul_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeMismatch("autodiff mul_row: row must be 1 x cols");
  Mat out = a.value().array().rowwise() * row.value().row(0).array();
  return a.tape()->push(std::move(out), {a, row}, [a, row](Tape& t, const Mat& g) {
    if (a.requires_grad()) t.accumulate(a, (g.array().rowwise() * row.value().row(0).array()).matrix());
    if (row.requires_grad()) t.accumulate(row, g.cwiseProduct(a.value()).colwise().sum());
  });
}

Var relu(Var a) {
  Mat out = a.value().cwiseMax(0.0);
  return a.tape()->push(std::move(out), {a}, [a](Tape& t, const Mat& g) {
    t.accumulate(a, (a.value().array() > 0.0).select(g, 0.0));
  });
}

Var gelu(Var a) {
  const Mat& x = a.value();
  Mat out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::erf(v * (1.0 / std::numbers::sqrt2)));
  }
  return a.tape()->push(std::move(out), {a}, [a](Tape& t, const Mat& g) {
    const Mat& x = a.value();
    Mat d(x.rows(), x.cols());
    const double inv_sqrt_2pi = std::numbers::inv_sqrtpi * (1.0 / std::numbers::sqrt2);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      double v = x.data()[i];
      double cdf = 0.5 * (1.0 + std::erf(v * (1.0 / std::numbers::sqrt2)));
      double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      d.data()[i] = g.data()[i] * (cdf + v * pdf);
    }
    t.accumulate(a, d);
  });
}

Var sigmoid(Var a) {
  Mat out = a.value().unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  Tape* tape = a.tape();
  int self = static_cast<int>(tape->size());
  return tape->push(std::move(out), {a}, [a, self](Tape& t, const Mat& g) {
    const Mat& s = t.value(self);
    t.accumulate(a, g.cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix())));
  });
}

Var sum(Var a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->push(std::move(out), {a}, [a](Tape& t, const Mat& g) {
    t.accumulate(a, Mat::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var softmax_rows(Var a) {
  const Mat& x = a.value();
  Mat y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double m = x.row(r).maxCoeff();
    double z = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      y(r, c) = std::exp(x(r, c) - m);
      z += y(r, c);
    }
    y.row(r) /= z;
  }
  Tape* tape = a.tape();
  int self = static_cast<int>(tape->size());
  return tape->push(std::move(y), {a}, [a, self](Tape& t, const Mat& g) {
    const Mat& y = t.value(self);
    Mat gy = g.cwiseProduct(y);
    Eigen::VectorXd dots = gy.rowwise().sum();
    Mat d = gy - (y.array().colwise() * dots.array()).matrix();
    t.accumulate(a, d);
  });
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  const Eigen::Index n = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n) {
    throw ShapeMismatch("autodiff layer_norm_rows: gain/bias must be 1 x cols");
  }
  const Mat& xv = x.value();
  Mat xhat(xv.rows(), n);
  Eigen::VectorXd inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    double mu = xv.row(r).mean();
    double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Mat out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return x.tape()->push(std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                                                const Mat& g) {
                          const double n = static_cast<double>(xhat.cols());
                          if (gamma.requires_grad()) t.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                          if (beta.requires_grad()) t.accumulate(beta, g.colwise().sum());
                          if (x.requires_grad()) {
                            Mat dxhat = g.array().rowwise() * gamma.value().row(0).array();
                            Mat dx(xhat.rows(), xhat.cols());
                            for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                              double m1 = dxhat.row(r).sum() / n;
                              double m2 = dxhat.row(r).dot(xhat.row(r)) / n;
                              dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                            }
                            t.accumulate(x, dx);
                          }
                        });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw OutOfBounds("autodiff slice_rows: out of range");
  Mat out = a.value().middleRows(start, count);
  return a.tape()->push(std::move(out), {a}, [a, start, count](Tape& t, const Mat& g) {
    Mat d = Mat::Zero(a.rows(), a.cols());
    d.middleRows(start, count) = g;
    t.accumulate(a, d);
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw OutOfBounds("autodiff slice_cols: out of range");
  Mat out = a.value().middleCols(start, count);
  return a.tape()->push(std::move(out), {a}, [a, start, count](Tape& t, const Mat& g) {
    Mat d = Mat::Zero(a.rows(), a.cols());
    d.middleCols(start, count) = g;
    t.accumulate(a, d);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidArgument("autodiff concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeMismatch("autodiff concat_rows: column counts differ");
    rows += p.rows();
  }
  Mat out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts[0].tape()->push(std::move(out), parts, [ps](Tape& t, const Mat& g) {
    Eigen::Index at = 0;
    for (const auto& p : ps) {
      if (p.requires_grad()) t.accumulate(p, g.middleRows(at, p.rows()));
      at += p.rows();
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidArgument("autodiff concat_cols: no inputs");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts[0].rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeMismatch("autodiff concat_cols: row counts differ");
    cols += p.cols();
  }
  Mat out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts[0].tape()->push(std::move(out), parts, [ps](Tape& t, const Mat& g) {
    Eigen::Index at = 0;
    for (const auto& p : ps) {
      if (p.requires_grad()) t.accumulate(p, g.middleCols(at, p.cols()));
      at += p.cols();
    }
  });
}

Var replace_row(Var a, Eigen::Index row, Var r) {
  if (r.rows() != 1 || r.cols() != a.cols()) throw ShapeMismatch("autodiff replace_row: row shape");
  if (row < 0 || row >= a.rows()) throw OutOfBounds("autodiff replace_row: row index");
  Mat out = a.value();
  out.row(row) = r.value().row(0);
  return a.tape()->push(std::move(out), {a, r}, [a, row, r](Tape& t, const Mat& g) {
    if (a.requires_grad()) {
      Mat d = g;
      d.row(row).setZero();
      t.accumulate(a, d);
    }
    if (r.requires_grad()) t.accumulate(r, g.row(row));
  });
}

Var gather(Var a, std::vector<Eigen::Index> index, Eigen::Index rows, Eigen::Index cols) {
  if (static_cast<Eigen::Index>(index.size()) != rows * cols) throw ShapeMismatch("autodiff gather: index size");
  const Mat& av = a.value();
  Mat out(rows, cols);
  for (size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= av.size()) throw OutOfBounds("autodiff gather: index out of range");
    out.data()[i] = av.data()[index[i]];
  }
  return a.tape()->push(std::move(out), {a}, [a, index = std::move(index)](Tape& t, const Mat& g) {
    Mat d = Mat::Zero(a.rows(), a.cols());
    for (size_t i = 0; i < index.size(); ++i) d.data()[index[i]] += g.data()[i];
    t.accumulate(a, d);
  });
}

Var pixel_shuffle2x(Var a, int h, int w) {
  if (a.rows() != static_cast<Eigen::Index>(h) * w || a.cols() % 4 != 0) {
    throw ShapeMismatch("autodiff pixel_shuffle2x: expected (H*W) x 4C input");
  }
  const Eigen::Index c = a.cols() / 4;
  const Eigen::Index out_rows = static_cast<Eigen::Index>(4) * h * w;
  std::vector<Eigen::Index> index(static_cast<size_t>(out_rows * c));
  const int ow = 2 * w;
  for (int y = 0; y < 2 * h; ++y) {
    for (int x = 0; x < ow; ++x) {
      const Eigen::Index src_row = static_cast<Eigen::Index>(y / 2) * w + x / 2;
      const Eigen::Index block = 2 * (y % 2) + (x % 2);
      const Eigen::Index dst_row = static_cast<Eigen::Index>(y) * ow + x;
      for (Eigen::Index ch = 0; ch < c; ++ch) {
        index[static_cast<size_t>(dst_row * c + ch)] = src_row * a.cols() + block * c + ch;
      }
    }
  }
  return gather(a, std::move(index), out_rows, c);
}

std::vector<LerpTap> bilinear_taps(int in_size, int factor) {
  std::vector<LerpTap> taps(static_cast<size_t>(in_size) * factor);
  for (int o = 0; o < in_size * factor; ++o) {
    double src = (o + 0.5) / factor - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in_size - 1));
    int lo = static_cast<int>(std::floor(src));
    int hi = std::min(lo + 1, in_size - 1);
    taps[o] = LerpTap{lo, hi, src - lo};
  }
  return taps;
}

Var upsample_bilinear(Var a, int h, int w, int factor) {
  if (factor < 1) throw InvalidArgument("autodiff upsample_bilinear: factor must be >= 1");
  if (a.rows() != static_cast<Eigen::Index>(h) * w) throw ShapeMismatch("autodiff upsample_bilinear: rows != H*W");
  if (factor == 1) return a;
  const auto ty = bilinear_taps(h, factor);
  const auto tx = bilinear_taps(w, factor);
  const int oh = h * factor;
  const int ow = w * factor;
  const Mat& x = a.value();
  Mat out(static_cast<Eigen::Index>(oh) * ow, x.cols());
  for (int y = 0; y < oh; ++y) {
    for (int xo = 0; xo < ow; ++xo) {
      const auto& vy = ty[y];
      const auto& vx = tx[xo];
      out.row(static_cast<Eigen::Index>(y) * ow + xo) =
          (1 - vy.w_hi) * ((1 - vx.w_hi) * x.row(vy.lo * w + vx.lo) + vx.w_hi * x.row(vy.lo * w + vx.hi)) +
          vy.w_hi * ((1 - vx.w_hi) * x.row(vy.hi * w + vx.lo) + vx.w_hi * x.row(vy.hi * w + vx.hi));
    }
  }
  return a.tape()->push(std::move(out), {a}, [a, h, w, oh, ow, ty, tx](Tape& t, const Mat& g) {
    Mat d = Mat::Zero(a.rows(), a.cols());
    for (int y = 0; y < oh; ++y) {
      for (int xo = 0; xo < ow; ++xo) {
        const auto& vy = ty[y];
        const auto& vx = tx[xo];
        auto go = g.row(static_cast<Eigen::Index>(y) * ow + xo);
        d.row(vy.lo * w + vx.lo) += (1 - vy.w_hi) * (1 - vx.w_hi) * go;
        d.row(vy.lo * w + vx.hi) += (1 - vy.w_hi) * vx.w_hi * go;
        d.row(vy.hi * w + vx.lo) += vy.w_hi * (1 - vx.w_hi) * go;
        d.row(vy.hi * w + vx.hi) += vy.w_hi * vx.w_hi * go;
      }
    }
    (void)h;
    t.accumulate(a, d);
  });
}

}  // namespace wsisam::ad
