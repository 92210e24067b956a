#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records every operation as a node holding its value and a closure
// that pushes the node's gradient into its parents. Nodes that do not depend
// on any gradient-requiring leaf record no closure.

#include "wsisam/tensor.hpp"

#include <functional>
#include <span>
#include <vector>

namespace wsisam::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Mat& value() const;
  const Mat& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const;
  double scalar() const { return value()(0, 0); }

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value);
  Var variable(Mat value);

  /// Records a derived node. `backward` is dropped when none of `parents`
  /// requires a gradient.
  Var push(Mat value, std::initializer_list<Var> parents, Backward backward);
  Var push(Mat value, std::span<const Var> parents, Backward backward);

  /// Seeds d(out)/d(out) = 1 for a 1x1 output and propagates.
  void backward(Var out);

  /// Adds `g` into the gradient of `v` (no-op when v needs no gradient).
  void accumulate(Var v, const Mat& g);

  const Mat& value(int id) const { return nodes_[id].value; }
  const Mat& grad(int id) const;
  bool requires_grad(int id) const { return nodes_[id].needs_grad; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// Linear algebra.
Var matmul(Var a, Var b);     // a * b
Var matmul_nt(Var a, Var b);  // a * b^T

// Element-wise.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var maximum(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var add_row(Var a, Var row);  // broadcast a 1 x C row over every row of a
Var mul_row(Var a, Var row);
Var relu(Var a);
Var gelu(Var a);  // exact erf form
Var sigmoid(Var a);

// Reductions and normalisations.
Var sum(Var a);
Var softmax_rows(Var a);
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-6);

// Structural.
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var replace_row(Var a, Eigen::Index row, Var r);
/// out.data[i] = a.data[index[i]]; gradient scatters back with accumulation.
Var gather(Var a, std::vector<Eigen::Index> index, Eigen::Index rows, Eigen::Index cols);

// Spatial maps stored as (H*W) x C.
/// (H*W) x (4*C) -> (2H*2W) x C; channel block k = 2*dy + dx lands at (2h+dy, 2w+dx).
Var pixel_shuffle2x(Var a, int h, int w);
/// Bilinear upsampling by an integer factor, half-pixel centres, edge clamped.
Var upsample_bilinear(Var a, int h, int w, int factor);

/// 1-D interpolation weights used by upsample_bilinear: for each output index,
/// (lo, hi, weight_hi).
struct LerpTap {
  int lo;
  int hi;
  double w_hi;
};
std::vector<LerpTap> bilinear_taps(int in_size, int factor);

}  // namespace wsisam::ad
