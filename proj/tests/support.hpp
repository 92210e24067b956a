#pragma once

#include "wsisam/autodiff.hpp"
#include "wsisam/pyramid.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace testing {

using wsisam::Image;
using wsisam::Mask;
using wsisam::Mat;

inline Mat random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Integer-valued gray image in [0, 255].
inline Image random_image(int rows, int cols, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, 255);
  Image img(rows, cols);
  for (auto& v : img.data) v = u(rng);
  return img;
}

inline Mask random_mask(int rows, int cols, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution b(p);
  Mask m(rows, cols);
  for (auto& v : m.data) v = b(rng) ? 1 : 0;
  return m;
}

/// Brute-force 2x2 mean pooling.
inline Image naive_pool(const Image& img) {
  Image out(img.rows / 2, img.cols / 2, img.channels);
  for (int r = 0; r < out.rows; ++r)
    for (int c = 0; c < out.cols; ++c)
      for (int ch = 0; ch < img.channels; ++ch) {
        double s = 0.0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) s += img.at(2 * r + dy, 2 * c + dx, ch);
        out.at(r, c, ch) = s / 4.0;
      }
  return out;
}

/// Central-difference gradient of `f` with respect to the entries of `x`
/// listed in `coords` (all entries when empty).
inline std::vector<double> fd_grad(const std::function<double(const Mat&)>& f, const Mat& x,
                                   const std::vector<Eigen::Index>& coords, double h = 1e-6) {
  std::vector<double> g;
  Mat xp = x;
  for (Eigen::Index i : coords) {
    const double orig = xp.data()[i];
    xp.data()[i] = orig + h;
    const double fp = f(xp);
    xp.data()[i] = orig - h;
    const double fm = f(xp);
    xp.data()[i] = orig;
    g.push_back((fp - fm) / (2 * h));
  }
  return g;
}

inline std::vector<Eigen::Index> all_coords(const Mat& x) {
  std::vector<Eigen::Index> c(static_cast<size_t>(x.size()));
  for (Eigen::Index i = 0; i < x.size(); ++i) c[static_cast<size_t>(i)] = i;
  return c;
}

/// Up to `n` distinct coordinates of `x`, chosen reproducibly.
inline std::vector<Eigen::Index> some_coords(const Mat& x, size_t n, std::mt19937_64& rng) {
  auto c = all_coords(x);
  std::shuffle(c.begin(), c.end(), rng);
  if (c.size() > n) c.resize(n);
  return c;
}

/// ||a - n|| / max(||n||, floor): vector relative error.
inline double rel_err(const std::vector<double>& analytic, const std::vector<double>& numeric, double floor = 1e-8) {
  double d = 0.0, s = 0.0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    d += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    s += numeric[i] * numeric[i];
  }
  return std::sqrt(d) / std::max(std::sqrt(s), floor);
}

inline std::vector<double> pick(const Mat& g, const std::vector<Eigen::Index>& coords) {
  std::vector<double> v;
  for (auto i : coords) v.push_back(g.data()[i]);
  return v;
}

}  // namespace testing
