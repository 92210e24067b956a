#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace wsisam {

// Every dense activation in the model is a row-major matrix. Spatial maps of
// shape H x W x C are stored as (H*W) x C with row index h*W + w.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Error taxonomy. The service maps these onto HTTP status codes.
struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ShapeMismatch : InvalidArgument {
  using InvalidArgument::InvalidArgument;
};
struct OutOfBounds : std::out_of_range {
  using std::out_of_range::out_of_range;
};
struct EmptyPrompt : InvalidArgument {
  using InvalidArgument::InvalidArgument;
};

/// Dense image with interleaved channels (HWC).
struct Image {
  int rows = 0;
  int cols = 0;
  int channels = 1;
  std::vector<double> data;

  Image() = default;
  Image(int r, int c, int ch = 1, double fill = 0.0)
      : rows(r), cols(c), channels(ch), data(static_cast<size_t>(r) * c * ch, fill) {}

  double& at(int r, int c, int ch = 0) {
    return data[(static_cast<size_t>(r) * cols + c) * channels + ch];
  }
  double at(int r, int c, int ch = 0) const {
    return data[(static_cast<size_t>(r) * cols + c) * channels + ch];
  }
  bool empty() const { return data.empty(); }
  bool operator==(const Image&) const = default;
};

/// Binary mask; values are strictly 0 or 1.
struct Mask {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> data;

  Mask() = default;
  Mask(int r, int c, uint8_t fill = 0) : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

  uint8_t& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  uint8_t at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  size_t count() const {
    size_t n = 0;
    for (auto v : data) n += v;
    return n;
  }
  bool operator==(const Mask&) const = default;
};

/// 64-bit FNV-1a, used for parameter and config fingerprints.
inline uint64_t fnv1a(const void* bytes, size_t n, uint64_t h = 14695981039346656037ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 14695981039346656037ull) {
  return fnv1a(s.data(), s.size(), h);
}

}  // namespace wsisam
