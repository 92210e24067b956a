#pragma once

#include "wsisam/params.hpp"

#include <string>

namespace wsisam {

/// Plain ViT image encoder. Exposes an early-block tap, the last block output
/// and the neck-projected image embedding.
struct EncoderConfig {
  int image_size = 128;    // square input patch side P
  int in_channels = 1;
  int patch_size_px = 8;   // tokenisation patch
  int depth = 4;
  int dim = 64;
  int n_heads = 4;
  int early_tap = 0;       // block index whose output is the early feature
  double mlp_ratio = 4.0;
  double pixel_mean = 128.0;
  double pixel_std = 64.0;

  int grid() const { return image_size / patch_size_px; }
  void validate() const;
};

/// Feature maps stored as (H'*W') x C.
struct EncodedImage {
  int grid_h = 0;
  int grid_w = 0;
  Mat embedding;
  Mat early_feat;
  Mat late_feat;
};

struct EncoderVars {
  ad::Var embedding;
  ad::Var early;
  ad::Var late;
};

void init_encoder(ParamStore& s, const EncoderConfig& cfg, std::mt19937_64& rng);

/// Converts an image to the (P*P) x channels matrix the encoder consumes.
Mat image_to_mat(const Image& img);

/// Differentiable forward pass; `patch` is (P*P) x channels of raw intensities.
EncoderVars encode_image(ParamBinding& p, ad::Var patch, const EncoderConfig& cfg);

/// Inference convenience: no gradients, deterministic.
EncodedImage encode_image(const Image& patch, const EncoderConfig& cfg, const ParamStore& params);

}  // namespace wsisam
