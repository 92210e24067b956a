#pragma once

#include "wsisam/params.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <optional>
#include <random>
#include <utility>
#include <vector>

namespace wsisam {

/// Half-open box in HR-patch pixel coordinates.
struct BoxPrompt {
  int r0 = 0;
  int c0 = 0;
  int r1 = 0;
  int c1 = 0;
  bool operator==(const BoxPrompt&) const = default;
};

/// Points as (row, col); labels 1 = positive, 0 = negative.
struct PointPrompt {
  std::vector<std::pair<int, int>> points;
  std::vector<int> labels;
  bool operator==(const PointPrompt&) const = default;
};

struct CoarseMask {
  Mask mask;
  bool operator==(const CoarseMask&) const = default;
};

struct PromptSet {
  std::optional<PointPrompt> points;
  std::optional<BoxPrompt> box;
  std::optional<CoarseMask> mask;

  bool empty() const { return !(points && !points->points.empty()) && !box && !mask; }
  /// Sparse token count: one per point plus two per box, padded to >= 1.
  int token_count() const;
  bool operator==(const PromptSet&) const = default;
};

/// Throws EmptyPrompt for an empty set, InvalidArgument for anything outside
/// a patch of side `patch_size`.
void validate_prompts(const PromptSet& p, int patch_size);

BoxPrompt tight_box(const Mask& gt);

/// Tight box with each edge shifted by N(0, (jitter_frac * side)^2), rounded
/// and clipped. Degenerate draws are retried 10 times before falling back to
/// the tight box.
BoxPrompt simulate_box(const Mask& gt, double jitter_frac, std::mt19937_64& rng);

/// Uniform sampling without replacement from foreground / background pixels.
PointPrompt sample_points(const Mask& gt, int n_pos, int n_neg, std::mt19937_64& rng);

/// Pixels whose Chebyshev distance to the GT boundary is < width. Boundary
/// pixels are those with a 4-neighbour of the other value.
Mask boundary_band(const Mask& gt, int width);

/// Flips band pixels where |N(0, noise_std^2)| > 0.5; everything else is kept.
CoarseMask degrade_mask(const Mask& gt, int boundary_width, double noise_std, std::mt19937_64& rng);

/// Affine map from HR-patch pixel coordinates into a decoder branch:
/// branch = hr * scale + offset (continuous pixel units).
struct PromptFrame {
  double scale = 1.0;
  double offset = 0.0;
  static PromptFrame hr() { return {}; }
  /// The HR patch occupies the central quarter of the LR patch.
  static PromptFrame lr(int patch_size) { return {0.5, patch_size / 4.0}; }
};

struct EncodedPrompts {
  Mat tokens;  // N_prompt x D
  Mat dense;   // (G*G) x D, added to the image embedding
};

void init_prompt_encoder(ParamStore& s, int dim, std::mt19937_64& rng);

/// Random-Fourier positional encoding of normalised (row, col) in [0, 1].
Mat positional_encoding(const ParamStore& params, double row_norm, double col_norm);
/// Encoding of every cell centre of a grid x grid map, (grid*grid) x D.
Mat image_positional_encoding(const ParamStore& params, int grid);

/// Coarse mask resampled into the branch frame as a P x P map in [0, 1].
Mat mask_in_frame(const Mask& m, PromptFrame frame);

EncodedPrompts encode_prompts(const PromptSet& prompts, const ParamStore& params, int patch_size, int grid,
                              PromptFrame frame = PromptFrame::hr());

// JSON schema: {"points": [[r, c], ...], "labels": [1, 0, ...],
//               "box": [r0, c0, r1, c1], "mask_path": "..."}
// All fields optional, at least one required. Labels default to positive.
PromptSet prompts_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json prompts_to_json(const PromptSet& p);

}  // namespace wsisam
