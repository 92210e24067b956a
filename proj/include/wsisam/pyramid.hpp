#pragma once

#include "wsisam/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace wsisam {

/// Synthetic object families. Both look identical inside a high-resolution
/// window; only lesions carry a concentric halo far enough out that it is
/// visible from the next coarser level alone.
enum class ObjectFamily { lesion, duct };

std::string to_string(ObjectFamily f);
ObjectFamily family_from_string(const std::string& s);

struct ObjectInfo {
  int center_row = 0;
  int center_col = 0;
  double radius = 0.0;
  ObjectFamily family = ObjectFamily::lesion;
};

/// Dyadic image pyramid with a ground-truth mask per level. Level k has
/// dimensions level0 / 2^k; pixel origin is (0, 0) at every level.
struct PyramidImage {
  std::string id;
  std::vector<Image> levels;
  std::vector<Mask> gt_levels;
  std::vector<ObjectInfo> objects;  // level-0 coordinates; empty for uploads
  uint64_t seed = 0;
  std::string generator_config;  // JSON text; empty for uploads

  int n_levels() const { return static_cast<int>(levels.size()); }
};

struct Extent {
  int r0 = 0;
  int c0 = 0;
  int r1 = 0;
  int c1 = 0;
  bool operator==(const Extent&) const = default;
};

/// High-resolution patch and its concentric low-resolution partner. Both are
/// P x P pixels; the LR patch covers twice the spatial extent.
struct PatchPair {
  Image hr_patch;
  Image lr_patch;
  int center_row = 0;  // level-0 coordinates
  int center_col = 0;
  int hr_level = 0;
  Mask gt_hr;
  Mask gt_lr;
  std::string source_id;
  std::string family;  // family of the object the pair was centred on, or "none"

  int patch_size() const { return hr_patch.rows; }
  /// Extents in level-0 pixel coordinates, half-open.
  Extent hr_extent_world() const;
  Extent lr_extent_world() const;
};

Image avgpool2x2(const Image& img);
Mask maxpool2x2(const Mask& m);
Image center_crop(const Image& img, int size);
Mask center_crop(const Mask& m, int size);
Image crop(const Image& img, int r0, int c0, int rows, int cols);
Mask crop(const Mask& m, int r0, int c0, int rows, int cols);

PyramidImage build_pyramid(const Image& image, const Mask& gt, int n_levels, std::string id = {});

/// Extracts the concentric pair centred at `center_world` (level-0 pixels).
/// The centre must be a multiple of 2^(hr_level+1) and patch_size a multiple
/// of 4. Both windows then land on integer pixels of their levels.
PatchPair extract_pair(const PyramidImage& pyr, int center_row, int center_col, int hr_level, int patch_size);

struct SynthConfig {
  int n_images = 1;
  int image_size = 512;
  int n_objects = 2;
  double ring_fraction = 0.3;    // wall thickness / radius
  double distractor_rate = 0.5;  // probability an object is a duct (wall-only GT, no halo)
  uint64_t seed = 0;
  int n_levels = 2;
  double min_radius = 18.0;
  double max_radius = 34.0;
  double halo_radius = 100.0;  // inner radius of the lesion halo
  double halo_width = 16.0;
};

std::string to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const std::string& text);

/// Ring-shaped objects on a textured stroma: a dark wall around a pale lumen
/// with dark specks. The ground truth of a lesion is the whole filled disc; a
/// duct contributes only its wall. Lesions also carry a faint halo at
/// halo_radius, outside any HR window centred on them. Pure function of `cfg`.
std::vector<PyramidImage> synth_dataset(const SynthConfig& cfg);

struct SamplerConfig {
  int patch_size = 128;
  int hr_level = 0;
  int pairs_per_image = 2;
  bool foreground_bias = true;  // centre on GT components rather than uniformly
  int center_jitter = 6;        // level-0 pixels, foreground-biased mode only
};

/// Range of valid world centres for pair extraction, inclusive, already
/// aligned to the 2^(hr_level+1) grid. Returns false when none exist.
bool valid_center_range(const PyramidImage& pyr, int hr_level, int patch_size, int& lo_row, int& hi_row,
                        int& lo_col, int& hi_col);

/// Snaps a world centre onto the nearest valid centre for pair extraction.
void snap_center(const PyramidImage& pyr, int hr_level, int patch_size, int& row, int& col);

std::vector<PatchPair> sample_pairs(const std::vector<PyramidImage>& data, const SamplerConfig& cfg, uint64_t seed);

struct Component {
  int r0, c0, r1, c1;  // half-open bounding box
  size_t area;
};
/// 8-connected components of a mask, in raster order of first pixel.
std::vector<Component> connected_components(const Mask& m);

}  // namespace wsisam
