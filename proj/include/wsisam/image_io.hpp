#pragma once

#include "wsisam/pyramid.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace wsisam {

// Pixel intensities live in [0, 255]. Images are stored as 16-bit PNG holding
// value * 256, which is exact for every level up to 4 of a pyramid built from
// integer-valued level-0 pixels (level k values are multiples of 4^-k).
inline constexpr double kPngScale = 256.0;

/// Lossless 16-bit PNG (gray or RGB). Throws if a value is not representable.
std::string encode_png(const Image& img);
Image decode_png(const std::string& bytes);

/// 8-bit gray PNG with 0/255.
std::string encode_mask_png(const Mask& m);
/// Any non-zero pixel decodes to 1.
Mask decode_mask_png(const std::string& bytes);

std::string read_file(const std::filesystem::path& p);
void write_file(const std::filesystem::path& p, const std::string& bytes);

// Dataset layout: one directory per pyramid,
//   <dir>/level_<k>.png, <dir>/mask_<k>.png, <dir>/meta.json
// meta.json: {"format": "wsisam-pyramid", "version": 1, "id", "n_levels",
//             "dims": [[rows, cols, channels], ...], "seed", "generator": {...},
//             "objects": [{"center": [r, c], "radius", "family"}, ...]}
void save_pyramid(const std::filesystem::path& dir, const PyramidImage& pyr);
PyramidImage load_pyramid(const std::filesystem::path& dir);

/// Writes each pyramid to <out>/<id>/.
void save_dataset(const std::filesystem::path& out, const std::vector<PyramidImage>& data);
/// Loads every subdirectory holding a meta.json, sorted by name.
std::vector<PyramidImage> load_dataset(const std::filesystem::path& dir);

}  // namespace wsisam
