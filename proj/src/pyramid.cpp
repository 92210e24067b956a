#include "wsisam/pyramid.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <random>

namespace wsisam {

std::string to_string(ObjectFamily f) { return f == ObjectFamily::lesion ? "lesion" : "duct"; }

ObjectFamily family_from_string(const std::string& s) {
  if (s == "lesion") return ObjectFamily::lesion;
  if (s == "duct") return ObjectFamily::duct;
  throw InvalidArgument("unknown object family '" + s + "'");
}

Extent PatchPair::hr_extent_world() const {
  const int scale = 1 << hr_level;
  const int half = patch_size() / 2 * scale;
  return {center_row - half, center_col - half, center_row + half, center_col + half};
}

Extent PatchPair::lr_extent_world() const {
  const int scale = 2 << hr_level;
  const int half = patch_size() / 2 * scale;
  return {center_row - half, center_col - half, center_row + half, center_col + half};
}

Image avgpool2x2(const Image& img) {
  if (img.rows % 2 || img.cols % 2) throw InvalidArgument("avgpool2x2: dimensions must be even");
  Image out(img.rows / 2, img.cols / 2, img.channels);
  for (int r = 0; r < out.rows; ++r) {
    for (int c = 0; c < out.cols; ++c) {
      for (int ch = 0; ch < img.channels; ++ch) {
        double s = img.at(2 * r, 2 * c, ch) + img.at(2 * r, 2 * c + 1, ch) + img.at(2 * r + 1, 2 * c, ch) +
                   img.at(2 * r + 1, 2 * c + 1, ch);
        out.at(r, c, ch) = s * 0.25;
      }
    }
  }
  return out;
}

Mask maxpool2x2(const Mask& m) {
  if (m.rows % 2 || m.cols % 2) throw InvalidArgument("maxpool2x2: dimensions must be even");
  Mask out(m.rows / 2, m.cols / 2);
  for (int r = 0; r < out.rows; ++r) {
    for (int c = 0; c < out.cols; ++c) {
      out.at(r, c) = std::max({m.at(2 * r, 2 * c), m.at(2 * r, 2 * c + 1), m.at(2 * r + 1, 2 * c),
                               m.at(2 * r + 1, 2 * c + 1)});
    }
  }
  return out;
}

Image crop(const Image& img, int r0, int c0, int rows, int cols) {
  if (r0 < 0 || c0 < 0 || r0 + rows > img.rows || c0 + cols > img.cols) throw OutOfBounds("crop: window outside image");
  Image out(rows, cols, img.channels);
  for (int r = 0; r < rows; ++r) {
    const double* src = &img.data[(static_cast<size_t>(r0 + r) * img.cols + c0) * img.channels];
    std::copy(src, src + static_cast<size_t>(cols) * img.channels,
              &out.data[static_cast<size_t>(r) * cols * img.channels]);
  }
  return out;
}

Mask crop(const Mask& m, int r0, int c0, int rows, int cols) {
  if (r0 < 0 || c0 < 0 || r0 + rows > m.rows || c0 + cols > m.cols) throw OutOfBounds("crop: window outside mask");
  Mask out(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) out.at(r, c) = m.at(r0 + r, c0 + c);
  }
  return out;
}

Image center_crop(const Image& img, int size) {
  return crop(img, (img.rows - size) / 2, (img.cols - size) / 2, size, size);
}

Mask center_crop(const Mask& m, int size) { return crop(m, (m.rows - size) / 2, (m.cols - size) / 2, size, size); }

PyramidImage build_pyramid(const Image& image, const Mask& gt, int n_levels, std::string id) {
  if (n_levels < 2) throw InvalidArgument("build_pyramid: n_levels must be >= 2 (pairing needs two levels)");
  if (image.rows <= 0 || image.cols <= 0 || image.channels <= 0) throw InvalidArgument("build_pyramid: empty image");
  if (gt.rows != image.rows || gt.cols != image.cols) {
    throw ShapeMismatch("build_pyramid: ground truth is " + std::to_string(gt.rows) + "x" + std::to_string(gt.cols) +
                        " but image is " + std::to_string(image.rows) + "x" + std::to_string(image.cols));
  }
  const int div = 1 << (n_levels - 1);
  if (image.rows % div || image.cols % div) {
    throw InvalidArgument("build_pyramid: image dimensions " + std::to_string(image.rows) + "x" +
                          std::to_string(image.cols) + " are not divisible by 2^(n_levels-1) = " +
                          std::to_string(div));
  }
  for (auto v : gt.data) {
    if (v > 1) throw InvalidArgument("build_pyramid: ground truth must be binary");
  }
  PyramidImage pyr;
  pyr.id = std::move(id);
  pyr.levels.push_back(image);
  pyr.gt_levels.push_back(gt);
  for (int k = 1; k < n_levels; ++k) {
    pyr.levels.push_back(avgpool2x2(pyr.levels.back()));
    pyr.gt_levels.push_back(maxpool2x2(pyr.gt_levels.back()));
  }
  return pyr;
}

PatchPair extract_pair(const PyramidImage& pyr, int center_row, int center_col, int hr_level, int patch_size) {
  if (patch_size <= 0 || patch_size % 4 != 0) {
    throw InvalidArgument("extract_pair: patch_size must be a positive multiple of 4 (got " +
                          std::to_string(patch_size) + ")");
  }
  if (hr_level < 0 || hr_level + 1 >= pyr.n_levels()) {
    throw OutOfBounds("extract_pair: hr_level " + std::to_string(hr_level) + " needs level " +
                      std::to_string(hr_level + 1) + " to exist");
  }
  const int align = 2 << hr_level;
  if (center_row % align || center_col % align) {
    throw InvalidArgument("extract_pair: centre must be a multiple of " + std::to_string(align) +
                          " at hr_level " + std::to_string(hr_level));
  }
  const int half = patch_size / 2;
  const int hr_r = (center_row >> hr_level) - half;
  const int hr_c = (center_col >> hr_level) - half;
  const int lr_r = (center_row >> (hr_level + 1)) - half;
  const int lr_c = (center_col >> (hr_level + 1)) - half;
  const Image& hr_img = pyr.levels[hr_level];
  const Image& lr_img = pyr.levels[hr_level + 1];
  if (hr_r < 0 || hr_c < 0 || hr_r + patch_size > hr_img.rows || hr_c + patch_size > hr_img.cols || lr_r < 0 ||
      lr_c < 0 || lr_r + patch_size > lr_img.rows || lr_c + patch_size > lr_img.cols) {
    throw OutOfBounds("extract_pair: window centred at (" + std::to_string(center_row) + ", " +
                      std::to_string(center_col) + ") with patch " + std::to_string(patch_size) +
                      " falls outside the pyramid");
  }
  PatchPair p;
  p.hr_patch = crop(hr_img, hr_r, hr_c, patch_size, patch_size);
  p.lr_patch = crop(lr_img, lr_r, lr_c, patch_size, patch_size);
  p.gt_hr = crop(pyr.gt_levels[hr_level], hr_r, hr_c, patch_size, patch_size);
  p.gt_lr = crop(pyr.gt_levels[hr_level + 1], lr_r, lr_c, patch_size, patch_size);
  p.center_row = center_row;
  p.center_col = center_col;
  p.hr_level = hr_level;
  p.source_id = pyr.id;
  p.family = "none";
  double best = 1e300;
  for (const auto& o : pyr.objects) {
    double d = std::hypot(o.center_row - center_row, o.center_col - center_col);
    if (d <= o.radius + half && d < best) {
      best = d;
      p.family = to_string(o.family);
    }
  }
  return p;
}

std::string to_json(const SynthConfig& cfg) {
  nlohmann::json j = {{"n_images", cfg.n_images},       {"image_size", cfg.image_size},
                      {"n_objects", cfg.n_objects},     {"ring_fraction", cfg.ring_fraction},
                      {"distractor_rate", cfg.distractor_rate}, {"seed", cfg.seed},
                      {"n_levels", cfg.n_levels},       {"min_radius", cfg.min_radius},
                      {"max_radius", cfg.max_radius},   {"halo_radius", cfg.halo_radius},
                      {"halo_width", cfg.halo_width}};
  return j.dump();
}

SynthConfig synth_config_from_json(const std::string& text) {
  SynthConfig c;
  try {
    auto j = nlohmann::json::parse(text);
    c.n_images = j.value("n_images", c.n_images);
    c.image_size = j.value("image_size", c.image_size);
    c.n_objects = j.value("n_objects", c.n_objects);
    c.ring_fraction = j.value("ring_fraction", c.ring_fraction);
    c.distractor_rate = j.value("distractor_rate", c.distractor_rate);
    c.seed = j.value("seed", c.seed);
    c.n_levels = j.value("n_levels", c.n_levels);
    c.min_radius = j.value("min_radius", c.min_radius);
    c.max_radius = j.value("max_radius", c.max_radius);
    c.halo_radius = j.value("halo_radius", c.halo_radius);
    c.halo_width = j.value("halo_width", c.halo_width);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("synthetic config: ") + e.what());
  }
  return c;
}

namespace {

// Bilinearly interpolated lattice noise in [-1, 1].
std::vector<double> value_noise(int size, int cell, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const int g = size / cell + 2;
  std::vector<double> lattice(static_cast<size_t>(g) * g);
  for (auto& v : lattice) v = u(rng);
  std::vector<double> out(static_cast<size_t>(size) * size);
  for (int r = 0; r < size; ++r) {
    const double fy = static_cast<double>(r) / cell;
    const int y0 = static_cast<int>(fy);
    const double ty = fy - y0;
    for (int c = 0; c < size; ++c) {
      const double fx = static_cast<double>(c) / cell;
      const int x0 = static_cast<int>(fx);
      const double tx = fx - x0;
      const double a = lattice[y0 * g + x0], b = lattice[y0 * g + x0 + 1];
      const double d = lattice[(y0 + 1) * g + x0], e = lattice[(y0 + 1) * g + x0 + 1];
      out[static_cast<size_t>(r) * size + c] = (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * d + tx * e);
    }
  }
  return out;
}

PyramidImage synth_one(const SynthConfig& cfg, int index) {
  std::seed_seq seq{static_cast<uint32_t>(cfg.seed), static_cast<uint32_t>(cfg.seed >> 32), static_cast<uint32_t>(index), 0x5157u};
  std::mt19937_64 rng(seq);
  const int n = cfg.image_size;
  const double reach = cfg.halo_radius + cfg.halo_width + 2.0;
  const double margin = reach;
  // Minimum centre distance: a neighbour's halo clears this object's HR
  // window, corners and sampling jitter included.
  const double min_sep = reach + 100.0;

  std::uniform_real_distribution<double> pos(margin, n - margin);
  std::uniform_real_distribution<double> rad(cfg.min_radius, cfg.max_radius);
  std::bernoulli_distribution is_duct(std::clamp(cfg.distractor_rate, 0.0, 1.0));

  std::vector<ObjectInfo> objects;
  if (cfg.n_objects > 0) {
    bool placed = false;
    for (int restart = 0; restart < 50 && !placed; ++restart) {
      objects.clear();
      for (int tries = 0; tries < 400 && static_cast<int>(objects.size()) < cfg.n_objects; ++tries) {
        const int r = static_cast<int>(std::lround(pos(rng)));
        const int c = static_cast<int>(std::lround(pos(rng)));
        bool ok = true;
        for (const auto& o : objects) ok = ok && std::hypot(o.center_row - r, o.center_col - c) >= min_sep;
        if (ok) objects.push_back(ObjectInfo{r, c, 0.0, ObjectFamily::lesion});
      }
      placed = static_cast<int>(objects.size()) == cfg.n_objects;
    }
    if (!placed) {
      throw InvalidArgument("synth_dataset: cannot place " + std::to_string(cfg.n_objects) + " objects in a " +
                            std::to_string(n) + "x" + std::to_string(n) + " image (each needs " +
                            std::to_string(static_cast<int>(min_sep)) + " px separation and " +
                            std::to_string(static_cast<int>(margin)) + " px border margin)");
    }
    for (auto& o : objects) {
      o.radius = rad(rng);
      o.family = is_duct(rng) ? ObjectFamily::duct : ObjectFamily::lesion;
    }
  }

  // Stroma texture.
  auto coarse = value_noise(n, 32, rng);
  auto fine = value_noise(n, 6, rng);
  std::normal_distribution<double> grain(0.0, 6.0);
  Image img(n, n, 1);
  Mask gt(n, n, 0);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const size_t i = static_cast<size_t>(r) * n + c;
      img.data[i] = 160.0 + 22.0 * coarse[i] + 14.0 * fine[i] + grain(rng);
    }
  }

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (const auto& o : objects) {
    const double inner = o.radius * (1.0 - cfg.ring_fraction);
    // Calcification specks inside the lumen.
    const int n_specks = 3 + static_cast<int>(unit(rng) * 4);
    std::vector<std::pair<double, double>> specks;
    for (int s = 0; s < n_specks; ++s) {
      const double a = unit(rng) * 2.0 * M_PI;
      const double d = std::sqrt(unit(rng)) * std::max(0.0, inner - 4.0);
      specks.emplace_back(o.center_row + d * std::sin(a), o.center_col + d * std::cos(a));
    }
    const int ext = static_cast<int>(std::ceil(cfg.halo_radius + cfg.halo_width)) + 1;
    for (int r = std::max(0, o.center_row - ext); r < std::min(n, o.center_row + ext + 1); ++r) {
      for (int c = std::max(0, o.center_col - ext); c < std::min(n, o.center_col + ext + 1); ++c) {
        const double d = std::hypot(r - o.center_row, c - o.center_col);
        const size_t i = static_cast<size_t>(r) * n + c;
        if (d <= o.radius) {
          if (d >= inner) {
            img.data[i] = 70.0 + 10.0 * fine[i] + grain(rng);
          } else {
            img.data[i] = 205.0 + 12.0 * fine[i] + grain(rng);
            for (const auto& [sr, sc] : specks) {
              if (std::hypot(r - sr, c - sc) <= 2.5) img.data[i] = 55.0 + grain(rng);
            }
          }
          const bool fg = o.family == ObjectFamily::lesion || d >= inner;
          if (fg) gt.data[i] = 1;
        } else if (o.family == ObjectFamily::lesion && d >= cfg.halo_radius &&
                   d < cfg.halo_radius + cfg.halo_width) {
          img.data[i] = 95.0 + 10.0 * fine[i] + grain(rng);
        }
      }
    }
  }
  for (auto& v : img.data) v = std::clamp(std::round(v), 0.0, 255.0);

  auto pyr = build_pyramid(img, gt, cfg.n_levels, "synth-" + std::to_string(cfg.seed) + "-" + std::to_string(index));
  pyr.objects = std::move(objects);
  pyr.seed = cfg.seed;
  pyr.generator_config = to_json(cfg);
  return pyr;
}

}  // namespace

std::vector<PyramidImage> synth_dataset(const SynthConfig& cfg) {
  if (cfg.n_images < 0 || cfg.n_objects < 0) throw InvalidArgument("synth_dataset: counts must be non-negative");
  if (cfg.n_levels < 2) throw InvalidArgument("synth_dataset: n_levels must be >= 2");
  if (cfg.image_size <= 0 || cfg.image_size % (1 << (cfg.n_levels - 1))) {
    throw InvalidArgument("synth_dataset: image_size must be divisible by 2^(n_levels-1)");
  }
  if (cfg.ring_fraction <= 0.0 || cfg.ring_fraction > 1.0) {
    throw InvalidArgument("synth_dataset: ring_fraction must be in (0, 1]");
  }
  if (cfg.min_radius <= 0.0 || cfg.max_radius < cfg.min_radius) throw InvalidArgument("synth_dataset: bad radius range");
  const double reach = cfg.halo_radius + cfg.halo_width + 2.0;
  if (cfg.n_objects > 0 && 2.0 * reach >= cfg.image_size) {
    throw InvalidArgument("synth_dataset: image_size " + std::to_string(cfg.image_size) +
                          " too small for objects with halo reach " + std::to_string(reach));
  }
  std::vector<PyramidImage> out;
  out.reserve(cfg.n_images);
  for (int i = 0; i < cfg.n_images; ++i) out.push_back(synth_one(cfg, i));
  return out;
}

bool valid_center_range(const PyramidImage& pyr, int hr_level, int patch_size, int& lo_row, int& hi_row,
                        int& lo_col, int& hi_col) {
  if (hr_level < 0 || hr_level + 1 >= pyr.n_levels()) return false;
  const int half = patch_size / 2;
  const int s_hr = 1 << hr_level;
  const int s_lr = 2 << hr_level;
  const Image& hr = pyr.levels[hr_level];
  const Image& lr = pyr.levels[hr_level + 1];
  int lr0 = std::max(half * s_hr, half * s_lr);
  int hr0 = std::min((hr.rows - half) * s_hr, (lr.rows - half) * s_lr);
  int lc0 = std::max(half * s_hr, half * s_lr);
  int hc0 = std::min((hr.cols - half) * s_hr, (lr.cols - half) * s_lr);
  const int align = s_lr;
  auto ceil_to = [align](int v) { return (v + align - 1) / align * align; };
  auto floor_to = [align](int v) { return v / align * align; };
  lo_row = ceil_to(lr0);
  hi_row = floor_to(hr0);
  lo_col = ceil_to(lc0);
  hi_col = floor_to(hc0);
  return lo_row <= hi_row && lo_col <= hi_col;
}

void snap_center(const PyramidImage& pyr, int hr_level, int patch_size, int& row, int& col) {
  int lr, hr, lc, hc;
  if (!valid_center_range(pyr, hr_level, patch_size, lr, hr, lc, hc)) {
    throw OutOfBounds("snap_center: no valid centre for patch size " + std::to_string(patch_size));
  }
  const int align = 2 << hr_level;
  auto snap = [align](int v) {
    const int q = v >= 0 ? (v + align / 2) / align : -((-v + align / 2) / align);
    return q * align;
  };
  row = std::clamp(snap(row), lr, hr);
  col = std::clamp(snap(col), lc, hc);
}

std::vector<PatchPair> sample_pairs(const std::vector<PyramidImage>& data, const SamplerConfig& cfg, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<PatchPair> out;
  for (const auto& pyr : data) {
    int lr, hr, lc, hc;
    if (!valid_center_range(pyr, cfg.hr_level, cfg.patch_size, lr, hr, lc, hc)) {
      throw OutOfBounds("sample_pairs: image '" + pyr.id + "' too small for patch size " +
                        std::to_string(cfg.patch_size));
    }
    std::vector<std::pair<int, int>> anchors;
    if (cfg.foreground_bias) {
      if (!pyr.objects.empty()) {
        for (const auto& o : pyr.objects) anchors.emplace_back(o.center_row, o.center_col);
      } else {
        for (const auto& comp : connected_components(pyr.gt_levels[0])) {
          anchors.emplace_back((comp.r0 + comp.r1) / 2, (comp.c0 + comp.c1) / 2);
        }
      }
    }
    std::uniform_int_distribution<int> jitter(-cfg.center_jitter, cfg.center_jitter);
    for (int k = 0; k < cfg.pairs_per_image; ++k) {
      int row, col;
      if (!anchors.empty()) {
        const auto& a = anchors[static_cast<size_t>(k) % anchors.size()];
        row = a.first + jitter(rng);
        col = a.second + jitter(rng);
      } else {
        row = std::uniform_int_distribution<int>(lr, hr)(rng);
        col = std::uniform_int_distribution<int>(lc, hc)(rng);
      }
      snap_center(pyr, cfg.hr_level, cfg.patch_size, row, col);
      out.push_back(extract_pair(pyr, row, col, cfg.hr_level, cfg.patch_size));
    }
  }
  return out;
}

std::vector<Component> connected_components(const Mask& m) {
  std::vector<Component> comps;
  std::vector<int> label(m.data.size(), -1);
  std::vector<std::pair<int, int>> stack;
  for (int r = 0; r < m.rows; ++r) {
    for (int c = 0; c < m.cols; ++c) {
      if (!m.at(r, c) || label[static_cast<size_t>(r) * m.cols + c] >= 0) continue;
      Component comp{r, c, r + 1, c + 1, 0};
      const int id = static_cast<int>(comps.size());
      stack.emplace_back(r, c);
      label[static_cast<size_t>(r) * m.cols + c] = id;
      while (!stack.empty()) {
        auto [y, x] = stack.back();
        stack.pop_back();
        ++comp.area;
        comp.r0 = std::min(comp.r0, y);
        comp.c0 = std::min(comp.c0, x);
        comp.r1 = std::max(comp.r1, y + 1);
        comp.c1 = std::max(comp.c1, x + 1);
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = y + dy, nx = x + dx;
            if (ny < 0 || nx < 0 || ny >= m.rows || nx >= m.cols) continue;
            const size_t j = static_cast<size_t>(ny) * m.cols + nx;
            if (m.data[j] && label[j] < 0) {
              label[j] = id;
              stack.emplace_back(ny, nx);
            }
          }
        }
      }
      comps.push_back(comp);
    }
  }
  return comps;
}

}  // namespace wsisam
