#include "wsisam/prompts.hpp"

#include "wsisam/image_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace wsisam {

int PromptSet::token_count() const {
  int n = 0;
  if (points) n += static_cast<int>(points->points.size());
  if (box) n += 2;
  return std::max(n, 1);
}

void validate_prompts(const PromptSet& p, int patch_size) {
  if (p.empty()) throw EmptyPrompt("prompt set is empty; need points, a box or a mask");
  if (p.points) {
    if (p.points->points.size() != p.points->labels.size()) {
      throw InvalidArgument("prompt: points and labels differ in length");
    }
    for (size_t i = 0; i < p.points->points.size(); ++i) {
      const auto [r, c] = p.points->points[i];
      if (r < 0 || c < 0 || r >= patch_size || c >= patch_size) {
        throw InvalidArgument("prompt: point (" + std::to_string(r) + ", " + std::to_string(c) +
                              ") outside the patch");
      }
      if (p.points->labels[i] != 0 && p.points->labels[i] != 1) throw InvalidArgument("prompt: labels must be 0 or 1");
    }
  }
  if (p.box) {
    const auto& b = *p.box;
    if (!(b.r0 < b.r1 && b.c0 < b.c1)) throw InvalidArgument("prompt: box must satisfy r0 < r1 and c0 < c1");
    if (b.r0 < 0 || b.c0 < 0 || b.r1 > patch_size || b.c1 > patch_size) {
      throw InvalidArgument("prompt: box outside the patch");
    }
  }
  if (p.mask && (p.mask->mask.rows != patch_size || p.mask->mask.cols != patch_size)) {
    throw InvalidArgument("prompt: coarse mask must be " + std::to_string(patch_size) + "x" +
                          std::to_string(patch_size));
  }
}

BoxPrompt tight_box(const Mask& gt) {
  BoxPrompt b{gt.rows, gt.cols, -1, -1};
  for (int r = 0; r < gt.rows; ++r) {
    for (int c = 0; c < gt.cols; ++c) {
      if (!gt.at(r, c)) continue;
      b.r0 = std::min(b.r0, r);
      b.c0 = std::min(b.c0, c);
      b.r1 = std::max(b.r1, r + 1);
      b.c1 = std::max(b.c1, c + 1);
    }
  }
  if (b.r1 < 0) throw InvalidArgument("tight_box: empty ground truth, no object to prompt");
  return b;
}

BoxPrompt simulate_box(const Mask& gt, double jitter_frac, std::mt19937_64& rng) {
  const BoxPrompt tight = tight_box(gt);
  if (jitter_frac <= 0.0) return tight;
  const double h = tight.r1 - tight.r0;
  const double w = tight.c1 - tight.c0;
  std::normal_distribution<double> nh(0.0, jitter_frac * h);
  std::normal_distribution<double> nw(0.0, jitter_frac * w);
  for (int attempt = 0; attempt < 10; ++attempt) {
    BoxPrompt b;
    b.r0 = std::clamp(static_cast<int>(std::lround(tight.r0 + nh(rng))), 0, gt.rows);
    b.r1 = std::clamp(static_cast<int>(std::lround(tight.r1 + nh(rng))), 0, gt.rows);
    b.c0 = std::clamp(static_cast<int>(std::lround(tight.c0 + nw(rng))), 0, gt.cols);
    b.c1 = std::clamp(static_cast<int>(std::lround(tight.c1 + nw(rng))), 0, gt.cols);
    if (b.r0 < b.r1 && b.c0 < b.c1) return b;
  }
  return tight;
}

namespace {

std::vector<std::pair<int, int>> pick(std::vector<std::pair<int, int>> pool, int n, std::mt19937_64& rng) {
  // Partial Fisher-Yates.
  for (int i = 0; i < n; ++i) {
    std::uniform_int_distribution<size_t> u(static_cast<size_t>(i), pool.size() - 1);
    std::swap(pool[static_cast<size_t>(i)], pool[u(rng)]);
  }
  pool.resize(static_cast<size_t>(n));
  return pool;
}

}  // namespace

PointPrompt sample_points(const Mask& gt, int n_pos, int n_neg, std::mt19937_64& rng) {
  if (n_pos < 0 || n_neg < 0) throw InvalidArgument("sample_points: counts must be non-negative");
  if (n_pos + n_neg == 0) throw EmptyPrompt("sample_points: need at least one point");
  std::vector<std::pair<int, int>> fg, bg;
  for (int r = 0; r < gt.rows; ++r) {
    for (int c = 0; c < gt.cols; ++c) (gt.at(r, c) ? fg : bg).emplace_back(r, c);
  }
  if (static_cast<int>(fg.size()) < n_pos) {
    throw InvalidArgument("sample_points: " + std::to_string(n_pos) + " positive points requested but only " +
                          std::to_string(fg.size()) + " foreground pixels");
  }
  if (static_cast<int>(bg.size()) < n_neg) {
    throw InvalidArgument("sample_points: " + std::to_string(n_neg) + " negative points requested but only " +
                          std::to_string(bg.size()) + " background pixels");
  }
  PointPrompt out;
  for (const auto& p : pick(std::move(fg), n_pos, rng)) {
    out.points.push_back(p);
    out.labels.push_back(1);
  }
  for (const auto& p : pick(std::move(bg), n_neg, rng)) {
    out.points.push_back(p);
    out.labels.push_back(0);
  }
  return out;
}

Mask boundary_band(const Mask& gt, int width) {
  if (width < 1) throw InvalidArgument("boundary_band: width must be >= 1");
  Mask edge(gt.rows, gt.cols);
  for (int r = 0; r < gt.rows; ++r) {
    for (int c = 0; c < gt.cols; ++c) {
      const uint8_t v = gt.at(r, c);
      const bool differs = (r > 0 && gt.at(r - 1, c) != v) || (r + 1 < gt.rows && gt.at(r + 1, c) != v) ||
                           (c > 0 && gt.at(r, c - 1) != v) || (c + 1 < gt.cols && gt.at(r, c + 1) != v);
      edge.at(r, c) = differs ? 1 : 0;
    }
  }
  // Separable square dilation of radius width-1.
  const int rad = width - 1;
  Mask tmp(gt.rows, gt.cols);
  for (int r = 0; r < gt.rows; ++r) {
    for (int c = 0; c < gt.cols; ++c) {
      uint8_t m = 0;
      for (int d = std::max(0, c - rad); d <= std::min(gt.cols - 1, c + rad) && !m; ++d) m = edge.at(r, d);
      tmp.at(r, c) = m;
    }
  }
  Mask band(gt.rows, gt.cols);
  for (int r = 0; r < gt.rows; ++r) {
    for (int c = 0; c < gt.cols; ++c) {
      uint8_t m = 0;
      for (int d = std::max(0, r - rad); d <= std::min(gt.rows - 1, r + rad) && !m; ++d) m = tmp.at(d, c);
      band.at(r, c) = m;
    }
  }
  return band;
}

CoarseMask degrade_mask(const Mask& gt, int boundary_width, double noise_std, std::mt19937_64& rng) {
  if (boundary_width < 1) throw InvalidArgument("degrade_mask: boundary_width must be >= 1");
  if (noise_std < 0.0) throw InvalidArgument("degrade_mask: noise_std must be >= 0");
  CoarseMask out{gt};
  if (noise_std == 0.0) return out;
  const Mask band = boundary_band(gt, boundary_width);
  std::normal_distribution<double> noise(0.0, noise_std);
  for (size_t i = 0; i < gt.data.size(); ++i) {
    if (!band.data[i]) continue;
    if (std::abs(noise(rng)) > 0.5) out.mask.data[i] = gt.data[i] ? 0 : 1;
  }
  return out;
}

void init_prompt_encoder(ParamStore& s, int dim, std::mt19937_64& rng) {
  if (dim % 2) throw InvalidArgument("prompt encoder: dim must be even");
  s.add("prompt.pe_gaussian", normal_matrix(2, dim / 2, 1.0, rng), false);
  // Rows: negative point, positive point, box top-left, box bottom-right.
  s.add("prompt.point_embed", normal_matrix(4, dim, 1.0, rng), false);
  s.add("prompt.not_a_point", normal_matrix(1, dim, 1.0, rng), false);
  s.add("prompt.no_mask", normal_matrix(1, dim, 1.0, rng), false);
  init_linear(s, "prompt.mask_fc1", 1, dim, false, rng);
  init_linear(s, "prompt.mask_fc2", dim, dim, false, rng);
}

Mat positional_encoding(const ParamStore& params, double row_norm, double col_norm) {
  const Mat& g = params.get("prompt.pe_gaussian");
  const Eigen::Index half = g.cols();
  Mat out(1, 2 * half);
  const double y = 2.0 * row_norm - 1.0;
  const double x = 2.0 * col_norm - 1.0;
  for (Eigen::Index k = 0; k < half; ++k) {
    const double a = 2.0 * std::numbers::pi * (y * g(0, k) + x * g(1, k));
    out(0, k) = std::sin(a);
    out(0, half + k) = std::cos(a);
  }
  return out;
}

Mat image_positional_encoding(const ParamStore& params, int grid) {
  const Eigen::Index dim = 2 * params.get("prompt.pe_gaussian").cols();
  Mat pe(static_cast<Eigen::Index>(grid) * grid, dim);
  for (int i = 0; i < grid; ++i) {
    for (int j = 0; j < grid; ++j) {
      pe.row(static_cast<Eigen::Index>(i) * grid + j) = positional_encoding(params, (i + 0.5) / grid, (j + 0.5) / grid);
    }
  }
  return pe;
}

Mat mask_in_frame(const Mask& m, PromptFrame frame) {
  const int P = m.rows;
  Mat out = Mat::Zero(P, P);
  if (frame.scale == 1.0 && frame.offset == 0.0) {
    for (int r = 0; r < P; ++r) {
      for (int c = 0; c < P; ++c) out(r, c) = m.at(r, c);
    }
    return out;
  }
  if (frame.scale != 0.5 || frame.offset != P / 4.0) throw InvalidArgument("mask_in_frame: unsupported frame");
  const int off = P / 4;
  for (int r = 0; r < P / 2; ++r) {
    for (int c = 0; c < P / 2; ++c) {
      out(off + r, off + c) =
          0.25 * (m.at(2 * r, 2 * c) + m.at(2 * r, 2 * c + 1) + m.at(2 * r + 1, 2 * c) + m.at(2 * r + 1, 2 * c + 1));
    }
  }
  return out;
}

EncodedPrompts encode_prompts(const PromptSet& prompts, const ParamStore& params, int patch_size, int grid,
                              PromptFrame frame) {
  validate_prompts(prompts, patch_size);
  if (grid <= 0 || patch_size % grid) throw InvalidArgument("encode_prompts: grid must divide patch_size");
  const Mat& embed = params.get("prompt.point_embed");
  const Eigen::Index dim = embed.cols();
  const double P = patch_size;
  std::vector<Mat> rows;
  if (prompts.points) {
    for (size_t i = 0; i < prompts.points->points.size(); ++i) {
      const auto [r, c] = prompts.points->points[i];
      const double y = ((r + 0.5) * frame.scale + frame.offset) / P;
      const double x = ((c + 0.5) * frame.scale + frame.offset) / P;
      rows.push_back(positional_encoding(params, y, x) + embed.row(prompts.points->labels[i] ? 1 : 0));
    }
  }
  if (prompts.box) {
    const auto& b = *prompts.box;
    rows.push_back(positional_encoding(params, (b.r0 * frame.scale + frame.offset) / P,
                                       (b.c0 * frame.scale + frame.offset) / P) +
                   embed.row(2));
    rows.push_back(positional_encoding(params, (b.r1 * frame.scale + frame.offset) / P,
                                       (b.c1 * frame.scale + frame.offset) / P) +
                   embed.row(3));
  }
  if (rows.empty()) rows.push_back(params.get("prompt.not_a_point"));

  EncodedPrompts out;
  out.tokens.resize(static_cast<Eigen::Index>(rows.size()), dim);
  for (size_t i = 0; i < rows.size(); ++i) out.tokens.row(static_cast<Eigen::Index>(i)) = rows[i];

  const Eigen::Index cells = static_cast<Eigen::Index>(grid) * grid;
  if (!prompts.mask) {
    out.dense = params.get("prompt.no_mask").replicate(cells, 1);
    return out;
  }
  const Mat m = mask_in_frame(prompts.mask->mask, frame);
  const int cell = patch_size / grid;
  Mat pooled(cells, 1);
  for (int i = 0; i < grid; ++i) {
    for (int j = 0; j < grid; ++j) {
      pooled(static_cast<Eigen::Index>(i) * grid + j, 0) = m.block(i * cell, j * cell, cell, cell).mean();
    }
  }
  Mat h = (pooled * params.get("prompt.mask_fc1.w")).rowwise() + params.get("prompt.mask_fc1.b").row(0);
  h = h.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * (1.0 / std::numbers::sqrt2))); });
  out.dense = (h * params.get("prompt.mask_fc2.w")).rowwise() + params.get("prompt.mask_fc2.b").row(0);
  return out;
}

PromptSet prompts_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw InvalidArgument("prompt JSON must be an object");
  PromptSet p;
  if (j.contains("points") && !j["points"].empty()) {
    PointPrompt pp;
    for (const auto& pt : j["points"]) {
      if (!pt.is_array() || pt.size() != 2) throw InvalidArgument("prompt JSON: points must be [row, col] pairs");
      pp.points.emplace_back(pt[0].get<int>(), pt[1].get<int>());
    }
    if (j.contains("labels")) {
      pp.labels = j["labels"].get<std::vector<int>>();
    } else {
      pp.labels.assign(pp.points.size(), 1);
    }
    p.points = std::move(pp);
  } else if (j.contains("labels") && !j["labels"].empty()) {
    throw InvalidArgument("prompt JSON: labels given without points");
  }
  if (j.contains("box") && !j["box"].is_null()) {
    const auto b = j["box"].get<std::vector<int>>();
    if (b.size() != 4) throw InvalidArgument("prompt JSON: box must be [r0, c0, r1, c1]");
    p.box = BoxPrompt{b[0], b[1], b[2], b[3]};
  }
  if (j.contains("mask_path") && !j["mask_path"].is_null()) {
    std::filesystem::path mp = j["mask_path"].get<std::string>();
    if (mp.is_relative() && !base_dir.empty()) mp = base_dir / mp;
    p.mask = CoarseMask{decode_mask_png(read_file(mp))};
  }
  return p;
}

nlohmann::json prompts_to_json(const PromptSet& p) {
  nlohmann::json j = nlohmann::json::object();
  if (p.points) {
    j["points"] = nlohmann::json::array();
    for (const auto& [r, c] : p.points->points) j["points"].push_back({r, c});
    j["labels"] = p.points->labels;
  }
  if (p.box) j["box"] = {p.box->r0, p.box->c0, p.box->r1, p.box->c1};
  if (p.mask) j["mask_pixels"] = p.mask->mask.count();
  return j;
}

}  // namespace wsisam
