#pragma once

// Straight-line reference for the dual-branch decoder. Plain nested loops over
// std::vector, written from the documented conventions only; it shares no code
// with the library beyond reading parameters out of the store.

#include "wsisam/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace ref {

using M = std::vector<std::vector<double>>;

inline M zeros(size_t r, size_t c) { return M(r, std::vector<double>(c, 0.0)); }

inline M from(const wsisam::Mat& m) {
  M out = zeros(static_cast<size_t>(m.rows()), static_cast<size_t>(m.cols()));
  for (size_t i = 0; i < out.size(); ++i)
    for (size_t j = 0; j < out[i].size(); ++j) out[i][j] = m(static_cast<long>(i), static_cast<long>(j));
  return out;
}

inline M add(const M& a, const M& b) {
  M o = a;
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < a[i].size(); ++j) o[i][j] += b[i][j];
  return o;
}

inline M linear(const wsisam::ParamStore& s, const std::string& pre, const M& x) {
  const M w = from(s.get(pre + ".w"));
  const M b = from(s.get(pre + ".b"));
  M y = zeros(x.size(), w[0].size());
  for (size_t i = 0; i < x.size(); ++i) {
    for (size_t o = 0; o < w[0].size(); ++o) {
      double acc = b[0][o];
      for (size_t k = 0; k < w.size(); ++k) acc += x[i][k] * w[k][o];
      y[i][o] = acc;
    }
  }
  return y;
}

inline M layer_norm(const wsisam::ParamStore& s, const std::string& pre, const M& x, double eps) {
  const M g = from(s.get(pre + ".g"));
  const M b = from(s.get(pre + ".b"));
  M y = x;
  for (size_t i = 0; i < x.size(); ++i) {
    const double n = static_cast<double>(x[i].size());
    double mean = 0.0;
    for (double v : x[i]) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= n;
    for (size_t j = 0; j < x[i].size(); ++j) y[i][j] = (x[i][j] - mean) / std::sqrt(var + eps) * g[0][j] + b[0][j];
  }
  return y;
}

inline double gelu(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }

inline M mlp_relu(const wsisam::ParamStore& s, const std::string& pre, M x, int layers) {
  for (int l = 0; l < layers; ++l) {
    x = linear(s, pre + ".fc" + std::to_string(l), x);
    if (l + 1 < layers)
      for (auto& row : x)
        for (auto& v : row) v = std::max(v, 0.0);
  }
  return x;
}

inline M attention(const wsisam::ParamStore& s, const std::string& pre, const M& q_in, const M& k_in, const M& v_in,
                   int heads) {
  const M q = linear(s, pre + ".q", q_in);
  const M k = linear(s, pre + ".k", k_in);
  const M v = linear(s, pre + ".v", v_in);
  const size_t inner = q[0].size();
  const size_t dh = inner / static_cast<size_t>(heads);
  M out = zeros(q.size(), inner);
  for (int h = 0; h < heads; ++h) {
    const size_t off = static_cast<size_t>(h) * dh;
    for (size_t i = 0; i < q.size(); ++i) {
      std::vector<double> score(k.size());
      double mx = -1e300;
      for (size_t j = 0; j < k.size(); ++j) {
        double d = 0.0;
        for (size_t c = 0; c < dh; ++c) d += q[i][off + c] * k[j][off + c];
        score[j] = d / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, score[j]);
      }
      double z = 0.0;
      for (auto& sc : score) {
        sc = std::exp(sc - mx);
        z += sc;
      }
      for (size_t j = 0; j < k.size(); ++j) {
        for (size_t c = 0; c < dh; ++c) out[i][off + c] += score[j] / z * v[j][off + c];
      }
    }
  }
  return linear(s, pre + ".o", out);
}

// 2x2 stride-2 transposed convolution; weight column block (2*dy + dx).
inline M conv_t(const wsisam::ParamStore& s, const std::string& pre, const M& x, int h, int w) {
  const M W = from(s.get(pre + ".w"));
  const M b = from(s.get(pre + ".b"));
  const size_t cout = b[0].size();
  M y = zeros(static_cast<size_t>(4 * h * w), cout);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          for (size_t o = 0; o < cout; ++o) {
            double acc = b[0][o];
            for (size_t k = 0; k < W.size(); ++k) acc += x[static_cast<size_t>(r * w + c)][k] * W[k][(2 * dy + dx) * cout + o];
            y[static_cast<size_t>((2 * r + dy) * 2 * w + 2 * c + dx)][o] = acc;
          }
  return y;
}

inline M upscale(const wsisam::ParamStore& s, const std::string& pre, const M& x, int h, int w) {
  M y = conv_t(s, pre + ".up1", x, h, w);
  y = layer_norm(s, pre + ".ln", y, 1e-6);
  for (auto& row : y)
    for (auto& v : row) v = gelu(v);
  return conv_t(s, pre + ".up2", y, 2 * h, 2 * w);
}

// Half-pixel bilinear upsampling of an n x n single-channel map.
inline M upsample(const M& col, int n, int f) {
  const int m = n * f;
  auto tap = [&](int o, int& lo, int& hi, double& wt) {
    double src = (o + 0.5) / f - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(n - 1));
    lo = static_cast<int>(std::floor(src));
    hi = std::min(lo + 1, n - 1);
    wt = src - lo;
  };
  M out = zeros(static_cast<size_t>(m * m), 1);
  for (int r = 0; r < m; ++r) {
    int r0, r1;
    double wr;
    tap(r, r0, r1, wr);
    for (int c = 0; c < m; ++c) {
      int c0, c1;
      double wc;
      tap(c, c0, c1, wc);
      auto at = [&](int rr, int cc) { return col[static_cast<size_t>(rr * n + cc)][0]; };
      out[static_cast<size_t>(r * m + c)][0] = (1 - wr) * ((1 - wc) * at(r0, c0) + wc * at(r0, c1)) +
                                               wr * ((1 - wc) * at(r1, c0) + wc * at(r1, c1));
    }
  }
  return out;
}

inline M image_pe(const wsisam::ParamStore& s, int g) {
  const M G = from(s.get("prompt.pe_gaussian"));
  const size_t half = G[0].size();
  M pe = zeros(static_cast<size_t>(g * g), 2 * half);
  for (int i = 0; i < g; ++i)
    for (int j = 0; j < g; ++j)
      for (size_t k = 0; k < half; ++k) {
        const double y = 2.0 * (i + 0.5) / g - 1.0;
        const double x = 2.0 * (j + 0.5) / g - 1.0;
        const double a = 2.0 * std::numbers::pi * (y * G[0][k] + x * G[1][k]);
        pe[static_cast<size_t>(i * g + j)][k] = std::sin(a);
        pe[static_cast<size_t>(i * g + j)][half + k] = std::cos(a);
      }
  return pe;
}

struct BranchState {
  M queries, keys, qpe, kpe;
};

inline void block(const wsisam::ParamStore& s, const std::string& pre, BranchState& b, bool first, int heads) {
  if (first) {
    b.queries = attention(s, pre + ".self_attn", b.queries, b.queries, b.queries, heads);
  } else {
    const M q = add(b.queries, b.qpe);
    b.queries = add(b.queries, attention(s, pre + ".self_attn", q, q, b.queries, heads));
  }
  b.queries = layer_norm(s, pre + ".norm1", b.queries, 1e-5);
  b.queries = add(b.queries, attention(s, pre + ".cross_t2i", add(b.queries, b.qpe), add(b.keys, b.kpe), b.keys, heads));
  b.queries = layer_norm(s, pre + ".norm2", b.queries, 1e-5);
  b.queries = add(b.queries, mlp_relu(s, pre + ".mlp", b.queries, 2));
  b.queries = layer_norm(s, pre + ".norm3", b.queries, 1e-5);
  b.keys = add(b.keys, attention(s, pre + ".cross_i2t", add(b.keys, b.kpe), add(b.queries, b.qpe), b.queries, heads));
  b.keys = layer_norm(s, pre + ".norm4", b.keys, 1e-5);
}

inline std::vector<double> aggregate(const wsisam::ParamStore& s, const std::vector<double>& a,
                                     const std::vector<double>& b, wsisam::AggregationMode mode) {
  std::vector<double> out(a.size());
  if (mode == wsisam::AggregationMode::avg) {
    for (size_t i = 0; i < a.size(); ++i) out[i] = 0.5 * (a[i] + b[i]);
  } else if (mode == wsisam::AggregationMode::max) {
    for (size_t i = 0; i < a.size(); ++i) out[i] = std::max(a[i], b[i]);
  } else {
    M cat = zeros(1, 2 * a.size());
    for (size_t i = 0; i < a.size(); ++i) {
      cat[0][i] = a[i];
      cat[0][a.size() + i] = b[i];
    }
    out = linear(s, "wsi.agg_fc", cat)[0];
  }
  return out;
}

struct Output {
  M hr_logits;  // (P*P) x 1
  M lr_logits;
};

/// Reference decode. Supports every aggregation mode and target.
inline Output decode(const wsisam::DecoderInputs& in, const wsisam::ParamStore& s, const wsisam::DecoderConfig& cfg) {
  const int g = in.hr->grid_h;
  const int heads = cfg.n_heads;
  M hr_src = from(in.hr->embedding);
  const M lr_emb = from(in.lr->embedding);
  if (cfg.target != wsisam::AggregationTarget::tokens) {
    for (int r = 0; r < g; ++r)
      for (int c = 0; c < g; ++c)
        for (size_t ch = 0; ch < hr_src[0].size(); ++ch) {
          double other = 0.0;
          if (cfg.target == wsisam::AggregationTarget::features_hr_lr) {
            other = lr_emb[static_cast<size_t>((g / 4 + r / 2) * g + g / 4 + c / 2)][ch];
          } else {
            const int pr = (r / 2) * 2, pc = (c / 2) * 2;
            const M e = from(in.hr->embedding);
            other = 0.25 * (e[static_cast<size_t>(pr * g + pc)][ch] + e[static_cast<size_t>(pr * g + pc + 1)][ch] +
                            e[static_cast<size_t>((pr + 1) * g + pc)][ch] +
                            e[static_cast<size_t>((pr + 1) * g + pc + 1)][ch]);
          }
          hr_src[static_cast<size_t>(r * g + c)][ch] = 0.5 * (hr_src[static_cast<size_t>(r * g + c)][ch] + other);
        }
  }
  auto tokens = [&](const wsisam::EncodedPrompts& p) {
    M t = from(s.get("decoder.output_tokens"));
    t.push_back(from(s.get("wsi.hr_token"))[0]);
    t.push_back(from(s.get("wsi.lr_token"))[0]);
    for (const auto& row : from(p.tokens)) t.push_back(row);
    return t;
  };
  const M pe = image_pe(s, g);
  BranchState bh{tokens(*in.prompts_hr), add(hr_src, from(in.prompts_hr->dense)), {}, pe};
  BranchState bl{tokens(*in.prompts_lr), add(lr_emb, from(in.prompts_lr->dense)), {}, pe};
  bh.qpe = bh.queries;
  bl.qpe = bl.queries;
  const bool tok = cfg.target == wsisam::AggregationTarget::tokens;
  for (int b = 0; b < cfg.depth; ++b) {
    const std::string pre = "decoder.block" + std::to_string(b);
    block(s, pre, bh, b == 0, heads);
    block(s, pre, bl, b == 0, heads);
    if (tok && b == 0 && cfg.point == wsisam::AggregationPoint::after_block_1) {
      const auto a = aggregate(s, bh.queries[4], bl.queries[5], cfg.mode);
      bh.queries[4] = bh.queries[5] = bl.queries[4] = bl.queries[5] = a;
    }
  }
  for (BranchState* b : {&bh, &bl}) {
    b->queries = add(b->queries, attention(s, "decoder.final_attn", add(b->queries, b->qpe), add(b->keys, b->kpe),
                                           b->keys, heads));
    b->queries = layer_norm(s, "decoder.norm_final", b->queries, 1e-5);
  }
  std::vector<double> t_hr = bh.queries[4], t_lr = bl.queries[5];
  if (tok) t_hr = t_lr = aggregate(s, t_hr, t_lr, cfg.mode);
  const std::string head = cfg.share_head_with_output_tokens ? "decoder.hypernet0" : "wsi.token_head";

  auto logits = [&](const std::vector<double>& t, const BranchState& b, const wsisam::EncodedImage& img) {
    M fused = upscale(s, "wsi.fusion.decoder", b.keys, g, g);
    fused = add(fused, upscale(s, "wsi.fusion.early", from(img.early_feat), g, g));
    fused = add(fused, upscale(s, "wsi.fusion.late", from(img.late_feat), g, g));
    const auto wv = mlp_relu(s, head, M{t}, 3)[0];
    M l = zeros(fused.size(), 1);
    for (size_t i = 0; i < fused.size(); ++i)
      for (size_t c = 0; c < wv.size(); ++c) l[i][0] += wv[c] * fused[i][c];
    const int f = in.patch_size / (4 * g);
    return f == 1 ? l : upsample(l, 4 * g, f);
  };
  return Output{logits(t_hr, bh, *in.hr), logits(t_lr, bl, *in.lr)};
}

}  // namespace ref
