#include "wsisam/decoder.hpp"

#include "wsisam/layers.hpp"

#include <array>

namespace wsisam {

std::string to_string(AggregationMode m) {
  switch (m) {
    case AggregationMode::avg: return "avg";
    case AggregationMode::max: return "max";
    case AggregationMode::concat_fc: return "concat_fc";
  }
  return "?";
}

std::string to_string(AggregationTarget t) {
  switch (t) {
    case AggregationTarget::tokens: return "tokens";
    case AggregationTarget::features_hr_lr: return "features_hr_lr";
    case AggregationTarget::features_hr_expand: return "features_hr_expand";
  }
  return "?";
}

std::string to_string(AggregationPoint p) {
  return p == AggregationPoint::after_block_1 ? "after_block_1" : "after_block_2_pre_head";
}

AggregationMode aggregation_mode_from_string(const std::string& s) {
  if (s == "avg") return AggregationMode::avg;
  if (s == "max") return AggregationMode::max;
  if (s == "concat_fc") return AggregationMode::concat_fc;
  throw InvalidArgument("unknown aggregation mode '" + s + "' (expected avg, max or concat_fc)");
}

AggregationTarget aggregation_target_from_string(const std::string& s) {
  if (s == "tokens") return AggregationTarget::tokens;
  if (s == "features_hr_lr") return AggregationTarget::features_hr_lr;
  if (s == "features_hr_expand") return AggregationTarget::features_hr_expand;
  throw InvalidArgument("unknown aggregation target '" + s +
                        "' (expected tokens, features_hr_lr or features_hr_expand)");
}

AggregationPoint aggregation_point_from_string(const std::string& s) {
  if (s == "after_block_1") return AggregationPoint::after_block_1;
  if (s == "after_block_2_pre_head") return AggregationPoint::after_block_2_pre_head;
  throw InvalidArgument("unknown aggregation point '" + s + "'");
}

void DecoderConfig::validate() const {
  if (dim <= 0 || n_heads <= 0 || dim % n_heads) throw InvalidArgument("decoder: dim must be divisible by n_heads");
  if (attention_downsample <= 0 || (dim / attention_downsample) % n_heads) {
    throw InvalidArgument("decoder: cross-attention dim must be divisible by n_heads");
  }
  if (depth < 2) throw InvalidArgument("decoder: need at least two two-way blocks");
  if (dim % 8) throw InvalidArgument("decoder: dim must be a multiple of 8");
  if (fusion_channels <= 0 || encoder_dim <= 0 || mlp_dim <= 0) throw InvalidArgument("decoder: sizes must be positive");
  if (share_head_with_output_tokens && fusion_channels != dim / 8) {
    throw InvalidArgument("decoder: sharing the output-token head needs fusion_channels == dim / 8");
  }
}

Mat TokenSet::concat() const {
  const Eigen::Index d = output_tokens.cols();
  if (hr_token.cols() != d || lr_token.cols() != d || prompt_tokens.cols() != d) {
    throw ShapeMismatch("TokenSet: all tokens must share dim D");
  }
  Mat out(kPromptStart + prompt_tokens.rows(), d);
  out << output_tokens, hr_token, lr_token, prompt_tokens;
  return out;
}

Mask binarize(const Mat& logits) {
  Mask m(static_cast<int>(logits.rows()), static_cast<int>(logits.cols()));
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    for (Eigen::Index c = 0; c < logits.cols(); ++c) m.at(static_cast<int>(r), static_cast<int>(c)) = logits(r, c) > 0.0;
  }
  return m;
}

Mat column_to_square(const Mat& col, int side) {
  if (col.size() != static_cast<Eigen::Index>(side) * side) throw ShapeMismatch("column_to_square: size mismatch");
  return Eigen::Map<const Mat>(col.data(), side, side);
}

void init_decoder(ParamStore& s, const DecoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const int d = cfg.dim;
  s.add("decoder.output_tokens", normal_matrix(TokenSet::kOutputTokens, d, 1.0, rng), false);
  for (int b = 0; b < cfg.depth; ++b) {
    const std::string pre = "decoder.block" + std::to_string(b);
    nn::init_attention(s, pre + ".self_attn", d, d, false, rng);
    init_layer_norm(s, pre + ".norm1", d, false);
    nn::init_attention(s, pre + ".cross_t2i", d, d / cfg.attention_downsample, false, rng);
    init_layer_norm(s, pre + ".norm2", d, false);
    nn::init_mlp(s, pre + ".mlp", {d, cfg.mlp_dim, d}, false, rng);
    init_layer_norm(s, pre + ".norm3", d, false);
    nn::init_attention(s, pre + ".cross_i2t", d, d / cfg.attention_downsample, false, rng);
    init_layer_norm(s, pre + ".norm4", d, false);
  }
  nn::init_attention(s, "decoder.final_attn", d, d / cfg.attention_downsample, false, rng);
  init_layer_norm(s, "decoder.norm_final", d, false);
  nn::init_upscale_path(s, "decoder.output_upscaling", d, d / 4, d / 8, false, rng);
  for (int i = 0; i < TokenSet::kOutputTokens - 1; ++i) {
    nn::init_mlp(s, "decoder.hypernet" + std::to_string(i), {d, d, d, d / 8}, false, rng);
  }
  nn::init_mlp(s, "decoder.iou_head", {d, d, d, TokenSet::kOutputTokens - 1}, false, rng);
}

void init_wsi_params(ParamStore& s, const DecoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const int d = cfg.dim;
  s.add("wsi.hr_token", normal_matrix(1, d, 1.0, rng), true);
  s.add("wsi.lr_token", normal_matrix(1, d, 1.0, rng), true);
  if (cfg.mode == AggregationMode::concat_fc) {
    // Starts out as the average of the two halves.
    Mat w(2 * d, d);
    w << 0.5 * Mat::Identity(d, d), 0.5 * Mat::Identity(d, d);
    s.add("wsi.agg_fc.w", w, true);
    s.add("wsi.agg_fc.b", Mat::Zero(1, d), true);
  }
  nn::init_upscale_path(s, "wsi.fusion.decoder", d, cfg.upscale_hidden(), cfg.fusion_channels, true, rng);
  nn::init_upscale_path(s, "wsi.fusion.early", cfg.encoder_dim, cfg.upscale_hidden(), cfg.fusion_channels, true, rng);
  nn::init_upscale_path(s, "wsi.fusion.late", cfg.encoder_dim, cfg.upscale_hidden(), cfg.fusion_channels, true, rng);
  if (!cfg.share_head_with_output_tokens) {
    nn::init_mlp(s, "wsi.token_head", {d, d, d, cfg.fusion_channels}, true, rng);
  }
}

ad::Var aggregate_tokens(ad::Var t_hr, ad::Var t_lr, AggregationMode mode, ParamBinding& p) {
  if (t_hr.rows() != 1 || t_lr.rows() != 1 || t_hr.cols() != t_lr.cols()) {
    throw ShapeMismatch("aggregate_tokens: expected two 1 x D tokens");
  }
  switch (mode) {
    case AggregationMode::avg: return ad::scale(ad::add(t_hr, t_lr), 0.5);
    case AggregationMode::max: return ad::maximum(t_hr, t_lr);
    case AggregationMode::concat_fc: {
      const std::array<ad::Var, 2> parts{t_hr, t_lr};
      return nn::linear(p, "wsi.agg_fc", ad::concat_cols(parts));
    }
  }
  throw InvalidArgument("aggregate_tokens: unknown mode");
}

Mat aggregate_tokens(const Mat& t_hr, const Mat& t_lr, AggregationMode mode, const ParamStore& params) {
  ad::Tape tape;
  ParamBinding p(tape, params, false);
  return aggregate_tokens(tape.constant(t_hr), tape.constant(t_lr), mode, p).value();
}

ad::Var fuse_features(ParamBinding& p, ad::Var decoder_feat, ad::Var early_feat, ad::Var late_feat, int h, int w) {
  const Eigen::Index n = static_cast<Eigen::Index>(h) * w;
  if (decoder_feat.rows() != n || early_feat.rows() != n || late_feat.rows() != n) {
    throw ShapeMismatch("fuse_features: inputs must share spatial dims " + std::to_string(h) + "x" +
                        std::to_string(w));
  }
  ad::Var out = nn::upscale_path(p, "wsi.fusion.decoder", decoder_feat, h, w);
  out = ad::add(out, nn::upscale_path(p, "wsi.fusion.early", early_feat, h, w));
  return ad::add(out, nn::upscale_path(p, "wsi.fusion.late", late_feat, h, w));
}

Mat fuse_features(const Mat& decoder_feat, const Mat& early_feat, const Mat& late_feat, int h, int w,
                  const ParamStore& params) {
  ad::Tape tape;
  ParamBinding p(tape, params, false);
  return fuse_features(p, tape.constant(decoder_feat), tape.constant(early_feat), tape.constant(late_feat), h, w)
      .value();
}

ad::Var predict_mask_from_token(ParamBinding& p, const std::string& head_prefix, ad::Var t, ad::Var fused) {
  ad::Var weights = nn::mlp(p, head_prefix, t, 3, nn::Activation::relu);
  if (weights.cols() != fused.cols()) {
    throw ShapeMismatch("predict_mask_from_token: head emits " + std::to_string(weights.cols()) +
                        " channels, fused features have " + std::to_string(fused.cols()));
  }
  return ad::matmul_nt(fused, weights);
}

Mat predict_mask_from_token(const std::string& head_prefix, const Mat& t, const Mat& fused, const ParamStore& params) {
  ad::Tape tape;
  ParamBinding p(tape, params, false);
  return predict_mask_from_token(p, head_prefix, tape.constant(t), tape.constant(fused)).value();
}

namespace {

struct Branch {
  ad::Var queries;
  ad::Var keys;
  ad::Var query_pe;
  ad::Var key_pe;
};

void two_way_block(ParamBinding& p, const std::string& pre, Branch& s, bool first, int n_heads) {
  if (first) {
    s.queries = nn::attention(p, pre + ".self_attn", s.queries, s.queries, s.queries, n_heads);
  } else {
    ad::Var q = ad::add(s.queries, s.query_pe);
    s.queries = ad::add(s.queries, nn::attention(p, pre + ".self_attn", q, q, s.queries, n_heads));
  }
  s.queries = nn::layer_norm(p, pre + ".norm1", s.queries);

  ad::Var q = ad::add(s.queries, s.query_pe);
  ad::Var k = ad::add(s.keys, s.key_pe);
  s.queries = ad::add(s.queries, nn::attention(p, pre + ".cross_t2i", q, k, s.keys, n_heads));
  s.queries = nn::layer_norm(p, pre + ".norm2", s.queries);

  s.queries = ad::add(s.queries, nn::mlp(p, pre + ".mlp", s.queries, 2, nn::Activation::relu));
  s.queries = nn::layer_norm(p, pre + ".norm3", s.queries);

  q = ad::add(s.queries, s.query_pe);
  k = ad::add(s.keys, s.key_pe);
  s.keys = ad::add(s.keys, nn::attention(p, pre + ".cross_i2t", k, q, s.queries, n_heads));
  s.keys = nn::layer_norm(p, pre + ".norm4", s.keys);
}

void final_attention(ParamBinding& p, Branch& s, int n_heads) {
  ad::Var q = ad::add(s.queries, s.query_pe);
  ad::Var k = ad::add(s.keys, s.key_pe);
  s.queries = ad::add(s.queries, nn::attention(p, "decoder.final_attn", q, k, s.keys, n_heads));
  s.queries = nn::layer_norm(p, "decoder.norm_final", s.queries);
}

// Nearest-neighbour 2x upsampling of a (g/2 * g/2) x C map to (g * g) x C.
Mat nearest_up2(const Mat& m, int half) {
  const int g = 2 * half;
  Mat out(static_cast<Eigen::Index>(g) * g, m.cols());
  for (int r = 0; r < g; ++r) {
    for (int c = 0; c < g; ++c) out.row(static_cast<Eigen::Index>(r) * g + c) = m.row((r / 2) * half + c / 2);
  }
  return out;
}

Mat center_cells(const Mat& m, int g) {
  const int half = g / 2;
  const int off = g / 4;
  Mat out(static_cast<Eigen::Index>(half) * half, m.cols());
  for (int r = 0; r < half; ++r) {
    for (int c = 0; c < half; ++c) out.row(static_cast<Eigen::Index>(r) * half + c) = m.row((r + off) * g + c + off);
  }
  return out;
}

Mat pool_cells(const Mat& m, int g) {
  const int half = g / 2;
  Mat out(static_cast<Eigen::Index>(half) * half, m.cols());
  for (int r = 0; r < half; ++r) {
    for (int c = 0; c < half; ++c) {
      out.row(static_cast<Eigen::Index>(r) * half + c) =
          0.25 * (m.row(2 * r * g + 2 * c) + m.row(2 * r * g + 2 * c + 1) + m.row((2 * r + 1) * g + 2 * c) +
                  m.row((2 * r + 1) * g + 2 * c + 1));
    }
  }
  return out;
}

ad::Var initial_tokens(ParamBinding& p, const EncodedPrompts& prompts) {
  const std::array<ad::Var, 4> parts{p("decoder.output_tokens"), p("wsi.hr_token"), p("wsi.lr_token"),
                                     p.tape().constant(prompts.tokens)};
  return ad::concat_rows(parts);
}

ad::Var logits_at_patch(ad::Var low, int g4, int patch_size) {
  const int factor = patch_size / g4;
  return factor == 1 ? low : ad::upsample_bilinear(low, g4, g4, factor);
}

}  // namespace

DecoderVars decode(ParamBinding& p, const DecoderInputs& in, const DecoderConfig& cfg, const DecoderHook& hook) {
  cfg.validate();
  if (!in.hr || !in.lr || !in.prompts_hr || !in.prompts_lr) throw InvalidArgument("decode: missing inputs");
  const EncodedImage& hr = *in.hr;
  const EncodedImage& lr = *in.lr;
  const int g = hr.grid_h;
  if (hr.grid_w != g || lr.grid_h != g || lr.grid_w != g) throw ShapeMismatch("decode: HR and LR grids differ");
  if (g % 4) throw ShapeMismatch("decode: grid must be a multiple of 4");
  for (const Mat* m : {&hr.embedding, &lr.embedding}) {
    if (m->cols() != cfg.dim) {
      throw ShapeMismatch("decode: image embedding has dim " + std::to_string(m->cols()) + ", decoder expects " +
                          std::to_string(cfg.dim));
    }
  }
  for (const EncodedPrompts* e : {in.prompts_hr, in.prompts_lr}) {
    if (e->tokens.cols() != cfg.dim || e->dense.cols() != cfg.dim) throw ShapeMismatch("decode: prompt dim mismatch");
    if (e->dense.rows() != static_cast<Eigen::Index>(g) * g) throw ShapeMismatch("decode: dense prompt grid mismatch");
  }
  if (in.prompts_hr->tokens.rows() != in.prompts_lr->tokens.rows()) {
    throw ShapeMismatch("decode: HR and LR prompt token counts differ");
  }
  const int g4 = 4 * g;
  if (in.patch_size % g4) throw ShapeMismatch("decode: patch size must be a multiple of 4 x grid");

  ad::Tape& tape = p.tape();
  Mat hr_src = hr.embedding;
  if (cfg.target == AggregationTarget::features_hr_lr) {
    hr_src = 0.5 * (hr.embedding + nearest_up2(center_cells(lr.embedding, g), g / 2));
  } else if (cfg.target == AggregationTarget::features_hr_expand) {
    hr_src = 0.5 * (hr.embedding + nearest_up2(pool_cells(hr.embedding, g), g / 2));
  }

  ad::Var key_pe = tape.constant(image_positional_encoding(p.store(), g));

  Branch bh{initial_tokens(p, *in.prompts_hr), tape.constant(hr_src + in.prompts_hr->dense), {}, key_pe};
  Branch bl{initial_tokens(p, *in.prompts_lr), tape.constant(lr.embedding + in.prompts_lr->dense), {}, key_pe};
  bh.query_pe = bh.queries;
  bl.query_pe = bl.queries;

  const bool token_target = cfg.target == AggregationTarget::tokens;
  for (int b = 0; b < cfg.depth; ++b) {
    const std::string pre = "decoder.block" + std::to_string(b);
    two_way_block(p, pre, bh, b == 0, cfg.n_heads);
    two_way_block(p, pre, bl, b == 0, cfg.n_heads);
    if (hook) hook(b, TokenSnapshot{bh.queries.value(), bl.queries.value()});
    if (token_target && b == 0 && cfg.point == AggregationPoint::after_block_1) {
      ad::Var agg = aggregate_tokens(ad::slice_rows(bh.queries, TokenSet::kHrRow, 1),
                                     ad::slice_rows(bl.queries, TokenSet::kLrRow, 1), cfg.mode, p);
      bh.queries = ad::replace_row(ad::replace_row(bh.queries, TokenSet::kHrRow, agg), TokenSet::kLrRow, agg);
      bl.queries = ad::replace_row(ad::replace_row(bl.queries, TokenSet::kHrRow, agg), TokenSet::kLrRow, agg);
    }
  }
  final_attention(p, bh, cfg.n_heads);
  final_attention(p, bl, cfg.n_heads);
  if (hook) hook(cfg.depth, TokenSnapshot{bh.queries.value(), bl.queries.value()});

  ad::Var t_hr = ad::slice_rows(bh.queries, TokenSet::kHrRow, 1);
  ad::Var t_lr = ad::slice_rows(bl.queries, TokenSet::kLrRow, 1);
  if (token_target) t_hr = t_lr = aggregate_tokens(t_hr, t_lr, cfg.mode, p);

  const std::string head = cfg.share_head_with_output_tokens ? "decoder.hypernet0" : "wsi.token_head";
  ad::Var fused_hr =
      fuse_features(p, bh.keys, tape.constant(hr.early_feat), tape.constant(hr.late_feat), g, g);
  ad::Var fused_lr =
      fuse_features(p, bl.keys, tape.constant(lr.early_feat), tape.constant(lr.late_feat), g, g);

  DecoderVars out;
  out.hr_logits = logits_at_patch(predict_mask_from_token(p, head, t_hr, fused_hr), g4, in.patch_size);
  out.lr_logits = logits_at_patch(predict_mask_from_token(p, head, t_lr, fused_lr), g4, in.patch_size);

  {
    // Frozen SAM heads on the HR branch; evaluated without gradient.
    const ParamStore& s = p.store();
    const Mat& q = bh.queries.value();
    ad::Tape t2;
    ParamBinding p2(t2, s, false);
    out.iou_estimate = nn::mlp(p2, "decoder.iou_head", t2.constant(q.row(0)), 3, nn::Activation::relu).value()(0, 0);
    if (cfg.emit_output_token_masks) {
      const Mat up = nn::upscale_path(p2, "decoder.output_upscaling", t2.constant(bh.keys.value()), g, g).value();
      for (int i = 0; i < TokenSet::kOutputTokens - 1; ++i) {
        out.output_token_logits.push_back(
            predict_mask_from_token("decoder.hypernet" + std::to_string(i), q.row(1 + i), up, s));
      }
    }
  }
  return out;
}

MaskPrediction decode(const DecoderInputs& in, const ParamStore& params, const DecoderConfig& cfg,
                      const DecoderHook& hook) {
  ad::Tape tape;
  ParamBinding p(tape, params, false);
  DecoderVars v = decode(p, in, cfg, hook);
  MaskPrediction pred;
  pred.hr_logits = column_to_square(v.hr_logits.value(), in.patch_size);
  pred.lr_logits = column_to_square(v.lr_logits.value(), in.patch_size);
  pred.hr_mask = binarize(pred.hr_logits);
  pred.lr_mask = binarize(pred.lr_logits);
  pred.iou_estimate = v.iou_estimate;
  pred.output_token_logits = std::move(v.output_token_logits);
  return pred;
}

}  // namespace wsisam
