#pragma once

#include "wsisam/encoder.hpp"
#include "wsisam/prompts.hpp"

#include <functional>
#include <optional>
#include <string>

namespace wsisam {

enum class AggregationMode { avg, max, concat_fc };

/// Where cross-resolution context enters the HR branch.
///   tokens              HR/LR token aggregation (the full model)
///   features_hr_lr      HR image features averaged with the upsampled
///                       central crop of the LR features; no token exchange
///   features_hr_expand  HR image features averaged with an expanded
///                       (pooled then upsampled) copy of themselves; the HR
///                       branch sees no LR input at all
enum class AggregationTarget { tokens, features_hr_lr, features_hr_expand };

enum class AggregationPoint { after_block_1, after_block_2_pre_head };

std::string to_string(AggregationMode m);
std::string to_string(AggregationTarget t);
std::string to_string(AggregationPoint p);
AggregationMode aggregation_mode_from_string(const std::string& s);
AggregationTarget aggregation_target_from_string(const std::string& s);
AggregationPoint aggregation_point_from_string(const std::string& s);

struct DecoderConfig {
  int dim = 64;
  int n_heads = 4;
  int depth = 2;                  // two-way blocks
  int mlp_dim = 256;
  int attention_downsample = 2;   // cross-attention internal dim = dim / this
  int fusion_channels = 8;        // C' of the fused mask features
  int encoder_dim = 64;           // channels of early/late encoder taps
  AggregationMode mode = AggregationMode::avg;
  AggregationTarget target = AggregationTarget::tokens;
  AggregationPoint point = AggregationPoint::after_block_1;
  bool share_head_with_output_tokens = false;
  bool emit_output_token_masks = false;

  int upscale_hidden() const { return dim / 4; }
  void validate() const;
};

/// Token layout of one branch. Rows: [output tokens (4); HR token; LR token;
/// prompt tokens].
struct TokenSet {
  static constexpr int kOutputTokens = 4;
  static constexpr int kHrRow = 4;
  static constexpr int kLrRow = 5;
  static constexpr int kPromptStart = 6;

  Mat output_tokens;  // 4 x D
  Mat hr_token;       // 1 x D
  Mat lr_token;       // 1 x D
  Mat prompt_tokens;  // N x D

  Mat concat() const;
};

struct MaskPrediction {
  Mat hr_logits;  // P x P
  Mat lr_logits;  // P x P
  Mask hr_mask;
  Mask lr_mask;
  double iou_estimate = 0.0;
  /// Debug only: 3 mask-token logits at 4x grid resolution, HR branch.
  std::vector<Mat> output_token_logits;
};

/// Binary mask from logits > 0.
Mask binarize(const Mat& logits);

/// Token states of both branches, passed to the introspection hook after each
/// two-way block (before any aggregation) and once more after the final
/// token-to-image attention with block index == depth.
struct TokenSnapshot {
  Mat hr_branch;
  Mat lr_branch;
};
using DecoderHook = std::function<void(int block, const TokenSnapshot&)>;

void init_decoder(ParamStore& s, const DecoderConfig& cfg, std::mt19937_64& rng);
/// The learnable additions: HR/LR tokens, aggregation projection, fusion
/// paths, and the aggregated-token mask head.
void init_wsi_params(ParamStore& s, const DecoderConfig& cfg, std::mt19937_64& rng);

ad::Var aggregate_tokens(ad::Var t_hr, ad::Var t_lr, AggregationMode mode, ParamBinding& p);
Mat aggregate_tokens(const Mat& t_hr, const Mat& t_lr, AggregationMode mode, const ParamStore& params);

/// Sum of three upscaling paths ("wsi.fusion.{decoder,early,late}"), one per
/// input; (h*w) x C inputs give a (4h*4w) x C' map.
ad::Var fuse_features(ParamBinding& p, ad::Var decoder_feat, ad::Var early_feat, ad::Var late_feat, int h, int w);
Mat fuse_features(const Mat& decoder_feat, const Mat& early_feat, const Mat& late_feat, int h, int w,
                  const ParamStore& params);

/// logits[i] = <MLP(t), fused[i, :]> using the three-layer ReLU head under
/// `head_prefix`; returns (H*W) x 1.
ad::Var predict_mask_from_token(ParamBinding& p, const std::string& head_prefix, ad::Var t, ad::Var fused);
Mat predict_mask_from_token(const std::string& head_prefix, const Mat& t, const Mat& fused, const ParamStore& params);

/// Everything the decoder consumes for one concentric pair.
struct DecoderInputs {
  const EncodedImage* hr = nullptr;
  const EncodedImage* lr = nullptr;
  const EncodedPrompts* prompts_hr = nullptr;
  const EncodedPrompts* prompts_lr = nullptr;
  int patch_size = 0;
};

struct DecoderVars {
  ad::Var hr_logits;  // (P*P) x 1
  ad::Var lr_logits;
  double iou_estimate = 0.0;
  std::vector<Mat> output_token_logits;
};

DecoderVars decode(ParamBinding& p, const DecoderInputs& in, const DecoderConfig& cfg,
                   const DecoderHook& hook = nullptr);

MaskPrediction decode(const DecoderInputs& in, const ParamStore& params, const DecoderConfig& cfg,
                      const DecoderHook& hook = nullptr);

/// (P*P) x 1 column to a P x P matrix.
Mat column_to_square(const Mat& col, int side);

}  // namespace wsisam
