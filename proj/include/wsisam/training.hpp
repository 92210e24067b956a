#pragma once

#include "wsisam/model.hpp"

#include <nlohmann/json_fwd.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace wsisam {

struct LossConfig {
  double lambda = 0.5;
  double dice_eps = 1.0;
  double ce_weight = 1.0;
  double dice_weight = 1.0;
  void validate() const;
  nlohmann::json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
};

/// dice_weight * (1 - (2 sum(p g) + eps) / (sum p + sum g + eps))
///   + ce_weight * mean BCE(logits, g),   p = sigmoid(logits).
/// `logits` may be any shape with as many elements as `gt`.
ad::Var seg_loss(ad::Var logits, const Mask& gt, const LossConfig& cfg);
double seg_loss(const Mat& logits, const Mask& gt, const LossConfig& cfg);

/// lambda * l_high + (1 - lambda) * l_low.
double combine_losses(double l_high, double l_low, double lambda);

struct LossTerms {
  ad::Var total;
  ad::Var high;
  ad::Var low;
};
LossTerms total_loss(ad::Var hr_logits, ad::Var lr_logits, const Mask& gt_hr, const Mask& gt_lr,
                     const LossConfig& cfg);
double total_loss(const MaskPrediction& pred, const Mask& gt_hr, const Mask& gt_lr, const LossConfig& cfg);

enum class PromptKind { box, points, coarse };
std::string to_string(PromptKind k);

/// Settings for turning a GT mask into a simulated prompt.
struct PromptSimConfig {
  double box_jitter = 0.1;
  int min_points = 1;
  int max_points = 10;
  double boundary_frac = 0.05;  // band width as a fraction of the patch side
  double mask_noise_std = 0.5;
  int boundary_width(int patch_size) const;
};

PromptSet simulate_prompt(PromptKind kind, const Mask& gt, const PromptSimConfig& cfg, std::mt19937_64& rng,
                          int n_points = 0);

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 1;
  int steps = 1000;
  uint64_t seed = 0;
  AggregationMode aggregation_mode = AggregationMode::avg;
  std::array<double, 3> prompt_mix{1.0 / 3, 1.0 / 3, 1.0 / 3};  // box, points, coarse
  PromptSimConfig prompts;
  SamplerConfig sampler;  // how the fixed training pool is drawn from the dataset
  int log_every = 0;      // 0 disables progress logging

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Pair plus its cached frozen encoder outputs.
struct TrainSample {
  PatchPair pair;
  EncodedPair enc;
};

std::vector<TrainSample> prepare_samples(const WsiSam& model, const std::vector<PatchPair>& pairs);

struct LossRecord {
  int step = 0;
  double total = 0.0;
  double high = 0.0;
  double low = 0.0;
  PromptKind prompt = PromptKind::box;
  std::string sample_id;
};

struct TrainResult {
  std::vector<LossRecord> curve;
};

struct TrainingDiverged : std::runtime_error {
  TrainingDiverged(const std::string& what, std::string diagnostic)
      : std::runtime_error(what), diagnostic_json(std::move(diagnostic)) {}
  std::string diagnostic_json;
};

/// Adam on the learnable partition only.
class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}
  void step(ParamStore& params, const std::map<std::string, Mat>& grads);
  int steps_taken() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
  std::map<std::string, Mat> m_, v_;
};

/// Gradients of the total loss for one sample, keyed by learnable name.
std::map<std::string, Mat> loss_gradients(const WsiSam& model, const TrainSample& sample, const PromptSet& prompts,
                                          const LossConfig& lcfg, LossRecord* record = nullptr);

TrainResult train(WsiSam& model, const std::vector<TrainSample>& pool, const TrainConfig& tcfg,
                  const LossConfig& lcfg);
/// Draws the training pool from `dataset` with tcfg.sampler, then trains.
TrainResult train(WsiSam& model, const std::vector<PyramidImage>& dataset, const TrainConfig& tcfg,
                  const LossConfig& lcfg);

void write_loss_curve_csv(const std::filesystem::path& path, const std::vector<LossRecord>& curve);

}  // namespace wsisam
