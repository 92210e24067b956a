#pragma once

#include "wsisam/training.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace wsisam {

/// 2|P & G| / (|P| + |G|); two empty masks score 1.
double dice_score(const Mask& pred, const Mask& gt);

/// Prompt protocol: "box", "points:K" or "coarse".
struct Protocol {
  PromptKind kind = PromptKind::box;
  int k = 3;
  PromptSimConfig sim;

  static Protocol parse(const std::string& text);
  std::string to_string() const;
};

inline constexpr int kReportSchemaVersion = 1;

struct EvalReport {
  std::string protocol;
  uint64_t seed = 0;
  std::vector<double> per_sample_dice;
  std::vector<std::string> sample_ids;
  std::vector<std::string> families;
  double mean_dice = 0.0;
  std::map<std::string, double> family_mean_dice;
  std::vector<std::string> skipped;
  std::string config_fingerprint;  // 16 hex digits

  nlohmann::json to_json() const;
};

/// One pair per GT object, centred (after snapping) on the object. Uploaded
/// images without object metadata fall back to connected components.
std::vector<PatchPair> eval_pairs(const std::vector<PyramidImage>& data, int patch_size, int hr_level = 0);

/// Per sample: simulate the prompt from gt_hr, predict, binarise hr_logits,
/// Dice on the HR patch. Samples with empty gt_hr are skipped. Prompt noise
/// for sample i depends only on (seed, i).
EvalReport evaluate(const Segmenter& model, const std::vector<PatchPair>& pairs, const Protocol& protocol,
                    uint64_t seed);

struct PointSweepEntry {
  int k = 0;
  double mean_dice = 0.0;
};
std::vector<PointSweepEntry> point_sweep(const Segmenter& model, const std::vector<PatchPair>& pairs,
                                         const std::vector<int>& ks, uint64_t seed);

struct AblationAxes {
  std::vector<AggregationMode> modes;
  std::vector<AggregationTarget> targets;
  std::vector<double> lambdas;

  /// "modes=avg,max;targets=tokens;lambdas=0.25,0.5" (any subset).
  static AblationAxes parse(const std::string& text);
  static AblationAxes full();
};

struct AblationSetup {
  ModelConfig model;
  TrainConfig train;
  LossConfig loss;
  Protocol protocol;
  uint64_t eval_seed = 0;
};

struct AblationRow {
  std::string table;    // "3a", "3b" or "3c"
  std::string axis;     // "mode", "target" or "lambda"
  std::string setting;  // machine-readable value
  std::string label;    // display label of the row
  double mean_dice = 0.0;
  bool ok = true;
  std::string error;
};

/// Display labels of the grid rows.
std::string ablation_label(AggregationMode m);
std::string ablation_label(AggregationTarget t);
std::string ablation_label(double lambda);

/// Trains and evaluates one cell with the given overrides.
AblationRow run_ablation_cell(const AblationSetup& setup, const std::vector<TrainSample>& train_pool,
                              const std::vector<PatchPair>& eval_set, std::optional<AggregationMode> mode,
                              std::optional<AggregationTarget> target, std::optional<double> lambda);

/// Every axis value becomes one row; all other settings stay at `setup`.
/// Rows are emitted mode axis first, then targets, then lambdas, each in
/// canonical order. A failing cell is reported and the grid continues.
std::vector<AblationRow> run_ablation_grid(const AblationSetup& setup, const std::vector<PatchPair>& train_pairs,
                                           const std::vector<PatchPair>& eval_set, const AblationAxes& axes);

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace wsisam
