#include "wsisam/eval.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace wsisam {

double dice_score(const Mask& pred, const Mask& gt) {
  if (pred.rows != gt.rows || pred.cols != gt.cols) {
    throw ShapeMismatch("dice_score: prediction is " + std::to_string(pred.rows) + "x" + std::to_string(pred.cols) +
                        ", ground truth is " + std::to_string(gt.rows) + "x" + std::to_string(gt.cols));
  }
  size_t inter = 0, sp = 0, sg = 0;
  for (size_t i = 0; i < gt.data.size(); ++i) {
    inter += pred.data[i] & gt.data[i];
    sp += pred.data[i];
    sg += gt.data[i];
  }
  if (sp + sg == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sp + sg);
}

Protocol Protocol::parse(const std::string& text) {
  Protocol p;
  if (text == "box") {
    p.kind = PromptKind::box;
  } else if (text == "coarse") {
    p.kind = PromptKind::coarse;
  } else if (text.rfind("points:", 0) == 0) {
    p.kind = PromptKind::points;
    try {
      size_t used = 0;
      p.k = std::stoi(text.substr(7), &used);
      if (used != text.size() - 7) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw InvalidArgument("protocol: cannot parse point count in '" + text + "'");
    }
    if (p.k < 1) throw InvalidArgument("protocol: point count must be >= 1");
  } else {
    throw InvalidArgument("unknown protocol '" + text + "' (expected box, points:K or coarse)");
  }
  return p;
}

std::string Protocol::to_string() const {
  if (kind == PromptKind::points) return "points:" + std::to_string(k);
  return wsisam::to_string(kind);
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json samples = nlohmann::json::array();
  for (size_t i = 0; i < per_sample_dice.size(); ++i) {
    samples.push_back({{"id", sample_ids[i]}, {"family", families[i]}, {"dice", per_sample_dice[i]}});
  }
  return nlohmann::json{{"schema_version", kReportSchemaVersion},
                        {"prompt_protocol", protocol},
                        {"seed", seed},
                        {"config_fingerprint", config_fingerprint},
                        {"mean_dice", mean_dice},
                        {"n_samples", per_sample_dice.size()},
                        {"family_mean_dice", family_mean_dice},
                        {"skipped", skipped},
                        {"samples", samples}};
}

std::vector<PatchPair> eval_pairs(const std::vector<PyramidImage>& data, int patch_size, int hr_level) {
  std::vector<PatchPair> out;
  for (const auto& pyr : data) {
    std::vector<std::pair<int, int>> centers;
    if (!pyr.objects.empty()) {
      for (const auto& o : pyr.objects) centers.emplace_back(o.center_row, o.center_col);
    } else {
      for (const auto& c : connected_components(pyr.gt_levels.at(0))) {
        centers.emplace_back((c.r0 + c.r1) / 2, (c.c0 + c.c1) / 2);
      }
    }
    for (auto [r, c] : centers) {
      snap_center(pyr, hr_level, patch_size, r, c);
      out.push_back(extract_pair(pyr, r, c, hr_level, patch_size));
    }
  }
  return out;
}

namespace {

std::string sample_id(const PatchPair& p) {
  return p.source_id + "@" + std::to_string(p.center_row) + "," + std::to_string(p.center_col);
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

EvalReport evaluate(const Segmenter& model, const std::vector<PatchPair>& pairs, const Protocol& protocol,
                    uint64_t seed) {
  EvalReport rep;
  rep.protocol = protocol.to_string();
  rep.seed = seed;
  uint64_t h = fnv1a(rep.protocol);
  const uint64_t model_fp = model.fingerprint();
  h = fnv1a(&model_fp, sizeof model_fp, h);
  h = fnv1a(&seed, sizeof seed, h);

  std::map<std::string, std::pair<double, int>> fam;
  for (size_t i = 0; i < pairs.size(); ++i) {
    const PatchPair& pair = pairs[i];
    const std::string id = sample_id(pair);
    h = fnv1a(id, h);
    if (pair.gt_hr.count() == 0) {
      spdlog::warn("evaluate: skipping {} (empty ground truth)", id);
      rep.skipped.push_back(id);
      continue;
    }
    std::seed_seq ss{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(i)};
    std::mt19937_64 rng(ss);
    const PromptSet prompts =
        simulate_prompt(protocol.kind, pair.gt_hr, protocol.sim, rng, protocol.kind == PromptKind::points ? protocol.k : 0);
    const MaskPrediction pred = model.predict(pair, prompts);
    const double d = dice_score(pred.hr_mask, pair.gt_hr);
    rep.per_sample_dice.push_back(d);
    rep.sample_ids.push_back(id);
    rep.families.push_back(pair.family);
    auto& f = fam[pair.family];
    f.first += d;
    f.second += 1;
  }
  double sum = 0.0;
  for (double d : rep.per_sample_dice) sum += d;
  rep.mean_dice = rep.per_sample_dice.empty() ? 0.0 : sum / static_cast<double>(rep.per_sample_dice.size());
  for (const auto& [name, acc] : fam) rep.family_mean_dice[name] = acc.first / acc.second;
  rep.config_fingerprint = hex64(h);
  return rep;
}

std::vector<PointSweepEntry> point_sweep(const Segmenter& model, const std::vector<PatchPair>& pairs,
                                         const std::vector<int>& ks, uint64_t seed) {
  if (!std::is_sorted(ks.begin(), ks.end())) throw InvalidArgument("point_sweep: ks must be sorted ascending");
  std::vector<PointSweepEntry> out;
  for (int k : ks) {
    Protocol p;
    p.kind = PromptKind::points;
    p.k = k;
    if (k < 1) throw InvalidArgument("point_sweep: k must be >= 1");
    out.push_back({k, evaluate(model, pairs, p, seed).mean_dice});
  }
  return out;
}

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int mode_rank(AggregationMode m) {
  switch (m) {
    case AggregationMode::concat_fc: return 0;
    case AggregationMode::max: return 1;
    case AggregationMode::avg: return 2;
  }
  return 3;
}

int target_rank(AggregationTarget t) {
  switch (t) {
    case AggregationTarget::features_hr_lr: return 0;
    case AggregationTarget::features_hr_expand: return 1;
    case AggregationTarget::tokens: return 2;
  }
  return 3;
}

std::string format_lambda(double l) {
  std::ostringstream os;
  os << l;
  return os.str();
}

}  // namespace

AblationAxes AblationAxes::parse(const std::string& text) {
  AblationAxes a;
  for (const auto& part : split(text, ';')) {
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw InvalidArgument("axes: expected name=values in '" + part + "'");
    const std::string name = part.substr(0, eq);
    const auto values = split(part.substr(eq + 1), ',');
    if (values.empty()) throw InvalidArgument("axes: no values for '" + name + "'");
    for (const auto& v : values) {
      if (name == "modes") {
        a.modes.push_back(aggregation_mode_from_string(v));
      } else if (name == "targets") {
        a.targets.push_back(aggregation_target_from_string(v));
      } else if (name == "lambdas") {
        double l = 0.0;
        try {
          l = std::stod(v);
        } catch (const std::exception&) {
          throw InvalidArgument("axes: bad lambda '" + v + "'");
        }
        if (l < 0.0 || l > 1.0) throw InvalidArgument("axes: lambda must lie in [0, 1]");
        a.lambdas.push_back(l);
      } else {
        throw InvalidArgument("axes: unknown axis '" + name + "' (expected modes, targets or lambdas)");
      }
    }
  }
  return a;
}

AblationAxes AblationAxes::full() {
  return AblationAxes{{AggregationMode::concat_fc, AggregationMode::max, AggregationMode::avg},
                      {AggregationTarget::features_hr_lr, AggregationTarget::features_hr_expand,
                       AggregationTarget::tokens},
                      {0.25, 0.5, 0.75}};
}

std::string ablation_label(AggregationMode m) {
  switch (m) {
    case AggregationMode::concat_fc: return "Concat.-FC";
    case AggregationMode::max: return "Max.";
    case AggregationMode::avg: return "Avg.";
  }
  return "?";
}

std::string ablation_label(AggregationTarget t) {
  switch (t) {
    case AggregationTarget::features_hr_lr: return "HR feat. and LR feat.";
    case AggregationTarget::features_hr_expand: return "HR feat. and expand HR feat.";
    case AggregationTarget::tokens: return "HR Token and LR Token";
  }
  return "?";
}

std::string ablation_label(double lambda) { return format_lambda(lambda); }

AblationRow run_ablation_cell(const AblationSetup& setup, const std::vector<TrainSample>& train_pool,
                              const std::vector<PatchPair>& eval_set, std::optional<AggregationMode> mode,
                              std::optional<AggregationTarget> target, std::optional<double> lambda) {
  AblationRow row;
  if (mode) {
    row.table = "3a";
    row.axis = "mode";
    row.setting = to_string(*mode);
    row.label = ablation_label(*mode);
  } else if (target) {
    row.table = "3b";
    row.axis = "target";
    row.setting = to_string(*target);
    row.label = ablation_label(*target);
  } else if (lambda) {
    row.table = "3c";
    row.axis = "lambda";
    row.setting = format_lambda(*lambda);
    row.label = ablation_label(*lambda);
  }
  try {
    ModelConfig mc = setup.model;
    TrainConfig tc = setup.train;
    LossConfig lc = setup.loss;
    if (mode) mc.decoder.mode = *mode;
    if (target) mc.decoder.target = *target;
    if (lambda) lc.lambda = *lambda;
    tc.aggregation_mode = mc.decoder.mode;
    WsiSam model(mc);
    train(model, train_pool, tc, lc);
    row.mean_dice = evaluate(model, eval_set, setup.protocol, setup.eval_seed).mean_dice;
  } catch (const std::exception& e) {
    row.ok = false;
    row.error = e.what();
    spdlog::error("ablation cell {}={} failed: {}", row.axis, row.setting, row.error);
  }
  return row;
}

std::vector<AblationRow> run_ablation_grid(const AblationSetup& setup, const std::vector<PatchPair>& train_pairs,
                                           const std::vector<PatchPair>& eval_set, const AblationAxes& axes) {
  // Encoder outputs for the training pool, shared by every cell.
  const auto pool = prepare_samples(WsiSam(setup.model), train_pairs);

  auto modes = axes.modes;
  std::stable_sort(modes.begin(), modes.end(), [](auto a, auto b) { return mode_rank(a) < mode_rank(b); });
  auto targets = axes.targets;
  std::stable_sort(targets.begin(), targets.end(), [](auto a, auto b) { return target_rank(a) < target_rank(b); });
  auto lambdas = axes.lambdas;
  std::stable_sort(lambdas.begin(), lambdas.end());

  std::vector<AblationRow> rows;
  for (auto m : modes) rows.push_back(run_ablation_cell(setup, pool, eval_set, m, std::nullopt, std::nullopt));
  for (auto t : targets) rows.push_back(run_ablation_cell(setup, pool, eval_set, std::nullopt, t, std::nullopt));
  for (double l : lambdas) rows.push_back(run_ablation_cell(setup, pool, eval_set, std::nullopt, std::nullopt, l));
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "table,axis,setting,label,mean_dice,status\n";
  os.precision(6);
  os << std::fixed;
  for (const auto& r : rows) {
    os << r.table << ',' << r.axis << ',' << r.setting << ",\"" << r.label << "\",";
    if (r.ok) {
      os << r.mean_dice << ",ok\n";
    } else {
      std::string err = r.error;
      std::replace(err.begin(), err.end(), '"', '\'');
      os << ",\"failed: " << err << "\"\n";
    }
  }
  return os.str();
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  std::ofstream f(path);
  if (!f) throw InvalidArgument("cannot write " + path.string());
  f << ablation_csv(rows);
}

}  // namespace wsisam
