#include "wsisam/training.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <cmath>
#include <fstream>

namespace wsisam {

void LossConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidArgument("loss: lambda must lie in [0, 1]");
  if (!(dice_eps > 0.0)) throw InvalidArgument("loss: dice_eps must be positive");
  if (ce_weight < 0.0 || dice_weight < 0.0) throw InvalidArgument("loss: weights must be non-negative");
}

nlohmann::json LossConfig::to_json() const {
  return nlohmann::json{{"lambda", lambda}, {"dice_eps", dice_eps}, {"ce_weight", ce_weight}, {"dice_weight", dice_weight}};
}

LossConfig LossConfig::from_json(const nlohmann::json& j) {
  LossConfig c;
  c.lambda = j.value("lambda", c.lambda);
  c.dice_eps = j.value("dice_eps", c.dice_eps);
  c.ce_weight = j.value("ce_weight", c.ce_weight);
  c.dice_weight = j.value("dice_weight", c.dice_weight);
  c.validate();
  return c;
}

namespace {

double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

// log(1 + e^z) - g z without overflow.
double bce(double z, double g) { return std::max(z, 0.0) - z * g + std::log1p(std::exp(-std::abs(z))); }

}  // namespace

ad::Var seg_loss(ad::Var logits, const Mask& gt, const LossConfig& cfg) {
  cfg.validate();
  const Eigen::Index n = logits.value().size();
  if (n != static_cast<Eigen::Index>(gt.data.size())) {
    throw ShapeMismatch("seg_loss: logits have " + std::to_string(n) + " elements, gt has " +
                        std::to_string(gt.data.size()));
  }
  const Mat& z = logits.value();
  Mat p(z.rows(), z.cols());
  double inter = 0.0, sum_p = 0.0, sum_g = 0.0, ce = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double zi = z.data()[i];
    const double g = gt.data[static_cast<size_t>(i)];
    const double pi = sigmoid(zi);
    p.data()[i] = pi;
    inter += pi * g;
    sum_p += pi;
    sum_g += g;
    ce += bce(zi, g);
  }
  const double num = 2.0 * inter + cfg.dice_eps;
  const double den = sum_p + sum_g + cfg.dice_eps;
  Mat value(1, 1);
  value(0, 0) = cfg.dice_weight * (1.0 - num / den) + cfg.ce_weight * ce / static_cast<double>(n);

  const double dw = cfg.dice_weight;
  const double cw = cfg.ce_weight / static_cast<double>(n);
  return logits.tape()->push(std::move(value), {logits},
                             [logits, p = std::move(p), gt_data = gt.data, num, den, dw, cw](ad::Tape& t,
                                                                                             const Mat& gout) {
                               Mat g(p.rows(), p.cols());
                               const double s = gout(0, 0);
                               for (Eigen::Index i = 0; i < p.size(); ++i) {
                                 const double gi = gt_data[static_cast<size_t>(i)];
                                 const double pi = p.data()[i];
                                 const double d_dice_dp = -(2.0 * gi * den - num) / (den * den);
                                 g.data()[i] = s * (dw * d_dice_dp * pi * (1.0 - pi) + cw * (pi - gi));
                               }
                               t.accumulate(logits, g);
                             });
}

double seg_loss(const Mat& logits, const Mask& gt, const LossConfig& cfg) {
  ad::Tape tape;
  return seg_loss(tape.constant(logits), gt, cfg).scalar();
}

LossTerms total_loss(ad::Var hr_logits, ad::Var lr_logits, const Mask& gt_hr, const Mask& gt_lr,
                     const LossConfig& cfg) {
  LossTerms t;
  t.high = seg_loss(hr_logits, gt_hr, cfg);
  t.low = seg_loss(lr_logits, gt_lr, cfg);
  t.total = ad::add(ad::scale(t.high, cfg.lambda), ad::scale(t.low, 1.0 - cfg.lambda));
  return t;
}

double combine_losses(double l_high, double l_low, double lambda) { return lambda * l_high + (1.0 - lambda) * l_low; }

double total_loss(const MaskPrediction& pred, const Mask& gt_hr, const Mask& gt_lr, const LossConfig& cfg) {
  return combine_losses(seg_loss(pred.hr_logits, gt_hr, cfg), seg_loss(pred.lr_logits, gt_lr, cfg), cfg.lambda);
}

std::string to_string(PromptKind k) {
  switch (k) {
    case PromptKind::box: return "box";
    case PromptKind::points: return "points";
    case PromptKind::coarse: return "coarse";
  }
  return "?";
}

int PromptSimConfig::boundary_width(int patch_size) const {
  return std::max(1, static_cast<int>(std::lround(boundary_frac * patch_size)));
}

PromptSet simulate_prompt(PromptKind kind, const Mask& gt, const PromptSimConfig& cfg, std::mt19937_64& rng,
                          int n_points) {
  PromptSet p;
  switch (kind) {
    case PromptKind::box:
      p.box = simulate_box(gt, cfg.box_jitter, rng);
      break;
    case PromptKind::points: {
      int k = n_points;
      if (k <= 0) k = std::uniform_int_distribution<int>(cfg.min_points, cfg.max_points)(rng);
      k = std::min<int>(k, static_cast<int>(gt.count()));
      p.points = sample_points(gt, k, 0, rng);
      break;
    }
    case PromptKind::coarse:
      p.mask = degrade_mask(gt, cfg.boundary_width(gt.rows), cfg.mask_noise_std, rng);
      break;
  }
  return p;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw InvalidArgument("train: lr must be positive");
  if (batch_size < 1) throw InvalidArgument("train: batch_size must be >= 1");
  if (steps < 0) throw InvalidArgument("train: steps must be >= 0");
  double total = 0.0;
  for (double w : prompt_mix) {
    if (w < 0.0) throw InvalidArgument("train: prompt_mix entries must be non-negative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("train: prompt_mix must sum to 1");
  if (prompts.min_points < 1 || prompts.max_points < prompts.min_points) {
    throw InvalidArgument("train: need 1 <= min_points <= max_points");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return nlohmann::json{
      {"lr", lr},
      {"beta1", beta1},
      {"beta2", beta2},
      {"adam_eps", adam_eps},
      {"batch_size", batch_size},
      {"steps", steps},
      {"seed", seed},
      {"aggregation_mode", to_string(aggregation_mode)},
      {"prompt_mix", {{"box", prompt_mix[0]}, {"points", prompt_mix[1]}, {"coarse", prompt_mix[2]}}},
      {"prompts",
       {{"box_jitter", prompts.box_jitter},
        {"min_points", prompts.min_points},
        {"max_points", prompts.max_points},
        {"boundary_frac", prompts.boundary_frac},
        {"mask_noise_std", prompts.mask_noise_std}}},
      {"sampler",
       {{"patch_size", sampler.patch_size},
        {"hr_level", sampler.hr_level},
        {"pairs_per_image", sampler.pairs_per_image},
        {"foreground_bias", sampler.foreground_bias},
        {"center_jitter", sampler.center_jitter}}},
      {"log_every", log_every},
  };
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.seed = j.value("seed", c.seed);
  if (j.contains("aggregation_mode")) c.aggregation_mode = aggregation_mode_from_string(j["aggregation_mode"]);
  if (j.contains("prompt_mix")) {
    const auto& m = j["prompt_mix"];
    c.prompt_mix = {m.value("box", 0.0), m.value("points", 0.0), m.value("coarse", 0.0)};
  }
  if (j.contains("prompts")) {
    const auto& p = j["prompts"];
    c.prompts.box_jitter = p.value("box_jitter", c.prompts.box_jitter);
    c.prompts.min_points = p.value("min_points", c.prompts.min_points);
    c.prompts.max_points = p.value("max_points", c.prompts.max_points);
    c.prompts.boundary_frac = p.value("boundary_frac", c.prompts.boundary_frac);
    c.prompts.mask_noise_std = p.value("mask_noise_std", c.prompts.mask_noise_std);
  }
  if (j.contains("sampler")) {
    const auto& s = j["sampler"];
    c.sampler.patch_size = s.value("patch_size", c.sampler.patch_size);
    c.sampler.hr_level = s.value("hr_level", c.sampler.hr_level);
    c.sampler.pairs_per_image = s.value("pairs_per_image", c.sampler.pairs_per_image);
    c.sampler.foreground_bias = s.value("foreground_bias", c.sampler.foreground_bias);
    c.sampler.center_jitter = s.value("center_jitter", c.sampler.center_jitter);
  }
  c.log_every = j.value("log_every", c.log_every);
  c.validate();
  return c;
}

std::vector<TrainSample> prepare_samples(const WsiSam& model, const std::vector<PatchPair>& pairs) {
  std::vector<TrainSample> out;
  out.reserve(pairs.size());
  for (const auto& pair : pairs) {
    if (pair.gt_hr.count() == 0) {
      spdlog::debug("skipping training pair {} at ({}, {}): empty HR ground truth", pair.source_id, pair.center_row,
                    pair.center_col);
      continue;
    }
    out.push_back(TrainSample{pair, model.encode(pair)});
  }
  return out;
}

void Adam::step(ParamStore& params, const std::map<std::string, Mat>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, t_);
  const double c2 = 1.0 - std::pow(b2_, t_);
  for (const auto& [name, g] : grads) {
    if (!params.learnable(name)) throw InvalidArgument("optimizer: '" + name + "' is frozen");
    Mat& w = params.get_mut(name);
    auto [mit, fresh_m] = m_.try_emplace(name, Mat::Zero(g.rows(), g.cols()));
    auto [vit, fresh_v] = v_.try_emplace(name, Mat::Zero(g.rows(), g.cols()));
    Mat& m = mit->second;
    Mat& v = vit->second;
    m = b1_ * m + (1.0 - b1_) * g;
    v = b2_ * v + (1.0 - b2_) * g.cwiseProduct(g);
    w.array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
  }
}

std::map<std::string, Mat> loss_gradients(const WsiSam& model, const TrainSample& sample, const PromptSet& prompts,
                                          const LossConfig& lcfg, LossRecord* record) {
  ad::Tape tape;
  ParamBinding p(tape, model.params(), true);
  const EncodedPromptPair ep = model.encode_prompts(prompts);
  DecoderVars v = model.forward(p, sample.enc, ep);
  LossTerms terms = total_loss(v.hr_logits, v.lr_logits, sample.pair.gt_hr, sample.pair.gt_lr, lcfg);
  if (record) {
    record->total = terms.total.scalar();
    record->high = terms.high.scalar();
    record->low = terms.low.scalar();
    record->sample_id = sample.pair.source_id + "@" + std::to_string(sample.pair.center_row) + "," +
                        std::to_string(sample.pair.center_col);
  }
  std::map<std::string, Mat> grads;
  if (!std::isfinite(terms.total.scalar())) return grads;
  tape.backward(terms.total);
  for (const auto& [name, var] : p.bound()) {
    if (model.params().learnable(name)) grads.emplace(name, var.grad());
  }
  return grads;
}

TrainResult train(WsiSam& model, const std::vector<TrainSample>& pool, const TrainConfig& tcfg,
                  const LossConfig& lcfg) {
  tcfg.validate();
  lcfg.validate();
  TrainResult result;
  if (tcfg.steps == 0) return result;
  if (pool.empty()) throw InvalidArgument("train: empty training pool");
  if (model.config().decoder.mode != tcfg.aggregation_mode) {
    throw InvalidArgument("train: model aggregation mode " + to_string(model.config().decoder.mode) +
                          " does not match training config " + to_string(tcfg.aggregation_mode));
  }

  std::mt19937_64 rng(tcfg.seed);
  std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
  std::discrete_distribution<int> kind_dist(tcfg.prompt_mix.begin(), tcfg.prompt_mix.end());
  Adam opt(tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps);
  const auto learnable = model.params().partition().learnable;

  for (int step = 0; step < tcfg.steps; ++step) {
    std::map<std::string, Mat> grads;
    LossRecord rec;
    rec.step = step;
    double total = 0.0, high = 0.0, low = 0.0;
    for (int b = 0; b < tcfg.batch_size; ++b) {
      const TrainSample& s = pool[pick(rng)];
      const auto kind = static_cast<PromptKind>(kind_dist(rng));
      const PromptSet prompts = simulate_prompt(kind, s.pair.gt_hr, tcfg.prompts, rng);
      LossRecord one;
      auto g = loss_gradients(model, s, prompts, lcfg, &one);
      rec.prompt = kind;
      rec.sample_id = one.sample_id;
      if (!std::isfinite(one.total)) {
        const nlohmann::json diag{{"step", step},
                                  {"prompt_type", to_string(kind)},
                                  {"sample_id", one.sample_id},
                                  {"loss", std::to_string(one.total)},
                                  {"loss_high", std::to_string(one.high)},
                                  {"loss_low", std::to_string(one.low)},
                                  {"prompt", prompts_to_json(prompts)}};
        throw TrainingDiverged("training diverged at step " + std::to_string(step) + " (prompt " +
                                   to_string(kind) + ", sample " + one.sample_id + "): loss is not finite",
                               diag.dump(2));
      }
      total += one.total;
      high += one.high;
      low += one.low;
      for (auto& [name, gm] : g) {
        auto it = grads.find(name);
        if (it == grads.end()) {
          grads.emplace(name, std::move(gm));
        } else {
          it->second += gm;
        }
      }
    }
    const double inv = 1.0 / tcfg.batch_size;
    for (auto& [name, gm] : grads) gm *= inv;
    // Learnable parameters absent from this step's graph get a zero gradient.
    for (const auto& name : learnable) {
      if (!grads.count(name)) {
        const Mat& w = model.params().get(name);
        grads.emplace(name, Mat::Zero(w.rows(), w.cols()));
      }
    }
    opt.step(model.params_mut(), grads);
    rec.total = total * inv;
    rec.high = high * inv;
    rec.low = low * inv;
    result.curve.push_back(rec);
    if (tcfg.log_every > 0 && (step + 1) % tcfg.log_every == 0) {
      spdlog::info("step {}/{}  loss {:.4f}  high {:.4f}  low {:.4f}", step + 1, tcfg.steps, rec.total, rec.high,
                   rec.low);
    }
  }
  return result;
}

TrainResult train(WsiSam& model, const std::vector<PyramidImage>& dataset, const TrainConfig& tcfg,
                  const LossConfig& lcfg) {
  if (dataset.empty()) throw InvalidArgument("train: empty dataset");
  if (tcfg.steps == 0) return {};
  SamplerConfig sc = tcfg.sampler;
  sc.patch_size = model.config().patch_size();
  const auto pool = prepare_samples(model, sample_pairs(dataset, sc, tcfg.seed));
  return train(model, pool, tcfg, lcfg);
}

void write_loss_curve_csv(const std::filesystem::path& path, const std::vector<LossRecord>& curve) {
  std::ofstream f(path);
  if (!f) throw InvalidArgument("cannot write " + path.string());
  f << "step,L,L_high,L_low\n";
  f.precision(10);
  for (const auto& r : curve) f << r.step << ',' << r.total << ',' << r.high << ',' << r.low << '\n';
}

}  // namespace wsisam
