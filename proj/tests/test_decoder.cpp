#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "decoder_fixture.hpp"
#include "reference_decoder.hpp"
#include "wsisam/layers.hpp"
#include "wsisam/model.hpp"

using namespace wsisam;
using testing::DecoderFixture;
using testing::oracle_config;

namespace {

double max_abs_diff(const ref::M& a, const Mat& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < a[i].size(); ++j)
      m = std::max(m, std::abs(a[i][j] - b(static_cast<long>(i), static_cast<long>(j))));
  return m;
}

Mat square_to_column(const Mat& sq) {
  Mat c(sq.size(), 1);
  for (Eigen::Index i = 0; i < sq.size(); ++i) c(i, 0) = sq.data()[i];
  return c;
}

DecoderConfig tiny_config() { return ModelConfig::tiny().decoder; }

}  // namespace

TEST_CASE("decode matches the explicit-loop reference for every mode and target") {
  struct Variant {
    AggregationMode mode;
    AggregationTarget target;
    bool share;
  };
  const Variant variants[] = {
      {AggregationMode::avg, AggregationTarget::tokens, false},
      {AggregationMode::max, AggregationTarget::tokens, false},
      {AggregationMode::concat_fc, AggregationTarget::tokens, false},
      {AggregationMode::avg, AggregationTarget::features_hr_lr, false},
      {AggregationMode::avg, AggregationTarget::features_hr_expand, false},
      {AggregationMode::avg, AggregationTarget::tokens, true},
  };
  for (const auto& v : variants) {
    DecoderConfig cfg = oracle_config();
    cfg.mode = v.mode;
    cfg.target = v.target;
    cfg.share_head_with_output_tokens = v.share;
    CAPTURE(to_string(v.mode));
    CAPTURE(to_string(v.target));
    DecoderFixture fx(cfg, 8, 64, 17);
    if (v.mode == AggregationMode::concat_fc) {
      std::mt19937_64 rng(1);
      fx.params.get_mut("wsi.agg_fc.w") = testing::random_mat(64, 32, rng, 0.2);
      fx.params.get_mut("wsi.agg_fc.b") = testing::random_mat(1, 32, rng, 0.2);
    }
    const MaskPrediction pred = decode(fx.inputs(), fx.params, cfg);
    const ref::Output out = ref::decode(fx.inputs(), fx.params, cfg);
    CHECK(max_abs_diff(out.hr_logits, square_to_column(pred.hr_logits)) < 1e-6);
    CHECK(max_abs_diff(out.lr_logits, square_to_column(pred.lr_logits)) < 1e-6);
  }
}

TEST_CASE("symmetric inputs give bitwise identical branches") {
  const DecoderConfig cfg = tiny_config();
  DecoderFixture fx(cfg, 8, 32, 3);
  fx.lr = fx.hr;
  fx.params.get_mut("wsi.lr_token") = fx.params.get("wsi.hr_token");
  const DecoderInputs in{&fx.hr, &fx.hr, &fx.prompts_hr, &fx.prompts_hr, 32};
  const MaskPrediction pred = decode(in, fx.params, cfg);
  CHECK(pred.hr_logits == pred.lr_logits);
  CHECK(pred.hr_mask == pred.lr_mask);
}

TEST_CASE("aggregation examples") {
  ParamStore s;
  const Mat a = (Mat(1, 2) << 1, 3).finished();
  const Mat b = (Mat(1, 2) << 3, 1).finished();
  CHECK(aggregate_tokens(a, b, AggregationMode::avg, s) == (Mat(1, 2) << 2, 2).finished());
  CHECK(aggregate_tokens(a, b, AggregationMode::max, s) == (Mat(1, 2) << 3, 3).finished());

  Mat w = Mat::Zero(4, 2);
  w(0, 0) = w(1, 1) = 1.0;
  s.add("wsi.agg_fc.w", w, true);
  s.add("wsi.agg_fc.b", Mat::Zero(1, 2), true);
  CHECK(aggregate_tokens(a, b, AggregationMode::concat_fc, s) == a);

  std::mt19937_64 rng(2);
  const Mat x = testing::random_mat(1, 16, rng);
  CHECK(aggregate_tokens(x, x, AggregationMode::avg, s) == x);
  CHECK(aggregate_tokens(x, x, AggregationMode::max, s) == x);
}

TEST_CASE("concat_fc starts as the average") {
  DecoderConfig cfg = tiny_config();
  cfg.mode = AggregationMode::concat_fc;
  ParamStore s;
  std::mt19937_64 rng(4);
  init_wsi_params(s, cfg, rng);
  const Mat a = testing::random_mat(1, cfg.dim, rng);
  const Mat b = testing::random_mat(1, cfg.dim, rng);
  CHECK((aggregate_tokens(a, b, AggregationMode::concat_fc, s) - 0.5 * (a + b)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("fusion is the sum of three independent upscaling paths") {
  const DecoderConfig cfg = oracle_config();
  DecoderFixture fx(cfg, 8, 64, 5);
  std::mt19937_64 rng(6);
  const Mat a = testing::random_mat(64, cfg.dim, rng);
  const Mat b = testing::random_mat(64, cfg.encoder_dim, rng);
  const Mat c = testing::random_mat(64, cfg.encoder_dim, rng);
  const Mat fused = fuse_features(a, b, c, 8, 8, fx.params);
  CHECK(fused.rows() == 32 * 32);
  CHECK(fused.cols() == cfg.fusion_channels);
  const ref::M expect = ref::add(ref::add(ref::upscale(fx.params, "wsi.fusion.decoder", ref::from(a), 8, 8),
                                          ref::upscale(fx.params, "wsi.fusion.early", ref::from(b), 8, 8)),
                                 ref::upscale(fx.params, "wsi.fusion.late", ref::from(c), 8, 8));
  CHECK(max_abs_diff(expect, fused) < 1e-6);
}

TEST_CASE("zero early and late paths leave the decoder path alone") {
  const DecoderConfig cfg = oracle_config();
  DecoderFixture fx(cfg, 8, 64, 7);
  for (const char* path : {"wsi.fusion.early", "wsi.fusion.late"})
    for (const char* leaf : {".up1.w", ".up1.b", ".ln.g", ".ln.b", ".up2.w", ".up2.b"})
      fx.params.get_mut(std::string(path) + leaf).setZero();
  std::mt19937_64 rng(8);
  const Mat a = testing::random_mat(64, cfg.dim, rng);
  const Mat zero = Mat::Zero(64, cfg.encoder_dim);
  ad::Tape t;
  ParamBinding p(t, fx.params, false);
  const Mat alone = nn::upscale_path(p, "wsi.fusion.decoder", t.constant(a), 8, 8).value();
  CHECK(fuse_features(a, zero, zero, 8, 8, fx.params) == alone);
}

TEST_CASE("mask head with a unit-basis output selects one fused channel") {
  const DecoderConfig cfg = oracle_config();
  DecoderFixture fx(cfg, 8, 64, 9);
  std::mt19937_64 rng(10);
  const Mat fused = testing::random_mat(32 * 32, cfg.fusion_channels, rng);
  const Mat t = testing::random_mat(1, cfg.dim, rng);
  ParamStore s = fx.params;
  s.get_mut("wsi.token_head.fc2.w").setZero();
  Mat e = Mat::Zero(1, cfg.fusion_channels);
  e(0, 2) = 1.0;
  s.get_mut("wsi.token_head.fc2.b") = e;
  CHECK(predict_mask_from_token("wsi.token_head", t, fused, s) == fused.col(2));
  CHECK(predict_mask_from_token("wsi.token_head", t, Mat::Zero(fused.rows(), fused.cols()), fx.params).isZero(0));
}

TEST_CASE("mask head matches a per-pixel dot-product loop") {
  const DecoderConfig cfg = oracle_config();
  DecoderFixture fx(cfg, 8, 64, 11);
  std::mt19937_64 rng(12);
  const Mat fused = testing::random_mat(32 * 32, cfg.fusion_channels, rng);
  const Mat t = testing::random_mat(1, cfg.dim, rng);
  const Mat got = predict_mask_from_token("wsi.token_head", t, fused, fx.params);
  const auto w = ref::mlp_relu(fx.params, "wsi.token_head", ref::from(t), 3)[0];
  double m = 0.0;
  for (Eigen::Index i = 0; i < fused.rows(); ++i) {
    double acc = 0.0;
    for (Eigen::Index c = 0; c < fused.cols(); ++c) acc += w[static_cast<size_t>(c)] * fused(i, c);
    m = std::max(m, std::abs(acc - got(i, 0)));
  }
  CHECK(m < 1e-6);
}

TEST_CASE("hook sees every block before aggregation and the final state") {
  const DecoderConfig cfg = tiny_config();
  DecoderFixture fx(cfg, 8, 32, 13);
  std::vector<int> blocks;
  std::vector<TokenSnapshot> snaps;
  decode(fx.inputs(), fx.params, cfg, [&](int b, const TokenSnapshot& s) {
    blocks.push_back(b);
    snaps.push_back(s);
  });
  REQUIRE(blocks == std::vector<int>{0, 1, 2});
  const long n_tokens = TokenSet::kPromptStart + fx.prompts_hr.tokens.rows();
  for (const auto& s : snaps) {
    CHECK(s.hr_branch.rows() == n_tokens);
    CHECK(s.lr_branch.rows() == n_tokens);
  }
  CHECK(snaps[0].hr_branch.row(TokenSet::kHrRow) != snaps[0].lr_branch.row(TokenSet::kLrRow));
}

TEST_CASE("the HR-only ablation ignores the LR input entirely") {
  DecoderConfig cfg = tiny_config();
  std::mt19937_64 rng(14);
  for (auto target : {AggregationTarget::tokens, AggregationTarget::features_hr_lr,
                      AggregationTarget::features_hr_expand}) {
    cfg.target = target;
    DecoderFixture fx(cfg, 8, 32, 15);
    const Mat before = decode(fx.inputs(), fx.params, cfg).hr_logits;
    fx.lr.embedding = testing::random_mat(64, cfg.dim, rng);
    fx.lr.late_feat = testing::random_mat(64, cfg.encoder_dim, rng);
    const Mat after = decode(fx.inputs(), fx.params, cfg).hr_logits;
    CAPTURE(to_string(target));
    CHECK((before == after) == (target == AggregationTarget::features_hr_expand));
  }
}

TEST_CASE("feature-level variants differ from token aggregation") {
  DecoderConfig cfg = tiny_config();
  DecoderFixture fx(cfg, 8, 32, 16);
  const Mat tokens = decode(fx.inputs(), fx.params, cfg).hr_logits;
  cfg.target = AggregationTarget::features_hr_lr;
  const Mat hr_lr = decode(fx.inputs(), fx.params, cfg).hr_logits;
  cfg.target = AggregationTarget::features_hr_expand;
  const Mat expand = decode(fx.inputs(), fx.params, cfg).hr_logits;
  CHECK(tokens != hr_lr);
  CHECK(tokens != expand);
  CHECK(hr_lr != expand);
}

TEST_CASE("HR and LR token gradients through decode match finite differences") {
  const DecoderConfig cfg = tiny_config();
  DecoderFixture fx(cfg, 8, 32, 18);
  std::mt19937_64 rng(19);
  const Mat probe_hr = testing::random_mat(32 * 32, 1, rng);
  const Mat probe_lr = testing::random_mat(32 * 32, 1, rng);
  auto objective = [&](ParamBinding& p) {
    auto t = &p.tape();
    DecoderVars v = decode(p, fx.inputs(), cfg);
    return ad::add(ad::sum(ad::mul(v.hr_logits, t->constant(probe_hr))),
                   ad::sum(ad::mul(v.lr_logits, t->constant(probe_lr))));
  };
  ad::Tape tape;
  ParamBinding p(tape, fx.params, true);
  tape.backward(objective(p));
  for (const std::string name : {"wsi.hr_token", "wsi.lr_token"}) {
    const Mat x0 = fx.params.get(name);
    auto f = [&](const Mat& x) {
      ParamStore s = fx.params;
      s.get_mut(name) = x;
      ad::Tape t;
      ParamBinding pb(t, s, false);
      DecoderVars v = decode(pb, fx.inputs(), cfg);
      return (v.hr_logits.value().array() * probe_hr.array()).sum() +
             (v.lr_logits.value().array() * probe_lr.array()).sum();
    };
    const auto coords = testing::all_coords(x0);
    CAPTURE(name);
    CHECK(testing::rel_err(testing::pick(p.bound().at(name).grad(), coords), testing::fd_grad(f, x0, coords, 1e-5)) <
          1e-4);
  }
}

TEST_CASE("debug output-token masks and IoU estimate") {
  DecoderConfig cfg = tiny_config();
  cfg.emit_output_token_masks = true;
  DecoderFixture fx(cfg, 8, 32, 20);
  const MaskPrediction pred = decode(fx.inputs(), fx.params, cfg);
  REQUIRE(pred.output_token_logits.size() == 3);
  CHECK(pred.output_token_logits[0].size() == 32 * 32);
  CHECK(std::isfinite(pred.iou_estimate));
  CHECK(pred.hr_mask == binarize(pred.hr_logits));
}

TEST_CASE("learnable additions carry the wsi prefix and nothing else is learnable") {
  DecoderConfig cfg = tiny_config();
  cfg.mode = AggregationMode::concat_fc;
  DecoderFixture fx(cfg, 8, 32, 21);
  const auto part = fx.params.partition();
  for (const auto& n : part.learnable) CHECK(n.rfind("wsi.", 0) == 0);
  for (const auto& n : part.frozen) CHECK(n.rfind("wsi.", 0) != 0);
  CHECK(fx.params.contains("wsi.agg_fc.w"));
  cfg.share_head_with_output_tokens = true;
  cfg.fusion_channels = cfg.dim / 8;
  cfg.mode = AggregationMode::avg;
  DecoderFixture shared(cfg, 8, 32, 21);
  CHECK_FALSE(shared.params.contains("wsi.token_head.fc0.w"));
  CHECK_FALSE(shared.params.contains("wsi.agg_fc.w"));
}

TEST_CASE("configuration and input validation") {
  DecoderConfig cfg = tiny_config();
  cfg.n_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  CHECK(aggregation_mode_from_string("concat_fc") == AggregationMode::concat_fc);
  CHECK(aggregation_target_from_string("features_hr_expand") == AggregationTarget::features_hr_expand);
  CHECK_THROWS_AS(aggregation_mode_from_string("median"), InvalidArgument);
}
