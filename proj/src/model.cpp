#include "wsisam/model.hpp"

#include <nlohmann/json.hpp>

namespace wsisam {

using nlohmann::json;

void ModelConfig::validate() const {
  encoder.validate();
  decoder.validate();
  if (encoder.dim != decoder.dim) {
    throw InvalidArgument("model: encoder dim " + std::to_string(encoder.dim) + " != decoder dim " +
                          std::to_string(decoder.dim));
  }
  if (decoder.encoder_dim != encoder.dim) throw InvalidArgument("model: decoder.encoder_dim must equal encoder.dim");
  if (encoder.grid() % 4) throw InvalidArgument("model: encoder grid must be a multiple of 4");
  if (patch_size() % (4 * encoder.grid())) throw InvalidArgument("model: patch size must be a multiple of 4 x grid");
}

json ModelConfig::to_json() const {
  return json{
      {"encoder",
       {{"image_size", encoder.image_size},
        {"in_channels", encoder.in_channels},
        {"patch_size_px", encoder.patch_size_px},
        {"depth", encoder.depth},
        {"dim", encoder.dim},
        {"n_heads", encoder.n_heads},
        {"early_tap", encoder.early_tap},
        {"mlp_ratio", encoder.mlp_ratio},
        {"pixel_mean", encoder.pixel_mean},
        {"pixel_std", encoder.pixel_std}}},
      {"decoder",
       {{"dim", decoder.dim},
        {"n_heads", decoder.n_heads},
        {"depth", decoder.depth},
        {"mlp_dim", decoder.mlp_dim},
        {"attention_downsample", decoder.attention_downsample},
        {"fusion_channels", decoder.fusion_channels},
        {"encoder_dim", decoder.encoder_dim},
        {"mode", to_string(decoder.mode)},
        {"target", to_string(decoder.target)},
        {"point", to_string(decoder.point)},
        {"share_head_with_output_tokens", decoder.share_head_with_output_tokens},
        {"emit_output_token_masks", decoder.emit_output_token_masks}}},
      {"base_seed", base_seed},
      {"wsi_seed", wsi_seed},
  };
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  if (j.contains("encoder")) {
    const json& e = j["encoder"];
    c.encoder.image_size = e.value("image_size", c.encoder.image_size);
    c.encoder.in_channels = e.value("in_channels", c.encoder.in_channels);
    c.encoder.patch_size_px = e.value("patch_size_px", c.encoder.patch_size_px);
    c.encoder.depth = e.value("depth", c.encoder.depth);
    c.encoder.dim = e.value("dim", c.encoder.dim);
    c.encoder.n_heads = e.value("n_heads", c.encoder.n_heads);
    c.encoder.early_tap = e.value("early_tap", c.encoder.early_tap);
    c.encoder.mlp_ratio = e.value("mlp_ratio", c.encoder.mlp_ratio);
    c.encoder.pixel_mean = e.value("pixel_mean", c.encoder.pixel_mean);
    c.encoder.pixel_std = e.value("pixel_std", c.encoder.pixel_std);
  }
  c.decoder.dim = c.encoder.dim;
  c.decoder.encoder_dim = c.encoder.dim;
  if (j.contains("decoder")) {
    const json& d = j["decoder"];
    c.decoder.dim = d.value("dim", c.decoder.dim);
    c.decoder.n_heads = d.value("n_heads", c.decoder.n_heads);
    c.decoder.depth = d.value("depth", c.decoder.depth);
    c.decoder.mlp_dim = d.value("mlp_dim", c.decoder.mlp_dim);
    c.decoder.attention_downsample = d.value("attention_downsample", c.decoder.attention_downsample);
    c.decoder.fusion_channels = d.value("fusion_channels", c.decoder.fusion_channels);
    c.decoder.encoder_dim = d.value("encoder_dim", c.decoder.encoder_dim);
    c.decoder.mode = aggregation_mode_from_string(d.value("mode", to_string(c.decoder.mode)));
    c.decoder.target = aggregation_target_from_string(d.value("target", to_string(c.decoder.target)));
    c.decoder.point = aggregation_point_from_string(d.value("point", to_string(c.decoder.point)));
    c.decoder.share_head_with_output_tokens =
        d.value("share_head_with_output_tokens", c.decoder.share_head_with_output_tokens);
    c.decoder.emit_output_token_masks = d.value("emit_output_token_masks", c.decoder.emit_output_token_masks);
  }
  c.base_seed = j.value("base_seed", c.base_seed);
  c.wsi_seed = j.value("wsi_seed", c.wsi_seed);
  c.validate();
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.encoder.image_size = 32;
  c.encoder.patch_size_px = 4;
  c.encoder.depth = 2;
  c.encoder.dim = 16;
  c.encoder.n_heads = 2;
  c.decoder.dim = 16;
  c.decoder.encoder_dim = 16;
  c.decoder.n_heads = 2;
  c.decoder.mlp_dim = 32;
  c.decoder.fusion_channels = 4;
  return c;
}

namespace {

ParamStore initial_params(const ModelConfig& cfg) {
  cfg.validate();
  ParamStore s;
  std::mt19937_64 base(cfg.base_seed);
  init_encoder(s, cfg.encoder, base);
  init_prompt_encoder(s, cfg.decoder.dim, base);
  init_decoder(s, cfg.decoder, base);
  std::mt19937_64 wsi(cfg.wsi_seed ^ 0x9e3779b97f4a7c15ull);
  init_wsi_params(s, cfg.decoder, wsi);
  return s;
}

}  // namespace

WsiSam::WsiSam(ModelConfig cfg) : cfg_(std::move(cfg)), params_(initial_params(cfg_)) {}

WsiSam::WsiSam(ModelConfig cfg, ParamStore params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  const ParamStore expected = initial_params(cfg_);
  for (const auto& name : expected.names()) {
    if (!params_.contains(name)) throw InvalidArgument("model: parameter '" + name + "' missing");
    const Mat& a = params_.get(name);
    const Mat& b = expected.get(name);
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
      throw ShapeMismatch("model: parameter '" + name + "' has the wrong shape");
    }
  }
  if (params_.size() != expected.size()) throw InvalidArgument("model: unexpected extra parameters");
}

EncodedPair WsiSam::encode(const PatchPair& pair) const {
  return EncodedPair{encode_image(pair.hr_patch, cfg_.encoder, params_),
                     encode_image(pair.lr_patch, cfg_.encoder, params_)};
}

EncodedPromptPair WsiSam::encode_prompts(const PromptSet& prompts) const {
  const int P = cfg_.patch_size();
  const int g = cfg_.encoder.grid();
  return EncodedPromptPair{wsisam::encode_prompts(prompts, params_, P, g, PromptFrame::hr()),
                           wsisam::encode_prompts(prompts, params_, P, g, PromptFrame::lr(P))};
}

MaskPrediction WsiSam::predict(const EncodedPair& enc, const PromptSet& prompts) const {
  const EncodedPromptPair ep = encode_prompts(prompts);
  DecoderInputs in{&enc.hr, &enc.lr, &ep.hr, &ep.lr, cfg_.patch_size()};
  return decode(in, params_, cfg_.decoder);
}

MaskPrediction WsiSam::predict(const PatchPair& pair, const PromptSet& prompts) const {
  if (pair.patch_size() != cfg_.patch_size()) {
    throw ShapeMismatch("model: patch size " + std::to_string(pair.patch_size()) + " but model expects " +
                        std::to_string(cfg_.patch_size()));
  }
  return predict(encode(pair), prompts);
}

DecoderVars WsiSam::forward(ParamBinding& p, const EncodedPair& enc, const EncodedPromptPair& prompts) const {
  DecoderInputs in{&enc.hr, &enc.lr, &prompts.hr, &prompts.lr, cfg_.patch_size()};
  return decode(p, in, cfg_.decoder);
}

void WsiSam::save(const std::filesystem::path& path) const {
  save_checkpoint(path, params_, cfg_.to_json().dump());
}

WsiSam WsiSam::load(const std::filesystem::path& path) {
  std::string cfg_text;
  ParamStore params = load_checkpoint(path, &cfg_text);
  json j;
  try {
    j = json::parse(cfg_text);
  } catch (const json::exception& e) {
    throw InvalidArgument("checkpoint config is not valid JSON: " + std::string(e.what()));
  }
  return WsiSam(ModelConfig::from_json(j), std::move(params));
}

}  // namespace wsisam
