#pragma once

#include "wsisam/decoder.hpp"
#include "wsisam/pyramid.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <string>
#include <utility>

namespace wsisam {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  uint64_t base_seed = 20240;  // frozen "pretrained" weights
  uint64_t wsi_seed = 0;       // initial values of the learnable additions

  int patch_size() const { return encoder.image_size; }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  /// Small configuration shared by tests: D=16, 8px patches, P=32.
  static ModelConfig tiny();
};

struct EncodedPair {
  EncodedImage hr;
  EncodedImage lr;
};

struct EncodedPromptPair {
  EncodedPrompts hr;
  EncodedPrompts lr;
};

/// Anything that maps a concentric pair plus prompts to a prediction.
class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual MaskPrediction predict(const PatchPair& pair, const PromptSet& prompts) const = 0;
  virtual uint64_t fingerprint() const = 0;
};

class WsiSam : public Segmenter {
 public:
  explicit WsiSam(ModelConfig cfg);
  WsiSam(ModelConfig cfg, ParamStore params);

  const ModelConfig& config() const { return cfg_; }
  const ParamStore& params() const { return params_; }
  ParamStore& params_mut() { return params_; }

  EncodedPair encode(const PatchPair& pair) const;
  EncodedPromptPair encode_prompts(const PromptSet& prompts) const;

  MaskPrediction predict(const EncodedPair& enc, const PromptSet& prompts) const;
  MaskPrediction predict(const PatchPair& pair, const PromptSet& prompts) const override;

  /// Differentiable forward used by training.
  DecoderVars forward(ParamBinding& p, const EncodedPair& enc, const EncodedPromptPair& prompts) const;

  uint64_t fingerprint() const override { return params_.hash_all(); }

  void save(const std::filesystem::path& path) const;
  static WsiSam load(const std::filesystem::path& path);

 private:
  ModelConfig cfg_;
  ParamStore params_;
};

}  // namespace wsisam
