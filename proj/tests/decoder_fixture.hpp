#pragma once

#include "support.hpp"
#include "wsisam/decoder.hpp"

namespace testing {

/// Random encoder outputs and prompts for exercising the decoder in isolation.
struct DecoderFixture {
  wsisam::DecoderConfig cfg;
  wsisam::ParamStore params;
  wsisam::EncodedImage hr, lr;
  wsisam::EncodedPrompts prompts_hr, prompts_lr;
  int patch_size = 0;

  DecoderFixture(wsisam::DecoderConfig c, int grid, int patch, uint64_t seed) : cfg(c), patch_size(patch) {
    std::mt19937_64 rng(seed);
    wsisam::init_prompt_encoder(params, cfg.dim, rng);
    wsisam::init_decoder(params, cfg, rng);
    wsisam::init_wsi_params(params, cfg, rng);
    auto image = [&] {
      wsisam::EncodedImage e;
      e.grid_h = e.grid_w = grid;
      e.embedding = random_mat(grid * grid, cfg.dim, rng);
      e.early_feat = random_mat(grid * grid, cfg.encoder_dim, rng);
      e.late_feat = random_mat(grid * grid, cfg.encoder_dim, rng);
      return e;
    };
    hr = image();
    lr = image();
    wsisam::PromptSet p;
    p.points = wsisam::PointPrompt{{{patch / 3, patch / 2}, {patch / 4, patch - 3}}, {1, 0}};
    p.box = wsisam::BoxPrompt{2, 3, patch - 5, patch - 2};
    Mask m(patch, patch);
    for (int r = patch / 4; r < patch / 2; ++r)
      for (int col = patch / 4; col < 3 * patch / 4; ++col) m.at(r, col) = 1;
    p.mask = wsisam::CoarseMask{m};
    prompts_hr = wsisam::encode_prompts(p, params, patch, grid, wsisam::PromptFrame::hr());
    prompts_lr = wsisam::encode_prompts(p, params, patch, grid, wsisam::PromptFrame::lr(patch));
  }

  wsisam::DecoderInputs inputs() const { return {&hr, &lr, &prompts_hr, &prompts_lr, patch_size}; }
};

inline wsisam::DecoderConfig oracle_config() {
  wsisam::DecoderConfig c;
  c.dim = 32;
  c.n_heads = 4;
  c.depth = 2;
  c.mlp_dim = 64;
  c.fusion_channels = 4;
  c.encoder_dim = 32;
  return c;
}

}  // namespace testing
