#include "wsisam/encoder.hpp"

#include "wsisam/layers.hpp"

namespace wsisam {

void EncoderConfig::validate() const {
  if (patch_size_px <= 0 || image_size <= 0 || image_size % patch_size_px) {
    throw InvalidArgument("encoder: image_size " + std::to_string(image_size) + " not divisible by patch_size_px " +
                          std::to_string(patch_size_px));
  }
  if (depth <= 0 || early_tap < 0 || early_tap >= depth) throw InvalidArgument("encoder: need 0 <= early_tap < depth");
  if (dim <= 0 || n_heads <= 0 || dim % n_heads) throw InvalidArgument("encoder: dim must be divisible by n_heads");
  if (in_channels <= 0) throw InvalidArgument("encoder: in_channels must be positive");
  if (pixel_std <= 0.0) throw InvalidArgument("encoder: pixel_std must be positive");
}

void init_encoder(ParamStore& s, const EncoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const int tokens = cfg.grid() * cfg.grid();
  const int patch_in = cfg.patch_size_px * cfg.patch_size_px * cfg.in_channels;
  const int hidden = static_cast<int>(cfg.dim * cfg.mlp_ratio);
  init_linear(s, "encoder.patch_embed", patch_in, cfg.dim, false, rng);
  s.add("encoder.pos_embed", normal_matrix(tokens, cfg.dim, 0.1, rng), false);
  for (int b = 0; b < cfg.depth; ++b) {
    const std::string pre = "encoder.block" + std::to_string(b);
    init_layer_norm(s, pre + ".norm1", cfg.dim, false);
    nn::init_attention(s, pre + ".attn", cfg.dim, cfg.dim, false, rng);
    init_layer_norm(s, pre + ".norm2", cfg.dim, false);
    nn::init_mlp(s, pre + ".mlp", {cfg.dim, hidden, cfg.dim}, false, rng);
  }
  init_linear(s, "encoder.neck", cfg.dim, cfg.dim, false, rng);
  init_layer_norm(s, "encoder.neck_ln", cfg.dim, false);
}

Mat image_to_mat(const Image& img) {
  Mat m(static_cast<Eigen::Index>(img.rows) * img.cols, img.channels);
  std::copy(img.data.begin(), img.data.end(), m.data());
  return m;
}

EncoderVars encode_image(ParamBinding& p, ad::Var patch, const EncoderConfig& cfg) {
  cfg.validate();
  const int P = cfg.image_size;
  const int ps = cfg.patch_size_px;
  const int ch = cfg.in_channels;
  if (patch.rows() != static_cast<Eigen::Index>(P) * P || patch.cols() != ch) {
    throw ShapeMismatch("encode_image: expected " + std::to_string(P) + "x" + std::to_string(P) + "x" +
                        std::to_string(ch) + " patch");
  }
  const int g = cfg.grid();
  ad::Var x = ad::add_scalar(ad::scale(patch, 1.0 / cfg.pixel_std), -cfg.pixel_mean / cfg.pixel_std);

  std::vector<Eigen::Index> idx(static_cast<size_t>(g) * g * ps * ps * ch);
  size_t k = 0;
  for (int pi = 0; pi < g; ++pi) {
    for (int pj = 0; pj < g; ++pj) {
      for (int dy = 0; dy < ps; ++dy) {
        for (int dx = 0; dx < ps; ++dx) {
          for (int c = 0; c < ch; ++c) {
            idx[k++] = (static_cast<Eigen::Index>(pi * ps + dy) * P + pj * ps + dx) * ch + c;
          }
        }
      }
    }
  }
  ad::Var tokens = ad::gather(x, std::move(idx), static_cast<Eigen::Index>(g) * g, ps * ps * ch);
  ad::Var h = ad::add(nn::linear(p, "encoder.patch_embed", tokens), p("encoder.pos_embed"));

  EncoderVars out;
  for (int b = 0; b < cfg.depth; ++b) {
    const std::string pre = "encoder.block" + std::to_string(b);
    ad::Var n1 = nn::layer_norm(p, pre + ".norm1", h, 1e-6);
    h = ad::add(h, nn::attention(p, pre + ".attn", n1, n1, n1, cfg.n_heads));
    ad::Var n2 = nn::layer_norm(p, pre + ".norm2", h, 1e-6);
    h = ad::add(h, nn::mlp(p, pre + ".mlp", n2, 2, nn::Activation::gelu));
    if (b == cfg.early_tap) out.early = h;
  }
  out.late = h;
  out.embedding = nn::layer_norm(p, "encoder.neck_ln", nn::linear(p, "encoder.neck", h), 1e-6);
  return out;
}

EncodedImage encode_image(const Image& patch, const EncoderConfig& cfg, const ParamStore& params) {
  if (patch.rows != cfg.image_size || patch.cols != cfg.image_size || patch.channels != cfg.in_channels) {
    throw ShapeMismatch("encode_image: patch is " + std::to_string(patch.rows) + "x" + std::to_string(patch.cols) +
                        "x" + std::to_string(patch.channels) + ", encoder expects " +
                        std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + "x" +
                        std::to_string(cfg.in_channels));
  }
  ad::Tape tape;
  ParamBinding p(tape, params, false);
  auto vars = encode_image(p, tape.constant(image_to_mat(patch)), cfg);
  EncodedImage e;
  e.grid_h = e.grid_w = cfg.grid();
  e.embedding = vars.embedding.value();
  e.early_feat = vars.early.value();
  e.late_feat = vars.late.value();
  return e;
}

}  // namespace wsisam
