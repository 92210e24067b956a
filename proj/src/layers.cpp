#include "wsisam/layers.hpp"

#include <cmath>

namespace wsisam::nn {

ad::Var linear(ParamBinding& p, const std::string& prefix, ad::Var x) {
  return ad::add_row(ad::matmul(x, p(prefix + ".w")), p(prefix + ".b"));
}

ad::Var layer_norm(ParamBinding& p, const std::string& prefix, ad::Var x, double eps) {
  return ad::layer_norm_rows(x, p(prefix + ".g"), p(prefix + ".b"), eps);
}

ad::Var mlp(ParamBinding& p, const std::string& prefix, ad::Var x, int n_layers, Activation act) {
  for (int i = 0; i < n_layers; ++i) {
    x = linear(p, prefix + ".fc" + std::to_string(i), x);
    if (i + 1 < n_layers) x = act == Activation::relu ? ad::relu(x) : ad::gelu(x);
  }
  return x;
}

void init_mlp(ParamStore& s, const std::string& prefix, const std::vector<int>& dims, bool learnable,
              std::mt19937_64& rng) {
  for (size_t i = 0; i + 1 < dims.size(); ++i) {
    init_linear(s, prefix + ".fc" + std::to_string(i), dims[i], dims[i + 1], learnable, rng);
  }
}

ad::Var attention(ParamBinding& p, const std::string& prefix, ad::Var q, ad::Var k, ad::Var v, int n_heads) {
  ad::Var qp = linear(p, prefix + ".q", q);
  ad::Var kp = linear(p, prefix + ".k", k);
  ad::Var vp = linear(p, prefix + ".v", v);
  const auto internal = qp.cols();
  if (internal % n_heads) throw ShapeMismatch("attention: internal dim not divisible by heads");
  const auto dh = internal / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ad::Var> heads;
  heads.reserve(n_heads);
  for (int h = 0; h < n_heads; ++h) {
    ad::Var qh = n_heads == 1 ? qp : ad::slice_cols(qp, h * dh, dh);
    ad::Var kh = n_heads == 1 ? kp : ad::slice_cols(kp, h * dh, dh);
    ad::Var vh = n_heads == 1 ? vp : ad::slice_cols(vp, h * dh, dh);
    ad::Var w = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt));
    heads.push_back(ad::matmul(w, vh));
  }
  ad::Var merged = n_heads == 1 ? heads[0] : ad::concat_cols(heads);
  return linear(p, prefix + ".o", merged);
}

void init_attention(ParamStore& s, const std::string& prefix, int dim, int internal_dim, bool learnable,
                    std::mt19937_64& rng) {
  init_linear(s, prefix + ".q", dim, internal_dim, learnable, rng);
  init_linear(s, prefix + ".k", dim, internal_dim, learnable, rng);
  init_linear(s, prefix + ".v", dim, internal_dim, learnable, rng);
  init_linear(s, prefix + ".o", internal_dim, dim, learnable, rng);
}

ad::Var conv_transpose2x2(ParamBinding& p, const std::string& prefix, ad::Var x, int h, int w) {
  ad::Var y = ad::pixel_shuffle2x(ad::matmul(x, p(prefix + ".w")), h, w);
  return ad::add_row(y, p(prefix + ".b"));
}

ad::Var upscale_path(ParamBinding& p, const std::string& prefix, ad::Var x, int h, int w) {
  ad::Var y = conv_transpose2x2(p, prefix + ".up1", x, h, w);
  y = ad::gelu(layer_norm(p, prefix + ".ln", y, 1e-6));
  return conv_transpose2x2(p, prefix + ".up2", y, 2 * h, 2 * w);
}

void init_upscale_path(ParamStore& s, const std::string& prefix, int in, int hidden, int out, bool learnable,
                       std::mt19937_64& rng) {
  // Fan-in of a 2x2 stride-2 transposed conv: one input pixel per output pixel.
  s.add(prefix + ".up1.w", normal_matrix(in, 4 * hidden, 1.0 / std::sqrt(static_cast<double>(in)), rng), learnable);
  s.add(prefix + ".up1.b", Mat::Zero(1, hidden), learnable);
  init_layer_norm(s, prefix + ".ln", hidden, learnable);
  s.add(prefix + ".up2.w", normal_matrix(hidden, 4 * out, 1.0 / std::sqrt(static_cast<double>(hidden)), rng),
        learnable);
  s.add(prefix + ".up2.b", Mat::Zero(1, out), learnable);
}

}  // namespace wsisam::nn
