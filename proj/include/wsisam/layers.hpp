#pragma once

#include "wsisam/params.hpp"

#include <string>
#include <vector>

namespace wsisam::nn {

enum class Activation { relu, gelu };

ad::Var linear(ParamBinding& p, const std::string& prefix, ad::Var x);
ad::Var layer_norm(ParamBinding& p, const std::string& prefix, ad::Var x, double eps = 1e-5);

/// Stack of linear layers "<prefix>.fc<i>" with `act` between them (not after
/// the last one).
ad::Var mlp(ParamBinding& p, const std::string& prefix, ad::Var x, int n_layers, Activation act);
void init_mlp(ParamStore& s, const std::string& prefix, const std::vector<int>& dims, bool learnable,
              std::mt19937_64& rng);

/// Multi-head scaled dot-product attention with input projections
/// "<prefix>.{q,k,v}" (dim -> internal) and output projection "<prefix>.o".
ad::Var attention(ParamBinding& p, const std::string& prefix, ad::Var q, ad::Var k, ad::Var v, int n_heads);
void init_attention(ParamStore& s, const std::string& prefix, int dim, int internal_dim, bool learnable,
                    std::mt19937_64& rng);

/// 2x2 stride-2 transposed convolution on an (H*W) x Cin map:
/// weight "<prefix>.w" is Cin x (4*Cout), bias "<prefix>.b" is 1 x Cout.
ad::Var conv_transpose2x2(ParamBinding& p, const std::string& prefix, ad::Var x, int h, int w);

/// Two transposed convolutions with LayerNorm + GELU between them: (H*W) x C
/// -> (4H*4W) x Cout. Used for the decoder's output upscaling and for each
/// fusion path. Parameters "<prefix>.up1", "<prefix>.ln", "<prefix>.up2".
ad::Var upscale_path(ParamBinding& p, const std::string& prefix, ad::Var x, int h, int w);
void init_upscale_path(ParamStore& s, const std::string& prefix, int in, int hidden, int out, bool learnable,
                       std::mt19937_64& rng);

}  // namespace wsisam::nn
