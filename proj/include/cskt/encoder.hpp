#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>

#include "cskt/error.hpp"
#include "cskt/layout.hpp"
#include "cskt/ops.hpp"
#include "cskt/param_store.hpp"

namespace cskt {

enum class Activation { QuickGelu, Gelu };

/// Pre-norm self-attention sublayer. Backbone weights, always frozen.
struct AttentionParams {
  ParamRef ln_gamma, ln_beta;
  ParamRef in_weight, in_bias;    // [d, 3d], [3d]
  ParamRef out_weight, out_bias;  // [d, d], [d]
  std::size_t width = 0;
  std::size_t heads = 1;
};

/// Pre-norm MLP sublayer of the frozen backbone.
struct MlpParams {
  ParamRef ln_gamma, ln_beta;
  ParamRef fc_weight, fc_bias;      // [d, h], [h]
  ParamRef proj_weight, proj_bias;  // [h, d], [d]
  Activation activation = Activation::QuickGelu;
};

/// Bottleneck adapter running parallel to the MLP, with its own LayerNorm.
/// Trainable. The up projection starts at zero so the adapter is a no-op at init.
struct AdapterParams {
  ParamRef ln_gamma, ln_beta;
  ParamRef down_weight, down_bias;  // [d, r], [r]
  ParamRef up_weight, up_bias;      // [r, d], [d]
  double scale = 1.0;
};

struct EncoderLayerParams {
  AttentionParams attention;
  MlpParams mlp;
  std::optional<AdapterParams> adapter;
};

inline constexpr double kLayerNormEps = 1e-5;

// Naming and initialization of the per-layer tensors. `layers` is the stack
// depth, used for the residual-scaled output projection init.
inline void declare_attention(ParamLayout& out, const std::string& prefix, std::size_t width,
                              std::size_t layers) {
  const double attn_std = 1.0 / std::sqrt(static_cast<double>(width));
  const double proj_std = attn_std / std::sqrt(2.0 * static_cast<double>(layers));
  out.push_back({prefix + ".ln_1.gamma", {width}, true, ParamInit::ones()});
  out.push_back({prefix + ".ln_1.beta", {width}, true, ParamInit::zeros()});
  out.push_back({prefix + ".attn.in_proj.weight", {width, 3 * width}, true, ParamInit::normal(attn_std)});
  out.push_back({prefix + ".attn.in_proj.bias", {3 * width}, true, ParamInit::zeros()});
  out.push_back({prefix + ".attn.out_proj.weight", {width, width}, true, ParamInit::normal(proj_std)});
  out.push_back({prefix + ".attn.out_proj.bias", {width}, true, ParamInit::zeros()});
}

inline void declare_mlp(ParamLayout& out, const std::string& prefix, std::size_t width,
                        std::size_t hidden, std::size_t layers) {
  const double fc_std = 1.0 / std::sqrt(2.0 * static_cast<double>(width));
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(width)) /
                          std::sqrt(2.0 * static_cast<double>(layers));
  out.push_back({prefix + ".ln_2.gamma", {width}, true, ParamInit::ones()});
  out.push_back({prefix + ".ln_2.beta", {width}, true, ParamInit::zeros()});
  out.push_back({prefix + ".mlp.fc.weight", {width, hidden}, true, ParamInit::normal(fc_std)});
  out.push_back({prefix + ".mlp.fc.bias", {hidden}, true, ParamInit::zeros()});
  out.push_back({prefix + ".mlp.proj.weight", {hidden, width}, true, ParamInit::normal(proj_std)});
  out.push_back({prefix + ".mlp.proj.bias", {width}, true, ParamInit::zeros()});
}

inline void declare_adapter(ParamLayout& out, const std::string& prefix, std::size_t width,
                            std::size_t rank) {
  out.push_back({prefix + ".adapter.ln.gamma", {width}, false, ParamInit::ones()});
  out.push_back({prefix + ".adapter.ln.beta", {width}, false, ParamInit::zeros()});
  out.push_back({prefix + ".adapter.down.weight", {width, rank}, false, ParamInit::kaiming_uniform(width)});
  out.push_back({prefix + ".adapter.down.bias", {rank}, false, ParamInit::zeros()});
  out.push_back({prefix + ".adapter.up.weight", {rank, width}, false, ParamInit::zeros()});
  out.push_back({prefix + ".adapter.up.bias", {width}, false, ParamInit::zeros()});
}

inline AttentionParams resolve_attention(const ParamStore& s, const std::string& prefix,
                                         std::size_t heads) {
  AttentionParams p{s.ref(prefix + ".ln_1.gamma"), s.ref(prefix + ".ln_1.beta"),
                    s.ref(prefix + ".attn.in_proj.weight"), s.ref(prefix + ".attn.in_proj.bias"),
                    s.ref(prefix + ".attn.out_proj.weight"), s.ref(prefix + ".attn.out_proj.bias")};
  p.width = s.tensor(p.out_bias).numel();
  p.heads = heads;
  require(p.width % heads == 0, ErrorKind::Config,
          prefix + ": width " + std::to_string(p.width) + " not divisible by " + std::to_string(heads) + " heads");
  return p;
}

inline MlpParams resolve_mlp(const ParamStore& s, const std::string& prefix, Activation act) {
  return MlpParams{s.ref(prefix + ".ln_2.gamma"), s.ref(prefix + ".ln_2.beta"),
                   s.ref(prefix + ".mlp.fc.weight"), s.ref(prefix + ".mlp.fc.bias"),
                   s.ref(prefix + ".mlp.proj.weight"), s.ref(prefix + ".mlp.proj.bias"), act};
}

inline AdapterParams resolve_adapter(const ParamStore& s, const std::string& prefix, double scale) {
  return AdapterParams{s.ref(prefix + ".adapter.ln.gamma"), s.ref(prefix + ".adapter.ln.beta"),
                       s.ref(prefix + ".adapter.down.weight"), s.ref(prefix + ".adapter.down.bias"),
                       s.ref(prefix + ".adapter.up.weight"), s.ref(prefix + ".adapter.up.bias"), scale};
}

namespace detail {

// Lifts [L, d] to [1, L, d] so single sequences and batches share one path.
struct Batched {
  Var x;
  bool lifted = false;
};

inline Batched lift(Var x) {
  if (x.shape().size() == 2) return {reshape(x, {1, x.shape()[0], x.shape()[1]}), true};
  require(x.shape().size() == 3, ErrorKind::Dimension,
          "encoder: expected [L, d] or [B, L, d], got " + shape_str(x.shape()));
  return {x, false};
}

inline Var lower(const Batched& b, Var y) {
  if (!b.lifted) return y;
  return reshape(y, {y.shape()[1], y.shape()[2]});
}

inline Var linear(Graph& g, ParamStore& s, Var x, ParamRef w, ParamRef b) {
  return add_tiled(matmul(x, bind(g, s, w)), bind(g, s, b));
}

}  // namespace detail

/// x + OutProj(Attention(InProj(LN(x)))).
inline Var mhsa_block(Var x, const AttentionParams& p, ParamStore& store, const AttentionMask& mask) {
  Graph& g = x.graph();
  const detail::Batched in = detail::lift(x);
  require(in.x.shape()[2] == p.width, ErrorKind::Dimension,
          "mhsa_block: input width " + std::to_string(in.x.shape()[2]) + " vs params " + std::to_string(p.width));
  Var h = layer_norm(in.x, bind(g, store, p.ln_gamma), bind(g, store, p.ln_beta), kLayerNormEps);
  Var qkv = detail::linear(g, store, h, p.in_weight, p.in_bias);
  Var mixed = attention(qkv, p.heads, mask);
  Var out = detail::linear(g, store, mixed, p.out_weight, p.out_bias);
  return detail::lower(in, add(in.x, out));
}

inline Var mlp_branch(Var x, const MlpParams& p, ParamStore& store) {
  Graph& g = x.graph();
  Var h = layer_norm(x, bind(g, store, p.ln_gamma), bind(g, store, p.ln_beta), kLayerNormEps);
  h = detail::linear(g, store, h, p.fc_weight, p.fc_bias);
  h = p.activation == Activation::QuickGelu ? quick_gelu(h) : gelu(h);
  return detail::linear(g, store, h, p.proj_weight, p.proj_bias);
}

/// s * (ReLU(LN_a(x) W_d + b_d) W_u + b_u)
inline Var adapter_branch(Var x, const AdapterParams& p, ParamStore& store) {
  Graph& g = x.graph();
  Var h = layer_norm(x, bind(g, store, p.ln_gamma), bind(g, store, p.ln_beta), kLayerNormEps);
  h = relu(detail::linear(g, store, h, p.down_weight, p.down_bias));
  h = detail::linear(g, store, h, p.up_weight, p.up_bias);
  return scale(h, p.scale);
}

/// (x + MLP(LN(x))) + adapter(x). The residual sum is formed first so an
/// adapter that outputs zeros leaves the result bit-identical to the plain block.
inline Var adapted_mlp_block(Var x, const MlpParams& mlp, const AdapterParams* adapter, ParamStore& store) {
  Var y = add(x, mlp_branch(x, mlp, store));
  if (adapter == nullptr) return y;
  return add(y, adapter_branch(x, *adapter, store));
}

inline Var encoder_layer(Var x, const EncoderLayerParams& layer, ParamStore& store, const AttentionMask& mask) {
  Var h = mhsa_block(x, layer.attention, store, mask);
  return adapted_mlp_block(h, layer.mlp, layer.adapter ? &*layer.adapter : nullptr, store);
}

}  // namespace cskt
