#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cskt/encoder.hpp"
#include "cskt/error.hpp"
#include "cskt/layout.hpp"
#include "cskt/ops.hpp"
#include "cskt/param_store.hpp"
#include "cskt/prompting.hpp"
#include "cskt/rng.hpp"

namespace cskt {

/// Reserved token ids shared by the tokenizer and the text encoder.
namespace special_tokens {
inline constexpr std::size_t pad = 0;
inline constexpr std::size_t bos = 1;
inline constexpr std::size_t eos = 2;
}  // namespace special_tokens

struct ModelConfig {
  std::size_t text_width = 64;
  std::size_t vision_width = 64;
  std::size_t layers = 4;
  std::size_t text_heads = 4;
  std::size_t vision_heads = 4;
  std::size_t vocab_size = 64;
  std::size_t max_text_length = 16;
  std::size_t image_height = 32;
  std::size_t image_width = 16;
  std::size_t patch_size = 8;
  std::size_t joint_dim = 32;
  std::size_t mlp_ratio = 4;
  std::size_t prompt_length = 4;  // C
  std::size_t prompt_depth = 4;   // J
  double text_adapter_scale = 4.0;
  double vision_adapter_scale = 0.1;
  std::size_t adapter_rank = 8;
  bool use_bpt = true;
  bool use_upt = false;
  bool use_dat = true;
  Activation activation = Activation::QuickGelu;
  std::uint64_t seed = 7;

  PromptVariant prompt_variant() const noexcept {
    if (prompt_depth == 0) return PromptVariant::None;
    if (use_bpt) return PromptVariant::Bpt;
    if (use_upt) return PromptVariant::Upt;
    return PromptVariant::None;
  }

  std::size_t patch_rows() const noexcept { return image_height / patch_size; }
  std::size_t patch_cols() const noexcept { return image_width / patch_size; }
  std::size_t num_patches() const noexcept { return patch_rows() * patch_cols(); }
  std::size_t patch_dim() const noexcept { return patch_size * patch_size * 3; }

  void validate() const {
    auto check = [](bool ok, const std::string& msg) { require(ok, ErrorKind::Config, msg); };
    check(text_width > 0 && vision_width > 0 && layers > 0, "widths and layer count must be positive");
    check(text_heads > 0 && text_width % text_heads == 0, "text width must be divisible by text heads");
    check(vision_heads > 0 && vision_width % vision_heads == 0, "vision width must be divisible by vision heads");
    check(vocab_size > special_tokens::eos, "vocabulary must hold the reserved tokens");
    check(max_text_length >= 2, "max text length must fit BOS and EOS");
    check(patch_size > 0 && image_height % patch_size == 0 && image_width % patch_size == 0,
          "image height and width must be divisible by the patch size");
    check(num_patches() > 0, "image must contain at least one patch");
    check(joint_dim > 0 && mlp_ratio > 0, "joint dim and mlp ratio must be positive");
    check(!(use_bpt && use_upt), "use_bpt and use_upt are mutually exclusive");
    check(prompt_depth <= layers, "prompt depth exceeds encoder layers");
    if (prompt_variant() != PromptVariant::None) check(prompt_length > 0, "prompt length must be positive");
    if (use_dat) {
      check(adapter_rank > 0 && adapter_rank < text_width && adapter_rank < vision_width,
            "adapter rank must be positive and below both widths");
    }
  }

  /// Small configuration used for training and verification runs.
  static ModelConfig desk_reference() { return ModelConfig{}; }

  /// ViT-B/16-shaped dual encoder at 384x128 input (for parameter accounting).
  static ModelConfig clip_b16() {
    ModelConfig c;
    c.text_width = 512;
    c.vision_width = 768;
    c.layers = 12;
    c.text_heads = 8;
    c.vision_heads = 12;
    c.vocab_size = 49408;
    c.max_text_length = 77;
    c.image_height = 384;
    c.image_width = 128;
    c.patch_size = 16;
    c.joint_dim = 512;
    c.prompt_length = 4;
    c.prompt_depth = 12;
    c.adapter_rank = 64;
    return c;
  }
};

/// Every tensor the model allocates, in creation order. Count and
/// materialization both read from here.
inline ParamLayout param_layout(const ModelConfig& c) {
  ParamLayout out;
  const std::size_t dt = c.text_width;
  const std::size_t dv = c.vision_width;
  out.push_back({"text.token_embedding", {c.vocab_size, dt}, true, ParamInit::normal(0.02)});
  out.push_back({"text.positional_embedding", {c.max_text_length, dt}, true, ParamInit::normal(0.01)});
  for (std::size_t i = 0; i < c.layers; ++i) {
    const std::string p = "text.layers." + std::to_string(i);
    declare_attention(out, p, dt, c.layers);
    declare_mlp(out, p, dt, dt * c.mlp_ratio, c.layers);
    if (c.use_dat) declare_adapter(out, p, dt, c.adapter_rank);
  }
  out.push_back({"text.ln_final.gamma", {dt}, true, ParamInit::ones()});
  out.push_back({"text.ln_final.beta", {dt}, true, ParamInit::zeros()});
  out.push_back({"text.projection", {dt, c.joint_dim}, true, ParamInit::normal(0.02)});

  const double vscale = 1.0 / std::sqrt(static_cast<double>(dv));
  out.push_back({"vision.patch_embedding", {c.patch_dim(), dv}, true, ParamInit::normal(0.02)});
  out.push_back({"vision.class_embedding", {dv}, true, ParamInit::normal(vscale)});
  out.push_back({"vision.positional_embedding", {c.num_patches() + 1, dv}, true, ParamInit::normal(vscale)});
  for (std::size_t i = 0; i < c.layers; ++i) {
    const std::string p = "vision.layers." + std::to_string(i);
    declare_attention(out, p, dv, c.layers);
    declare_mlp(out, p, dv, dv * c.mlp_ratio, c.layers);
    if (c.use_dat) declare_adapter(out, p, dv, c.adapter_rank);
  }
  out.push_back({"vision.ln_post.gamma", {dv}, true, ParamInit::ones()});
  out.push_back({"vision.ln_post.beta", {dv}, true, ParamInit::zeros()});
  out.push_back({"vision.projection", {dv, c.joint_dim}, true, ParamInit::normal(0.02)});

  declare_prompt_bank(out, c.prompt_variant(), c.prompt_length, c.prompt_depth, dt, dv);
  return out;
}

struct ParamCounts {
  std::uint64_t frozen = 0;
  std::uint64_t trainable = 0;
  std::uint64_t total() const noexcept { return frozen + trainable; }
  double ratio() const noexcept {
    return total() == 0 ? 0.0 : static_cast<double>(trainable) / static_cast<double>(total());
  }
};

inline ParamCounts count_params(const ParamStore& store) {
  ParamCounts c;
  for (const auto& e : store) (e.frozen ? c.frozen : c.trainable) += e.tensor.numel();
  return c;
}

inline ParamCounts count_params(const ParamLayout& layout) {
  ParamCounts c;
  for (const auto& s : layout) (s.frozen ? c.frozen : c.trainable) += shape_numel(s.shape);
  return c;
}

/// Trainable element count written out term by term (prompts, coupling
/// maps with biases, adapters with biases and their LayerNorm).
inline std::uint64_t closed_form_trainable(const ModelConfig& c) {
  const std::uint64_t dt = c.text_width, dv = c.vision_width, r = c.adapter_rank;
  const std::uint64_t C = c.prompt_length, J = c.prompt_depth, L = c.layers;
  std::uint64_t total = 0;
  switch (c.prompt_variant()) {
    case PromptVariant::Bpt:
      total += J * (C * dt + C * dv) + J * ((dt + 1) * dv + (dv + 1) * dt);
      break;
    case PromptVariant::Upt:
      total += J * C * dt + J * (dt + 1) * dv;
      break;
    case PromptVariant::None:
      break;
  }
  if (c.use_dat) {
    total += L * ((dt + 1) * r + (r + 1) * dt + 2 * dt + (dv + 1) * r + (r + 1) * dv + 2 * dv);
  }
  return total;
}

using TokenSequence = std::vector<std::size_t>;

struct BranchEncoding {
  Var tokens;  // final-LN token states [B, L, D], prompt rows included
  Var global;  // projected, unit-norm [B, joint]
};

/// Splits an H x W x 3 image into row-major patches, each flattened as (y, x, channel).
inline Tensor patchify(const Tensor& image, const ModelConfig& c) {
  require(image.shape() == Shape{c.image_height, c.image_width, 3}, ErrorKind::Dimension,
          "image must be " + shape_str({c.image_height, c.image_width, 3}) + ", got " + shape_str(image.shape()));
  const std::size_t p = c.patch_size;
  Tensor out(Shape{c.num_patches(), c.patch_dim()});
  std::size_t k = 0;
  for (std::size_t pr = 0; pr < c.patch_rows(); ++pr) {
    for (std::size_t pc = 0; pc < c.patch_cols(); ++pc) {
      for (std::size_t y = 0; y < p; ++y) {
        for (std::size_t x = 0; x < p; ++x) {
          for (std::size_t ch = 0; ch < 3; ++ch) {
            out[k++] = image[((pr * p + y) * c.image_width + pc * p + x) * 3 + ch];
          }
        }
      }
    }
  }
  return out;
}

/// Frozen dual-encoder backbone with optional prompt bank and adapters.
///
/// Parameters live in one ParamStore; backbone entries are frozen and the
/// prompt bank and adapters are trainable. All forward passes are recorded
/// on a caller-owned Graph.
class DualEncoder {
 public:
  /// `phrase_ids` are token ids of the prompt-init phrase (no BOS/EOS); the
  /// first C of them seed the layer-0 text prompt. Empty ids fall back to
  /// N(0, 0.02) init.
  explicit DualEncoder(ModelConfig config, std::span<const std::size_t> phrase_ids = {})
      : config_(std::move(config)) {
    config_.validate();
    materialize(phrase_ids);
    resolve();
  }

  const ModelConfig& config() const noexcept { return config_; }
  ParamStore& params() noexcept { return store_; }
  const ParamStore& params() const noexcept { return store_; }
  const PromptBank& prompt_bank() const noexcept { return bank_; }
  const std::vector<EncoderLayerParams>& text_layers() const noexcept { return text_layers_; }
  const std::vector<EncoderLayerParams>& vision_layers() const noexcept { return vision_layers_; }

  std::size_t text_sequence_length() const noexcept {
    return config_.max_text_length + bank_.block_length(Branch::Text);
  }
  std::size_t vision_sequence_length() const noexcept {
    return config_.num_patches() + 1 + bank_.block_length(Branch::Vision);
  }

  /// Position of the first EOS token. Throws input errors for malformed sequences.
  std::size_t eos_position(const TokenSequence& ids) const {
    require(!ids.empty() && ids.size() <= config_.max_text_length, ErrorKind::Input,
            "token sequence length " + std::to_string(ids.size()) + " outside [1, " +
                std::to_string(config_.max_text_length) + "]");
    require(ids.front() == special_tokens::bos, ErrorKind::Input, "token sequence must start with BOS");
    for (std::size_t i = 1; i < ids.size(); ++i) {
      if (ids[i] == special_tokens::eos) return i;
    }
    fail(ErrorKind::Input, "token sequence has no EOS");
  }

  BranchEncoding encode_text(Graph& g, std::span<const TokenSequence> batch) {
    require(!batch.empty(), ErrorKind::Input, "encode_text: empty batch");
    const std::size_t n = batch.size();
    const std::size_t len = config_.max_text_length;
    const std::size_t width = config_.text_width;
    std::vector<std::size_t> flat(n * len, special_tokens::pad);
    std::vector<std::size_t> eos(n);
    for (std::size_t b = 0; b < n; ++b) {
      eos[b] = eos_position(batch[b]);
      for (std::size_t t = 0; t < batch[b].size(); ++t) {
        require(batch[b][t] < config_.vocab_size, ErrorKind::Vocabulary,
                "token id " + std::to_string(batch[b][t]) + " outside vocabulary of " +
                    std::to_string(config_.vocab_size));
        flat[b * len + t] = batch[b][t];
      }
    }
    Var x = embedding_lookup(bind(g, store_, token_embedding_), flat);
    x = add_tiled(reshape(x, {n, len, width}), bind(g, store_, text_positional_));
    x = insert_after_first(x, Branch::Text);
    const std::size_t prompt_rows = bank_.block_length(Branch::Text);
    const AttentionMask mask = AttentionMask::causal(x.shape()[1]);
    x = run_stack(x, text_layers_, mask, Branch::Text);
    x = layer_norm(x, bind(g, store_, text_ln_gamma_), bind(g, store_, text_ln_beta_), kLayerNormEps);
    for (auto& e : eos) e += prompt_rows;
    Var feat = matmul(gather_rows(x, eos), bind(g, store_, text_projection_));
    return {x, l2_normalize(feat)};
  }

  BranchEncoding encode_images(Graph& g, std::span<const Tensor> images) {
    require(!images.empty(), ErrorKind::Input, "encode_images: empty batch");
    const std::size_t n = images.size();
    const std::size_t m = config_.num_patches();
    const std::size_t pd = config_.patch_dim();
    Tensor patches(Shape{n, m, pd});
    for (std::size_t b = 0; b < n; ++b) {
      const Tensor p = patchify(images[b], config_);
      std::copy(p.data().begin(), p.data().end(), patches.data().begin() + static_cast<std::ptrdiff_t>(b * m * pd));
    }
    Var x = matmul(g.constant(std::move(patches)), bind(g, store_, patch_embedding_));
    Var cls = repeat(reshape(bind(g, store_, class_embedding_), {1, config_.vision_width}), n);
    x = add_tiled(concat({cls, x}, 1), bind(g, store_, vision_positional_));
    x = insert_after_first(x, Branch::Vision);
    const AttentionMask mask = AttentionMask::full(x.shape()[1]);
    x = run_stack(x, vision_layers_, mask, Branch::Vision);
    x = layer_norm(x, bind(g, store_, vision_ln_gamma_), bind(g, store_, vision_ln_beta_), kLayerNormEps);
    const std::vector<std::size_t> cls_rows(n, 0);
    Var feat = matmul(gather_rows(x, cls_rows), bind(g, store_, vision_projection_));
    return {x, l2_normalize(feat)};
  }

  /// Unit-norm joint features without recording gradients, in chunks.
  Tensor embed_texts(std::span<const TokenSequence> batch, std::size_t chunk = 64) {
    return embed_chunked(batch.size(), chunk, [&](Graph& g, std::size_t lo, std::size_t hi) {
      return encode_text(g, batch.subspan(lo, hi - lo)).global;
    });
  }

  Tensor embed_images(std::span<const Tensor> images, std::size_t chunk = 64) {
    return embed_chunked(images.size(), chunk, [&](Graph& g, std::size_t lo, std::size_t hi) {
      return encode_images(g, images.subspan(lo, hi - lo)).global;
    });
  }

 private:
  void materialize(std::span<const std::size_t> phrase_ids) {
    for (const ParamSpec& spec : param_layout(config_)) {
      Tensor t = init_tensor(spec, config_.seed);
      if (spec.init.kind == ParamInit::Kind::PhraseEmbedding && !phrase_ids.empty()) fill_from_phrase(t, phrase_ids);
      store_.add(spec.name, std::move(t), spec.frozen);
    }
  }

  // Rows of the token embedding for the first C phrase tokens; a short
  // phrase repeats its last embedding.
  void fill_from_phrase(Tensor& t, std::span<const std::size_t> phrase_ids) {
    const std::size_t rows = t.dim(0);
    const std::size_t width = t.dim(1);
    const Tensor& table = store_["text.token_embedding"];
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t id = phrase_ids[std::min(r, phrase_ids.size() - 1)];
      require(id < config_.vocab_size, ErrorKind::Vocabulary, "prompt phrase token outside vocabulary");
      std::copy_n(table.data().data() + id * width, width, t.data().data() + r * width);
    }
  }

  void resolve() {
    token_embedding_ = store_.ref("text.token_embedding");
    text_positional_ = store_.ref("text.positional_embedding");
    text_ln_gamma_ = store_.ref("text.ln_final.gamma");
    text_ln_beta_ = store_.ref("text.ln_final.beta");
    text_projection_ = store_.ref("text.projection");
    patch_embedding_ = store_.ref("vision.patch_embedding");
    class_embedding_ = store_.ref("vision.class_embedding");
    vision_positional_ = store_.ref("vision.positional_embedding");
    vision_ln_gamma_ = store_.ref("vision.ln_post.gamma");
    vision_ln_beta_ = store_.ref("vision.ln_post.beta");
    vision_projection_ = store_.ref("vision.projection");
    auto stack = [&](const std::string& branch, std::size_t heads, double adapter_scale) {
      std::vector<EncoderLayerParams> layers;
      for (std::size_t i = 0; i < config_.layers; ++i) {
        const std::string p = branch + ".layers." + std::to_string(i);
        EncoderLayerParams layer{resolve_attention(store_, p, heads), resolve_mlp(store_, p, config_.activation), {}};
        if (config_.use_dat) layer.adapter = resolve_adapter(store_, p, adapter_scale);
        layers.push_back(layer);
      }
      return layers;
    };
    text_layers_ = stack("text", config_.text_heads, config_.text_adapter_scale);
    vision_layers_ = stack("vision", config_.vision_heads, config_.vision_adapter_scale);
    bank_ = resolve_prompt_bank(store_, config_.prompt_variant(), config_.prompt_length, config_.prompt_depth,
                                config_.text_width, config_.vision_width);
  }

  // [first row, layer-0 prompt block, remaining rows]
  Var insert_after_first(Var x, Branch branch) {
    if (!bank_.active()) return x;
    const std::size_t len = x.shape()[1];
    Var head = slice(x, 1, 0, 1);
    Var rest = build_prompted_input(slice(x, 1, 1, len), store_, bank_, branch);
    return concat({head, rest}, 1);
  }

  Var run_stack(Var x, const std::vector<EncoderLayerParams>& layers, const AttentionMask& mask, Branch branch) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (i > 0) x = reinject_prompts(x, store_, bank_, i, branch, 1);
      x = encoder_layer(x, layers[i], store_, mask);
    }
    return x;
  }

  template <class Encode>
  Tensor embed_chunked(std::size_t count, std::size_t chunk, Encode encode) {
    Tensor out(Shape{count, config_.joint_dim});
    for (std::size_t lo = 0; lo < count; lo += chunk) {
      const std::size_t hi = std::min(count, lo + chunk);
      Graph g(false);
      const Tensor& part = encode(g, lo, hi).value();
      std::copy(part.data().begin(), part.data().end(),
                out.data().begin() + static_cast<std::ptrdiff_t>(lo * config_.joint_dim));
    }
    return out;
  }

  ModelConfig config_;
  ParamStore store_;
  PromptBank bank_;
  std::vector<EncoderLayerParams> text_layers_;
  std::vector<EncoderLayerParams> vision_layers_;
  ParamRef token_embedding_, text_positional_, text_ln_gamma_, text_ln_beta_, text_projection_;
  ParamRef patch_embedding_, class_embedding_, vision_positional_, vision_ln_gamma_, vision_ln_beta_,
      vision_projection_;
};

/// Cosine similarities of unit-norm features: rows of `a` against rows of `b`.
inline Var similarity_matrix(Var a, Var b) { return matmul(a, transpose(b)); }

inline Tensor similarity_matrix(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), ErrorKind::Dimension,
          "similarity_matrix: feature shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  Tensor out(Shape{a.dim(0), b.dim(0)});
  detail::MutMap(out.data().data(), a.dim(0), b.dim(0)).noalias() =
      detail::ConstMap(a.data().data(), a.dim(0), a.dim(1)) *
      detail::ConstMap(b.data().data(), b.dim(0), b.dim(1)).transpose();
  return out;
}

}  // namespace cskt
