#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cskt/error.hpp"
#include "cskt/layout.hpp"
#include "cskt/ops.hpp"
#include "cskt/param_store.hpp"

namespace cskt {

/// NONE: no prompts. UPT: text prompts plus text->vision coupling only.
/// BPT: prompts in both branches, coupled in both directions.
enum class PromptVariant { None, Upt, Bpt };
enum class Branch { Text, Vision };
enum class Direction { TextToVision, VisionToText };

constexpr const char* to_string(PromptVariant v) {
  switch (v) {
    case PromptVariant::None: return "none";
    case PromptVariant::Upt: return "upt";
    case PromptVariant::Bpt: return "bpt";
  }
  return "?";
}

/// Affine map between branch widths; weight is [D_src, D_dst].
struct CouplingMap {
  ParamRef weight;
  ParamRef bias;
};

/// Per-layer learnable prompts and coupling maps.
///
/// Coupled prompts are never stored: they are recomputed from the source
/// branch's learnable prompt on every forward pass.
struct PromptBank {
  PromptVariant variant = PromptVariant::None;
  std::size_t length = 0;  // C
  std::size_t depth = 0;   // J
  std::size_t text_width = 0;
  std::size_t vision_width = 0;
  std::vector<ParamRef> text_prompts;       // [C, D_t] per layer
  std::vector<ParamRef> vision_prompts;     // [C, D_v] per layer, BPT only
  std::vector<CouplingMap> text_to_vision;  // F_t
  std::vector<CouplingMap> vision_to_text;  // F_v, BPT only

  bool active() const noexcept { return variant != PromptVariant::None && depth > 0; }

  /// Rows each layer's prompt block occupies in the given branch.
  std::size_t block_length(Branch) const noexcept {
    if (!active()) return 0;
    return variant == PromptVariant::Bpt ? 2 * length : length;
  }

  std::size_t width(Branch b) const noexcept { return b == Branch::Text ? text_width : vision_width; }
};

inline std::string text_prompt_name(std::size_t i) { return "prompt.text." + std::to_string(i); }
inline std::string vision_prompt_name(std::size_t i) { return "prompt.vision." + std::to_string(i); }
inline std::string coupling_name(Direction d, std::size_t i) {
  return std::string(d == Direction::TextToVision ? "coupling.t2v." : "coupling.v2t.") + std::to_string(i);
}

/// Appends the bank's tensors. The layer-0 text prompt is seeded from the
/// init phrase; the rest use N(0, 0.02). Coupling maps use the usual linear
/// init, one independent map per layer and direction.
inline void declare_prompt_bank(ParamLayout& out, PromptVariant variant, std::size_t length,
                                std::size_t depth, std::size_t text_width, std::size_t vision_width) {
  if (variant == PromptVariant::None || depth == 0) return;
  for (std::size_t i = 0; i < depth; ++i) {
    out.push_back({text_prompt_name(i), {length, text_width}, false,
                   i == 0 ? ParamInit::phrase_embedding() : ParamInit::normal(0.02)});
    if (variant == PromptVariant::Bpt) {
      out.push_back({vision_prompt_name(i), {length, vision_width}, false, ParamInit::normal(0.02)});
    }
    const std::string t2v = coupling_name(Direction::TextToVision, i);
    out.push_back({t2v + ".weight", {text_width, vision_width}, false, ParamInit::kaiming_uniform(text_width)});
    out.push_back({t2v + ".bias", {vision_width}, false, ParamInit::zeros()});
    if (variant == PromptVariant::Bpt) {
      const std::string v2t = coupling_name(Direction::VisionToText, i);
      out.push_back({v2t + ".weight", {vision_width, text_width}, false, ParamInit::kaiming_uniform(vision_width)});
      out.push_back({v2t + ".bias", {text_width}, false, ParamInit::zeros()});
    }
  }
}

inline PromptBank resolve_prompt_bank(const ParamStore& s, PromptVariant variant, std::size_t length,
                                      std::size_t depth, std::size_t text_width, std::size_t vision_width) {
  PromptBank bank{variant, length, depth, text_width, vision_width, {}, {}, {}, {}};
  if (!bank.active()) return bank;
  for (std::size_t i = 0; i < depth; ++i) {
    bank.text_prompts.push_back(s.ref(text_prompt_name(i)));
    const std::string t2v = coupling_name(Direction::TextToVision, i);
    bank.text_to_vision.push_back({s.ref(t2v + ".weight"), s.ref(t2v + ".bias")});
    if (variant == PromptVariant::Bpt) {
      bank.vision_prompts.push_back(s.ref(vision_prompt_name(i)));
      const std::string v2t = coupling_name(Direction::VisionToText, i);
      bank.vision_to_text.push_back({s.ref(v2t + ".weight"), s.ref(v2t + ".bias")});
    }
  }
  return bank;
}

/// Layer-i coupled prompt: F(P_src[i]) as [C, D_target].
inline Var couple(Graph& g, ParamStore& store, const PromptBank& bank, std::size_t layer, Direction dir) {
  const bool allocated = dir == Direction::TextToVision ? !bank.text_to_vision.empty()
                                                        : !bank.vision_to_text.empty();
  require(allocated, ErrorKind::Variant,
          std::string("coupling direction ") + (dir == Direction::TextToVision ? "t->v" : "v->t") +
              " is not allocated under variant " + to_string(bank.variant));
  require(layer < bank.depth, ErrorKind::Input,
          "couple: layer " + std::to_string(layer) + " beyond prompt depth " + std::to_string(bank.depth));
  const CouplingMap& map = dir == Direction::TextToVision ? bank.text_to_vision[layer] : bank.vision_to_text[layer];
  const ParamRef source = dir == Direction::TextToVision ? bank.text_prompts[layer] : bank.vision_prompts[layer];
  return add_tiled(matmul(bind(g, store, source), bind(g, store, map.weight)), bind(g, store, map.bias));
}

/// Prompt rows for one layer and branch: [own prompts, coupled prompts], with
/// whichever part the variant does not allocate left out.
inline Var prompt_block(Graph& g, ParamStore& store, const PromptBank& bank, std::size_t layer, Branch branch) {
  require(bank.active(), ErrorKind::Variant, "prompt_block: no prompts under this configuration");
  std::vector<Var> parts;
  if (branch == Branch::Text) {
    parts.push_back(bind(g, store, bank.text_prompts[layer]));
    if (bank.variant == PromptVariant::Bpt) parts.push_back(couple(g, store, bank, layer, Direction::VisionToText));
  } else {
    if (bank.variant == PromptVariant::Bpt) parts.push_back(bind(g, store, bank.vision_prompts[layer]));
    parts.push_back(couple(g, store, bank, layer, Direction::TextToVision));
  }
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

namespace detail {

inline Var block_for(Var like, Var block) {
  return like.shape().size() == 3 ? repeat(block, like.shape()[0]) : block;
}

}  // namespace detail

/// [prompt block(layer 0), content] along the sequence axis. `content` is
/// [m, D] or [B, m, D]; the block is shared across the batch.
inline Var build_prompted_input(Var content, ParamStore& store, const PromptBank& bank, Branch branch) {
  if (!bank.active()) return content;
  const std::size_t width = content.shape().back();
  require(width == bank.width(branch), ErrorKind::Dimension,
          "prompted input: content width " + std::to_string(width) + " but branch width is " +
              std::to_string(bank.width(branch)));
  Graph& g = content.graph();
  Var block = detail::block_for(content, prompt_block(g, store, bank, 0, branch));
  return concat({block, content}, content.shape().size() - 2);
}

inline Var build_text_input(Var content, ParamStore& store, const PromptBank& bank) {
  return build_prompted_input(content, store, bank, Branch::Text);
}

inline Var build_vision_input(Var content, ParamStore& store, const PromptBank& bank) {
  return build_prompted_input(content, store, bank, Branch::Vision);
}

/// Discards the prompt rows a layer produced and inserts layer `layer`'s
/// fresh prompts. Prompt rows start at `offset` (1 when a BOS/CLS row
/// precedes them). Past the prompt depth the input is returned untouched.
inline Var reinject_prompts(Var layer_out, ParamStore& store, const PromptBank& bank, std::size_t layer,
                            Branch branch, std::size_t offset = 0) {
  if (!bank.active() || layer >= bank.depth) return layer_out;
  require(layer >= 1, ErrorKind::Input, "reinject_prompts: layer 0 prompts are set by the input builder");
  const std::size_t axis = layer_out.shape().size() - 2;
  const std::size_t len = layer_out.shape()[axis];
  const std::size_t rows = bank.block_length(branch);
  require(offset + rows <= len, ErrorKind::Dimension,
          "reinject_prompts: sequence of " + std::to_string(len) + " rows cannot hold " +
              std::to_string(rows) + " prompt rows at offset " + std::to_string(offset));
  Graph& g = layer_out.graph();
  Var block = detail::block_for(layer_out, prompt_block(g, store, bank, layer, branch));
  std::vector<Var> parts;
  if (offset > 0) parts.push_back(slice(layer_out, axis, 0, offset));
  parts.push_back(block);
  if (offset + rows < len) parts.push_back(slice(layer_out, axis, offset + rows, len));
  return parts.size() == 1 ? parts[0] : concat(parts, axis);
}

}  // namespace cskt
