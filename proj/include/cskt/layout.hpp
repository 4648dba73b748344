#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "cskt/graph.hpp"
#include "cskt/param_store.hpp"
#include "cskt/rng.hpp"
#include "cskt/tensor.hpp"

namespace cskt {

/// How a parameter is filled when a model is materialized.
struct ParamInit {
  enum class Kind {
    Zeros,
    Ones,
    Normal,          // N(0, value^2)
    KaimingUniform,  // U(-b, b), b = sqrt(6 / ((1 + 5) * fan_in)); value holds fan_in
    PhraseEmbedding, // token embeddings of the prompt-init phrase
  };
  Kind kind = Kind::Zeros;
  double value = 0.0;

  static ParamInit zeros() { return {Kind::Zeros, 0.0}; }
  static ParamInit ones() { return {Kind::Ones, 0.0}; }
  static ParamInit normal(double stddev) { return {Kind::Normal, stddev}; }
  static ParamInit kaiming_uniform(std::size_t fan_in) {
    return {Kind::KaimingUniform, static_cast<double>(fan_in)};
  }
  static ParamInit phrase_embedding() { return {Kind::PhraseEmbedding, 0.0}; }
};

struct ParamSpec {
  std::string name;
  Shape shape;
  bool frozen = true;
  ParamInit init;
};

using ParamLayout = std::vector<ParamSpec>;

inline Var bind(Graph& g, ParamStore& store, ParamRef ref) { return g.parameter(store.tensor(ref)); }

/// Fresh tensor for `spec`, drawn from the stream named after the tensor so
/// values do not depend on creation order. PhraseEmbedding specs fall back
/// to N(0, 0.02); callers holding a token table overwrite them.
inline Tensor init_tensor(const ParamSpec& spec, std::uint64_t seed) {
  Tensor t(spec.shape);
  Rng rng = Rng::stream(seed, spec.name);
  switch (spec.init.kind) {
    case ParamInit::Kind::Zeros:
      break;
    case ParamInit::Kind::Ones:
      for (double& v : t.data()) v = 1.0;
      break;
    case ParamInit::Kind::Normal:
      for (double& v : t.data()) v = rng.normal(0.0, spec.init.value);
      break;
    case ParamInit::Kind::KaimingUniform: {
      const double bound = 1.0 / std::sqrt(spec.init.value);
      for (double& v : t.data()) v = rng.uniform(-bound, bound);
      break;
    }
    case ParamInit::Kind::PhraseEmbedding:
      for (double& v : t.data()) v = rng.normal(0.0, 0.02);
      break;
  }
  return t;
}

inline void materialize(const ParamLayout& layout, std::uint64_t seed, ParamStore& store) {
  for (const ParamSpec& spec : layout) store.add(spec.name, init_tensor(spec, seed), spec.frozen);
}

}  // namespace cskt
