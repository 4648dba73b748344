#include <gtest/gtest.h>

#include <cmath>

#include "cskt/encoder.hpp"
#include "cskt/layout.hpp"
#include "support.hpp"

using namespace cskt;
using cskt::test::check_bound_gradients;
using cskt::test::error_kind;
using cskt::test::random_tensor;
using cskt::test::weighted_sum;

namespace {

struct OneLayer {
  ParamStore store;
  EncoderLayerParams params;

  OneLayer(std::size_t d, std::size_t heads, std::size_t rank, bool with_adapter, double scale = 1.0,
           std::uint64_t seed = 5) {
    ParamLayout layout;
    declare_attention(layout, "l", d, 2);
    declare_mlp(layout, "l", d, 4 * d, 2);
    if (with_adapter) declare_adapter(layout, "l", d, rank);
    materialize(layout, seed, store);
    params.attention = resolve_attention(store, "l", heads);
    params.mlp = resolve_mlp(store, "l", Activation::QuickGelu);
    if (with_adapter) params.adapter = resolve_adapter(store, "l", scale);
  }
};

Tensor sequence(std::size_t len, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  return random_tensor({len, d}, rng);
}

}  // namespace

TEST(Mhsa, SingleTokenIsFinite) {
  OneLayer m(8, 2, 2, false);
  Graph g;
  Var y = mhsa_block(g.constant(sequence(1, 8, 1)), m.params.attention, m.store, AttentionMask::causal(1));
  EXPECT_EQ(y.shape(), (Shape{1, 8}));
  for (double v : y.value().data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Mhsa, ZeroValueProjectionIsResidualOnly) {
  OneLayer m(8, 2, 2, false);
  Tensor& w = m.store["l.attn.in_proj.weight"];  // [d, 3d]: q | k | v columns
  for (std::size_t r = 0; r < 8; ++r) {
    for (std::size_t c = 16; c < 24; ++c) w.at(r, c) = 0.0;
  }
  Graph g;
  const Tensor x = sequence(5, 8, 2);
  Var y = mhsa_block(g.constant(x), m.params.attention, m.store, AttentionMask::full(5));
  EXPECT_EQ(y.value().values(), x.values());
}

TEST(Mhsa, CausalRowZeroIgnoresLaterTokens) {
  OneLayer m(8, 2, 2, false);
  Tensor x = sequence(3, 8, 3);
  auto row0 = [&](const Tensor& in) {
    Graph g(false);
    const Tensor& y = mhsa_block(g.constant(in), m.params.attention, m.store, AttentionMask::causal(3)).value();
    return std::vector<double>(y.data().begin(), y.data().begin() + 8);
  };
  const auto before = row0(x);
  for (std::size_t i = 8; i < 24; ++i) x[i] += 0.37 * static_cast<double>(i);
  EXPECT_EQ(row0(x), before);
}

TEST(Mhsa, MaskShapeMismatch) {
  OneLayer m(8, 2, 2, false);
  Graph g;
  EXPECT_EQ(error_kind([&] {
              mhsa_block(g.constant(sequence(4, 8, 1)), m.params.attention, m.store, AttentionMask::causal(3));
            }),
            ErrorKind::Dimension);
}

TEST(Adapter, ZeroUpProjectionIsBitExactIdentity) {
  OneLayer m(8, 2, 3, true, 4.0);
  Graph g;
  Var x = g.constant(sequence(6, 8, 4));
  const Tensor plain = adapted_mlp_block(x, m.params.mlp, nullptr, m.store).value();
  const Tensor adapted = adapted_mlp_block(x, m.params.mlp, &*m.params.adapter, m.store).value();
  EXPECT_EQ(adapted.values(), plain.values());
}

TEST(Adapter, ZeroScaleIsBitExactIdentity) {
  OneLayer m(8, 2, 3, true, 0.0);
  Rng rng(6);
  for (const char* name : {"l.adapter.up.weight", "l.adapter.up.bias"}) {
    for (double& v : m.store[name].data()) v = rng.normal();
  }
  Graph g;
  Var x = g.constant(sequence(6, 8, 4));
  const Tensor plain = adapted_mlp_block(x, m.params.mlp, nullptr, m.store).value();
  const Tensor adapted = adapted_mlp_block(x, m.params.mlp, &*m.params.adapter, m.store).value();
  EXPECT_EQ(adapted.values(), plain.values());
}

TEST(Adapter, HandEvaluatedTwoDimensionalCase) {
  OneLayer m(2, 1, 1, true, 0.5);
  for (const char* name : {"l.mlp.proj.weight", "l.mlp.proj.bias"}) {
    for (double& v : m.store[name].data()) v = 0.0;  // MLP branch forced to zero
  }
  m.store["l.adapter.down.weight"].values() = {0.0, 1.0};  // W_d = [0, 1]^T
  m.store["l.adapter.down.bias"].values() = {0.0};
  m.store["l.adapter.up.weight"].values() = {2.0, 0.0};  // W_u = [2, 0]
  m.store["l.adapter.up.bias"].values() = {0.0, 0.0};
  Graph g;
  Var x = g.constant(Tensor(Shape{1, 2}, std::vector<double>{1.0, 3.0}));
  const Tensor y = adapted_mlp_block(x, m.params.mlp, &*m.params.adapter, m.store).value();
  // LN([1,3]) = [-1,1] up to the 1e-5 epsilon; ReLU(1) * 2 * 0.5 adds 1 to the first slot.
  EXPECT_NEAR(y[0], 2.0, 1e-5);
  EXPECT_EQ(y[1], 3.0);
  EXPECT_NEAR(y[0], 1.0 + 1.0 / std::sqrt(1.0 + kLayerNormEps), 1e-15);
}

TEST(EncoderLayer, DatOffEqualsDatOnAtInit) {
  OneLayer with(8, 2, 3, true, 4.0, 9);
  OneLayer without(8, 2, 3, false, 4.0, 9);
  Graph g;
  Var x = g.constant(sequence(5, 8, 7));
  const Tensor a = encoder_layer(x, with.params, with.store, AttentionMask::causal(5)).value();
  const Tensor b = encoder_layer(x, without.params, without.store, AttentionMask::causal(5)).value();
  EXPECT_EQ(a.values(), b.values());
}

TEST(EncoderLayer, StackPreservesLengthForBatches) {
  OneLayer m(8, 2, 3, true);
  Graph g;
  Rng rng(3);
  Var x = g.constant(random_tensor({3, 5, 8}, rng));
  for (int i = 0; i < 3; ++i) x = encoder_layer(x, m.params, m.store, AttentionMask::full(5));
  EXPECT_EQ(x.shape(), (Shape{3, 5, 8}));
}

TEST(EncoderLayer, FullLayerGradientMatchesFiniteDifferences) {
  OneLayer m(8, 2, 3, true, 0.7);
  Rng rng(12);
  for (const char* name : {"l.adapter.up.weight", "l.adapter.up.bias"}) {
    for (double& v : m.store[name].data()) v = rng.normal(0.0, 0.3);
  }
  Tensor x = sequence(4, 8, 13);
  std::vector<Tensor*> targets{&x};
  for (auto& e : m.store) targets.push_back(&e.tensor);
  auto loss = [&](Graph& g) {
    Var in = g.parameter(x);
    return weighted_sum(encoder_layer(in, m.params, m.store, AttentionMask::causal(4)));
  };
  const auto r = check_bound_gradients(targets, loss, 3e-5, 1e-7);
  EXPECT_GT(r.coordinates, 900u);
  EXPECT_LT(r.max_rel_error, 1e-4);
}
