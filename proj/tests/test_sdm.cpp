#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cskt/sdm_loss.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace cskt;
using cskt::oracle::scalar_sdm;
using cskt::test::check_gradients;
using cskt::test::error_kind;
using cskt::test::random_tensor;

namespace {

double loss_value(const Tensor& sim, const Tensor& y, const LossConfig& cfg, bool total = true) {
  Graph g(false);
  Var s = g.constant(sim);
  return (total ? sdm_total(s, y, cfg) : sdm_directional(s, y, cfg)).value()[0];
}

Tensor random_sim(std::size_t n, Rng& rng) {
  Tensor t = random_tensor({n, n}, rng, 0.3);
  for (double& v : t.data()) v = std::clamp(v, -1.0, 1.0);
  return t;
}

}  // namespace

TEST(Sdm, TwoByTwoMatchesScalarFormula) {
  const std::vector<std::size_t> ids{0, 1};
  const Tensor sim(Shape{2, 2}, std::vector<double>{1.0, 0.0, 0.0, 1.0});
  const LossConfig cfg{1.0, 1e-8};
  const double got = loss_value(sim, match_matrix(ids, ids), cfg, false);
  EXPECT_NEAR(got, scalar_sdm({{1.0, 0.0}, {0.0, 1.0}}, ids, 1.0, 1e-8), 1e-12);
  EXPECT_NEAR(got, 4.371880945682644617979, 1e-10);
}

TEST(Sdm, RandomBatchesMatchScalarFormula) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(8);
    std::vector<std::size_t> ids(n);
    for (auto& id : ids) id = rng.below(3);
    const Tensor sim = random_sim(n, rng);
    std::vector<std::vector<double>> rows(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) rows[i][j] = sim.at(i, j);
    }
    const LossConfig cfg{0.05, 1e-8};
    const double expected = scalar_sdm(rows, ids, cfg.tau, cfg.eps);
    EXPECT_NEAR(loss_value(sim, match_matrix(ids, ids), cfg, false), expected, 1e-10 * std::max(1.0, expected));
  }
}

TEST(Sdm, DegenerateBatchesGiveZero) {
  const std::vector<std::size_t> one{0};
  EXPECT_NEAR(loss_value(Tensor(Shape{1, 1}, std::vector<double>{0.3}), match_matrix(one, one), LossConfig{}), 0.0,
              1e-7);
  const std::vector<std::size_t> same{4, 4};
  EXPECT_NEAR(loss_value(Tensor(Shape{2, 2}, 0.25), match_matrix(same, same), LossConfig{}), 0.0, 1e-7);
}

TEST(Sdm, SymmetricInputIsTwiceDirectional) {
  Rng rng(9);
  Tensor sim = random_sim(5, rng);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < i; ++j) sim.at(i, j) = sim.at(j, i);
  }
  const std::vector<std::size_t> ids{0, 1, 0, 2, 1};
  const Tensor y = match_matrix(ids, ids);
  EXPECT_EQ(loss_value(sim, y, LossConfig{}), 2.0 * loss_value(sim, y, LossConfig{}, false));
}

TEST(Sdm, PermutationInvariance) {
  Rng rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 6;
    const Tensor sim = random_sim(n, rng);
    std::vector<std::size_t> ids(n);
    for (auto& id : ids) id = rng.below(3);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span<std::size_t>(perm));
    Tensor psim(Shape{n, n});
    std::vector<std::size_t> pids(n);
    for (std::size_t i = 0; i < n; ++i) {
      pids[i] = ids[perm[i]];
      for (std::size_t j = 0; j < n; ++j) psim.at(i, j) = sim.at(perm[i], perm[j]);
    }
    EXPECT_NEAR(loss_value(sim, match_matrix(ids, ids), LossConfig{}),
                loss_value(psim, match_matrix(pids, pids), LossConfig{}), 1e-12);
  }
}

TEST(Sdm, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  const std::vector<std::size_t> ids{0, 1, 0, 1};
  const Tensor y = match_matrix(ids, ids);
  for (double tau : {0.02, 0.3}) {
    std::vector<Tensor> inputs{random_sim(4, rng)};
    const auto r = check_gradients(inputs, [&](Graph&, std::span<const Var> v) {
      return sdm_total(v[0], y, LossConfig{tau, 1e-8});
    }, 1e-2 * tau, 1e-6);
    EXPECT_EQ(r.coordinates, 16u);
    EXPECT_LT(r.max_rel_error, 1e-5) << "tau " << tau;
  }
}

TEST(Sdm, RaisingMatchedPairNeverIncreasesLoss) {
  Rng rng(12);
  const std::vector<std::size_t> ids{0, 1, 2, 3, 4};
  const Tensor y = match_matrix(ids, ids);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor sim = random_sim(5, rng);
    sim.set_requires_grad(true);
    Graph g;
    g.backward(sdm_total(g.parameter(sim), y, LossConfig{0.1, 1e-8}));
    for (std::size_t i = 0; i < 5; ++i) EXPECT_LE(sim.grad()[i * 5 + i], 0.0);
  }
}

TEST(Sdm, NonNegativeWithoutEps) {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<std::size_t> ids{0, 0, 1, 2};
    EXPECT_GE(loss_value(random_sim(4, rng), match_matrix(ids, ids), LossConfig{0.05, 1e-300}), -1e-12);
  }
}

TEST(Sdm, InvalidInputs) {
  const std::vector<std::size_t> ids{0, 1};
  const Tensor y = match_matrix(ids, ids);
  const Tensor sim(Shape{2, 2}, 0.1);
  EXPECT_EQ(error_kind([&] { loss_value(sim, y, LossConfig{0.0, 1e-8}); }), ErrorKind::Config);
  EXPECT_EQ(error_kind([&] { loss_value(sim, y, LossConfig{-1.0, 1e-8}); }), ErrorKind::Config);
  EXPECT_EQ(error_kind([&] { loss_value(sim, y, LossConfig{0.02, 0.0}); }), ErrorKind::Config);
  EXPECT_EQ(error_kind([&] { loss_value(Tensor(Shape{2, 3}), y, LossConfig{}); }), ErrorKind::Dimension);
  const std::vector<std::size_t> three{0, 1, 2};
  EXPECT_EQ(error_kind([&] { loss_value(sim, match_matrix(three, three), LossConfig{}); }), ErrorKind::Dimension);
}

TEST(Sdm, MatchMatrix) {
  const std::vector<std::size_t> ids{3, 1, 3};
  const Tensor y = match_matrix(ids, ids);
  EXPECT_EQ(y.values(), (std::vector<double>{1, 0, 1, 0, 1, 0, 1, 0, 1}));
}
