#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "cskt/graph.hpp"
#include "cskt/ops.hpp"
#include "cskt/rng.hpp"
#include "cskt/tensor.hpp"

namespace cskt::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double std = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, std);
  return t;
}

/// Scalar probe of a tensor-valued expression: sum(out * w) for fixed random w.
inline Var weighted_sum(Var out, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor w = random_tensor(out.shape(), rng);
  return sum(mul(out, out.graph().constant(std::move(w))));
}

/// Central difference with one Richardson step: (4 D(h/2) - D(h)) / 3.
template <class D>
double richardson(D&& central, double h) {
  return (4.0 * central(h / 2.0) - central(h)) / 3.0;
}

using LossFn = std::function<Var(Graph&, std::span<const Var>)>;

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

/// Extrapolated central differences over every coordinate of every input. Inputs have
/// requires_grad switched on for the analytic pass.
inline GradCheck check_gradients(std::vector<Tensor>& inputs, const LossFn& f, double h = 1e-5,
                                 double floor = 1e-8) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.clear_grad();
  }
  auto eval = [&](bool grad) {
    Graph g(grad);
    std::vector<Var> vars;
    for (auto& t : inputs) vars.push_back(g.parameter(t));
    Var loss = f(g, vars);
    if (grad) g.backward(loss);
    return loss.value()[0];
  };
  eval(true);
  GradCheck out;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double v = t[i];
      const double numeric = richardson([&](double step) {
        t[i] = v + step;
        const double plus = eval(false);
        t[i] = v - step;
        const double minus = eval(false);
        t[i] = v;
        return (plus - minus) / (2.0 * step);
      }, h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic[i] - numeric) / denom);
      ++out.coordinates;
    }
  }
  return out;
}

/// Extrapolated central differences over every coordinate of `targets`, which `f` binds
/// itself (e.g. store tensors). requires_grad is forced on for the analytic
/// pass and restored afterwards.
inline GradCheck check_bound_gradients(const std::vector<Tensor*>& targets, const std::function<Var(Graph&)>& f,
                                       double h = 1e-5, double floor = 1e-8) {
  std::vector<bool> saved;
  for (Tensor* t : targets) {
    saved.push_back(t->requires_grad());
    t->set_requires_grad(true);
    t->clear_grad();
  }
  {
    Graph g;
    g.backward(f(g));
  }
  auto eval = [&] {
    Graph g(false);
    return f(g).value()[0];
  };
  GradCheck out;
  for (Tensor* t : targets) {
    const std::vector<double> analytic(t->grad().begin(), t->grad().end());
    for (std::size_t i = 0; i < t->numel(); ++i) {
      const double v = (*t)[i];
      const double numeric = richardson([&](double step) {
        (*t)[i] = v + step;
        const double plus = eval();
        (*t)[i] = v - step;
        const double minus = eval();
        (*t)[i] = v;
        return (plus - minus) / (2.0 * step);
      }, h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic[i] - numeric) / denom);
      ++out.coordinates;
    }
  }
  for (std::size_t k = 0; k < targets.size(); ++k) {
    targets[k]->set_requires_grad(saved[k]);
    targets[k]->clear_grad();
  }
  return out;
}

/// Random multiples of 1/4 in [-2, 2]: sums and products of a few of these
/// are exact in binary64, so results do not depend on evaluation order.
inline Tensor dyadic_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = static_cast<double>(static_cast<int>(rng.below(17)) - 8) / 4.0;
  return t;
}

template <class F>
ErrorKind error_kind(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return static_cast<ErrorKind>(-1);
}

}  // namespace cskt::test
