#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "cskt/error.hpp"
#include "cskt/ops.hpp"
#include "cskt/tensor.hpp"

namespace cskt {

struct LossConfig {
  double tau = 0.02;  // similarity temperature
  double eps = 1e-8;  // guards log(q) where q_ij = 0

  void validate() const {
    require(tau > 0.0, ErrorKind::Config, "loss tau must be positive, got " + std::to_string(tau));
    require(eps > 0.0, ErrorKind::Config, "loss eps must be positive, got " + std::to_string(eps));
  }
};

/// y_ij = 1 when row identity i equals column identity j.
inline Tensor match_matrix(std::span<const std::size_t> row_ids, std::span<const std::size_t> col_ids) {
  Tensor y(Shape{row_ids.size(), col_ids.size()});
  for (std::size_t i = 0; i < row_ids.size(); ++i) {
    for (std::size_t j = 0; j < col_ids.size(); ++j) y[i * col_ids.size() + j] = row_ids[i] == col_ids[j] ? 1.0 : 0.0;
  }
  return y;
}

inline Tensor transpose(const Tensor& t) {
  require(t.rank() == 2, ErrorKind::Dimension, "transpose: expected 2-D");
  Tensor out(Shape{t.dim(1), t.dim(0)});
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    for (std::size_t j = 0; j < t.dim(1); ++j) out.at(j, i) = t.at(i, j);
  }
  return out;
}

/// Mean over rows of KL(p_i || q_i), with p_i = softmax(sim_i / tau) and
/// q_i = y_i / sum(y_i). log(q + eps) stands in for log q.
inline Var sdm_directional(Var sim, const Tensor& y, const LossConfig& cfg) {
  cfg.validate();
  const Shape& s = sim.shape();
  require(s.size() == 2 && s[0] == s[1] && s[0] > 0, ErrorKind::Dimension,
          "sdm: similarity must be square, got " + shape_str(s));
  require(y.shape() == s, ErrorKind::Dimension,
          "sdm: labels " + shape_str(y.shape()) + " do not match similarities " + shape_str(s));
  const std::size_t n = s[0];
  Tensor log_q(s);
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) row += y.at(i, j);
    require(row > 0.0, ErrorKind::Input, "sdm: label row " + std::to_string(i) + " has no match");
    for (std::size_t j = 0; j < n; ++j) log_q.at(i, j) = std::log(y.at(i, j) / row + cfg.eps);
  }
  Graph& g = sim.graph();
  Var logits = scale(sim, 1.0 / cfg.tau);
  Var p = softmax(logits);
  Var kl = mul(p, sub(log_softmax(logits), g.constant(std::move(log_q))));
  return scale(sum(kl), 1.0 / static_cast<double>(n));
}

/// Image-to-text plus text-to-image: sim rows are images, columns texts.
inline Var sdm_total(Var sim, const Tensor& y, const LossConfig& cfg) {
  return add(sdm_directional(sim, y, cfg), sdm_directional(transpose(sim), transpose(y), cfg));
}

}  // namespace cskt
