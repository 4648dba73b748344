#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "cskt/error.hpp"
#include "cskt/param_store.hpp"

namespace cskt {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment buffers, indexed like the ParamStore they were built for. Frozen
/// entries keep empty buffers.
class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(AdamConfig config) : config_(config) {}

  const AdamConfig& config() const noexcept { return config_; }
  void set_lr(double lr) noexcept { config_.lr = lr; }
  std::uint64_t step() const noexcept { return step_; }

  const std::vector<double>& first_moment(ParamRef ref) const { return m_.at(ref.index); }
  const std::vector<double>& second_moment(ParamRef ref) const { return v_.at(ref.index); }

  /// One bias-corrected Adam update of every trainable entry. Frozen entries
  /// are not read or written. Throws an integrity error, before touching any
  /// value, if a trainable entry has no gradient.
  void apply(ParamStore& store) {
    for (const auto& e : store) {
      require(e.frozen || e.tensor.has_grad(), ErrorKind::Integrity,
              "trainable parameter '" + e.name + "' has no gradient");
    }
    if (m_.size() < store.size()) {
      m_.resize(store.size());
      v_.resize(store.size());
    }
    ++step_;
    const double t = static_cast<double>(step_);
    const double c1 = 1.0 - std::pow(config_.beta1, t);
    const double c2 = 1.0 - std::pow(config_.beta2, t);
    std::size_t index = 0;
    for (auto& e : store) {
      const std::size_t i = index++;
      if (e.frozen) continue;
      auto& m = m_[i];
      auto& v = v_[i];
      if (m.size() != e.tensor.numel()) {
        m.assign(e.tensor.numel(), 0.0);
        v.assign(e.tensor.numel(), 0.0);
      }
      const auto grad = e.tensor.grad();
      auto values = e.tensor.data();
      for (std::size_t k = 0; k < values.size(); ++k) {
        m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * grad[k];
        v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * grad[k] * grad[k];
        const double mhat = m[k] / c1;
        const double vhat = v[k] / c2;
        values[k] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
      }
    }
  }

 private:
  AdamConfig config_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

inline void adam_step(ParamStore& store, AdamState& state) { state.apply(store); }

}  // namespace cskt
