#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cskt/error.hpp"
#include "cskt/graph.hpp"
#include "cskt/tensor.hpp"

namespace cskt {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

inline std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), ErrorKind::Dimension,
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
}

// Product of dims before `axis`, the dim itself, and product after.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <class Fwd, class Deriv>
Var unary(const char* name, Var a, Fwd fwd, Deriv deriv) {
  Graph& g = a.graph();
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = fwd(x[i]);
  return g.record(name, std::move(out), {a}, [a, deriv](Graph& gr, std::size_t self) {
    std::span<double> dx = gr.sink(a);
    if (dx.empty()) return;
    const Tensor& xv = gr.value(a.id());
    const Tensor& yv = gr.value(self);
    std::span<const double> dy = gr.grad(self);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * deriv(xv[i], yv[i]);
  });
}

}  // namespace detail

/// Same data, new shape.
inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value();
  out.clear_grad();
  out.set_requires_grad(false);
  out.reshape(std::move(shape));
  return a.graph().record("reshape", std::move(out), {a}, [a](Graph& g, std::size_t self) {
    std::span<double> dx = g.sink(a);
    if (dx.empty()) return;
    std::span<const double> dy = g.grad(self);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
}

/// a[..., k] x b[k, n] -> [..., n]. Leading dims of `a` are treated as rows.
inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() >= 1 && bv.rank() == 2 && av.shape().back() == bv.dim(0),
          ErrorKind::Dimension,
          "matmul: incompatible shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  const std::size_t k = bv.dim(0);
  const std::size_t n = bv.dim(1);
  const std::size_t m = av.numel() / std::max<std::size_t>(k, 1);
  Shape out_shape = av.shape();
  out_shape.back() = n;
  Tensor out(out_shape);
  if (m > 0 && n > 0) {
    detail::MutMap c(out.data().data(), m, n);
    if (k == 0) {
      c.setZero();
    } else {
      c.noalias() = detail::ConstMap(av.data().data(), m, k) * detail::ConstMap(bv.data().data(), k, n);
    }
  }
  return a.graph().record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Graph& g, std::size_t self) {
    if (m == 0 || n == 0 || k == 0) return;
    detail::ConstMap dc(g.grad(self).data(), m, n);
    if (std::span<double> da = g.sink(a); !da.empty()) {
      detail::MutMap(da.data(), m, k).noalias() += dc * detail::ConstMap(g.value(b.id()).data().data(), k, n).transpose();
    }
    if (std::span<double> db = g.sink(b); !db.empty()) {
      detail::MutMap(db.data(), k, n).noalias() += detail::ConstMap(g.value(a.id()).data().data(), m, k).transpose() * dc;
    }
  });
}

inline Var add(Var a, Var b) {
  detail::check_same_shape("add", a.value(), b.value());
  Tensor out = Tensor(a.shape());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
  return a.graph().record("add", std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
    std::span<const double> dy = g.grad(self);
    for (Var in : {a, b}) {
      std::span<double> dx = g.sink(in);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::check_same_shape("sub", a.value(), b.value());
  Tensor out = Tensor(a.shape());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] - bv[i];
  return a.graph().record("sub", std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
    std::span<const double> dy = g.grad(self);
    std::span<double> da = g.sink(a);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i];
    std::span<double> db = g.sink(b);
    for (std::size_t i = 0; i < db.size(); ++i) db[i] -= dy[i];
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::check_same_shape("mul", a.value(), b.value());
  Tensor out = Tensor(a.shape());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  return a.graph().record("mul", std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
    std::span<const double> dy = g.grad(self);
    const Tensor& av = g.value(a.id());
    const Tensor& bv = g.value(b.id());
    std::span<double> da = g.sink(a);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i] * bv[i];
    std::span<double> db = g.sink(b);
    for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[i] * av[i];
  });
}

/// a + b where b is tiled over the leading dims of a. b's shape must be a
/// suffix of a's shape (bias [d] onto [.., d], positions [L, d] onto [B, L, d]).
inline Var add_tiled(Var a, Var b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  bool suffix = bs.size() <= as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin());
  require(suffix && b.numel() > 0, ErrorKind::Dimension,
          "add_tiled: " + shape_str(bs) + " is not a trailing shape of " + shape_str(as));
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t period = bv.numel();
  Tensor out(as);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i % period];
  return a.graph().record("add_tiled", std::move(out), {a, b}, [a, b, period](Graph& g, std::size_t self) {
    std::span<const double> dy = g.grad(self);
    std::span<double> da = g.sink(a);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i];
    std::span<double> db = g.sink(b);
    if (!db.empty()) {
      for (std::size_t i = 0; i < dy.size(); ++i) db[i % period] += dy[i];
    }
  });
}

inline Var scale(Var a, double factor) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] * factor;
  return a.graph().record("scale", std::move(out), {a}, [a, factor](Graph& g, std::size_t self) {
    std::span<double> dx = g.sink(a);
    std::span<const double> dy = g.grad(self);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * factor;
  });
}

/// max(x, 0); the derivative at exactly 0 is taken as 0.
inline Var relu(Var a) {
  Graph& g = a.graph();
  const Tensor& x = a.value();
  Tensor out(x.shape());
  std::uint64_t mask_hash = 0x84222325CBF29CE4ULL;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const bool on = x[i] > 0.0;
    out[i] = on ? x[i] : 0.0;
    mask_hash = (mask_hash ^ (on ? 0x9Fu : 0x3Du)) * 0x100000001B3ULL;
  }
  g.mix_branch_signature(mask_hash);
  return g.record("relu", std::move(out), {a}, [a](Graph& gr, std::size_t self) {
    std::span<double> dx = gr.sink(a);
    const Tensor& xv = gr.value(a.id());
    std::span<const double> dy = gr.grad(self);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (xv[i] > 0.0) dx[i] += dy[i];
    }
  });
}

/// Exact (erf) GELU.
inline Var gelu(Var a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return detail::unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
      });
}

/// x * sigmoid(1.702 x), the activation used by CLIP's MLPs.
inline Var quick_gelu(Var a) {
  constexpr double k = 1.702;
  return detail::unary(
      "quick_gelu", a, [](double x) { return x / (1.0 + std::exp(-k * x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-k * x));
        return s + k * x * s * (1.0 - s);
      });
}

/// Normalizes each row over the last dim, then applies gamma and beta.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = x.value();
  const std::size_t d = detail::last_dim(xv.shape());
  require(xv.rank() >= 1 && d > 0, ErrorKind::Dimension, "layer_norm: empty feature dimension");
  require(eps > 0.0, ErrorKind::Config, "layer_norm: eps must be positive");
  require(gamma.shape() == Shape{d} && beta.shape() == Shape{d}, ErrorKind::Dimension,
          "layer_norm: gamma/beta must be [" + std::to_string(d) + "], got " +
              shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  const std::size_t rows = xv.numel() / d;
  Tensor out(xv.shape());
  std::vector<double> xhat(xv.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  Graph& g = x.graph();
  if (!g.needs_grad({x, gamma, beta})) {
    return g.record("layer_norm", std::move(out), {x, gamma, beta}, nullptr);
  }
  return g.record("layer_norm", std::move(out), {x, gamma, beta},
                  [x, gamma, beta, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Graph& gr, std::size_t self) {
                    std::span<const double> dy = gr.grad(self);
                    const Tensor& gv = gr.value(gamma.id());
                    std::span<double> dgamma = gr.sink(gamma);
                    std::span<double> dbeta = gr.sink(beta);
                    std::span<double> dx = gr.sink(x);
                    for (std::size_t r = 0; r < rows; ++r) {
                      const double* dyr = dy.data() + r * d;
                      const double* hr = xhat.data() + r * d;
                      if (!dgamma.empty()) {
                        for (std::size_t j = 0; j < d; ++j) dgamma[j] += dyr[j] * hr[j];
                      }
                      if (!dbeta.empty()) {
                        for (std::size_t j = 0; j < d; ++j) dbeta[j] += dyr[j];
                      }
                      if (dx.empty()) continue;
                      double mean_dh = 0.0;
                      double mean_dh_h = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dh = dyr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                      }
                      mean_dh /= static_cast<double>(d);
                      mean_dh_h /= static_cast<double>(d);
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dh = dyr[j] * gv[j];
                        dx[r * d + j] += inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                      }
                    }
                  });
}

/// Softmax over the last dim with max subtraction.
inline Var softmax(Var x) {
  const Tensor& xv = x.value();
  const std::size_t n = detail::last_dim(xv.shape());
  require(n >= 1, ErrorKind::Dimension, "softmax: empty axis");
  const std::size_t rows = xv.numel() / n;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * n;
    double* o = out.data().data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  return x.graph().record("softmax", std::move(out), {x}, [x, n, rows](Graph& g, std::size_t self) {
    std::span<double> dx = g.sink(x);
    const Tensor& y = g.value(self);
    std::span<const double> dy = g.grad(self);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) dx[r * n + j] += y[r * n + j] * (dy[r * n + j] - dot);
    }
  });
}

inline Var log_softmax(Var x) {
  const Tensor& xv = x.value();
  const std::size_t n = detail::last_dim(xv.shape());
  require(n >= 1, ErrorKind::Dimension, "log_softmax: empty axis");
  const std::size_t rows = xv.numel() / n;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * n;
    double* o = out.data().data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(in[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) o[j] = in[j] - lse;
  }
  return x.graph().record("log_softmax", std::move(out), {x}, [x, n, rows](Graph& g, std::size_t self) {
    std::span<double> dx = g.sink(x);
    const Tensor& y = g.value(self);
    std::span<const double> dy = g.grad(self);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += dy[r * n + j];
      for (std::size_t j = 0; j < n; ++j) dx[r * n + j] += dy[r * n + j] - std::exp(y[r * n + j]) * total;
    }
  });
}

inline Var concat(std::span<const Var> parts, std::size_t axis) {
  require(!parts.empty(), ErrorKind::Dimension, "concat: no inputs");
  Shape shape = parts[0].shape();
  require(axis < shape.size(), ErrorKind::Dimension, "concat: axis out of range");
  std::size_t total = 0;
  for (const Var& p : parts) {
    Shape s = p.shape();
    require(s.size() == shape.size(), ErrorKind::Dimension, "concat: rank mismatch");
    total += s[axis];
    s[axis] = shape[axis];
    require(s == shape, ErrorKind::Dimension,
            "concat: shapes " + shape_str(parts[0].shape()) + " and " + shape_str(p.shape()) +
                " disagree off axis " + std::to_string(axis));
  }
  shape[axis] = total;
  const detail::AxisSplit out_split = detail::split_axis(shape, axis);
  Tensor out(shape);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    const std::size_t ext = pv.dim(axis);
    const std::size_t chunk = ext * out_split.inner;
    for (std::size_t o = 0; o < out_split.outer; ++o) {
      std::copy_n(pv.data().data() + o * chunk, chunk,
                  out.data().data() + (o * out_split.extent + offset) * out_split.inner);
    }
    offsets.push_back(offset);
    offset += ext;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  Graph& g = parts[0].graph();
  return g.record("concat", std::move(out), parts,
                  [inputs, offsets, out_split, axis](Graph& gr, std::size_t self) {
                    std::span<const double> dy = gr.grad(self);
                    for (std::size_t p = 0; p < inputs.size(); ++p) {
                      std::span<double> dx = gr.sink(inputs[p]);
                      if (dx.empty()) continue;
                      const std::size_t chunk = gr.value(inputs[p].id()).dim(axis) * out_split.inner;
                      for (std::size_t o = 0; o < out_split.outer; ++o) {
                        const double* src = dy.data() + (o * out_split.extent + offsets[p]) * out_split.inner;
                        double* dst = dx.data() + o * chunk;
                        for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                      }
                    }
                  });
}

inline Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

/// Elements [begin, end) along `axis`.
inline Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  require(axis < s.size() && begin <= end && end <= s[axis], ErrorKind::Dimension,
          "slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
              ") invalid for axis " + std::to_string(axis) + " of " + shape_str(s));
  const detail::AxisSplit in_split = detail::split_axis(s, axis);
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  Tensor out(out_shape);
  const std::size_t chunk = (end - begin) * in_split.inner;
  const Tensor& av = a.value();
  for (std::size_t o = 0; o < in_split.outer; ++o) {
    std::copy_n(av.data().data() + (o * in_split.extent + begin) * in_split.inner, chunk,
                out.data().data() + o * chunk);
  }
  return a.graph().record("slice", std::move(out), {a}, [a, in_split, begin, chunk](Graph& g, std::size_t self) {
    std::span<double> dx = g.sink(a);
    std::span<const double> dy = g.grad(self);
    for (std::size_t o = 0; o < in_split.outer; ++o) {
      double* dst = dx.data() + (o * in_split.extent + begin) * in_split.inner;
      const double* src = dy.data() + o * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

/// Stacks `count` copies of `a` along a new leading axis.
inline Var repeat(Var a, std::size_t count) {
  const Tensor& av = a.value();
  Shape shape{count};
  shape.insert(shape.end(), av.shape().begin(), av.shape().end());
  Tensor out(shape);
  const std::size_t n = av.numel();
  for (std::size_t c = 0; c < count; ++c) std::copy_n(av.data().data(), n, out.data().data() + c * n);
  return a.graph().record("repeat", std::move(out), {a}, [a, n, count](Graph& g, std::size_t self) {
    std::span<double> dx = g.sink(a);
    std::span<const double> dy = g.grad(self);
    for (std::size_t c = 0; c < count; ++c) {
      for (std::size_t i = 0; i < n; ++i) dx[i] += dy[c * n + i];
    }
  });
}

/// Rows of `table` [V, d] selected by `ids`, giving [ids.size(), d].
inline Var embedding_lookup(Var table, std::span<const std::size_t> ids) {
  const Tensor& tv = table.value();
  require(tv.rank() == 2, ErrorKind::Dimension, "embedding_lookup: table must be 2-D");
  const std::size_t vocab = tv.dim(0);
  const std::size_t d = tv.dim(1);
  Tensor out(Shape{ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    require(ids[r] < vocab, ErrorKind::Vocabulary,
            "token id " + std::to_string(ids[r]) + " outside vocabulary of " + std::to_string(vocab));
    std::copy_n(tv.data().data() + ids[r] * d, d, out.data().data() + r * d);
  }
  std::vector<std::size_t> rows(ids.begin(), ids.end());
  return table.graph().record("embedding_lookup", std::move(out), {table},
                              [table, d, rows = std::move(rows)](Graph& g, std::size_t self) {
                                std::span<double> dt = g.sink(table);
                                std::span<const double> dy = g.grad(self);
                                for (std::size_t r = 0; r < rows.size(); ++r) {
                                  for (std::size_t j = 0; j < d; ++j) dt[rows[r] * d + j] += dy[r * d + j];
                                }
                              });
}

inline Var transpose(Var a) {
  const Tensor& av = a.value();
  require(av.rank() == 2, ErrorKind::Dimension, "transpose: expected 2-D, got " + shape_str(av.shape()));
  const std::size_t m = av.dim(0);
  const std::size_t n = av.dim(1);
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  }
  return a.graph().record("transpose", std::move(out), {a}, [a, m, n](Graph& g, std::size_t self) {
    std::span<double> dx = g.sink(a);
    std::span<const double> dy = g.grad(self);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += dy[j * m + i];
    }
  });
}

inline Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return a.graph().record("sum", Tensor::scalar(total), {a}, [a](Graph& g, std::size_t self) {
    std::span<double> dx = g.sink(a);
    const double dy = g.grad(self)[0];
    for (double& v : dx) v += dy;
  });
}

inline Var mean(Var a) {
  const std::size_t n = a.numel();
  require(n > 0, ErrorKind::Dimension, "mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

/// x[B, L, d] -> [B, d], picking row positions[b] from sequence b.
inline Var gather_rows(Var x, std::span<const std::size_t> positions) {
  const Tensor& xv = x.value();
  require(xv.rank() == 3 && positions.size() == xv.dim(0), ErrorKind::Dimension,
          "gather_rows: need [B, L, d] and B positions, got " + shape_str(xv.shape()));
  const std::size_t len = xv.dim(1);
  const std::size_t d = xv.dim(2);
  Tensor out(Shape{positions.size(), d});
  for (std::size_t b = 0; b < positions.size(); ++b) {
    require(positions[b] < len, ErrorKind::Input, "gather_rows: position out of range");
    std::copy_n(xv.data().data() + (b * len + positions[b]) * d, d, out.data().data() + b * d);
  }
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  return x.graph().record("gather_rows", std::move(out), {x}, [x, len, d, pos = std::move(pos)](Graph& g, std::size_t self) {
    std::span<double> dx = g.sink(x);
    std::span<const double> dy = g.grad(self);
    for (std::size_t b = 0; b < pos.size(); ++b) {
      for (std::size_t j = 0; j < d; ++j) dx[(b * len + pos[b]) * d + j] += dy[b * d + j];
    }
  });
}

/// Divides every row (last dim) by its Euclidean norm.
inline Var l2_normalize(Var x) {
  const Tensor& xv = x.value();
  const std::size_t d = detail::last_dim(xv.shape());
  require(d > 0, ErrorKind::Dimension, "l2_normalize: empty feature dimension");
  const std::size_t rows = xv.numel() / d;
  Tensor out(xv.shape());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += xv[r * d + j] * xv[r * d + j];
    const double nrm = std::sqrt(ss);
    require(nrm != 0.0, ErrorKind::Numeric, "l2_normalize: zero-norm row");
    norms[r] = nrm;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / nrm;
  }
  return x.graph().record("l2_normalize", std::move(out), {x},
                          [x, d, rows, norms = std::move(norms)](Graph& g, std::size_t self) {
                            std::span<double> dx = g.sink(x);
                            const Tensor& y = g.value(self);
                            std::span<const double> dy = g.grad(self);
                            for (std::size_t r = 0; r < rows; ++r) {
                              double dot = 0.0;
                              for (std::size_t j = 0; j < d; ++j) dot += y[r * d + j] * dy[r * d + j];
                              for (std::size_t j = 0; j < d; ++j) {
                                dx[r * d + j] += (dy[r * d + j] - y[r * d + j] * dot) / norms[r];
                              }
                            }
                          });
}

/// L x L boolean attention mask; allowed(i, j) means query i may attend to key j.
class AttentionMask {
 public:
  static AttentionMask causal(std::size_t len) {
    AttentionMask m(len);
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = 0; j < len; ++j) m.allowed_[i * len + j] = j <= i;
    }
    return m;
  }
  static AttentionMask full(std::size_t len) {
    AttentionMask m(len);
    std::fill(m.allowed_.begin(), m.allowed_.end(), 1);
    return m;
  }

  std::size_t length() const noexcept { return len_; }
  bool allowed(std::size_t i, std::size_t j) const { return allowed_[i * len_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool on) { allowed_[i * len_ + j] = on ? 1 : 0; }

 private:
  explicit AttentionMask(std::size_t len) : len_(len), allowed_(len * len, 0) {}
  std::size_t len_;
  std::vector<std::uint8_t> allowed_;
};

/// Multi-head scaled dot-product attention over packed projections.
///
/// qkv is [B, L, 3d] laid out as [q | k | v]; head h uses columns
/// [h*dh, (h+1)*dh) of each part. Masked keys get probability exactly 0 and
/// are skipped, so a query's output never reads disallowed positions.
/// Every query row must allow at least one key.
inline Var attention(Var qkv, std::size_t heads, const AttentionMask& mask) {
  const Tensor& in = qkv.value();
  require(in.rank() == 3 && in.dim(2) % 3 == 0, ErrorKind::Dimension,
          "attention: expected [B, L, 3d], got " + shape_str(in.shape()));
  const std::size_t batch = in.dim(0);
  const std::size_t len = in.dim(1);
  const std::size_t width = in.dim(2) / 3;
  require(heads > 0 && width % heads == 0, ErrorKind::Dimension,
          "attention: width " + std::to_string(width) + " not divisible by " + std::to_string(heads) + " heads");
  require(mask.length() == len, ErrorKind::Dimension,
          "attention: mask is " + std::to_string(mask.length()) + "x" + std::to_string(mask.length()) +
              " but sequence length is " + std::to_string(len));
  const std::size_t dh = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t stride = 3 * width;

  std::vector<double> probs(batch * heads * len * len, 0.0);
  Tensor out(Shape{batch, len, width});
  const double* base = in.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* seq = base + b * len * stride;
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs.data() + (b * heads + h) * len * len;
      for (std::size_t i = 0; i < len; ++i) {
        const double* q = seq + i * stride + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < len; ++j) {
          if (!mask.allowed(i, j)) continue;
          any = true;
          const double* k = seq + j * stride + width + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += q[c] * k[c];
          s *= inv_sqrt;
          p[i * len + j] = s;
          mx = std::max(mx, s);
        }
        require(any, ErrorKind::Input,
                "attention: query row " + std::to_string(i) + " has no allowed keys");
        double total = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          if (!mask.allowed(i, j)) continue;
          p[i * len + j] = std::exp(p[i * len + j] - mx);
          total += p[i * len + j];
        }
        double* o = out.data().data() + (b * len + i) * width + h * dh;
        for (std::size_t j = 0; j < len; ++j) {
          if (!mask.allowed(i, j)) continue;
          p[i * len + j] /= total;
          const double* v = seq + j * stride + 2 * width + h * dh;
          for (std::size_t c = 0; c < dh; ++c) o[c] += p[i * len + j] * v[c];
        }
      }
    }
  }
  Graph& g = qkv.graph();
  if (!g.needs_grad({qkv})) return g.record("attention", std::move(out), {qkv}, nullptr);
  return g.record(
      "attention", std::move(out), {qkv},
      [qkv, batch, len, width, heads, dh, inv_sqrt, stride, mask, probs = std::move(probs)](
          Graph& gr, std::size_t self) {
        std::span<double> dqkv = gr.sink(qkv);
        std::span<const double> dy = gr.grad(self);
        const double* base = gr.value(qkv.id()).data().data();
        std::vector<double> dscore(len);
        for (std::size_t b = 0; b < batch; ++b) {
          const double* seq = base + b * len * stride;
          double* dseq = dqkv.data() + b * len * stride;
          for (std::size_t h = 0; h < heads; ++h) {
            const double* p = probs.data() + (b * heads + h) * len * len;
            for (std::size_t i = 0; i < len; ++i) {
              const double* dout = dy.data() + (b * len + i) * width + h * dh;
              // dP_ij = dO_i . V_j, then softmax backward per row.
              double dot = 0.0;
              for (std::size_t j = 0; j < len; ++j) {
                dscore[j] = 0.0;
                if (!mask.allowed(i, j)) continue;
                const double* v = seq + j * stride + 2 * width + h * dh;
                double dp = 0.0;
                for (std::size_t c = 0; c < dh; ++c) dp += dout[c] * v[c];
                dscore[j] = dp;
                dot += dp * p[i * len + j];
              }
              const double* q = seq + i * stride + h * dh;
              double* dq = dseq + i * stride + h * dh;
              for (std::size_t j = 0; j < len; ++j) {
                if (!mask.allowed(i, j)) continue;
                const double pij = p[i * len + j];
                const double ds = pij * (dscore[j] - dot) * inv_sqrt;
                const double* k = seq + j * stride + width + h * dh;
                double* dk = dseq + j * stride + width + h * dh;
                double* dv = dseq + j * stride + 2 * width + h * dh;
                for (std::size_t c = 0; c < dh; ++c) {
                  dq[c] += ds * k[c];
                  dk[c] += ds * q[c];
                  dv[c] += pij * dout[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace cskt
