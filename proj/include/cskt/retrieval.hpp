#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cskt/error.hpp"
#include "cskt/tensor.hpp"

namespace cskt {

/// One query's gallery ranking: descending similarity, ties by ascending index.
struct RankedQuery {
  std::vector<std::size_t> order;
  std::vector<double> scores;   // in rank order
  std::vector<bool> relevant;   // in rank order
};

using RetrievalResult = std::vector<RankedQuery>;

struct MetricsReport {
  std::map<std::size_t, double> rank_at;  // k -> fraction of queries with a hit in the top k
  double mean_ap = 0.0;
  std::size_t query_count = 0;
  std::size_t queries_without_relevant = 0;  // excluded from mAP

  double rank(std::size_t k) const {
    auto it = rank_at.find(k);
    require(it != rank_at.end(), ErrorKind::Input, "rank@" + std::to_string(k) + " was not computed");
    return it->second;
  }
  double rank1() const { return rank(1); }
  double rank5() const { return rank(5); }
  double rank10() const { return rank(10); }

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline RankedQuery rank_gallery(std::span<const double> sim_row, std::span<const std::size_t> gallery_ids,
                                std::size_t query_id) {
  require(!sim_row.empty(), ErrorKind::Input, "rank_gallery: empty gallery");
  require(sim_row.size() == gallery_ids.size(), ErrorKind::Dimension,
          "rank_gallery: " + std::to_string(sim_row.size()) + " scores for " +
              std::to_string(gallery_ids.size()) + " gallery items");
  RankedQuery q;
  q.order.resize(sim_row.size());
  std::iota(q.order.begin(), q.order.end(), std::size_t{0});
  std::stable_sort(q.order.begin(), q.order.end(),
                   [&](std::size_t a, std::size_t b) { return sim_row[a] > sim_row[b]; });
  for (std::size_t idx : q.order) {
    q.scores.push_back(sim_row[idx]);
    q.relevant.push_back(gallery_ids[idx] == query_id);
  }
  return q;
}

/// Ranks every row of a [queries x gallery] similarity matrix.
inline RetrievalResult rank_all(const Tensor& sim, std::span<const std::size_t> query_ids,
                                std::span<const std::size_t> gallery_ids) {
  require(sim.rank() == 2 && sim.dim(0) == query_ids.size() && sim.dim(1) == gallery_ids.size(),
          ErrorKind::Dimension, "rank_all: similarity shape " + shape_str(sim.shape()) + " vs ids");
  RetrievalResult out;
  out.reserve(query_ids.size());
  const std::size_t g = gallery_ids.size();
  for (std::size_t q = 0; q < query_ids.size(); ++q) {
    out.push_back(rank_gallery(sim.data().subspan(q * g, g), gallery_ids, query_ids[q]));
  }
  return out;
}

/// AP = mean over relevant ranks r of (relevant within top r) / r.
namespace detail {

// Extended-precision accumulation so the result rounds to double once and
// does not depend on summation order.
inline long double average_precision_ext(const std::vector<bool>& relevant) {
  std::size_t hits = 0;
  long double total = 0.0L;
  for (std::size_t r = 0; r < relevant.size(); ++r) {
    if (!relevant[r]) continue;
    ++hits;
    total += static_cast<long double>(hits) / static_cast<long double>(r + 1);
  }
  return hits == 0 ? 0.0L : total / static_cast<long double>(hits);
}

}  // namespace detail

inline double average_precision(const std::vector<bool>& relevant) {
  return static_cast<double>(detail::average_precision_ext(relevant));
}

inline MetricsReport compute_metrics(const RetrievalResult& results, std::span<const std::size_t> ks) {
  require(!results.empty(), ErrorKind::Input, "compute_metrics: no queries");
  MetricsReport report;
  report.query_count = results.size();
  for (std::size_t k : ks) {
    require(k > 0, ErrorKind::Input, "compute_metrics: k must be positive");
    std::size_t hits = 0;
    for (const RankedQuery& q : results) {
      const std::size_t top = std::min(k, q.relevant.size());
      if (std::find(q.relevant.begin(), q.relevant.begin() + static_cast<std::ptrdiff_t>(top), true) !=
          q.relevant.begin() + static_cast<std::ptrdiff_t>(top)) {
        ++hits;
      }
    }
    report.rank_at[k] = static_cast<double>(hits) / static_cast<double>(results.size());
  }
  long double ap_sum = 0.0L;
  std::size_t counted = 0;
  for (const RankedQuery& q : results) {
    if (std::find(q.relevant.begin(), q.relevant.end(), true) == q.relevant.end()) {
      ++report.queries_without_relevant;
      continue;
    }
    ap_sum += detail::average_precision_ext(q.relevant);
    ++counted;
  }
  report.mean_ap = counted == 0 ? 0.0 : static_cast<double>(ap_sum / static_cast<long double>(counted));
  return report;
}

inline MetricsReport compute_metrics(const RetrievalResult& results) {
  static constexpr std::size_t ks[] = {1, 5, 10};
  return compute_metrics(results, ks);
}

/// One JSON object per line: {"query_index": i, "top_k": [[gallery_index, similarity, relevant], ...]}.
inline void write_topk_jsonl(std::ostream& out, const RetrievalResult& results, std::size_t k) {
  for (std::size_t q = 0; q < results.size(); ++q) {
    nlohmann::json row;
    row["query_index"] = q;
    row["top_k"] = nlohmann::json::array();
    const RankedQuery& r = results[q];
    for (std::size_t i = 0; i < std::min(k, r.order.size()); ++i) {
      row["top_k"].push_back(nlohmann::json::array({r.order[i], r.scores[i], static_cast<bool>(r.relevant[i])}));
    }
    out << row.dump() << '\n';
  }
}

}  // namespace cskt
