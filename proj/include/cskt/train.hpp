#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "cskt/adam.hpp"
#include "cskt/checkpoint.hpp"
#include "cskt/data.hpp"
#include "cskt/model.hpp"
#include "cskt/retrieval.hpp"
#include "cskt/run_config.hpp"
#include "cskt/sdm_loss.hpp"

namespace cskt {

/// Shortest round-trippable text for a double, so logs fingerprint a run exactly.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<MetricsReport> eval;
  double seconds = 0.0;
};

class MetricsLog {
 public:
  void append(EpochRecord r) {
    require(rows_.empty() || r.epoch > rows_.back().epoch, ErrorKind::Integrity,
            "metrics log epochs must increase");
    rows_.push_back(std::move(r));
  }

  const std::vector<EpochRecord>& rows() const noexcept { return rows_; }
  bool empty() const noexcept { return rows_.empty(); }

  /// Deterministic part of the log. Unevaluated epochs leave metric cells empty.
  void write_csv(std::ostream& out) const {
    out << "epoch,train_loss,rank1,rank5,rank10,mAP\n";
    for (const auto& r : rows_) {
      out << r.epoch << ',' << format_double(r.train_loss);
      if (r.eval) {
        out << ',' << format_double(r.eval->rank1()) << ',' << format_double(r.eval->rank5()) << ','
            << format_double(r.eval->rank10()) << ',' << format_double(r.eval->mean_ap);
      } else {
        out << ",,,,";
      }
      out << '\n';
    }
  }

  void write_timing_csv(std::ostream& out) const {
    out << "epoch,wall_seconds\n";
    for (const auto& r : rows_) out << r.epoch << ',' << format_double(r.seconds) << '\n';
  }

 private:
  std::vector<EpochRecord> rows_;
};

enum class QueryMode { TextToImage, ImageToText };

struct Evaluation {
  RetrievalResult ranking;
  MetricsReport metrics;
};

/// A model bound to its tokenizer and generated dataset, with rendered
/// images cached.
class Experiment {
 public:
  explicit Experiment(RunConfig config)
      : config_(prepared(std::move(config))),
        tokenizer_(Tokenizer::standard(config_.model.max_text_length)),
        dataset_(generate_dataset(config_.data)),
        model_(config_.model, tokenizer_.word_ids(kPromptInitPhrase)) {
    images_.reserve(dataset_.images.size());
    for (const auto& r : dataset_.images) images_.push_back(render_image(r, dataset_.config));
  }

  const RunConfig& config() const noexcept { return config_; }
  const Tokenizer& tokenizer() const noexcept { return tokenizer_; }
  const Dataset& dataset() const noexcept { return dataset_; }
  DualEncoder& model() noexcept { return model_; }
  const Tensor& image(std::size_t index) const { return images_.at(index); }

  std::size_t steps_per_epoch() const {
    const std::size_t n = dataset_.image_indices(Split::Train).size();
    return (n + config_.train.batch_size - 1) / config_.train.batch_size;
  }

  std::uint64_t batch_seed(std::size_t epoch, std::size_t step) const {
    return stream_seed(stream_seed(config_.seed, "batches"), epoch, step);
  }

  Batch batch(std::size_t epoch, std::size_t step) const {
    return sample_batch(dataset_, Split::Train, config_.train.batch_size, config_.train.sampler, tokenizer_,
                        batch_seed(epoch, step));
  }

  /// sdm_total over the batch's image-text similarity (rows images).
  Var batch_loss(Graph& g, const Batch& b) {
    std::vector<Tensor> imgs;
    imgs.reserve(b.size());
    for (std::size_t i : b.image_indices) imgs.push_back(images_.at(i));
    BranchEncoding vis = model_.encode_images(g, imgs);
    BranchEncoding txt = model_.encode_text(g, b.tokens);
    return sdm_total(similarity_matrix(vis.global, txt.global), match_matrix(b.identities, b.identities),
                     config_.loss);
  }

  /// Forward, backward and one Adam update. Returns the batch loss.
  double train_step(const Batch& b, AdamState& adam) {
    Graph g;
    Var loss = batch_loss(g, b);
    const double value = loss.value()[0];
    require(std::isfinite(value), ErrorKind::Numeric,
            "non-finite loss " + format_double(value) + " on batch seed " + std::to_string(b.seed));
    model_.params().clear_grads();
    g.backward(loss);
    adam.apply(model_.params());
    return value;
  }

  Evaluation evaluate(Split split, QueryMode mode = QueryMode::TextToImage) {
    std::vector<Tensor> imgs;
    std::vector<std::size_t> image_ids;
    std::vector<TokenSequence> texts;
    std::vector<std::size_t> text_ids;
    for (std::size_t i : dataset_.image_indices(split)) {
      imgs.push_back(images_[i]);
      image_ids.push_back(dataset_.images[i].identity);
      for (const auto& c : dataset_.images[i].captions) {
        texts.push_back(tokenizer_.encode(c));
        text_ids.push_back(dataset_.images[i].identity);
      }
    }
    require(!imgs.empty(), ErrorKind::Input, "split '" + std::string(to_string(split)) + "' is empty");
    const Tensor ti = model_.embed_images(imgs);
    const Tensor tt = model_.embed_texts(texts);
    Evaluation e;
    e.ranking = mode == QueryMode::TextToImage ? rank_all(similarity_matrix(tt, ti), text_ids, image_ids)
                                               : rank_all(similarity_matrix(ti, tt), image_ids, text_ids);
    e.metrics = compute_metrics(e.ranking);
    return e;
  }

  /// Runs every configured epoch. Epochs are numbered from 1; the test split
  /// is evaluated every `eval_every` epochs and after the last one.
  MetricsLog train(std::ostream* progress = nullptr) {
    MetricsLog log;
    const auto& tc = config_.train;
    AdamState adam(AdamConfig{.lr = tc.lr});
    const std::size_t steps = steps_per_epoch();
    const double total_steps = static_cast<double>(tc.epochs * steps);
    std::size_t step_index = 0;
    for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
      const auto start = std::chrono::steady_clock::now();
      double loss_sum = 0.0;
      for (std::size_t s = 0; s < steps; ++s, ++step_index) {
        if (tc.schedule == LrSchedule::Cosine) {
          adam.set_lr(tc.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step_index) / total_steps)));
        }
        loss_sum += train_step(batch(epoch, s), adam);
      }
      EpochRecord row;
      row.epoch = epoch;
      row.train_loss = loss_sum / static_cast<double>(steps);
      if ((tc.eval_every > 0 && epoch % tc.eval_every == 0) || epoch == tc.epochs) {
        row.eval = evaluate(Split::Test).metrics;
      }
      row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (progress) {
        *progress << "epoch " << epoch << '/' << tc.epochs << " loss " << row.train_loss;
        if (row.eval) *progress << " rank1 " << row.eval->rank1() << " mAP " << row.eval->mean_ap;
        *progress << '\n' << std::flush;
      }
      log.append(std::move(row));
    }
    return log;
  }

 private:
  static RunConfig prepared(RunConfig c) {
    c.normalize();
    c.validate();
    return c;
  }

  RunConfig config_;
  Tokenizer tokenizer_;
  Dataset dataset_;
  DualEncoder model_;
  std::vector<Tensor> images_;
};

// ---------------------------------------------------------------------------
// Commands

namespace files {
inline constexpr const char* config = "config.json";
inline constexpr const char* checkpoint = "checkpoint.cskt";
inline constexpr const char* metrics = "metrics.csv";
inline constexpr const char* timing = "timing.csv";
inline constexpr const char* manifest = "manifest.jsonl";
inline constexpr const char* summary = "summary.json";
inline std::string topk(Split s) { return "topk_" + std::string(to_string(s)) + ".jsonl"; }
}  // namespace files

namespace detail {

inline std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::Io, "cannot write " + path.string());
  return out;
}

inline nlohmann::ordered_json metrics_json(const MetricsReport& m) {
  nlohmann::ordered_json j;
  for (const auto& [k, v] : m.rank_at) j["rank" + std::to_string(k)] = v;
  j["mAP"] = m.mean_ap;
  j["queries"] = m.query_count;
  j["queries_without_relevant"] = m.queries_without_relevant;
  return j;
}

}  // namespace detail

struct TrainResult {
  MetricsLog log;
  MetricsReport final_metrics;
  ParamCounts counts;
};

/// Trains one run and writes config.json, manifest.jsonl, checkpoint.cskt,
/// metrics.csv, timing.csv, topk_test.jsonl and summary.json into `out_dir`.
inline TrainResult cmd_train(const RunConfig& config, const std::filesystem::path& out_dir,
                             std::ostream* progress = nullptr) {
  std::filesystem::create_directories(out_dir);
  Experiment ex(config);
  detail::open_output(out_dir / files::config) << to_json(ex.config()).dump(2) << '\n';
  {
    auto out = detail::open_output(out_dir / files::manifest);
    write_manifest(out, ex.dataset());
  }
  TrainResult result;
  result.log = ex.train(progress);
  result.counts = count_params(ex.model().params());
  save_checkpoint(ex.model().params(), out_dir / files::checkpoint);
  {
    auto out = detail::open_output(out_dir / files::metrics);
    result.log.write_csv(out);
  }
  {
    auto out = detail::open_output(out_dir / files::timing);
    result.log.write_timing_csv(out);
  }
  Evaluation final_eval = ex.evaluate(Split::Test);
  {
    auto out = detail::open_output(out_dir / files::topk(Split::Test));
    write_topk_jsonl(out, final_eval.ranking, ex.config().train.top_k);
  }
  result.final_metrics = final_eval.metrics;
  nlohmann::ordered_json summary;
  summary["epochs"] = ex.config().train.epochs;
  summary["trainable_params"] = result.counts.trainable;
  summary["frozen_params"] = result.counts.frozen;
  summary["test"] = detail::metrics_json(result.final_metrics);
  detail::open_output(out_dir / files::summary) << summary.dump(2) << '\n';
  return result;
}

/// Loads a checkpoint into a model built from `config` (by default the
/// config.json stored next to the checkpoint) and evaluates one split.
/// Writes top-k JSONL to `topk_path` when it is non-empty.
inline Evaluation cmd_eval(const std::filesystem::path& checkpoint, Split split,
                           std::optional<RunConfig> config = std::nullopt,
                           const std::filesystem::path& topk_path = {}, QueryMode mode = QueryMode::TextToImage) {
  if (!config) config = load_run_config(checkpoint.parent_path() / files::config);
  ParamStore stored = load_checkpoint(checkpoint);
  Experiment ex(*config);
  assign_checkpoint(ex.model().params(), stored);
  Evaluation e = ex.evaluate(split, mode);
  if (!topk_path.empty()) {
    auto out = detail::open_output(topk_path);
    write_topk_jsonl(out, e.ranking, ex.config().train.top_k);
  }
  return e;
}

struct AblationRow {
  std::string method;
  bool upt = false, bpt = false, dat = false;
  ParamCounts counts;
  MetricsReport metrics;
};

inline std::vector<AblationRow> ablation_rows() {
  return {{"Zero-shot", false, false, false, {}, {}},
          {"+UPT", true, false, false, {}, {}},
          {"+BPT", false, true, false, {}, {}},
          {"+DAT", false, false, true, {}, {}},
          {"+BPT+DAT", false, true, true, {}, {}}};
}

inline void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "row,method,trainable_params,total_params,rank1,rank5,rank10,mAP\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    out << i << ',' << r.method << ',' << r.counts.trainable << ',' << r.counts.total() << ','
        << format_double(r.metrics.rank1()) << ',' << format_double(r.metrics.rank5()) << ','
        << format_double(r.metrics.rank10()) << ',' << format_double(r.metrics.mean_ap) << '\n';
  }
}

/// The five component rows under one seed and dataset. The zero-shot row is
/// evaluated untrained; the others are full training runs written to
/// `out_dir/row<i>`.
inline std::vector<AblationRow> cmd_ablate(const RunConfig& base, const std::filesystem::path& out_dir,
                                           std::ostream* progress = nullptr) {
  std::filesystem::create_directories(out_dir);
  std::vector<AblationRow> rows = ablation_rows();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    AblationRow& row = rows[i];
    RunConfig c = base;
    c.model.use_upt = row.upt;
    c.model.use_bpt = row.bpt;
    c.model.use_dat = row.dat;
    if (progress) *progress << "== ablation row " << i << ' ' << row.method << '\n';
    if (i == 0) {
      Experiment ex(c);
      row.counts = count_params(ex.model().params());
      row.metrics = ex.evaluate(Split::Test).metrics;
    } else {
      TrainResult t = cmd_train(c, out_dir / ("row" + std::to_string(i)), progress);
      row.counts = t.counts;
      row.metrics = t.final_metrics;
    }
  }
  auto out = detail::open_output(out_dir / "ablation.csv");
  write_ablation_csv(out, rows);
  return rows;
}

enum class SweepAxis { PromptLength, PromptDepth };

inline SweepAxis parse_sweep_axis(std::string_view s) {
  if (s == "prompt_length") return SweepAxis::PromptLength;
  if (s == "prompt_depth") return SweepAxis::PromptDepth;
  fail(ErrorKind::Config, "unknown sweep axis '" + std::string(s) + "' (expected prompt_length or prompt_depth)");
}

inline const char* to_string(SweepAxis a) { return a == SweepAxis::PromptLength ? "prompt_length" : "prompt_depth"; }

struct SweepRow {
  std::size_t value = 0;
  ParamCounts counts;
  MetricsReport metrics;
};

inline RunConfig sweep_config(const RunConfig& base, SweepAxis axis, std::size_t value) {
  RunConfig c = base;
  (axis == SweepAxis::PromptLength ? c.model.prompt_length : c.model.prompt_depth) = value;
  c.validate();
  return c;
}

inline void write_sweep_csv(std::ostream& out, SweepAxis axis, const std::vector<SweepRow>& rows) {
  out << to_string(axis) << ",trainable_params,rank1,mAP\n";
  for (const auto& r : rows) {
    out << r.value << ',' << r.counts.trainable << ',' << format_double(r.metrics.rank1()) << ','
        << format_double(r.metrics.mean_ap) << '\n';
  }
}

/// One training run per value with the base seed. All values are validated
/// before any run starts.
inline std::vector<SweepRow> cmd_sweep(const RunConfig& base, SweepAxis axis, const std::vector<std::size_t>& values,
                                       const std::filesystem::path& out_dir, std::ostream* progress = nullptr) {
  require(!values.empty(), ErrorKind::Config, "sweep needs at least one value");
  std::vector<RunConfig> configs;
  for (std::size_t v : values) configs.push_back(sweep_config(base, axis, v));
  std::filesystem::create_directories(out_dir);
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (progress) *progress << "== " << to_string(axis) << " = " << values[i] << '\n';
    const std::string dir = std::string(to_string(axis)) + "_" + std::to_string(values[i]);
    TrainResult t = cmd_train(configs[i], out_dir / dir, progress);
    rows.push_back({values[i], t.counts, t.final_metrics});
  }
  auto out = detail::open_output(out_dir / (std::string("sweep_") + to_string(axis) + ".csv"));
  write_sweep_csv(out, axis, rows);
  return rows;
}

// ---------------------------------------------------------------------------
// Gradient check

/// Short label for a trainable tensor: P_t, P_v, F_t, F_v, W_d, b_d, W_u, b_u
/// or adapter_ln. Frozen names map to "frozen".
inline std::string tensor_kind(const std::string& name) {
  auto has = [&](std::string_view s) { return name.find(s) != std::string::npos; };
  if (name.starts_with("prompt.text.")) return "P_t";
  if (name.starts_with("prompt.vision.")) return "P_v";
  if (name.starts_with("coupling.t2v.")) return "F_t";
  if (name.starts_with("coupling.v2t.")) return "F_v";
  if (has(".adapter.down.weight")) return "W_d";
  if (has(".adapter.down.bias")) return "b_d";
  if (has(".adapter.up.weight")) return "W_u";
  if (has(".adapter.up.bias")) return "b_u";
  if (has(".adapter.ln.")) return "adapter_ln";
  return "frozen";
}

struct GradCheckConfig {
  std::size_t trials = 20;          // coordinates per trainable tensor and phase
  double step = 3e-5;               // coarse central-difference half width
  double threshold = 1e-4;          // max allowed relative error
  double floor = 1e-6;              // denominator floor for near-zero gradients
  double perturb_std = 0.05;        // noise added to trainable values for the second phase
  std::size_t batch_size = 4;
  std::uint64_t seed = 7;
};

struct GradCheckEntry {
  std::string phase;
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  std::vector<std::string> frozen_with_grad;
  std::size_t kink_resamples = 0;
  double threshold = 1e-4;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.rel_error);
    return m;
  }
  std::map<std::string, std::pair<std::size_t, double>> by_kind() const {
    std::map<std::string, std::pair<std::size_t, double>> out;
    for (const auto& e : entries) {
      auto& slot = out[tensor_kind(e.tensor)];
      ++slot.first;
      slot.second = std::max(slot.second, e.rel_error);
    }
    return out;
  }
  std::vector<GradCheckEntry> failures() const {
    std::vector<GradCheckEntry> out;
    for (const auto& e : entries) {
      if (!(e.rel_error <= threshold)) out.push_back(e);
    }
    return out;
  }
  bool passed() const { return frozen_with_grad.empty() && failures().empty() && !entries.empty(); }
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares analytic gradients of sdm_total against central differences on
/// one fixed batch, first at initialization and then at a randomly perturbed
/// trainable state (where the zero-initialized up-projection no longer masks
/// the other adapter gradients). Coordinates whose ±step evaluations cross a
/// ReLU kink are replaced by fresh draws.
inline GradCheckReport cmd_grad_check(const RunConfig& config, const GradCheckConfig& gc = {}) {
  RunConfig c = config;
  c.train.batch_size = gc.batch_size;
  c.train.sampler = SamplerConfig{SamplerKind::IdentityAware, 2};
  Experiment ex(c);
  ParamStore& store = ex.model().params();
  const Batch batch = ex.batch(0, 0);
  Rng rng = Rng::stream(gc.seed, "grad-check");

  GradCheckReport report;
  report.threshold = gc.threshold;
  auto probe = [&](double& slot, double value) {
    slot = value;
    Graph g(false);
    const double loss = ex.batch_loss(g, batch).value()[0];
    return std::pair{loss, g.branch_signature()};
  };

  for (const char* phase : {"init", "perturbed"}) {
    if (std::string_view(phase) == "perturbed") {
      for (auto& e : store) {
        if (e.frozen) continue;
        for (double& v : e.tensor.data()) v += rng.normal(0.0, gc.perturb_std);
      }
    }
    Graph g;
    Var loss = ex.batch_loss(g, batch);
    store.clear_grads();
    g.backward(loss);
    const std::uint64_t base_signature = g.branch_signature();
    for (const auto& e : store) {
      if (e.frozen && e.tensor.has_grad()) report.frozen_with_grad.push_back(e.name);
    }
    for (auto& e : store) {
      if (e.frozen) continue;
      const std::vector<double> grad(e.tensor.grad().begin(), e.tensor.grad().end());
      const std::size_t n = e.tensor.numel();
      const std::size_t want = std::min(gc.trials, n);
      std::set<std::size_t> used;
      std::size_t attempts = 0;
      while (used.size() < want && attempts < want + 200) {
        ++attempts;
        std::size_t idx = rng.below(n);
        if (used.contains(idx)) continue;
        used.insert(idx);
        double& slot = e.tensor.data()[idx];
        const double v = slot;
        bool kink = false;
        auto central = [&](double h) {
          const auto [plus, sig_plus] = probe(slot, v + h);
          const auto [minus, sig_minus] = probe(slot, v - h);
          kink = kink || sig_plus != base_signature || sig_minus != base_signature;
          return (plus - minus) / (2.0 * h);
        };
        // Richardson extrapolation cancels the O(h^2) truncation term.
        const double coarse = central(gc.step);
        const double fine = central(gc.step / 2.0);
        slot = v;
        if (kink) {
          ++report.kink_resamples;
          if (want < n) used.erase(idx);
          continue;
        }
        const double numeric = (4.0 * fine - coarse) / 3.0;
        report.entries.push_back(
            {phase, e.name, idx, grad[idx], numeric, relative_error(grad[idx], numeric, gc.floor)});
      }
    }
  }
  store.clear_grads();
  return report;
}

}  // namespace cskt
