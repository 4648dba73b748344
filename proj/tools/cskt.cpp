// Command-line front end: train, eval, ablate, sweep, grad-check, count-params.
//
// Failures print one line `error[<category>]: <message>` to stderr and exit
// with a category-specific nonzero code (see exit_code below).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cskt/train.hpp"

namespace fs = std::filesystem;
using namespace cskt;

namespace {

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return 3;
    case ErrorKind::Io: return 4;
    case ErrorKind::Integrity: return 5;
    case ErrorKind::Numeric: return 6;
    case ErrorKind::Capacity: return 7;
    case ErrorKind::Input: return 8;
    case ErrorKind::Dimension: return 9;
    case ErrorKind::Vocabulary: return 10;
    case ErrorKind::Variant: return 11;
  }
  return 1;
}

int report_error(std::string_view category, std::string message, int code) {
  for (char& c : message) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  std::cerr << "error[" << category << "]: " << message << '\n';
  return code;
}

RunConfig config_or_default(const std::string& path) {
  return path.empty() ? RunConfig::desk_reference() : load_run_config(path);
}

std::vector<std::size_t> parse_values(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    require(used == item.size() && !item.empty() && item.front() != '-', ErrorKind::Config,
            "sweep value '" + item + "' is not a non-negative integer");
    out.push_back(static_cast<std::size_t>(v));
  }
  require(!out.empty(), ErrorKind::Config, "no sweep values given");
  return out;
}

void print_metrics(const MetricsReport& m) {
  std::cout << std::fixed << std::setprecision(4) << "rank1 " << m.rank1() << "  rank5 " << m.rank5() << "  rank10 "
            << m.rank10() << "  mAP " << m.mean_ap << "  queries " << m.query_count << '\n';
  std::cout.unsetf(std::ios::floatfield);
}

void print_counts(const std::string& label, const ParamCounts& c) {
  std::cout << label << ": trainable " << c.trainable << "  frozen " << c.frozen << "  total " << c.total()
            << "  ratio " << std::fixed << std::setprecision(4) << 100.0 * c.ratio() << "%\n";
  std::cout.unsetf(std::ios::floatfield);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal prompt and adapter tuning on a frozen dual encoder"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress per-epoch progress");

  std::string config_path, out_dir, checkpoint, split = "test", topk_path, axis, values, preset;
  bool reverse = false;
  std::size_t trials = 20;

  auto* train = app.add_subcommand("train", "Train one run");
  train->add_option("--config", config_path, "Run config (JSON)")->required();
  train->add_option("--out", out_dir, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--split", split, "train or test")->capture_default_str();
  eval->add_option("--config", config_path, "Run config (default: config.json next to the checkpoint)");
  eval->add_option("--topk", topk_path, "Top-k JSONL path (default: topk_<split>.jsonl next to the checkpoint)");
  eval->add_flag("--image-to-text", reverse, "Query with images against a caption gallery");

  auto* ablate = app.add_subcommand("ablate", "Run the five component-ablation rows");
  ablate->add_option("--config", config_path, "Base run config (default: desk reference)");
  ablate->add_option("--out", out_dir, "Output directory")->default_val("runs/ablation");

  auto* sweep = app.add_subcommand("sweep", "Train once per prompt length or depth value");
  sweep->add_option("--axis", axis, "prompt_length or prompt_depth")->required();
  sweep->add_option("--values", values, "Comma-separated values, e.g. 1,2,4,8")->required();
  sweep->add_option("--config", config_path, "Base run config (default: desk reference)");
  sweep->add_option("--out", out_dir, "Output directory")->default_val("runs/sweep");

  auto* grad = app.add_subcommand("grad-check", "Compare analytic and finite-difference gradients");
  grad->add_option("--trials", trials, "Coordinates per trainable tensor and phase")->capture_default_str();
  grad->add_option("--config", config_path, "Run config (default: desk reference)");

  auto* count = app.add_subcommand("count-params", "Trainable and frozen parameter audit");
  count->add_option("--config", config_path, "Run config (default: desk reference)");
  count->add_option("--preset", preset, "Replace the model shape: clip-b16")->check(CLI::IsMember({"clip-b16"}));

  auto* gen = app.add_subcommand("gen-data", "Write the dataset manifest for a config");
  gen->add_option("--config", config_path, "Run config (default: desk reference)");
  gen->add_option("--out", out_dir, "Manifest path")->required();

  auto* init = app.add_subcommand("init-config", "Print the desk reference config as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what(), 2);
  }

  std::ostream* progress = quiet ? nullptr : &std::cerr;
  try {
    if (*train) {
      const TrainResult r = cmd_train(load_run_config(config_path), out_dir, progress);
      print_counts("params", r.counts);
      print_metrics(r.final_metrics);
    } else if (*eval) {
      const fs::path ckpt(checkpoint);
      const Split s = parse_split(split);
      std::optional<RunConfig> cfg;
      if (!config_path.empty()) cfg = load_run_config(config_path);
      const fs::path dump = topk_path.empty() ? ckpt.parent_path() / files::topk(s) : fs::path(topk_path);
      const Evaluation e = cmd_eval(ckpt, s, cfg, dump, reverse ? QueryMode::ImageToText : QueryMode::TextToImage);
      print_metrics(e.metrics);
      if (e.metrics.queries_without_relevant > 0) {
        std::cout << e.metrics.queries_without_relevant << " queries had no relevant gallery item\n";
      }
    } else if (*ablate) {
      const auto rows = cmd_ablate(config_or_default(config_path), out_dir, progress);
      std::cout << "row  method     trainable   rank1   rank5   rank10  mAP\n";
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        std::cout << std::left << std::setw(5) << i << std::setw(11) << r.method << std::setw(12) << r.counts.trainable
                  << std::fixed << std::setprecision(4) << r.metrics.rank1() << "  " << r.metrics.rank5() << "  "
                  << r.metrics.rank10() << "  " << r.metrics.mean_ap << '\n';
        std::cout.unsetf(std::ios::floatfield);
      }
    } else if (*sweep) {
      const SweepAxis a = parse_sweep_axis(axis);
      const auto rows = cmd_sweep(config_or_default(config_path), a, parse_values(values), out_dir, progress);
      write_sweep_csv(std::cout, a, rows);
    } else if (*grad) {
      GradCheckConfig gc;
      gc.trials = trials;
      const GradCheckReport r = cmd_grad_check(config_or_default(config_path), gc);
      for (const auto& [kind, stat] : r.by_kind()) {
        std::cout << std::left << std::setw(11) << kind << " coords " << std::setw(5) << stat.first
                  << " max_rel_err " << std::scientific << std::setprecision(3) << stat.second << '\n';
        std::cout.unsetf(std::ios::floatfield);
      }
      std::cout << "coordinates " << r.entries.size() << "  kink resamples " << r.kink_resamples
                << "  frozen tensors with gradients " << r.frozen_with_grad.size() << "  max_rel_err "
                << std::scientific << r.max_rel_error() << '\n';
      std::cout.unsetf(std::ios::floatfield);
      if (!r.frozen_with_grad.empty()) {
        fail(ErrorKind::Integrity, "frozen tensor '" + r.frozen_with_grad.front() + "' received a gradient");
      }
      const auto failures = r.failures();
      for (const auto& f : failures) {
        std::cout << "FAIL " << f.phase << ' ' << f.tensor << '[' << f.index << "] analytic " << f.analytic
                  << " numeric " << f.numeric << " rel_err " << f.rel_error << '\n';
      }
      if (!failures.empty()) {
        fail(ErrorKind::Numeric, std::to_string(failures.size()) + " coordinates exceed relative error " +
                                     format_double(r.threshold) + ", first " + failures.front().tensor + "[" +
                                     std::to_string(failures.front().index) + "]");
      }
      std::cout << "PASS\n";
    } else if (*count) {
      RunConfig cfg = config_or_default(config_path);
      ModelConfig model = cfg.model;
      if (preset == "clip-b16") {
        ModelConfig shape = ModelConfig::clip_b16();
        shape.use_bpt = model.use_bpt;
        shape.use_upt = model.use_upt;
        shape.use_dat = model.use_dat;
        model = shape;
      }
      model.validate();
      const ParamCounts enumerated = count_params(param_layout(model));
      print_counts("enumerated", enumerated);
      std::cout << "closed-form trainable: " << closed_form_trainable(model)
                << (closed_form_trainable(model) == enumerated.trainable ? "  (matches)" : "  (MISMATCH)") << '\n';
      require(closed_form_trainable(model) == enumerated.trainable, ErrorKind::Integrity,
              "closed-form trainable count disagrees with enumeration");
    } else if (*gen) {
      RunConfig cfg = config_or_default(config_path);
      cfg.normalize();
      const Dataset ds = generate_dataset(cfg.data);
      std::ofstream out(out_dir, std::ios::binary | std::ios::trunc);
      require(out.good(), ErrorKind::Io, "cannot write " + out_dir);
      write_manifest(out, ds);
      std::cout << ds.images.size() << " images, " << ds.caption_count() << " captions\n";
    } else if (*init) {
      std::cout << to_json(RunConfig::desk_reference()).dump(2) << '\n';
    }
  } catch (const Error& e) {
    return report_error(to_string(e.kind()), e.what(), exit_code(e.kind()));
  } catch (const std::filesystem::filesystem_error& e) {
    return report_error("io", e.what(), exit_code(ErrorKind::Io));
  } catch (const std::exception& e) {
    return report_error("internal", e.what(), 1);
  }
  return 0;
}
