#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cskt/train.hpp"
#include "support.hpp"

using namespace cskt;
using cskt::test::error_kind;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run() {
  RunConfig c;
  auto& m = c.model;
  m.text_width = 16;
  m.vision_width = 16;
  m.layers = 2;
  m.text_heads = 2;
  m.vision_heads = 2;
  m.vocab_size = 0;
  m.image_height = 16;
  m.image_width = 8;
  m.patch_size = 4;
  m.joint_dim = 8;
  m.mlp_ratio = 2;
  m.prompt_length = 2;
  m.prompt_depth = 2;
  m.adapter_rank = 4;
  c.data.n_identities = 8;
  c.data.test_identities = 4;
  c.data.images_per_id = 2;
  c.train.epochs = 3;
  c.train.batch_size = 4;
  c.train.lr = 1e-3;
  c.train.eval_every = 2;
  c.train.top_k = 3;
  c.normalize();
  return c;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cskt_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

}  // namespace

TEST(RunConfigJson, RoundTrip) {
  RunConfig c = tiny_run();
  c.train.schedule = LrSchedule::Cosine;
  c.train.sampler = {SamplerKind::Uniform, 1};
  c.model.activation = Activation::Gelu;
  c.loss.tau = 0.05;
  const auto j = to_json(c);
  const RunConfig back = run_config_from_json(j);
  EXPECT_EQ(to_json(back).dump(), j.dump());
  EXPECT_EQ(back.train.schedule, LrSchedule::Cosine);
  EXPECT_EQ(back.model.activation, Activation::Gelu);
}

TEST(RunConfigJson, MissingKeysKeepDefaults) {
  const RunConfig c = run_config_from_json(nlohmann::json::parse(R"({"train": {"epochs": 5}})"));
  EXPECT_EQ(c.train.epochs, 5u);
  EXPECT_EQ(to_json(c)["model"], to_json(RunConfig::desk_reference())["model"]);
  EXPECT_EQ(c.seed, 7u);
}

TEST(RunConfigJson, SchemaViolationsAreConfigErrors) {
  for (const char* text : {
           R"({"colour": 1})",
           R"({"model": {"widht": 64}})",
           R"({"train": {"epochs": "ten"}})",
           R"({"train": {"epochs": -1}})",
           R"({"train": {"epochs": 2.5}})",
           R"({"model": {"use_bpt": 1}})",
           R"({"loss": {"tau": "0.02"}})",
           R"({"loss": {"tau": 0}})",
           R"({"model": {"use_bpt": true, "use_upt": true}})",
           R"({"model": {"prompt_depth": 9}})",
           R"({"model": {"activation": "relu"}})",
           R"({"model": {"vocab_size": 5}})",
           R"({"train": {"lr_schedule": "step"}})",
           R"({"train": {"sampler": "random"}})",
           R"({"data": {"test_identities": 100}})",
           R"({"model": 3})",
           R"([1, 2])",
       }) {
    EXPECT_EQ(error_kind([&] { run_config_from_json(nlohmann::json::parse(text)); }), ErrorKind::Config) << text;
  }
}

TEST(RunConfigJson, FileErrors) {
  const fs::path dir = scratch_dir("config_files");
  fs::create_directories(dir);
  EXPECT_EQ(error_kind([&] { load_run_config(dir / "missing.json"); }), ErrorKind::Io);
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_EQ(error_kind([&] { load_run_config(dir / "bad.json"); }), ErrorKind::Config);
  std::ofstream(dir / "good.json") << to_json(tiny_run()).dump(2);
  EXPECT_EQ(to_json(load_run_config(dir / "good.json")).dump(), to_json(tiny_run()).dump());
  fs::remove_all(dir);
}

TEST(MetricsLogCsv, FormatAndMonotoneEpochs) {
  MetricsLog log;
  log.append({1, 0.5, std::nullopt, 1.0});
  MetricsReport m;
  m.rank_at = {{1, 0.25}, {5, 0.5}, {10, 1.0}};
  m.mean_ap = 0.375;
  log.append({2, 0.25, m, 2.0});
  std::ostringstream csv, timing;
  log.write_csv(csv);
  log.write_timing_csv(timing);
  EXPECT_EQ(csv.str(), "epoch,train_loss,rank1,rank5,rank10,mAP\n1,0.5,,,,\n2,0.25,0.25,0.5,1,0.375\n");
  EXPECT_EQ(timing.str(), "epoch,wall_seconds\n1,1\n2,2\n");
  EXPECT_EQ(error_kind([&] { log.append({2, 0.1, std::nullopt, 0.0}); }), ErrorKind::Integrity);
}

TEST(Training, ZeroEpochsSavesInitialization) {
  RunConfig c = tiny_run();
  c.train.epochs = 0;
  const fs::path dir = scratch_dir("zero_epochs");
  const TrainResult r = cmd_train(c, dir);
  EXPECT_TRUE(r.log.empty());
  Experiment fresh(c);
  EXPECT_EQ(slurp(dir / files::checkpoint), serialize_checkpoint(fresh.model().params()));
  fs::remove_all(dir);
}

TEST(Training, DeterministicLogsAndCheckpoints) {
  const fs::path a = scratch_dir("det_a"), b = scratch_dir("det_b");
  const TrainResult ra = cmd_train(tiny_run(), a);
  cmd_train(tiny_run(), b);
  for (const char* f : {files::metrics, files::checkpoint, files::config, files::manifest, files::summary}) {
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_EQ(slurp(a / files::topk(Split::Test)), slurp(b / files::topk(Split::Test)));
  ASSERT_EQ(ra.log.rows().size(), 3u);
  EXPECT_FALSE(ra.log.rows()[0].eval.has_value());
  EXPECT_TRUE(ra.log.rows()[1].eval.has_value());
  EXPECT_TRUE(ra.log.rows()[2].eval.has_value());
  EXPECT_EQ(line_count(a / files::metrics), 4u);
  EXPECT_EQ(line_count(a / files::timing), 4u);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Training, FrozenEntriesOfCheckpointEqualInitialization) {
  const fs::path dir = scratch_dir("frozen");
  cmd_train(tiny_run(), dir);
  const ParamStore saved = load_checkpoint(dir / files::checkpoint);
  Experiment fresh(tiny_run());
  auto init = fresh.model().params().begin();
  std::size_t changed = 0;
  for (const auto& e : saved) {
    ASSERT_EQ(e.name, init->name);
    if (e.frozen) {
      EXPECT_TRUE(e.tensor.same_values(init->tensor)) << e.name;
    } else if (!e.tensor.same_values(init->tensor)) {
      ++changed;
    }
    ++init;
  }
  EXPECT_GT(changed, 0u);
  fs::remove_all(dir);
}

TEST(Training, SaveLoadEvalEqualsInMemoryEval) {
  const fs::path dir = scratch_dir("eval");
  RunConfig c = tiny_run();
  Experiment ex(c);
  ex.train();
  const Evaluation before = ex.evaluate(Split::Test);
  EXPECT_EQ(ex.evaluate(Split::Test).metrics, before.metrics);
  fs::create_directories(dir);
  save_checkpoint(ex.model().params(), dir / files::checkpoint);
  std::ofstream(dir / files::config) << to_json(ex.config()).dump(2);
  const Evaluation after = cmd_eval(dir / files::checkpoint, Split::Test, std::nullopt, dir / "topk.jsonl");
  EXPECT_EQ(after.metrics, before.metrics);
  for (std::size_t q = 0; q < before.ranking.size(); ++q) {
    EXPECT_EQ(after.ranking[q].order, before.ranking[q].order);
    EXPECT_EQ(after.ranking[q].scores, before.ranking[q].scores);
  }
  // 4 test identities x 2 images x 2 captions text queries.
  EXPECT_EQ(line_count(dir / "topk.jsonl"), 16u);
  const Evaluation reverse = cmd_eval(dir / files::checkpoint, Split::Test, c, {}, QueryMode::ImageToText);
  EXPECT_EQ(reverse.metrics.query_count, 8u);
  fs::remove_all(dir);
}

TEST(Training, EvalErrors) {
  const fs::path dir = scratch_dir("eval_errors");
  cmd_train([] { RunConfig c = tiny_run(); c.train.epochs = 0; return c; }(), dir);
  RunConfig other = tiny_run();
  other.model.joint_dim = 4;
  EXPECT_EQ(error_kind([&] { cmd_eval(dir / files::checkpoint, Split::Test, other); }), ErrorKind::Integrity);
  RunConfig upt = tiny_run();
  upt.model.use_bpt = false;
  upt.model.use_upt = true;
  EXPECT_EQ(error_kind([&] { cmd_eval(dir / files::checkpoint, Split::Test, upt); }), ErrorKind::Integrity);
  EXPECT_EQ(error_kind([&] { cmd_eval(dir / "absent.cskt", Split::Test, tiny_run()); }), ErrorKind::Io);
  fs::remove_all(dir);
}

TEST(Training, NonFiniteLossNamesBatchSeed) {
  Experiment ex(tiny_run());
  ex.model().params()["prompt.text.0"][0] = std::numeric_limits<double>::quiet_NaN();
  AdamState adam;
  const Batch b = ex.batch(1, 0);
  try {
    ex.train_step(b, adam);
    FAIL() << "expected a numeric error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
    EXPECT_NE(std::string(e.what()).find(std::to_string(b.seed)), std::string::npos) << e.what();
  }
}

TEST(Training, BatchSeedsDifferAcrossSteps) {
  Experiment ex(tiny_run());
  EXPECT_EQ(ex.steps_per_epoch(), 2u);
  EXPECT_NE(ex.batch_seed(1, 0), ex.batch_seed(1, 1));
  EXPECT_NE(ex.batch_seed(1, 0), ex.batch_seed(2, 0));
  EXPECT_EQ(ex.batch(3, 1).image_indices, ex.batch(3, 1).image_indices);
}

TEST(Training, CosineScheduleChangesTrajectory) {
  RunConfig c = tiny_run();
  c.train.epochs = 2;
  Experiment constant(c);
  c.train.schedule = LrSchedule::Cosine;
  Experiment cosine(c);
  const MetricsLog a = constant.train(), b = cosine.train();
  // The first step runs at the peak rate under both schedules.
  EXPECT_EQ(a.rows()[0].train_loss, b.rows()[0].train_loss);
  EXPECT_NE(a.rows()[1].train_loss, b.rows()[1].train_loss);
}

TEST(Ablation, RowCountsAreAdditive) {
  std::vector<std::uint64_t> counts;
  for (const AblationRow& row : ablation_rows()) {
    RunConfig c = RunConfig::desk_reference();
    c.model.use_upt = row.upt;
    c.model.use_bpt = row.bpt;
    c.model.use_dat = row.dat;
    counts.push_back(count_params(param_layout(c.model)).trainable);
  }
  ASSERT_EQ(counts.size(), 5u);
  EXPECT_EQ(counts[0], 0u);
  EXPECT_EQ(counts[4], counts[2] + counts[3]);
  EXPECT_LT(counts[1], counts[2]);
}

TEST(Ablation, HarnessEmitsFiveRows) {
  RunConfig c = tiny_run();
  c.train.epochs = 1;
  const fs::path dir = scratch_dir("ablate");
  const auto rows = cmd_ablate(c, dir);
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0].method, "Zero-shot");
  EXPECT_EQ(rows[0].counts.trainable, 0u);
  EXPECT_EQ(rows[4].counts.trainable, rows[2].counts.trainable + rows[3].counts.trainable);
  EXPECT_EQ(line_count(dir / "ablation.csv"), 6u);
  EXPECT_FALSE(fs::exists(dir / "row0"));
  for (int i = 1; i <= 4; ++i) EXPECT_TRUE(fs::exists(dir / ("row" + std::to_string(i)) / files::metrics));
  fs::remove_all(dir);
}

TEST(Sweep, ThreeLengthsThreeRowsAffineCounts) {
  RunConfig c = tiny_run();
  c.train.epochs = 1;
  const fs::path dir = scratch_dir("sweep");
  const auto rows = cmd_sweep(c, SweepAxis::PromptLength, {1, 2, 4}, dir);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(line_count(dir / "sweep_prompt_length.csv"), 4u);
  const std::uint64_t slope = c.model.prompt_depth * (c.model.text_width + c.model.vision_width);
  EXPECT_EQ(rows[1].counts.trainable - rows[0].counts.trainable, slope);
  EXPECT_EQ(rows[2].counts.trainable - rows[1].counts.trainable, 2 * slope);
  for (const auto& r : rows) {
    ModelConfig m = c.model;
    m.prompt_length = r.value;
    EXPECT_EQ(r.counts.trainable, closed_form_trainable(m));
  }
  fs::remove_all(dir);
}

TEST(Sweep, DepthZeroIsNoPromptVariant) {
  RunConfig c = tiny_run();
  const RunConfig zero = sweep_config(c, SweepAxis::PromptDepth, 0);
  Experiment ex(zero);
  for (const auto& e : ex.model().params()) {
    EXPECT_FALSE(e.name.starts_with("prompt.") || e.name.starts_with("coupling.")) << e.name;
  }
  RunConfig none = c;
  none.model.use_bpt = false;
  EXPECT_EQ(count_params(ex.model().params()).trainable, count_params(param_layout(none.model)).trainable);
}

TEST(Sweep, InvalidValuesFailBeforeAnyRun) {
  const fs::path dir = scratch_dir("sweep_invalid");
  EXPECT_EQ(error_kind([&] { cmd_sweep(tiny_run(), SweepAxis::PromptDepth, {1, 3}, dir); }), ErrorKind::Config);
  EXPECT_FALSE(fs::exists(dir));
  EXPECT_EQ(error_kind([] { parse_sweep_axis("prompt_width"); }), ErrorKind::Config);
  EXPECT_EQ(parse_sweep_axis("prompt_depth"), SweepAxis::PromptDepth);
}

TEST(GradCheck, TinyConfigPassesAcrossAllKinds) {
  GradCheckConfig gc;
  gc.trials = 4;
  const GradCheckReport r = cmd_grad_check(tiny_run(), gc);
  EXPECT_TRUE(r.frozen_with_grad.empty());
  EXPECT_TRUE(r.passed()) << "max rel error " << r.max_rel_error();
  const auto kinds = r.by_kind();
  for (const char* k : {"P_t", "P_v", "F_t", "F_v", "W_d", "b_d", "W_u", "b_u", "adapter_ln"}) {
    EXPECT_TRUE(kinds.contains(k)) << k;
  }
  EXPECT_EQ(tensor_kind("text.layers.0.attn.in_proj.weight"), "frozen");
}

TEST(GradCheck, ReportFlagsLargeErrors) {
  GradCheckReport r;
  r.threshold = 1e-4;
  r.entries.push_back({"init", "prompt.text.0", 3, 1.0, 1.0, 0.0});
  EXPECT_TRUE(r.passed());
  r.entries.push_back({"init", "coupling.t2v.0.weight", 5, 1.0, 1.1, relative_error(1.0, 1.1, 1e-6)});
  EXPECT_FALSE(r.passed());
  ASSERT_EQ(r.failures().size(), 1u);
  EXPECT_EQ(r.failures()[0].tensor, "coupling.t2v.0.weight");
  EXPECT_NEAR(relative_error(1.0, 1.1, 1e-6), 0.1 / 1.1, 1e-15);
  EXPECT_EQ(relative_error(0.0, 0.0, 1e-6), 0.0);
}
