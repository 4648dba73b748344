#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "cskt/data.hpp"
#include "cskt/error.hpp"
#include "cskt/model.hpp"
#include "cskt/sdm_loss.hpp"

namespace cskt {

enum class LrSchedule { Constant, Cosine };

struct TrainConfig {
  std::size_t epochs = 200;
  double lr = 3e-4;
  LrSchedule schedule = LrSchedule::Constant;
  std::size_t batch_size = 32;
  SamplerConfig sampler{SamplerKind::IdentityAware, 2};
  std::size_t eval_every = 10;  // 0 disables mid-run evaluation; the last epoch is always evaluated
  std::size_t top_k = 10;
};

/// Everything a run depends on. `seed` drives model init, data generation
/// and batch sampling.
struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  DatasetConfig data;
  TrainConfig train;
  std::uint64_t seed = 7;

  /// Propagates shared fields (seed, image size) into the sub-configs and
  /// fills the vocabulary size from the tokenizer when unset.
  void normalize() {
    model.seed = seed;
    data.seed = seed;
    data.image_height = model.image_height;
    data.image_width = model.image_width;
    const std::size_t vocab = Tokenizer::standard(model.max_text_length).vocab_size();
    if (model.vocab_size == 0) model.vocab_size = vocab;
    require(model.vocab_size >= vocab, ErrorKind::Config,
            "model vocab_size " + std::to_string(model.vocab_size) + " below tokenizer vocabulary " +
                std::to_string(vocab));
  }

  void validate() const {
    model.validate();
    loss.validate();
    data.validate();
    require(train.batch_size > 0, ErrorKind::Config, "batch_size must be positive");
    require(train.lr > 0.0, ErrorKind::Config, "lr must be positive");
    require(train.top_k > 0, ErrorKind::Config, "top_k must be positive");
  }

  static RunConfig desk_reference() {
    RunConfig c;
    c.model.vocab_size = 0;
    c.data.n_identities = 64;
    c.data.test_identities = 16;
    c.normalize();
    return c;
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& obj, const std::set<std::string>& allowed, const std::string& where) {
  require(obj.is_object(), ErrorKind::Config, where + " must be a JSON object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    require(allowed.contains(it.key()), ErrorKind::Config, "unknown key '" + it.key() + "' in " + where);
  }
}

template <class T>
void read_field(const nlohmann::json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  const auto& v = obj.at(key);
  bool ok = false;
  if constexpr (std::is_same_v<T, bool>) {
    ok = v.is_boolean();
  } else if constexpr (std::is_integral_v<T>) {
    ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  } else if constexpr (std::is_floating_point_v<T>) {
    ok = v.is_number();
  } else {
    ok = v.is_string();
  }
  require(ok, ErrorKind::Config, where + "." + key + " has the wrong type");
  out = v.get<T>();
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  auto& m = j["model"];
  m["text_width"] = c.model.text_width;
  m["vision_width"] = c.model.vision_width;
  m["layers"] = c.model.layers;
  m["text_heads"] = c.model.text_heads;
  m["vision_heads"] = c.model.vision_heads;
  m["vocab_size"] = c.model.vocab_size;
  m["max_text_length"] = c.model.max_text_length;
  m["image_height"] = c.model.image_height;
  m["image_width"] = c.model.image_width;
  m["patch_size"] = c.model.patch_size;
  m["joint_dim"] = c.model.joint_dim;
  m["mlp_ratio"] = c.model.mlp_ratio;
  m["prompt_length"] = c.model.prompt_length;
  m["prompt_depth"] = c.model.prompt_depth;
  m["text_adapter_scale"] = c.model.text_adapter_scale;
  m["vision_adapter_scale"] = c.model.vision_adapter_scale;
  m["adapter_rank"] = c.model.adapter_rank;
  m["use_bpt"] = c.model.use_bpt;
  m["use_upt"] = c.model.use_upt;
  m["use_dat"] = c.model.use_dat;
  m["activation"] = c.model.activation == Activation::QuickGelu ? "quick_gelu" : "gelu";
  j["loss"] = {{"tau", c.loss.tau}, {"eps", c.loss.eps}};
  auto& d = j["data"];
  d["n_identities"] = c.data.n_identities;
  d["test_identities"] = c.data.test_identities;
  d["images_per_id"] = c.data.images_per_id;
  d["captions_per_image"] = c.data.captions_per_image;
  d["noise_std"] = c.data.noise_std;
  auto& t = j["train"];
  t["epochs"] = c.train.epochs;
  t["lr"] = c.train.lr;
  t["lr_schedule"] = c.train.schedule == LrSchedule::Constant ? "constant" : "cosine";
  t["batch_size"] = c.train.batch_size;
  t["sampler"] = c.train.sampler.kind == SamplerKind::IdentityAware ? "identity_aware" : "uniform";
  t["instances_per_identity"] = c.train.sampler.instances;
  t["eval_every"] = c.train.eval_every;
  t["top_k"] = c.train.top_k;
  return j;
}

/// Parses and validates a run config. Missing keys keep their defaults;
/// unknown keys and wrong types are config errors.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c = RunConfig::desk_reference();
  c.model.vocab_size = 0;
  detail::reject_unknown(j, {"seed", "model", "loss", "data", "train"}, "config");
  detail::read_field(j, "seed", c.seed, "config");
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown(m, {"text_width", "vision_width", "layers", "text_heads", "vision_heads", "vocab_size",
                               "max_text_length", "image_height", "image_width", "patch_size", "joint_dim",
                               "mlp_ratio", "prompt_length", "prompt_depth", "text_adapter_scale",
                               "vision_adapter_scale", "adapter_rank", "use_bpt", "use_upt", "use_dat", "activation"},
                           "model");
    auto& mc = c.model;
    detail::read_field(m, "text_width", mc.text_width, "model");
    detail::read_field(m, "vision_width", mc.vision_width, "model");
    detail::read_field(m, "layers", mc.layers, "model");
    detail::read_field(m, "text_heads", mc.text_heads, "model");
    detail::read_field(m, "vision_heads", mc.vision_heads, "model");
    detail::read_field(m, "vocab_size", mc.vocab_size, "model");
    detail::read_field(m, "max_text_length", mc.max_text_length, "model");
    detail::read_field(m, "image_height", mc.image_height, "model");
    detail::read_field(m, "image_width", mc.image_width, "model");
    detail::read_field(m, "patch_size", mc.patch_size, "model");
    detail::read_field(m, "joint_dim", mc.joint_dim, "model");
    detail::read_field(m, "mlp_ratio", mc.mlp_ratio, "model");
    detail::read_field(m, "prompt_length", mc.prompt_length, "model");
    detail::read_field(m, "prompt_depth", mc.prompt_depth, "model");
    detail::read_field(m, "text_adapter_scale", mc.text_adapter_scale, "model");
    detail::read_field(m, "vision_adapter_scale", mc.vision_adapter_scale, "model");
    detail::read_field(m, "adapter_rank", mc.adapter_rank, "model");
    detail::read_field(m, "use_bpt", mc.use_bpt, "model");
    detail::read_field(m, "use_upt", mc.use_upt, "model");
    detail::read_field(m, "use_dat", mc.use_dat, "model");
    std::string act = "quick_gelu";
    detail::read_field(m, "activation", act, "model");
    require(act == "quick_gelu" || act == "gelu", ErrorKind::Config, "model.activation must be quick_gelu or gelu");
    mc.activation = act == "gelu" ? Activation::Gelu : Activation::QuickGelu;
  }
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    detail::reject_unknown(l, {"tau", "eps"}, "loss");
    detail::read_field(l, "tau", c.loss.tau, "loss");
    detail::read_field(l, "eps", c.loss.eps, "loss");
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown(d, {"n_identities", "test_identities", "images_per_id", "captions_per_image", "noise_std"},
                           "data");
    detail::read_field(d, "n_identities", c.data.n_identities, "data");
    detail::read_field(d, "test_identities", c.data.test_identities, "data");
    detail::read_field(d, "images_per_id", c.data.images_per_id, "data");
    detail::read_field(d, "captions_per_image", c.data.captions_per_image, "data");
    detail::read_field(d, "noise_std", c.data.noise_std, "data");
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::reject_unknown(t, {"epochs", "lr", "lr_schedule", "batch_size", "sampler", "instances_per_identity",
                               "eval_every", "top_k"},
                           "train");
    detail::read_field(t, "epochs", c.train.epochs, "train");
    detail::read_field(t, "lr", c.train.lr, "train");
    std::string schedule = "constant";
    detail::read_field(t, "lr_schedule", schedule, "train");
    require(schedule == "constant" || schedule == "cosine", ErrorKind::Config,
            "train.lr_schedule must be constant or cosine");
    c.train.schedule = schedule == "cosine" ? LrSchedule::Cosine : LrSchedule::Constant;
    detail::read_field(t, "batch_size", c.train.batch_size, "train");
    std::string sampler = "identity_aware";
    detail::read_field(t, "sampler", sampler, "train");
    require(sampler == "identity_aware" || sampler == "uniform", ErrorKind::Config,
            "train.sampler must be identity_aware or uniform");
    c.train.sampler.kind = sampler == "uniform" ? SamplerKind::Uniform : SamplerKind::IdentityAware;
    detail::read_field(t, "instances_per_identity", c.train.sampler.instances, "train");
    detail::read_field(t, "eval_every", c.train.eval_every, "train");
    detail::read_field(t, "top_k", c.train.top_k, "train");
  }
  c.normalize();
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::Io, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, "config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace cskt
