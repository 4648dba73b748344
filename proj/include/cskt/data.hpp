#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cskt/error.hpp"
#include "cskt/model.hpp"
#include "cskt/rng.hpp"
#include "cskt/tensor.hpp"

namespace cskt {

struct Color {
  std::string_view name;
  std::array<double, 3> rgb;
};

// Closed vocabularies. Shirt and pants palettes use disjoint words so a
// caption's color words identify their garment.
inline constexpr std::array<Color, 4> kShirtColors{{
    {"red", {0.85, 0.10, 0.10}},
    {"green", {0.10, 0.70, 0.20}},
    {"blue", {0.15, 0.25, 0.85}},
    {"yellow", {0.90, 0.85, 0.15}},
}};
inline constexpr std::array<Color, 4> kPantsColors{{
    {"black", {0.08, 0.08, 0.08}},
    {"white", {0.92, 0.92, 0.92}},
    {"gray", {0.50, 0.50, 0.50}},
    {"brown", {0.45, 0.28, 0.12}},
}};
// Each accessory is drawn as a solid block in its signature color.
inline constexpr std::array<Color, 4> kAccessories{{
    {"backpack", {0.80, 0.20, 0.75}},
    {"hat", {0.10, 0.80, 0.85}},
    {"bag", {0.95, 0.55, 0.10}},
    {"umbrella", {0.55, 0.35, 0.85}},
}};

inline constexpr std::array<std::string_view, 4> kCaptionTemplates{
    "a person wearing a {shirt} shirt and {pants} pants with a {accessory}",
    "this pedestrian has a {accessory} and wears {pants} pants and a {shirt} shirt",
    "the person in the {shirt} shirt and {pants} pants carries a {accessory}",
    "a {pants} pants and {shirt} shirt pedestrian with a {accessory}",
};

inline constexpr std::string_view kPromptInitPhrase = "a photo of a person or a pedestrian";

struct Attributes {
  std::string shirt;
  std::string pants;
  std::string accessory;
  friend bool operator==(const Attributes&, const Attributes&) = default;
  friend auto operator<=>(const Attributes&, const Attributes&) = default;
};

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream in{std::string(text)};
  for (std::string w; in >> w;) words.push_back(w);
  return words;
}

inline std::string fill_template(std::string_view tmpl, const Attributes& a) {
  std::string out(tmpl);
  auto put = [&](std::string_view key, const std::string& value) {
    const std::size_t at = out.find(key);
    require(at != std::string::npos, ErrorKind::Input, "caption template missing " + std::string(key));
    out.replace(at, key.size(), value);
  };
  put("{shirt}", a.shirt);
  put("{pants}", a.pants);
  put("{accessory}", a.accessory);
  return out;
}

/// Recovers the attribute tuple from a caption's words.
inline Attributes parse_caption(std::string_view caption) {
  Attributes a;
  for (const std::string& w : split_words(caption)) {
    for (const Color& c : kShirtColors) if (w == c.name) a.shirt = w;
    for (const Color& c : kPantsColors) if (w == c.name) a.pants = w;
    for (const Color& c : kAccessories) if (w == c.name) a.accessory = w;
  }
  return a;
}

/// Word-level tokenizer over a closed vocabulary. Encodings are
/// [BOS, words..., EOS, PAD...] of exactly max_length ids.
class Tokenizer {
 public:
  Tokenizer(std::vector<std::string> words, std::size_t max_length) : max_length_(max_length) {
    require(max_length >= 2, ErrorKind::Config, "tokenizer max length must fit BOS and EOS");
    id_to_word_ = {"<pad>", "<bos>", "<eos>"};
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    for (auto& w : words) {
      word_to_id_.emplace(w, id_to_word_.size());
      id_to_word_.push_back(std::move(w));
    }
  }

  /// Vocabulary covering every caption the generator can emit plus the prompt-init phrase.
  static Tokenizer standard(std::size_t max_length) {
    std::vector<std::string> words = split_words(kPromptInitPhrase);
    for (std::string_view t : kCaptionTemplates) {
      for (const std::string& w : split_words(t)) {
        if (w.front() != '{') words.push_back(w);
      }
    }
    for (const Color& c : kShirtColors) words.emplace_back(c.name);
    for (const Color& c : kPantsColors) words.emplace_back(c.name);
    for (const Color& c : kAccessories) words.emplace_back(c.name);
    return Tokenizer(std::move(words), max_length);
  }

  std::size_t vocab_size() const noexcept { return id_to_word_.size(); }
  std::size_t max_length() const noexcept { return max_length_; }

  std::size_t id(std::string_view word) const {
    auto it = word_to_id_.find(std::string(word));
    require(it != word_to_id_.end(), ErrorKind::Vocabulary, "word '" + std::string(word) + "' not in vocabulary");
    return it->second;
  }

  /// Ids of the words only, no specials or padding.
  std::vector<std::size_t> word_ids(std::string_view text) const {
    std::vector<std::size_t> ids;
    for (const std::string& w : split_words(text)) ids.push_back(id(w));
    return ids;
  }

  TokenSequence encode(std::string_view text) const {
    const std::vector<std::size_t> words = word_ids(text);
    require(words.size() + 2 <= max_length_, ErrorKind::Input,
            "text of " + std::to_string(words.size()) + " words exceeds max length " + std::to_string(max_length_));
    TokenSequence out(max_length_, special_tokens::pad);
    out[0] = special_tokens::bos;
    std::copy(words.begin(), words.end(), out.begin() + 1);
    out[words.size() + 1] = special_tokens::eos;
    return out;
  }

  /// Words between BOS and EOS joined by single spaces.
  std::string decode(std::span<const std::size_t> ids) const {
    std::string out;
    for (std::size_t id : ids) {
      require(id < id_to_word_.size(), ErrorKind::Vocabulary, "token id " + std::to_string(id) + " outside vocabulary");
      if (id == special_tokens::bos || id == special_tokens::pad) continue;
      if (id == special_tokens::eos) break;
      if (!out.empty()) out += ' ';
      out += id_to_word_[id];
    }
    return out;
  }

 private:
  std::size_t max_length_;
  std::vector<std::string> id_to_word_;
  std::map<std::string, std::size_t> word_to_id_;
};

enum class Split { Train, Test };

constexpr std::string_view to_string(Split s) { return s == Split::Train ? "train" : "test"; }

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  fail(ErrorKind::Input, "unknown split '" + std::string(s) + "'");
}

struct DatasetConfig {
  std::size_t n_identities = 64;
  std::size_t test_identities = 16;
  std::size_t images_per_id = 4;
  std::size_t captions_per_image = 2;
  double noise_std = 0.1;
  std::size_t image_height = 32;
  std::size_t image_width = 16;
  std::uint64_t seed = 7;

  void validate() const {
    require(n_identities > 0 && images_per_id > 0 && captions_per_image > 0, ErrorKind::Config,
            "dataset counts must be positive");
    require(test_identities <= n_identities, ErrorKind::Config, "more test identities than identities");
    require(noise_std >= 0.0, ErrorKind::Config, "noise std must be non-negative");
    require(image_height >= 4 && image_width >= 2 && image_height % 4 == 0 && image_width % 2 == 0,
            ErrorKind::Config, "image height must be a multiple of 4 and width a multiple of 2");
  }
};

struct IdentitySpec {
  std::size_t id = 0;
  Attributes attributes;
  Split split = Split::Train;
};

struct ImageRecord {
  std::size_t identity = 0;
  Split split = Split::Train;
  std::uint64_t render_seed = 0;  // < 2^53 so it survives any JSON reader
  Attributes attributes;
  std::vector<std::string> captions;
};

/// Generated dataset: identities and the images (with captions) drawn for
/// them. Pixels are not stored; render_image() regenerates them.
struct Dataset {
  DatasetConfig config;
  std::vector<IdentitySpec> identities;
  std::vector<ImageRecord> images;

  std::size_t caption_count() const {
    std::size_t n = 0;
    for (const auto& im : images) n += im.captions.size();
    return n;
  }

  std::vector<std::size_t> image_indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (images[i].split == split) out.push_back(i);
    }
    return out;
  }

  std::vector<std::size_t> identity_ids(Split split) const {
    std::vector<std::size_t> out;
    for (const auto& id : identities) {
      if (id.split == split) out.push_back(id.id);
    }
    return out;
  }
};

inline std::array<double, 3> color_of(std::string_view name) {
  for (const auto* palette : {&kShirtColors, &kPantsColors, &kAccessories}) {
    for (const Color& c : *palette) {
      if (c.name == name) return c.rgb;
    }
  }
  fail(ErrorKind::Vocabulary, "unknown attribute value '" + std::string(name) + "'");
}

struct ImageRegions {
  std::size_t split_row;   // shirt above, pants from here down
  std::size_t corner_rows;
  std::size_t corner_cols;
};

inline ImageRegions regions_for(std::size_t height, std::size_t width) { return {height / 2, height / 4, width / 2}; }

/// Top half: shirt color, bottom half: pants color, top-left quarter-height
/// block: accessory color; plus N(0, noise_std^2) per channel.
inline Tensor render_image(const Attributes& a, std::uint64_t render_seed, const DatasetConfig& cfg) {
  const std::size_t h = cfg.image_height;
  const std::size_t w = cfg.image_width;
  const ImageRegions reg = regions_for(h, w);
  const auto shirt = color_of(a.shirt);
  const auto pants = color_of(a.pants);
  const auto acc = color_of(a.accessory);
  Rng rng(render_seed);
  Tensor img(Shape{h, w, 3});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const bool corner = y < reg.corner_rows && x < reg.corner_cols;
      const auto& base = corner ? acc : (y < reg.split_row ? shirt : pants);
      for (std::size_t c = 0; c < 3; ++c) img[(y * w + x) * 3 + c] = base[c] + rng.normal(0.0, cfg.noise_std);
    }
  }
  return img;
}

inline Tensor render_image(const ImageRecord& r, const DatasetConfig& cfg) {
  return render_image(r.attributes, r.render_seed, cfg);
}

inline Dataset generate_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  std::vector<Attributes> tuples;
  for (const Color& s : kShirtColors) {
    for (const Color& p : kPantsColors) {
      for (const Color& a : kAccessories) tuples.push_back({std::string(s.name), std::string(p.name), std::string(a.name)});
    }
  }
  require(cfg.n_identities <= tuples.size(), ErrorKind::Capacity,
          std::to_string(cfg.n_identities) + " identities requested but only " + std::to_string(tuples.size()) +
              " unique attribute tuples exist");
  Rng pick = Rng::stream(cfg.seed, "dataset.identities");
  pick.shuffle(std::span<Attributes>(tuples));

  Dataset ds;
  ds.config = cfg;
  const std::size_t train_ids = cfg.n_identities - cfg.test_identities;
  for (std::size_t i = 0; i < cfg.n_identities; ++i) {
    ds.identities.push_back({i, tuples[i], i < train_ids ? Split::Train : Split::Test});
  }
  for (const IdentitySpec& id : ds.identities) {
    for (std::size_t k = 0; k < cfg.images_per_id; ++k) {
      ImageRecord r;
      r.identity = id.id;
      r.split = id.split;
      r.attributes = id.attributes;
      r.render_seed = stream_seed(cfg.seed, id.id, k) & ((std::uint64_t{1} << 53) - 1);
      Rng caption_rng(stream_seed(r.render_seed, 0xCA97u));
      std::array<std::size_t, kCaptionTemplates.size()> order{};
      std::iota(order.begin(), order.end(), std::size_t{0});
      caption_rng.shuffle(std::span<std::size_t>(order));
      for (std::size_t c = 0; c < cfg.captions_per_image; ++c) {
        r.captions.push_back(fill_template(kCaptionTemplates[order[c % order.size()]], id.attributes));
      }
      ds.images.push_back(std::move(r));
    }
  }
  return ds;
}

/// One line per caption: {identity, split, render_seed, image, caption, attributes}.
inline void write_manifest(std::ostream& out, const Dataset& ds) {
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const ImageRecord& r = ds.images[i];
    for (const std::string& caption : r.captions) {
      nlohmann::ordered_json row;
      row["identity"] = r.identity;
      row["split"] = to_string(r.split);
      row["render_seed"] = r.render_seed;
      row["image"] = i;
      row["caption"] = caption;
      row["attributes"] = {{"shirt", r.attributes.shirt}, {"pants", r.attributes.pants}, {"accessory", r.attributes.accessory}};
      out << row.dump() << '\n';
    }
  }
}

/// Rebuilds the identity and image tables from a manifest. `cfg` supplies
/// rendering parameters, which the manifest does not carry.
inline Dataset read_manifest(std::istream& in, const DatasetConfig& cfg) {
  Dataset ds;
  ds.config = cfg;
  std::map<std::size_t, IdentitySpec> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto row = nlohmann::json::parse(line);
      const std::size_t image = row.at("image").get<std::size_t>();
      const Attributes a{row.at("attributes").at("shirt").get<std::string>(),
                         row.at("attributes").at("pants").get<std::string>(),
                         row.at("attributes").at("accessory").get<std::string>()};
      const std::size_t identity = row.at("identity").get<std::size_t>();
      const Split split = parse_split(row.at("split").get<std::string>());
      if (image == ds.images.size()) {
        ds.images.push_back({identity, split, row.at("render_seed").get<std::uint64_t>(), a, {}});
      }
      require(image + 1 == ds.images.size(), ErrorKind::Input, "manifest images out of order");
      ds.images.back().captions.push_back(row.at("caption").get<std::string>());
      ids.emplace(identity, IdentitySpec{identity, a, split});
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Input, "manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  for (auto& [_, spec] : ids) ds.identities.push_back(spec);
  return ds;
}

enum class SamplerKind { Uniform, IdentityAware };

struct SamplerConfig {
  SamplerKind kind = SamplerKind::IdentityAware;
  std::size_t instances = 2;  // K, image-text pairs per identity
};

struct Batch {
  std::vector<std::size_t> image_indices;
  std::vector<std::string> captions;
  std::vector<TokenSequence> tokens;
  std::vector<std::size_t> identities;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return identities.size(); }
};

/// Draws one batch from `split`, fully determined by `batch_seed`.
///
/// Identity-aware: B/K distinct identities, each contributing K distinct
/// (image, caption) pairs. Uniform: B distinct images, one random caption each.
inline Batch sample_batch(const Dataset& ds, Split split, std::size_t batch_size, const SamplerConfig& sampler,
                          const Tokenizer& tok, std::uint64_t batch_seed) {
  require(batch_size > 0, ErrorKind::Config, "batch size must be positive");
  Rng rng(batch_seed);
  Batch batch;
  batch.seed = batch_seed;
  auto push = [&](std::size_t image, std::size_t caption) {
    const ImageRecord& r = ds.images[image];
    batch.image_indices.push_back(image);
    batch.captions.push_back(r.captions[caption]);
    batch.tokens.push_back(tok.encode(r.captions[caption]));
    batch.identities.push_back(r.identity);
  };
  if (sampler.kind == SamplerKind::Uniform) {
    std::vector<std::size_t> pool = ds.image_indices(split);
    require(batch_size <= pool.size(), ErrorKind::Capacity,
            "batch of " + std::to_string(batch_size) + " exceeds " + std::to_string(pool.size()) + " images");
    for (std::size_t i = 0; i < batch_size; ++i) {
      std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
      push(pool[i], rng.below(ds.images[pool[i]].captions.size()));
    }
    return batch;
  }
  const std::size_t k = sampler.instances;
  require(k > 0 && batch_size % k == 0, ErrorKind::Config,
          "batch size " + std::to_string(batch_size) + " not divisible by K=" + std::to_string(k));
  std::vector<std::size_t> ids = ds.identity_ids(split);
  const std::size_t p = batch_size / k;
  require(p <= ids.size(), ErrorKind::Capacity,
          std::to_string(p) + " identities per batch but split has " + std::to_string(ids.size()));
  std::map<std::size_t, std::vector<std::pair<std::size_t, std::size_t>>> pairs;
  for (std::size_t i : ds.image_indices(split)) {
    for (std::size_t c = 0; c < ds.images[i].captions.size(); ++c) pairs[ds.images[i].identity].emplace_back(i, c);
  }
  for (std::size_t n = 0; n < p; ++n) {
    std::swap(ids[n], ids[n + rng.below(ids.size() - n)]);
    auto& pool = pairs[ids[n]];
    require(k <= pool.size(), ErrorKind::Capacity,
            "identity " + std::to_string(ids[n]) + " has " + std::to_string(pool.size()) + " pairs, K=" + std::to_string(k));
    for (std::size_t j = 0; j < k; ++j) {
      std::swap(pool[j], pool[j + rng.below(pool.size() - j)]);
      push(pool[j].first, pool[j].second);
    }
  }
  return batch;
}

}  // namespace cskt
