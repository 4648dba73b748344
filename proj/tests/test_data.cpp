#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cskt/data.hpp"
#include "cskt/sdm_loss.hpp"
#include "support.hpp"

using namespace cskt;
using cskt::test::error_kind;

namespace {

DatasetConfig small_data(std::size_t n = 32, std::size_t test = 8) {
  DatasetConfig c;
  c.n_identities = n;
  c.test_identities = test;
  return c;
}

std::string manifest_text(const Dataset& ds) {
  std::ostringstream out;
  write_manifest(out, ds);
  return out.str();
}

}  // namespace

TEST(Dataset, Counts) {
  const Dataset ds = generate_dataset(small_data());
  EXPECT_EQ(ds.images.size(), 128u);
  EXPECT_EQ(ds.caption_count(), 256u);
  EXPECT_EQ(ds.identity_ids(Split::Test).size(), 8u);
  EXPECT_EQ(ds.image_indices(Split::Train).size(), 96u);
}

TEST(Dataset, AttributeTuplesAreUnique) {
  const Dataset ds = generate_dataset(small_data(64, 16));
  std::set<Attributes> seen;
  for (const auto& id : ds.identities) EXPECT_TRUE(seen.insert(id.attributes).second);
}

TEST(Dataset, CapacityAndConfigErrors) {
  EXPECT_EQ(error_kind([] { generate_dataset(small_data(65, 1)); }), ErrorKind::Capacity);
  EXPECT_EQ(error_kind([] { generate_dataset(small_data(4, 5)); }), ErrorKind::Config);
  DatasetConfig noisy = small_data();
  noisy.noise_std = -1.0;
  EXPECT_EQ(error_kind([&] { generate_dataset(noisy); }), ErrorKind::Config);
}

TEST(Manifest, ByteIdenticalAcrossRuns) {
  EXPECT_EQ(manifest_text(generate_dataset(small_data())), manifest_text(generate_dataset(small_data())));
  DatasetConfig other = small_data();
  other.seed = 8;
  EXPECT_NE(manifest_text(generate_dataset(small_data())), manifest_text(generate_dataset(other)));
}

TEST(Manifest, RecordFields) {
  const Dataset ds = generate_dataset(small_data(4, 1));
  std::istringstream in(manifest_text(ds));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    const auto row = nlohmann::json::parse(line);
    for (const char* key : {"identity", "split", "render_seed", "caption", "attributes"}) {
      EXPECT_TRUE(row.contains(key)) << key;
    }
    EXPECT_LT(row["render_seed"].get<std::uint64_t>(), std::uint64_t{1} << 53);
    ++lines;
  }
  EXPECT_EQ(lines, ds.caption_count());
}

TEST(Manifest, RoundTripRegeneratesImages) {
  const DatasetConfig cfg = small_data();
  const Dataset ds = generate_dataset(cfg);
  std::istringstream in(manifest_text(ds));
  const Dataset back = read_manifest(in, cfg);
  EXPECT_EQ(manifest_text(back), manifest_text(ds));
  ASSERT_EQ(back.images.size(), ds.images.size());
  for (std::size_t i = 0; i < ds.images.size(); i += 17) {
    EXPECT_EQ(render_image(back.images[i], cfg).values(), render_image(ds.images[i], cfg).values());
  }
  EXPECT_EQ(back.identity_ids(Split::Test), ds.identity_ids(Split::Test));
}

TEST(Manifest, MalformedLinesAreInputErrors) {
  std::istringstream bad("{\"identity\": 0}\n");
  EXPECT_EQ(error_kind([&] { read_manifest(bad, small_data()); }), ErrorKind::Input);
  std::istringstream garbage("not json\n");
  EXPECT_EQ(error_kind([&] { read_manifest(garbage, small_data()); }), ErrorKind::Input);
}

TEST(Render, RegionMeansMatchAttributeColors) {
  DatasetConfig cfg = small_data();
  cfg.image_height = 64;
  cfg.image_width = 32;
  cfg.noise_std = 0.1;
  const Dataset ds = generate_dataset(cfg);
  const ImageRegions reg = regions_for(cfg.image_height, cfg.image_width);
  for (std::size_t i = 0; i < ds.images.size(); i += 9) {
    const ImageRecord& r = ds.images[i];
    const Tensor img = render_image(r, cfg);
    std::array<std::array<double, 3>, 3> sums{};
    std::array<double, 3> counts{};
    for (std::size_t y = 0; y < cfg.image_height; ++y) {
      for (std::size_t x = 0; x < cfg.image_width; ++x) {
        const std::size_t region = y < reg.corner_rows && x < reg.corner_cols ? 2 : (y < reg.split_row ? 0 : 1);
        counts[region] += 1.0;
        for (std::size_t c = 0; c < 3; ++c) sums[region][c] += img[(y * cfg.image_width + x) * 3 + c];
      }
    }
    const std::array<std::string, 3> names{r.attributes.shirt, r.attributes.pants, r.attributes.accessory};
    for (std::size_t region = 0; region < 3; ++region) {
      const auto rgb = color_of(names[region]);
      const double bound = 5.0 * cfg.noise_std / std::sqrt(counts[region]);
      for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_NEAR(sums[region][c] / counts[region], rgb[c], bound) << "image " << i << " region " << region;
      }
    }
  }
}

TEST(Render, ZeroNoiseIsExactPalette) {
  DatasetConfig cfg = small_data(1, 0);
  cfg.noise_std = 0.0;
  const Dataset ds = generate_dataset(cfg);
  const Tensor img = render_image(ds.images[0], cfg);
  const auto shirt = color_of(ds.images[0].attributes.shirt);
  const std::size_t x = cfg.image_width - 1;
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(img[(0 * cfg.image_width + x) * 3 + c], shirt[c]);
}

TEST(Captions, RecoverAttributesAndAreTokenizable) {
  const Dataset ds = generate_dataset(small_data(64, 16));
  const Tokenizer tok = Tokenizer::standard(16);
  std::set<std::string> variants;
  for (const ImageRecord& r : ds.images) {
    for (const std::string& caption : r.captions) {
      EXPECT_EQ(parse_caption(caption), r.attributes) << caption;
      const TokenSequence ids = tok.encode(caption);
      EXPECT_EQ(tok.decode(ids), caption);
      variants.insert(caption);
    }
    EXPECT_NE(r.captions[0], r.captions[1]);
  }
  EXPECT_GT(variants.size(), ds.identities.size() * 2);
}

TEST(Tokenizer, LayoutAndRoundTrip) {
  const Tokenizer tok = Tokenizer::standard(16);
  const TokenSequence ids = tok.encode("a person with a hat");
  ASSERT_EQ(ids.size(), 16u);
  EXPECT_EQ(ids[0], special_tokens::bos);
  EXPECT_EQ(ids[6], special_tokens::eos);
  for (std::size_t i = 7; i < 16; ++i) EXPECT_EQ(ids[i], special_tokens::pad);
  EXPECT_EQ(tok.encode(tok.decode(ids)), ids);
  const std::vector<std::size_t> words = tok.word_ids("blue shirt");
  EXPECT_EQ(tok.word_ids(tok.decode(words)), words);
}

TEST(Tokenizer, Errors) {
  const Tokenizer tok = Tokenizer::standard(6);
  EXPECT_EQ(error_kind([&] { tok.encode("a zebra"); }), ErrorKind::Vocabulary);
  EXPECT_EQ(error_kind([&] { tok.encode("a person with a hat"); }), ErrorKind::Input);
  const std::vector<std::size_t> bad{1, 999, 2};
  EXPECT_EQ(error_kind([&] { tok.decode(bad); }), ErrorKind::Vocabulary);
  EXPECT_EQ(error_kind([] { Tokenizer({"x"}, 1); }), ErrorKind::Config);
}

TEST(Sampler, IdentityAwareGroups) {
  const Dataset ds = generate_dataset(small_data());
  const Tokenizer tok = Tokenizer::standard(16);
  const SamplerConfig sampler{SamplerKind::IdentityAware, 2};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Batch b = sample_batch(ds, Split::Train, 8, sampler, tok, seed);
    ASSERT_EQ(b.size(), 8u);
    std::map<std::size_t, std::size_t> per_id;
    std::set<std::pair<std::size_t, std::string>> pairs;
    for (std::size_t i = 0; i < 8; ++i) {
      ++per_id[b.identities[i]];
      EXPECT_EQ(ds.images[b.image_indices[i]].identity, b.identities[i]);
      EXPECT_EQ(ds.images[b.image_indices[i]].split, Split::Train);
      EXPECT_EQ(tok.decode(b.tokens[i]), b.captions[i]);
      pairs.emplace(b.image_indices[i], b.captions[i]);
    }
    EXPECT_EQ(per_id.size(), 4u);
    for (const auto& [_, n] : per_id) EXPECT_EQ(n, 2u);
    EXPECT_EQ(pairs.size(), 8u);
    const Tensor y = match_matrix(b.identities, b.identities);
    for (std::size_t i = 0; i < 8; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < 8; ++j) row += y.at(i, j);
      EXPECT_EQ(row, 2.0);
    }
  }
}

TEST(Sampler, UniformIsReproducible) {
  const Dataset ds = generate_dataset(small_data());
  const Tokenizer tok = Tokenizer::standard(16);
  const SamplerConfig sampler{SamplerKind::Uniform, 1};
  const Batch a = sample_batch(ds, Split::Train, 12, sampler, tok, 99);
  const Batch b = sample_batch(ds, Split::Train, 12, sampler, tok, 99);
  const Batch c = sample_batch(ds, Split::Train, 12, sampler, tok, 100);
  EXPECT_EQ(a.image_indices, b.image_indices);
  EXPECT_EQ(a.captions, b.captions);
  EXPECT_NE(a.image_indices, c.image_indices);
  EXPECT_EQ(std::set<std::size_t>(a.image_indices.begin(), a.image_indices.end()).size(), 12u);
  const Tensor y = match_matrix(a.identities, a.identities);
  for (std::size_t i = 0; i < 12; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 12; ++j) row += y.at(i, j);
    EXPECT_GE(row, 1.0);
  }
}

TEST(Sampler, Errors) {
  const Dataset ds = generate_dataset(small_data());
  const Tokenizer tok = Tokenizer::standard(16);
  EXPECT_EQ(error_kind([&] { sample_batch(ds, Split::Train, 7, {SamplerKind::IdentityAware, 2}, tok, 1); }),
            ErrorKind::Config);
  EXPECT_EQ(error_kind([&] { sample_batch(ds, Split::Test, 18, {SamplerKind::IdentityAware, 2}, tok, 1); }),
            ErrorKind::Capacity);
  EXPECT_EQ(error_kind([&] { sample_batch(ds, Split::Train, 8, {SamplerKind::IdentityAware, 9}, tok, 1); }),
            ErrorKind::Config);
  // Each identity has 4 images x 2 captions = 8 pairs.
  EXPECT_EQ(error_kind([&] { sample_batch(ds, Split::Train, 9, {SamplerKind::IdentityAware, 9}, tok, 1); }),
            ErrorKind::Capacity);
  EXPECT_EQ(error_kind([&] { sample_batch(ds, Split::Test, 33, {SamplerKind::Uniform, 1}, tok, 1); }),
            ErrorKind::Capacity);
  EXPECT_EQ(error_kind([] { parse_split("val"); }), ErrorKind::Input);
}
