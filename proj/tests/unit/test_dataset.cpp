#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "fmn/binary_io.hpp"
#include "fmn/dataset.hpp"
#include "fmn/image_io.hpp"
#include "support.hpp"

namespace {

fmn::SyntheticConfig small_config(std::uint64_t seed) {
  fmn::SyntheticConfig c;
  c.num_identities = 8;
  c.images_per_identity = 10;
  c.num_cameras = 3;
  c.height = 32;
  c.width = 16;
  c.confusable_pairs = 4;
  c.num_train_identities = 4;
  c.seed = seed;
  return c;
}

double pixel_distance(const fmn::RgbImage& a, const fmn::RgbImage& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = static_cast<double>(a.pixels[i]) - static_cast<double>(b.pixels[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Synthetic, SameSeedSameBytes) {
  const auto a = fmn::generate_synthetic(small_config(3));
  const auto b = fmn::generate_synthetic(small_config(3));
  const auto c = fmn::generate_synthetic(small_config(4));
  EXPECT_EQ(a.manifest, b.manifest);
  EXPECT_EQ(a.images, b.images);
  EXPECT_NE(a.images, c.images);
}

TEST(Synthetic, EntryCountsAndShapes) {
  const auto ds = fmn::generate_synthetic(small_config(1));
  ASSERT_EQ(ds.manifest.entries.size(), 80u);
  ASSERT_EQ(ds.images.size(), 80u);
  EXPECT_EQ(ds.manifest.num_identities, 8u);
  EXPECT_EQ(ds.manifest.image_shape, (fmn::Shape{3, 32, 16}));
  std::map<std::uint32_t, std::size_t> per_id;
  for (const auto& e : ds.manifest.entries) ++per_id[e.identity];
  EXPECT_EQ(per_id.size(), 8u);
  for (const auto& [id, n] : per_id) EXPECT_EQ(n, 10u) << id;
  for (const auto& img : ds.images) {
    EXPECT_EQ(img.height, 32u);
    EXPECT_EQ(img.width, 16u);
  }
}

TEST(Synthetic, IdentitiesAreCloserToThemselves) {
  const auto ds = fmn::generate_synthetic(small_config(2));
  const auto& e = ds.manifest.entries;
  double intra = 0, inter = 0;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    for (std::size_t j = i + 1; j < e.size(); ++j) {
      const double d = pixel_distance(ds.images[i], ds.images[j]);
      if (e[i].identity == e[j].identity) {
        intra += d;
        ++n_intra;
      } else if (e[i].identity / 2 != e[j].identity / 2) {
        // Members of a confusable pair share global cues; compare against
        // unrelated identities.
        inter += d;
        ++n_inter;
      }
    }
  }
  EXPECT_LT(intra / static_cast<double>(n_intra), inter / static_cast<double>(n_inter));
}

TEST(Synthetic, SplitsAreDisjointAndQueriesHaveCrossCameraMatches) {
  const auto ds = fmn::generate_synthetic(fmn::SyntheticConfig::synth_reid_16(5));
  const auto& m = ds.manifest;
  std::set<std::uint32_t> train_ids, test_ids;
  for (const auto& e : m.entries) (e.split == fmn::Split::kTrain ? train_ids : test_ids).insert(e.identity);
  for (auto id : train_ids) EXPECT_EQ(test_ids.count(id), 0u) << id;
  EXPECT_EQ(train_ids.size(), 8u);
  EXPECT_EQ(test_ids.size(), 8u);
  const auto queries = fmn::entries_in(m, fmn::Split::kQuery);
  const auto gallery = fmn::entries_in(m, fmn::Split::kGallery);
  EXPECT_FALSE(queries.empty());
  for (std::size_t q : queries) {
    bool found = false;
    for (std::size_t g : gallery) {
      found |= m.entries[g].identity == m.entries[q].identity && m.entries[g].camera != m.entries[q].camera;
    }
    EXPECT_TRUE(found) << m.entries[q].image;
  }
}

TEST(Synthetic, TooFewImagesPerIdentityIsContractError) {
  auto c = small_config(1);
  c.images_per_identity = 1;
  try {
    fmn::generate_synthetic(c);
    FAIL() << "expected ContractError";
  } catch (const fmn::ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("images_per_identity"), std::string::npos);
  }
}

TEST(DatasetFiles, WriteLoadRoundTripIsExact) {
  testing_support::TempDir dir("dataset");
  const auto ds = fmn::generate_synthetic(small_config(6));
  const auto manifest_path = fmn::write_dataset(ds, dir.path());
  const auto loaded = fmn::load_dataset(manifest_path);
  EXPECT_EQ(loaded.manifest, ds.manifest);
  ASSERT_EQ(loaded.images.size(), ds.images.size());
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const auto expected = fmn::image_to_tensor(ds.images[i]);
    EXPECT_EQ(loaded.images[i].storage(), expected.storage()) << i;
    EXPECT_EQ(fmn::read_ppm(dir / ds.manifest.entries[i].image), ds.images[i]);
  }
  // Writing again gives identical files.
  testing_support::TempDir again("dataset2");
  fmn::write_dataset(ds, again.path());
  EXPECT_EQ(slurp(dir / "manifest.json"), slurp(again / "manifest.json"));
  EXPECT_EQ(slurp(dir / ds.manifest.entries[7].image), slurp(again / ds.manifest.entries[7].image));
}

TEST(DatasetFiles, MissingImageNamesThePath) {
  testing_support::TempDir dir("dataset_missing");
  const auto ds = fmn::generate_synthetic(small_config(6));
  const auto manifest_path = fmn::write_dataset(ds, dir.path());
  const auto victim = dir / ds.manifest.entries[3].image;
  std::filesystem::remove(victim);
  try {
    fmn::load_dataset(manifest_path);
    FAIL() << "expected IoError";
  } catch (const fmn::IoError& e) {
    EXPECT_NE(std::string(e.what()).find(victim.string()), std::string::npos) << e.what();
  }
}

TEST(Manifest, SyntaxErrorCarriesLineNumber) {
  const std::string text = "{\n  \"num_identities\": 2,\n  \"entries\": [,]\n}\n";
  try {
    fmn::manifest_from_json(text, "bad.json");
    FAIL() << "expected ParseError";
  } catch (const fmn::ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.json:3"), std::string::npos) << e.what();
  }
}

TEST(Manifest, StructuralErrorsAreParseErrors) {
  EXPECT_THROW(fmn::manifest_from_json("{\"num_identities\": 2, \"image_shape\": [3, 4], \"entries\": []}"),
               fmn::ParseError);
  EXPECT_THROW(fmn::manifest_from_json(
                   "{\"num_identities\": 2, \"image_shape\": [3, 16, 8], \"entries\": "
                   "[{\"image\": \"a.ppm\", \"identity\": 0, \"camera\": 0, \"split\": \"validation\"}]}"),
               fmn::ParseError);
  EXPECT_THROW(fmn::parse_split("test"), fmn::ParseError);
  EXPECT_EQ(fmn::parse_split("gallery"), fmn::Split::kGallery);
}

TEST(Manifest, JsonRoundTrip) {
  const auto m = fmn::generate_synthetic(small_config(9)).manifest;
  EXPECT_EQ(fmn::manifest_from_json(fmn::manifest_to_json(m)), m);
}

TEST(Labels, SparseIdentitiesAreRemappedDensely) {
  const std::vector<std::uint32_t> ids{14, 3, 9, 3, 14};
  EXPECT_EQ(fmn::dense_label_map(ids), (std::vector<std::uint32_t>{3, 9, 14}));

  fmn::LoadedDataset data;
  for (std::uint32_t id : ids) {
    data.manifest.entries.push_back({"x.ppm", id, 0, fmn::Split::kTrain});
    data.images.emplace_back(fmn::Shape{3, 2, 2});
  }
  data.manifest.entries.push_back({"y.ppm", 20, 1, fmn::Split::kQuery});
  data.images.emplace_back(fmn::Shape{3, 2, 2});
  std::vector<std::uint32_t> map;
  const auto set = fmn::make_training_set(data, &map);
  EXPECT_EQ(set.num_classes, 3u);
  EXPECT_EQ(set.labels, (std::vector<std::size_t>{2, 0, 1, 0, 2}));
  EXPECT_EQ(map, (std::vector<std::uint32_t>{3, 9, 14}));
}

TEST(ImageIo, NetpbmRoundTrip) {
  fmn::Rng rng(4);
  fmn::RgbImage rgb{5, 3, std::vector<std::uint8_t>(45)};
  for (auto& p : rgb.pixels) p = static_cast<std::uint8_t>(rng.below(256));
  const auto bytes = fmn::encode_ppm(rgb);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 2), "P6");
  EXPECT_EQ(fmn::decode_ppm(bytes), rgb);

  fmn::GrayImage gray{2, 4, {0, 1, 2, 3, 252, 253, 254, 255}};
  EXPECT_EQ(fmn::decode_pgm(fmn::encode_pgm(gray)), gray);

  auto truncated = bytes;
  truncated.resize(truncated.size() - 1);
  EXPECT_THROW(fmn::decode_ppm(truncated), fmn::ParseError);
}

TEST(ImageIo, TensorScaling) {
  const fmn::RgbImage img{1, 2, {255, 0, 51, 0, 255, 102}};
  const auto t = fmn::image_to_tensor(img);
  EXPECT_EQ(t.shape(), (fmn::Shape{3, 1, 2}));
  EXPECT_EQ(t.storage(), (std::vector<float>{1.0f, 0.0f, 0.0f, 1.0f, 0.2f, 0.4f}));
}
