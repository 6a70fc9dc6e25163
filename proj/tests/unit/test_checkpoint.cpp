#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>

#include "fmn/checkpoint.hpp"
#include "support.hpp"

namespace {

std::map<std::string, std::vector<float>> snapshot(const fmn::NetworkParams<float>& p) {
  std::map<std::string, std::vector<float>> out;
  fmn::visit_tensors(p, [&](const std::string& name, const fmn::Tensor<float>& t, fmn::ParamGroup, bool) {
    out[name] = t.storage();
  });
  return out;
}

bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

nlohmann::ordered_json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  return nlohmann::ordered_json::parse(in);
}

void write_json(const std::filesystem::path& p, const nlohmann::ordered_json& j) { std::ofstream(p) << j.dump(2); }

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  testing_support::TempDir dir("ckpt");
  const auto net = testing_support::tiny_network(fmn::MaskTap::kRes3);
  auto params = fmn::init_params<float>(net, 31);
  // Perturb running statistics so they are not at their initial values.
  params.grn.stem.stats.running_mean[0] = -0.123456f;
  fmn::save_checkpoint(dir.path(), net, params, 2);

  const auto ckpt = fmn::load_checkpoint(dir.path());
  EXPECT_EQ(ckpt.stage, 2);
  EXPECT_EQ(ckpt.network, net);
  const auto before = snapshot(params), after = snapshot(ckpt.params);
  ASSERT_EQ(before.size(), after.size());
  for (const auto& [name, values] : before) {
    ASSERT_TRUE(after.count(name)) << name;
    EXPECT_TRUE(same_bits(values, after.at(name))) << name;
  }
  for (auto g : {fmn::ParamGroup::kGrn, fmn::ParamGroup::kMask, fmn::ParamGroup::kLan})
    EXPECT_EQ(fmn::hash_group(params, g), fmn::hash_group(ckpt.params, g));
}

TEST(Checkpoint, MissingDirectoryIsIoError) {
  testing_support::TempDir dir("ckpt_none");
  EXPECT_THROW(fmn::load_checkpoint(dir / "nothing"), fmn::IoError);
}

TEST(Checkpoint, TensorMissingFromManifestIsRejected) {
  testing_support::TempDir dir("ckpt_missing");
  const auto net = testing_support::tiny_network();
  fmn::save_checkpoint(dir.path(), net, fmn::init_params<float>(net, 1), 1);
  auto j = read_json(dir / "manifest.json");
  const std::string dropped = j["tensors"][3]["name"];
  j["tensors"].erase(3);
  write_json(dir / "manifest.json", j);
  try {
    fmn::load_checkpoint(dir.path());
    FAIL() << "expected ParseError";
  } catch (const fmn::ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(dropped), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, DeletedTensorFileIsIoError) {
  testing_support::TempDir dir("ckpt_file");
  const auto net = testing_support::tiny_network();
  fmn::save_checkpoint(dir.path(), net, fmn::init_params<float>(net, 1), 1);
  const auto j = read_json(dir / "manifest.json");
  std::filesystem::remove(dir / j["tensors"][0]["file"].get<std::string>());
  EXPECT_THROW(fmn::load_checkpoint(dir.path()), fmn::IoError);
}

TEST(Checkpoint, ShapeDisagreementIsDimensionError) {
  testing_support::TempDir dir("ckpt_shape");
  const auto net = testing_support::tiny_network();
  fmn::save_checkpoint(dir.path(), net, fmn::init_params<float>(net, 1), 1);
  auto j = read_json(dir / "manifest.json");
  j["network"]["feature_dim"] = net.feature_dim + 1;
  write_json(dir / "manifest.json", j);
  EXPECT_THROW(fmn::load_checkpoint(dir.path()), fmn::DimensionError);
}

TEST(Checkpoint, UnknownManifestKeyIsParseError) {
  testing_support::TempDir dir("ckpt_key");
  const auto net = testing_support::tiny_network();
  fmn::save_checkpoint(dir.path(), net, fmn::init_params<float>(net, 1), 1);
  auto j = read_json(dir / "manifest.json");
  j["comment"] = "hand edited";
  write_json(dir / "manifest.json", j);
  EXPECT_THROW(fmn::load_checkpoint(dir.path()), fmn::ParseError);
}
