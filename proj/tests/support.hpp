#pragma once

#include <filesystem>
#include <unistd.h>
#include <string>
#include <vector>

#include "fmn/rng.hpp"
#include "fmn/tensor.hpp"

namespace testing_support {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("fmn_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

template <typename T>
fmn::Tensor<T> random_tensor(fmn::Shape shape, fmn::Rng& rng, double lo = -1.0, double hi = 1.0) {
  fmn::Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Values bounded away from zero by `gap`, for probing piecewise ops.
template <typename T>
fmn::Tensor<T> random_away_from_zero(fmn::Shape shape, fmn::Rng& rng, double gap) {
  fmn::Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) {
    const double mag = rng.uniform(gap, 1.0);
    v = static_cast<T>(rng.bernoulli(0.5) ? mag : -mag);
  }
  return t;
}

}  // namespace testing_support

#include "fmn/network.hpp"

namespace testing_support {

/// 3x16x8 input, one narrow block per stage; fast enough for unit tests.
inline fmn::NetworkConfig tiny_network(fmn::MaskTap tap = fmn::MaskTap::kPool1) {
  fmn::NetworkConfig c;
  c.height = 16;
  c.width = 8;
  c.stem_channels = 4;
  c.block_channels = {4, 6, 8, 8};
  c.blocks_per_stage = {1, 1, 1, 1};
  c.feature_dim = 6;
  c.num_identities = 3;
  c.mask_tap = tap;
  return c;
}

}  // namespace testing_support
