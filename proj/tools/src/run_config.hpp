#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fmn/config_json.hpp"

namespace fmn::cli {

struct Paths {
  std::filesystem::path data_dir = "data/synth-reid-16";
  std::filesystem::path out_dir = "runs/synth-reid-16";

  bool operator==(const Paths&) const = default;
};

/// Everything one pipeline run needs. Component seeds are derived from
/// `seed` so that a single number controls generation, initialization and
/// training.
struct RunConfig {
  std::uint64_t seed = 0;
  Paths paths;
  SyntheticConfig dataset;
  NetworkConfig network;
  TrainConfig train;
  ReRankConfig rerank;
  EvalProtocol eval;

  /// Validates every component; throws ContractError naming the field.
  void validate() const;

  std::uint64_t dataset_seed() const { return derive_seed(seed, "dataset"); }
  std::uint64_t init_seed() const { return derive_seed(seed, "init"); }
  std::uint64_t train_seed() const { return derive_seed(seed, "train"); }

  /// The generator settings with the derived seed filled in.
  SyntheticConfig synthetic() const;
  /// The training settings with the derived seed filled in.
  TrainConfig training() const;

  std::filesystem::path manifest_path() const { return paths.data_dir / "manifest.json"; }
  std::filesystem::path checkpoint_dir(int stage) const {
    return paths.out_dir / ("stage" + std::to_string(stage));
  }
  std::filesystem::path metrics_path(int stage) const {
    return paths.out_dir / ("metrics_stage" + std::to_string(stage) + ".tsv");
  }

  bool operator==(const RunConfig&) const = default;
};

json::Json to_json(const RunConfig& c);
RunConfig run_config_from_json(const json::Json& j);

/// Applies "dotted.path=value" to a JSON document. The value is parsed as
/// JSON when possible and taken as a plain string otherwise; intermediate
/// objects are created as needed.
void apply_override(json::Json& doc, const std::string& assignment);

/// Reads a config file (or starts from defaults when `path` is empty),
/// applies overrides in order, then `seed` if given, and validates.
RunConfig load_run_config(const std::optional<std::filesystem::path>& path,
                          const std::vector<std::string>& overrides, std::optional<std::uint64_t> seed);

}  // namespace fmn::cli
