#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "run_config.hpp"

namespace fmn::cli {

enum class TrainStage { kOne, kTwo, kAll };

TrainStage parse_train_stage(const std::string& text);

/// Writes the synthetic dataset into paths.data_dir.
void cmd_generate(const RunConfig& config, std::ostream& out);

/// Stage 1 writes <out_dir>/stage1, stage 2 reads it and writes
/// <out_dir>/stage2; each stage also writes metrics_stage<k>.tsv.
void cmd_train(const RunConfig& config, TrainStage stage, std::ostream& out);

struct ExtractOptions {
  std::optional<std::filesystem::path> checkpoint;  // default <out_dir>/stage2
  std::optional<std::filesystem::path> manifest;    // default <data_dir>/manifest.json
  std::string split = "all";                        // train, query, gallery or all
  std::optional<double> alpha;                      // default network.alpha
  std::filesystem::path out;
  std::optional<std::filesystem::path> grn_out;
  std::optional<std::filesystem::path> lan_out;
  std::optional<std::filesystem::path> heatmaps;
};

void cmd_extract(const RunConfig& config, const ExtractOptions& options, std::ostream& out);

struct EvaluateOptions {
  std::filesystem::path query;
  std::filesystem::path gallery;
  std::optional<ReRankConfig> rerank;
  bool clamp_rerank = false;  // shrink k1/k2 to the universe size first
  std::optional<std::filesystem::path> out;
  std::optional<std::filesystem::path> per_query;
  std::optional<std::filesystem::path> ranking;
};

/// Prints the report JSON; `protocol` comes from the run config and flags.
void cmd_evaluate(const EvalProtocol& protocol, const EvaluateOptions& options, std::ostream& out);

/// One row of the mask-tap ablation.
struct AblationRow {
  MaskTap tap;
  TapGeometry mask;
  double rank1 = 0.0;
  double map_score = 0.0;
};

/// Trains stage 2 once per tap from the same stage-1 checkpoint and seed and
/// evaluates the fused descriptors on the query/gallery split.
std::vector<AblationRow> run_mask_tap_ablation(const RunConfig& config, std::ostream& log);

/// "tap mask_size rank1 mAP" with percentages, tab-separated, header first.
std::string format_ablation(const std::vector<AblationRow>& rows);

/// Prints the table to `out`; per-epoch training lines go to `log`.
void cmd_ablate_mask_tap(const RunConfig& config, const std::optional<std::filesystem::path>& out_path,
                         std::ostream& out, std::ostream& log);

/// Returns true when every case passes.
bool cmd_grad_check(std::uint64_t seed, std::size_t trials, std::ostream& out);

}  // namespace fmn::cli
