#pragma once

#include <filesystem>

#include "fmn/network.hpp"

namespace fmn {

struct Checkpoint {
  NetworkConfig network;
  int stage = 0;  // last completed training stage
  NetworkParams<float> params;
};

/// Writes one FMNT file per tensor plus manifest.json (config, stage, tensor
/// names, files and shapes) into `dir`, creating it if needed.
void save_checkpoint(const std::filesystem::path& dir, const NetworkConfig& network, const NetworkParams<float>& params,
                     int stage);

/// Rebuilds parameters from a checkpoint directory. Every tensor named by the
/// configured architecture must be present with the recorded shape.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace fmn
