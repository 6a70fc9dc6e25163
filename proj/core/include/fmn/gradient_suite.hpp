#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fmn/network.hpp"

namespace fmn {

/// Finite-difference checks of every differentiable op and of the assembled
/// network losses, in single and double precision.
struct GradientSuiteOptions {
  std::uint64_t seed = 0;
  std::size_t trials = 10;
  double float_threshold = 1e-3;
  double double_threshold = 1e-5;
};

struct GradientCaseResult {
  std::string name;       // "conv2d/kernel", "stage2_loss/mask.weight", ...
  std::string precision;  // "float" or "double"
  std::size_t trials = 0;
  double max_error = 0.0;
  double threshold = 0.0;
  std::size_t probes = 0;   // probed entries over all trials
  std::size_t skipped = 0;  // probes that switched a relu or max-pool branch

  /// Below threshold with at least 90% of the probes evaluated.
  bool passed() const { return max_error < threshold && skipped * 10 <= probes; }
};

/// Small architecture used for the whole-network checks: 3x32x16 input, one
/// block per stage, 6-dimensional embeddings, 3 identities.
NetworkConfig gradient_check_network();

std::vector<GradientCaseResult> run_gradient_suite(const GradientSuiteOptions& options = {});

}  // namespace fmn
