#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fmn/autograd.hpp"
#include "fmn/image_io.hpp"
#include "fmn/tensor.hpp"

namespace fmn {

/// Backbone layer whose output is re-weighted by the predicted mask.
enum class MaskTap { kPool1, kRes2, kRes3, kRes4 };

inline constexpr MaskTap kAllMaskTaps[] = {MaskTap::kPool1, MaskTap::kRes2, MaskTap::kRes3, MaskTap::kRes4};

std::string_view to_string(MaskTap tap);
MaskTap parse_mask_tap(std::string_view name);

/// Architecture hyper-parameters shared by the global branch, the mask
/// predictor and the locally attentive branch.
///
/// The backbone is: stem conv(k, stride) + BN + ReLU, max-pool (Pool1), then
/// four residual stages (Res2..Res5). The first stage keeps the resolution,
/// every later stage halves it. Each stage holds `blocks_per_stage[i]` basic
/// blocks with `block_channels[i]` channels.
struct NetworkConfig {
  std::size_t in_channels = 3;
  std::size_t height = 64;
  std::size_t width = 32;
  std::size_t stem_channels = 16;
  std::size_t stem_kernel = 3;
  std::size_t stem_stride = 1;
  std::size_t pool_window = 2;
  std::size_t pool_stride = 2;
  std::vector<std::size_t> block_channels{16, 32, 64, 128};
  std::vector<std::size_t> blocks_per_stage{2, 2, 2, 2};
  std::size_t feature_dim = 128;
  std::size_t num_identities = 8;
  MaskTap mask_tap = MaskTap::kPool1;
  double alpha = 0.5;

  /// Throws ContractError naming the offending field.
  void validate() const;
  Shape input_shape() const { return {in_channels, height, width}; }

  bool operator==(const NetworkConfig&) const = default;
};

struct TapGeometry {
  std::size_t channels;
  std::size_t height;
  std::size_t width;
};

/// Shape of the backbone activation at `tap`, from the conv/pool formulas.
TapGeometry tap_geometry(const NetworkConfig& config, MaskTap tap);
inline TapGeometry tap_geometry(const NetworkConfig& config) { return tap_geometry(config, config.mask_tap); }

/// Index of the first residual stage that follows `tap`.
std::size_t first_stage_after(MaskTap tap);

// ---- parameters ---------------------------------------------------------------

template <typename T>
struct ConvBn {
  Tensor<T> weight;  // [out, in, k, k], no bias (BN follows)
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormStats<T> stats;
  std::size_t stride = 1;
  std::size_t pad = 0;
};

template <typename T>
struct ResidualBlock {
  ConvBn<T> conv1;
  ConvBn<T> conv2;
  std::optional<ConvBn<T>> projection;  // 1x1 shortcut when shape changes
};

template <typename T>
struct ResidualStage {
  std::vector<ResidualBlock<T>> blocks;
};

/// Global pooling is followed by an embedding FC (the branch descriptor) and
/// the identity classifier.
template <typename T>
struct Head {
  Tensor<T> embed_weight;       // [channels, feature_dim]
  Tensor<T> embed_bias;         // [feature_dim]
  Tensor<T> classifier_weight;  // [feature_dim, num_identities]
  Tensor<T> classifier_bias;    // [num_identities]
};

template <typename T>
struct GrnParams {
  ConvBn<T> stem;
  std::vector<ResidualStage<T>> stages;
  Head<T> head;
};

template <typename T>
struct LanParams {
  std::size_t first_stage = 0;
  std::vector<ResidualStage<T>> stages;  // backbone stages first_stage..3
  Head<T> head;
};

template <typename T>
struct NetworkParams {
  GrnParams<T> grn;
  Tensor<T> mask_weight;  // [feature_dim, h*w] of the mask tap
  LanParams<T> lan;
};

enum class ParamGroup { kGrn, kMask, kLan };

/// Random initialization. The global branch is drawn first and the locally
/// attentive branch starts as a copy of the same initial weights for the
/// stages it replicates, so both branches share one starting point. Mask
/// weights are small Gaussian draws.
template <typename T>
NetworkParams<T> init_params(const NetworkConfig& config, std::uint64_t seed);

/// Visits every tensor with a stable dotted name. `trainable` is false for
/// batch-norm running statistics.
template <typename P, typename F>
void visit_tensors(P& params, F&& fn);

/// Sets requires_grad on the trainable tensors of one group.
template <typename T>
void set_trainable(NetworkParams<T>& params, ParamGroup group, bool flag);

/// Trainable tensors of the requested groups, in visit order.
template <typename T>
std::vector<Tensor<T>*> trainable_tensors(NetworkParams<T>& params, std::initializer_list<ParamGroup> groups);

/// FNV-1a over the bytes of every tensor in a group (running stats included).
template <typename T>
std::uint64_t hash_group(const NetworkParams<T>& params, ParamGroup group);

template <typename U, typename T>
NetworkParams<U> cast_params(const NetworkParams<T>& params);

// ---- forward pass (graph level) -------------------------------------------------

template <typename T>
struct GrnOutputs {
  Var<T> local_f;    // activation at the mask tap
  Var<T> global_g;   // embedding
  Var<T> logits_g;
  Var<T> final_map;  // last residual stage, for heatmaps
};

template <typename T>
struct LanOutputs {
  Var<T> local_l;
  Var<T> logits_l;
  Var<T> final_map;
};

template <typename T>
struct FmnOutputs {
  GrnOutputs<T> grn;
  Var<T> transitional_mask;
  Var<T> mask;
  Var<T> masked_o;
  LanOutputs<T> lan;
};

/// images: [3,H,W] or [b,3,H,W] matching config.input_shape().
template <typename T>
GrnOutputs<T> grn_forward(Graph<T>& graph, Var<T> images, GrnParams<T>& params, const NetworkConfig& config,
                          Mode mode);

/// ReLU(W^T g) with no bias. g is [m] or [b,m]; weight is [m, n'].
template <typename T>
Var<T> compute_transitional_mask(Var<T> global_g, Var<T> weight);

/// Column-major placement of [n'] (or [b,n']) into [h,w] (or [b,h,w]),
/// followed by element-wise exp: k -> (k mod h, k / h), zero-based.
template <typename T>
Var<T> reshape_exp_mask(Var<T> m_prime, std::size_t height, std::size_t width);

/// Every channel of local_f multiplied by the same spatial mask.
template <typename T>
Var<T> apply_mask(Var<T> local_f, Var<T> mask);

template <typename T>
LanOutputs<T> lan_forward(Graph<T>& graph, Var<T> masked_o, LanParams<T>& params, const NetworkConfig& config,
                          Mode mode);

template <typename T>
FmnOutputs<T> fmn_forward(Graph<T>& graph, Var<T> images, NetworkParams<T>& params, const NetworkConfig& config,
                          Mode grn_mode, Mode lan_mode);

// ---- forward pass (value level) ---------------------------------------------------

/// Strictly positive h x w spatial weights, row-major, zero-based indexing.
template <typename T>
struct FeatureMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> values;

  T at(std::size_t i, std::size_t j) const { return values.at(i * width + j); }
};

template <typename T>
Tensor<T> compute_transitional_mask(const Tensor<T>& global_g, const Tensor<T>& weight);

template <typename T>
FeatureMask<T> reshape_exp_mask(const Tensor<T>& m_prime, std::size_t height, std::size_t width);

template <typename T>
Tensor<T> apply_mask(const Tensor<T>& local_f, const FeatureMask<T>& mask);

template <typename T>
struct BranchOutputs {
  Tensor<T> local_f;
  Tensor<T> global_g;
  Tensor<T> logits_g;
  FeatureMask<T> mask;
  Tensor<T> masked_o;
  Tensor<T> local_branch_l;
  Tensor<T> logits_l;
  Tensor<T> grn_map;
  Tensor<T> lan_map;
};

/// Runs the full network on a single [3,H,W] image (or a batch) and copies
/// out every intermediate. For a single image the batch axis is dropped.
template <typename T>
BranchOutputs<T> fmn_forward(const Tensor<T>& images, NetworkParams<T>& params, const NetworkConfig& config,
                             Mode mode);

/// Channel-mean of a [c,h,w] map, min-max scaled to 0..255 and upsampled by
/// nearest neighbour. A constant map yields an all-zero image.
GrayImage export_heatmap(const Tensor<float>& feature_map, std::size_t out_height, std::size_t out_width);

/// Eval-mode branch embeddings for [3,H,W] images; entry i belongs to
/// images[i]. Batching does not change the values.
struct Embeddings {
  std::vector<std::vector<float>> global;
  std::vector<std::vector<float>> local;
};

Embeddings extract_embeddings(std::span<const Tensor<float>> images, NetworkParams<float>& params,
                              const NetworkConfig& config, std::size_t batch_size = 16);

/// Stacks equally shaped tensors along a new leading axis.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>* const> items);

// ---- visitor implementation ---------------------------------------------------------

namespace detail {

template <typename CB, typename F>
void visit_conv_bn(CB& cb, const std::string& prefix, ParamGroup group, F& fn) {
  fn(prefix + ".weight", cb.weight, group, true);
  fn(prefix + ".bn.gamma", cb.gamma, group, true);
  fn(prefix + ".bn.beta", cb.beta, group, true);
  fn(prefix + ".bn.running_mean", cb.stats.running_mean, group, false);
  fn(prefix + ".bn.running_var", cb.stats.running_var, group, false);
}

template <typename S, typename F>
void visit_stages(S& stages, std::size_t first_stage, const std::string& prefix, ParamGroup group, F& fn) {
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string stage_name = prefix + ".res" + std::to_string(first_stage + s + 2);
    for (std::size_t b = 0; b < stages[s].blocks.size(); ++b) {
      auto& block = stages[s].blocks[b];
      const std::string block_name = stage_name + "." + std::to_string(b);
      visit_conv_bn(block.conv1, block_name + ".conv1", group, fn);
      visit_conv_bn(block.conv2, block_name + ".conv2", group, fn);
      if (block.projection) visit_conv_bn(*block.projection, block_name + ".proj", group, fn);
    }
  }
}

template <typename H, typename F>
void visit_head(H& head, const std::string& prefix, ParamGroup group, F& fn) {
  fn(prefix + ".embed.weight", head.embed_weight, group, true);
  fn(prefix + ".embed.bias", head.embed_bias, group, true);
  fn(prefix + ".classifier.weight", head.classifier_weight, group, true);
  fn(prefix + ".classifier.bias", head.classifier_bias, group, true);
}

}  // namespace detail

template <typename P, typename F>
void visit_tensors(P& params, F&& fn) {
  detail::visit_conv_bn(params.grn.stem, "grn.stem", ParamGroup::kGrn, fn);
  detail::visit_stages(params.grn.stages, 0, "grn", ParamGroup::kGrn, fn);
  detail::visit_head(params.grn.head, "grn", ParamGroup::kGrn, fn);
  fn(std::string("mask.weight"), params.mask_weight, ParamGroup::kMask, true);
  detail::visit_stages(params.lan.stages, params.lan.first_stage, "lan", ParamGroup::kLan, fn);
  detail::visit_head(params.lan.head, "lan", ParamGroup::kLan, fn);
}

}  // namespace fmn
