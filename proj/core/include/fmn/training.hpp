#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fmn/autograd.hpp"
#include "fmn/network.hpp"
#include "fmn/rng.hpp"

namespace fmn {

struct AugmentConfig {
  double flip_prob = 0.5;
  std::size_t crop_pad = 4;

  bool operator==(const AugmentConfig&) const = default;
};

/// Optimization schedule for both stages. Epoch numbers are 1-based; the
/// learning rate is multiplied by lr_drop_factor for every epoch after the
/// stage's drop epoch.
struct TrainConfig {
  double lr_initial = 0.01;
  std::size_t lr_drop_epoch = 20;
  std::size_t lr_drop_epoch_stage2 = 35;
  double lr_drop_factor = 0.1;
  double momentum = 0.9;
  std::size_t epochs_stage1 = 60;
  std::size_t epochs_stage2 = 60;
  std::size_t batch_size = 32;
  double margin = 0.2;
  std::uint64_t seed = 0;
  AugmentConfig augmentation;
  /// Stage 1 stops early once an epoch's training accuracy reaches this
  /// value. Zero disables early stopping.
  double stage1_target_accuracy = 0.0;

  void validate() const;
  double learning_rate(int stage, std::size_t epoch) const;

  bool operator==(const TrainConfig&) const = default;
};

/// In-memory training split: images in [0,1] with dense labels.
struct TrainingSet {
  std::vector<Tensor<float>> images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  int stage = 0;
  double mean_ce = 0.0;
  double mean_rank_loss = 0.0;
  double train_accuracy = 0.0;
  double lr = 0.0;
};

/// "epoch stage mean_ce mean_rank_loss train_accuracy lr", tab-separated,
/// newline-terminated.
std::string format_metrics_line(const EpochMetrics& m);

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Per-tensor SGD momentum buffers, created on the first step.
template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> velocity;
};

/// v <- momentum * v + grad; param <- param - lr * v. Tensors without
/// requires_grad are skipped and keep their velocity untouched.
template <typename T>
void sgd_step(std::span<Tensor<T>* const> params, OptimizerState<T>& state, double lr, double momentum);

/// -log softmax(logits)[label] for a single [r] logit vector.
double cross_entropy(const Tensor<double>& logits, std::size_t label);

/// max(0, p_global - p_local + margin).
double ranking_loss(double p_global_true, double p_local_true, double margin);

/// Batch mean of the hinge with p_global held constant. p_local is [b].
template <typename T>
Var<T> ranking_loss(Var<T> p_local_true, std::span<const T> p_global_true, double margin);

Tensor<float> flip_horizontal(const Tensor<float>& image);

/// Random horizontal flip, then edge-replicate padding by crop_pad and a
/// uniformly placed crop back to the input size.
Tensor<float> augment(const Tensor<float>& image, const AugmentConfig& config, Rng& rng);

/// Stage 1: fits the global branch with cross-entropy. Mask and local-branch
/// tensors are never touched.
std::vector<EpochMetrics> train_stage1(const TrainingSet& data, NetworkParams<float>& params,
                                       const NetworkConfig& net, const TrainConfig& config,
                                       const EpochCallback& on_epoch = {});

/// Stage 2: global branch frozen and run in eval mode; mask weights and the
/// local branch are fitted with cross-entropy plus the ranking hinge.
std::vector<EpochMetrics> train_stage2(const TrainingSet& data, NetworkParams<float>& params,
                                       const NetworkConfig& net, const TrainConfig& config,
                                       const EpochCallback& on_epoch = {});

/// Stage-2 objective for one batch: mean CE on the local logits plus the mean
/// ranking hinge against the global branch's true-class probability.
template <typename T>
struct Stage2Loss {
  Var<T> total;
  Var<T> cross_entropy;
  Var<T> ranking;
  FmnOutputs<T> outputs;
};

template <typename T>
Stage2Loss<T> stage2_loss(Graph<T>& graph, Var<T> images, std::span<const std::size_t> labels,
                          NetworkParams<T>& params, const NetworkConfig& net, double margin);

}  // namespace fmn
