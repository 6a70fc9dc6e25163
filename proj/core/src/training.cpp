#include "fmn/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace fmn {

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* message) {
    if (!ok) throw ContractError(message);
  };
  require(lr_initial > 0.0 && std::isfinite(lr_initial), "train.lr_initial must be a positive number");
  require(lr_drop_factor > 0.0 && lr_drop_factor <= 1.0, "train.lr_drop_factor must lie in (0, 1]");
  require(momentum >= 0.0 && momentum < 1.0, "train.momentum must lie in [0, 1)");
  require(batch_size >= 2, "train.batch_size must be >= 2 (batch normalization needs two samples)");
  require(margin >= 0.0, "train.margin must be >= 0");
  require(augmentation.flip_prob >= 0.0 && augmentation.flip_prob <= 1.0,
          "train.augmentation.flip_prob must lie in [0, 1]");
  require(stage1_target_accuracy >= 0.0 && stage1_target_accuracy <= 1.0,
          "train.stage1_target_accuracy must lie in [0, 1]");
}

double TrainConfig::learning_rate(int stage, std::size_t epoch) const {
  const std::size_t drop = stage == 1 ? lr_drop_epoch : lr_drop_epoch_stage2;
  return epoch > drop ? lr_initial * lr_drop_factor : lr_initial;
}

std::string format_metrics_line(const EpochMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu\t%d\t%.9g\t%.9g\t%.9g\t%.9g\n", m.epoch, m.stage, m.mean_ce, m.mean_rank_loss,
                m.train_accuracy, m.lr);
  return buf;
}

template <typename T>
void sgd_step(std::span<Tensor<T>* const> params, OptimizerState<T>& state, double lr, double momentum) {
  if (state.velocity.empty()) {
    for (const Tensor<T>* p : params) state.velocity.emplace_back(p->shape());
  }
  if (state.velocity.size() != params.size()) {
    throw DimensionError("sgd_step: optimizer state tracks " + std::to_string(state.velocity.size()) +
                         " tensors, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    Tensor<T>& v = state.velocity[i];
    if (v.shape() != p.shape()) {
      throw DimensionError("sgd_step: velocity " + shape_to_string(v.shape()) + " does not match parameter " +
                           shape_to_string(p.shape()));
    }
    if (!p.requires_grad()) continue;
    std::span<const T> g = std::as_const(p).grad();
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const double grad = g.empty() ? 0.0 : static_cast<double>(g[k]);
      const double vel = momentum * static_cast<double>(v[k]) + grad;
      v[k] = static_cast<T>(vel);
      p[k] = static_cast<T>(static_cast<double>(p[k]) - lr * vel);
    }
  }
}

double cross_entropy(const Tensor<double>& logits, std::size_t label) {
  if (logits.rank() != 1) throw DimensionError("cross_entropy: expected an [r] logit vector");
  if (label >= logits.numel()) throw ContractError("cross_entropy: label outside the logit range");
  const double peak = *std::max_element(logits.data().begin(), logits.data().end());
  double z = 0.0;
  for (double v : logits.data()) z += std::exp(v - peak);
  return std::log(z) + peak - logits[label];
}

double ranking_loss(double p_global_true, double p_local_true, double margin) {
  return std::max(0.0, p_global_true - p_local_true + margin);
}

template <typename T>
Var<T> ranking_loss(Var<T> p_local_true, std::span<const T> p_global_true, double margin) {
  Graph<T>& g = p_local_true.graph();
  if (p_local_true.shape() != Shape{p_global_true.size()}) {
    throw DimensionError("ranking_loss: " + std::to_string(p_global_true.size()) + " global probabilities for " +
                         shape_to_string(p_local_true.shape()) + " local ones");
  }
  Var<T> pg = g.constant(Tensor<T>(Shape{p_global_true.size()},
                                   std::vector<T>(p_global_true.begin(), p_global_true.end())));
  return mean(relu(add_scalar(sub(pg, p_local_true), static_cast<T>(margin))));
}

template <typename T>
Stage2Loss<T> stage2_loss(Graph<T>& graph, Var<T> images, std::span<const std::size_t> labels,
                          NetworkParams<T>& params, const NetworkConfig& net, double margin) {
  Stage2Loss<T> out;
  out.outputs = fmn_forward(graph, images, params, net, Mode::kEval, Mode::kTrain);
  const std::size_t b = labels.size();
  const std::size_t r = out.outputs.lan.logits_l.shape().back();
  std::vector<std::size_t> idx(b);
  for (std::size_t i = 0; i < b; ++i) idx[i] = i * r + labels[i];

  out.cross_entropy = cross_entropy(out.outputs.lan.logits_l, labels);
  Var<T> p_local = gather(softmax(out.outputs.lan.logits_l), idx, Shape{b});

  // The global branch is a fixed reference here: its probabilities enter the
  // hinge as constants even if its tensors happen to require gradients.
  Graph<T> scratch;
  const Tensor<T>& pg_all = softmax(scratch.constant(out.outputs.grn.logits_g.value())).value();
  std::vector<T> p_global(b);
  for (std::size_t i = 0; i < b; ++i) p_global[i] = pg_all[idx[i]];

  out.ranking = ranking_loss<T>(p_local, p_global, margin);
  out.total = residual_add(out.cross_entropy, out.ranking);
  return out;
}

Tensor<float> flip_horizontal(const Tensor<float>& image) {
  if (image.rank() != 3) throw DimensionError("flip_horizontal: expected a [c,h,w] image");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor<float> out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t row = (ch * h + y) * w;
      for (std::size_t x = 0; x < w; ++x) out[row + x] = image[row + (w - 1 - x)];
    }
  }
  return out;
}

Tensor<float> augment(const Tensor<float>& image, const AugmentConfig& config, Rng& rng) {
  if (image.rank() != 3) throw DimensionError("augment: expected a [c,h,w] image");
  const bool flip = rng.bernoulli(config.flip_prob);
  const std::size_t pad = config.crop_pad;
  const std::size_t oy = rng.below(2 * pad + 1);
  const std::size_t ox = rng.below(2 * pad + 1);
  const Tensor<float> src = flip ? flip_horizontal(image) : image;
  if (pad == 0) return src;

  const std::size_t c = src.dim(0), h = src.dim(1), w = src.dim(2);
  auto clamp_index = [pad](std::size_t pos, std::size_t extent) {
    const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(pos) - static_cast<std::ptrdiff_t>(pad);
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(p, 0, static_cast<std::ptrdiff_t>(extent) - 1));
  };
  Tensor<float> out(src.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t sy = clamp_index(y + oy, h);
      for (std::size_t x = 0; x < w; ++x) {
        out[(ch * h + y) * w + x] = src[(ch * h + sy) * w + clamp_index(x + ox, w)];
      }
    }
  }
  return out;
}

namespace {

void check_data(const TrainingSet& data, const NetworkConfig& net) {
  if (data.images.empty()) throw ContractError("training: the training split is empty");
  if (data.images.size() != data.labels.size()) throw ContractError("training: image and label counts differ");
  if (data.num_classes != net.num_identities) {
    throw ContractError("training: the training split has " + std::to_string(data.num_classes) +
                        " identities but network.num_identities is " + std::to_string(net.num_identities));
  }
  for (std::size_t label : data.labels) {
    if (label >= data.num_classes) throw ContractError("training: label outside [0, num_classes)");
  }
  for (const auto& img : data.images) {
    if (img.shape() != net.input_shape()) {
      throw DimensionError("training: image " + shape_to_string(img.shape()) + " does not match network input " +
                           shape_to_string(net.input_shape()));
    }
  }
}

/// Shuffled mini-batches; a trailing batch of one is merged into the previous
/// one because train-mode batch normalization needs two samples.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  }
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

struct Batch {
  Tensor<float> images;
  std::vector<std::size_t> labels;
};

Batch assemble(const TrainingSet& data, const std::vector<std::size_t>& indices, const AugmentConfig& aug, Rng& rng) {
  std::vector<Tensor<float>> views;
  views.reserve(indices.size());
  Batch b;
  for (std::size_t i : indices) {
    views.push_back(augment(data.images[i], aug, rng));
    b.labels.push_back(data.labels[i]);
  }
  std::vector<const Tensor<float>*> ptrs;
  for (const auto& v : views) ptrs.push_back(&v);
  b.images = stack<float>(ptrs);
  return b;
}

std::size_t count_correct(const Tensor<float>& logits, std::span<const std::size_t> labels) {
  const std::size_t r = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const auto row = logits.data().subspan(b * r, r);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    correct += best == labels[b] ? 1 : 0;
  }
  return correct;
}

void require_finite(float loss, int stage, std::size_t epoch) {
  if (!std::isfinite(loss)) {
    throw NumericError("stage " + std::to_string(stage) + " epoch " + std::to_string(epoch) +
                       ": loss became non-finite");
  }
}

}  // namespace

std::vector<EpochMetrics> train_stage1(const TrainingSet& data, NetworkParams<float>& params,
                                       const NetworkConfig& net, const TrainConfig& config,
                                       const EpochCallback& on_epoch) {
  net.validate();
  config.validate();
  check_data(data, net);
  set_trainable(params, ParamGroup::kGrn, true);
  set_trainable(params, ParamGroup::kMask, false);
  set_trainable(params, ParamGroup::kLan, false);
  const auto tensors = trainable_tensors(params, {ParamGroup::kGrn});

  Rng rng(derive_seed(config.seed, "stage1"));
  OptimizerState<float> opt;
  std::vector<EpochMetrics> log;
  for (std::size_t epoch = 1; epoch <= config.epochs_stage1; ++epoch) {
    const double lr = config.learning_rate(1, epoch);
    double ce_sum = 0.0;
    std::size_t correct = 0;
    for (const auto& indices : make_batches(data.images.size(), config.batch_size, rng)) {
      const Batch batch = assemble(data, indices, config.augmentation, rng);
      Graph<float> g;
      const GrnOutputs<float> out = grn_forward(g, g.constant(batch.images), params.grn, net, Mode::kTrain);
      Var<float> loss = cross_entropy(out.logits_g, std::span<const std::size_t>(batch.labels));
      require_finite(loss.value().item(), 1, epoch);
      for (Tensor<float>* t : tensors) t->zero_grad();
      g.backward(loss);
      sgd_step<float>(tensors, opt, lr, config.momentum);
      ce_sum += static_cast<double>(loss.value().item()) * static_cast<double>(indices.size());
      correct += count_correct(out.logits_g.value(), batch.labels);
    }
    const double n = static_cast<double>(data.images.size());
    log.push_back({epoch, 1, ce_sum / n, 0.0, static_cast<double>(correct) / n, lr});
    if (on_epoch) on_epoch(log.back());
    if (config.stage1_target_accuracy > 0.0 && log.back().train_accuracy >= config.stage1_target_accuracy) break;
  }
  for (Tensor<float>* t : tensors) t->clear_grad();
  set_trainable(params, ParamGroup::kGrn, false);
  return log;
}

std::vector<EpochMetrics> train_stage2(const TrainingSet& data, NetworkParams<float>& params,
                                       const NetworkConfig& net, const TrainConfig& config,
                                       const EpochCallback& on_epoch) {
  net.validate();
  config.validate();
  check_data(data, net);
  set_trainable(params, ParamGroup::kGrn, false);
  set_trainable(params, ParamGroup::kMask, true);
  set_trainable(params, ParamGroup::kLan, true);
  const auto tensors = trainable_tensors(params, {ParamGroup::kMask, ParamGroup::kLan});

  Rng rng(derive_seed(config.seed, "stage2"));
  OptimizerState<float> opt;
  std::vector<EpochMetrics> log;
  for (std::size_t epoch = 1; epoch <= config.epochs_stage2; ++epoch) {
    const double lr = config.learning_rate(2, epoch);
    double ce_sum = 0.0, rank_sum = 0.0;
    std::size_t correct = 0;
    for (const auto& indices : make_batches(data.images.size(), config.batch_size, rng)) {
      const Batch batch = assemble(data, indices, config.augmentation, rng);
      Graph<float> g;
      const Stage2Loss<float> loss =
          stage2_loss(g, g.constant(batch.images), std::span<const std::size_t>(batch.labels), params, net,
                      config.margin);
      require_finite(loss.total.value().item(), 2, epoch);
      for (Tensor<float>* t : tensors) t->zero_grad();
      g.backward(loss.total);
      sgd_step<float>(tensors, opt, lr, config.momentum);
      const double b = static_cast<double>(indices.size());
      ce_sum += static_cast<double>(loss.cross_entropy.value().item()) * b;
      rank_sum += static_cast<double>(loss.ranking.value().item()) * b;
      correct += count_correct(loss.outputs.lan.logits_l.value(), batch.labels);
    }
    const double n = static_cast<double>(data.images.size());
    log.push_back({epoch, 2, ce_sum / n, rank_sum / n, static_cast<double>(correct) / n, lr});
    if (on_epoch) on_epoch(log.back());
  }
  for (Tensor<float>* t : tensors) t->clear_grad();
  set_trainable(params, ParamGroup::kMask, false);
  set_trainable(params, ParamGroup::kLan, false);
  return log;
}

template void sgd_step<float>(std::span<Tensor<float>* const>, OptimizerState<float>&, double, double);
template void sgd_step<double>(std::span<Tensor<double>* const>, OptimizerState<double>&, double, double);
template Var<float> ranking_loss<float>(Var<float>, std::span<const float>, double);
template Var<double> ranking_loss<double>(Var<double>, std::span<const double>, double);
template Stage2Loss<float> stage2_loss<float>(Graph<float>&, Var<float>, std::span<const std::size_t>,
                                              NetworkParams<float>&, const NetworkConfig&, double);
template Stage2Loss<double> stage2_loss<double>(Graph<double>&, Var<double>, std::span<const std::size_t>,
                                                NetworkParams<double>&, const NetworkConfig&, double);

}  // namespace fmn
