#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <type_traits>
#include <vector>

#include "fmn/tensor.hpp"

namespace fmn {

template <typename T>
class Graph;

/// Handle to a node recorded in a Graph. Cheap to copy; only valid while the
/// owning graph is alive.
template <typename T>
class Var {
 public:
  Var() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Graph<T>;
  Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Access handed to an op's backward function: the output adjoint plus
/// accumulating views of the input adjoints.
template <typename T>
class GradContext {
 public:
  GradContext(Graph<T>& graph, std::size_t node) : graph_(graph), node_(node) {}

  std::span<const T> out_grad() const;
  const Tensor<T>& out_value() const;
  const Tensor<T>& in_value(std::size_t i) const;
  bool needs(std::size_t i) const;
  /// Zero-initialized on first access; contributions are added in place.
  std::span<T> in_grad(std::size_t i);

 private:
  Graph<T>& graph_;
  std::size_t node_;
};

/// Tape of recorded operations. Nodes are appended in execution order, so
/// the tape is topologically sorted by construction and backward() walks it
/// once in reverse.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(GradContext<T>&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf bound to an externally owned tensor. When the tensor has
  /// requires_grad set, backward() accumulates into its grad buffer.
  Var<T> parameter(Tensor<T>& tensor);
  /// Leaf that owns its value and never receives a gradient.
  Var<T> constant(Tensor<T> value);
  /// Leaf that owns its value; its adjoint is readable through grad().
  Var<T> input(Tensor<T> value, bool requires_grad = true);

  const Tensor<T>& value(Var<T> v) const;
  /// Adjoint of a node after backward(). Empty when the node needed none.
  std::span<const T> grad(Var<T> v) const;
  bool needs_grad(Var<T> v) const { return nodes_.at(v.id()).needs_grad; }
  std::string_view op_name(Var<T> v) const { return nodes_.at(v.id()).op; }
  std::span<const std::size_t> inputs_of(Var<T> v) const { return nodes_.at(v.id()).inputs; }
  std::size_t size() const { return nodes_.size(); }

  /// When enabled, piecewise ops (relu, maxpool2d) fold the branch each
  /// element takes into a running hash. Two evaluations with equal
  /// signatures used the same linear pieces.
  void track_branches(bool on) { track_branches_ = on; }
  bool tracking_branches() const { return track_branches_; }
  void note_branch(std::uint64_t v) { branch_hash_ = (branch_hash_ ^ v) * 0x100000001B3ULL; }
  std::uint64_t branch_signature() const { return branch_hash_; }

  /// Reverse-mode sweep from a single-element loss. Parameter gradients
  /// accumulate across calls; node adjoints are recomputed each time.
  void backward(Var<T> loss);

  /// Op-builder interface: appends a node whose inputs are already on this
  /// graph. `fn` may be empty for non-differentiable outputs.
  Var<T> record(std::string_view op, std::initializer_list<Var<T>> inputs, Tensor<T> out, BackwardFn fn);

 private:
  friend class GradContext<T>;

  struct Node {
    std::string_view op;
    std::vector<std::size_t> inputs;
    Tensor<T> owned;
    Tensor<T>* external = nullptr;
    bool needs_grad = false;
    std::vector<T> adjoint;
    BackwardFn backward;

    const Tensor<T>& value() const { return external ? *external : owned; }
  };

  std::span<T> adjoint(std::size_t id);
  void check_owner(Var<T> v) const;

  std::vector<Node> nodes_;
  bool track_branches_ = false;
  std::uint64_t branch_hash_ = 0xCBF29CE484222325ULL;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return graph_->value(*this);
}

enum class Mode { kTrain, kEval };

/// Per-channel running statistics owned by a batch-norm layer.
template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  explicit BatchNormStats(std::size_t channels = 1)
      : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// ---- operations -------------------------------------------------------------
// Image ops accept [c,h,w] or batched [b,c,h,w] input; the output keeps the
// input's rank. Reductions accumulate in double regardless of T.

/// Direct 2-D convolution with zero padding. kernel is [c_out,c_in,kh,kw].
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, std::optional<std::type_identity_t<Var<T>>> bias, std::size_t stride,
              std::size_t pad);

/// Max pooling; backward routes to the first argmax in row-major order.
template <typename T>
Var<T> maxpool2d(Var<T> input, std::size_t window, std::size_t stride);

/// out_j = sum_i in_i * weight_ij + bias_j for [m] or [b,m] input.
template <typename T>
Var<T> linear(Var<T> input, Var<T> weight, std::optional<std::type_identity_t<Var<T>>> bias);

/// Subgradient at zero is zero.
template <typename T>
Var<T> relu(Var<T> input);

template <typename T>
Var<T> exp(Var<T> input);

/// Batched [b,c,h,w] normalization. Train mode needs b >= 2 and updates the
/// running statistics (unbiased variance, momentum 0.1).
template <typename T>
Var<T> batchnorm2d(Var<T> input, Var<T> gamma, Var<T> beta, BatchNormStats<T>& stats, Mode mode);

/// Row-wise softmax over the last axis of [r] or [b,r].
template <typename T>
Var<T> softmax(Var<T> input);

/// Mean over the batch of -log softmax(logits)_label. logits is [r] or [b,r].
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::size_t> labels);

template <typename T>
Var<T> residual_add(Var<T> a, Var<T> b);

template <typename T>
Var<T> sub(Var<T> a, Var<T> b);

template <typename T>
Var<T> mul(Var<T> a, Var<T> b);

template <typename T>
Var<T> scale(Var<T> input, T factor);

template <typename T>
Var<T> add_scalar(Var<T> input, T offset);

template <typename T>
Var<T> sum(Var<T> input);

template <typename T>
Var<T> mean(Var<T> input);

/// [b,c,h,w] -> [b,c] (or [c,h,w] -> [c]).
template <typename T>
Var<T> global_avg_pool(Var<T> input);

/// out[i] = input[index[i]], reshaped to `shape`. Backward scatter-adds.
template <typename T>
Var<T> gather(Var<T> input, std::vector<std::size_t> index, Shape shape);

/// Multiplies every channel of [b,c,h,w] features by the per-sample [b,h,w]
/// mask (or [c,h,w] by [h,w]).
template <typename T>
Var<T> channel_mask(Var<T> features, Var<T> mask);

/// Value copy with no gradient path.
template <typename T>
Var<T> detach(Var<T> input);

// ---- gradient checking ------------------------------------------------------

/// Builds a scalar from `input` on the given graph.
template <typename T>
using ScalarFn = std::function<Var<T>(Graph<T>&, Var<T>)>;

/// Max over entries of |analytic - central difference| / max(1, |central
/// difference|), probing each entry of `input` with step eps. Entries whose
/// probes switch a relu or max-pool branch are not differentiable over the
/// step and are left out; `skipped` receives their count.
template <typename T>
double grad_check(const ScalarFn<T>& fn, const Tensor<T>& input, double eps, std::size_t* skipped = nullptr);

template <typename T>
using LossFn = std::function<Var<T>(Graph<T>&)>;

/// The same measure for a tensor the loss binds with Graph::parameter. The
/// tensor is perturbed in place and restored; its grad buffer is reset.
template <typename T>
double parameter_grad_check(const LossFn<T>& loss, Tensor<T>& param, double eps, std::size_t* skipped = nullptr);

}  // namespace fmn
