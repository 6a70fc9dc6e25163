#include "fmn/gradient_suite.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <type_traits>
#include <utility>

#include "fmn/rng.hpp"
#include "fmn/training.hpp"

namespace fmn {

NetworkConfig gradient_check_network() {
  NetworkConfig c;
  c.height = 32;
  c.width = 16;
  c.stem_channels = 4;
  c.block_channels = {4, 6, 8, 8};
  c.blocks_per_stage = {1, 1, 1, 1};
  c.feature_dim = 6;
  c.num_identities = 3;
  return c;
}

namespace {

template <typename T>
Tensor<T> uniform_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Magnitudes in [margin, 1] with random sign: no entry sits near the ReLU kink.
template <typename T>
Tensor<T> away_from_zero(Rng& rng, Shape shape, double margin) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>((rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(margin, 1.0));
  return t;
}

/// Shuffled multiples of `gap`, so every pooling window has a clear maximum.
template <typename T>
Tensor<T> distinct_values(Rng& rng, Shape shape, double gap) {
  Tensor<T> t(std::move(shape));
  std::vector<std::size_t> order(t.numel());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    t[i] = static_cast<T>((static_cast<double>(order[i]) - static_cast<double>(t.numel()) / 2.0) * gap);
  }
  return t;
}

/// Reduces a non-scalar output to a scalar with fixed random weights, so
/// that every output entry carries a distinct adjoint.
template <typename T>
Var<T> weighted_sum(Var<T> out, const Tensor<T>& weights) {
  return sum(mul(out, out.graph().constant(weights)));
}

template <typename T>
struct Probe {
  ScalarFn<T> fn;
  Tensor<T> input;
};

template <typename T>
using ProbeFactory = std::function<Probe<T>(Rng&)>;

template <typename T>
struct OpCase {
  std::string name;
  ProbeFactory<T> make;
};

template <typename T>
std::vector<OpCase<T>> op_cases(double eps) {
  const double kink = 10.0 * eps;
  std::vector<OpCase<T>> cases;
  auto add = [&](std::string name, ProbeFactory<T> make) { cases.push_back({std::move(name), std::move(make)}); };

  // conv2d: stride 2 and padding 1 exercise both border handling and striding.
  add("conv2d/input", [](Rng& rng) {
    auto k = uniform_tensor<T>(rng, {4, 3, 3, 3});
    auto b = uniform_tensor<T>(rng, {4});
    auto w = uniform_tensor<T>(rng, {2, 4, 3, 3});
    return Probe<T>{[=](Graph<T>& g, Var<T> x) {
                      return weighted_sum(conv2d(x, g.constant(k), std::optional(g.constant(b)), 2, 1), w);
                    },
                    uniform_tensor<T>(rng, {2, 3, 5, 5})};
  });
  add("conv2d/kernel", [](Rng& rng) {
    auto x = uniform_tensor<T>(rng, {2, 3, 5, 5});
    auto b = uniform_tensor<T>(rng, {4});
    auto w = uniform_tensor<T>(rng, {2, 4, 3, 3});
    return Probe<T>{[=](Graph<T>& g, Var<T> k) {
                      return weighted_sum(conv2d(g.constant(x), k, std::optional(g.constant(b)), 2, 1), w);
                    },
                    uniform_tensor<T>(rng, {4, 3, 3, 3})};
  });
  add("conv2d/bias", [](Rng& rng) {
    auto x = uniform_tensor<T>(rng, {2, 3, 5, 5});
    auto k = uniform_tensor<T>(rng, {4, 3, 3, 3});
    auto w = uniform_tensor<T>(rng, {2, 4, 3, 3});
    return Probe<T>{[=](Graph<T>& g, Var<T> b) {
                      return weighted_sum(conv2d(g.constant(x), g.constant(k), std::optional(b), 2, 1), w);
                    },
                    uniform_tensor<T>(rng, {4})};
  });
  add("maxpool2d/input", [kink](Rng& rng) {
    auto w = uniform_tensor<T>(rng, {2, 2, 2, 2});
    return Probe<T>{[=](Graph<T>&, Var<T> x) { return weighted_sum(maxpool2d(x, 3, 2), w); },
                    distinct_values<T>(rng, {2, 2, 5, 5}, kink)};
  });
  add("linear/input", [](Rng& rng) {
    auto wt = uniform_tensor<T>(rng, {5, 4});
    auto b = uniform_tensor<T>(rng, {4});
    auto w = uniform_tensor<T>(rng, {3, 4});
    return Probe<T>{[=](Graph<T>& g, Var<T> x) {
                      return weighted_sum(linear(x, g.constant(wt), std::optional(g.constant(b))), w);
                    },
                    uniform_tensor<T>(rng, {3, 5})};
  });
  add("linear/weight", [](Rng& rng) {
    auto x = uniform_tensor<T>(rng, {3, 5});
    auto b = uniform_tensor<T>(rng, {4});
    auto w = uniform_tensor<T>(rng, {3, 4});
    return Probe<T>{[=](Graph<T>& g, Var<T> wt) {
                      return weighted_sum(linear(g.constant(x), wt, std::optional(g.constant(b))), w);
                    },
                    uniform_tensor<T>(rng, {5, 4})};
  });
  add("linear/bias", [](Rng& rng) {
    auto x = uniform_tensor<T>(rng, {5});
    auto wt = uniform_tensor<T>(rng, {5, 4});
    auto w = uniform_tensor<T>(rng, {4});
    return Probe<T>{[=](Graph<T>& g, Var<T> b) {
                      return weighted_sum(linear(g.constant(x), g.constant(wt), std::optional(b)), w);
                    },
                    uniform_tensor<T>(rng, {4})};
  });
  add("relu/input", [kink](Rng& rng) {
    auto w = uniform_tensor<T>(rng, {4, 6});
    return Probe<T>{[=](Graph<T>&, Var<T> x) { return weighted_sum(relu(x), w); },
                    away_from_zero<T>(rng, {4, 6}, kink)};
  });
  add("exp/input", [](Rng& rng) {
    auto w = uniform_tensor<T>(rng, {4, 6});
    return Probe<T>{[=](Graph<T>&, Var<T> x) { return weighted_sum(exp(x), w); }, uniform_tensor<T>(rng, {4, 6})};
  });
  for (const char* which : {"input", "gamma", "beta"}) {
    add(std::string("batchnorm2d.train/") + which, [which = std::string(which)](Rng& rng) {
      auto x = uniform_tensor<T>(rng, {3, 2, 3, 3});
      auto gamma = uniform_tensor<T>(rng, {2}, 0.5, 1.5);
      auto beta = uniform_tensor<T>(rng, {2});
      auto w = uniform_tensor<T>(rng, {3, 2, 3, 3});
      Tensor<T> probe = which == "input" ? x : which == "gamma" ? gamma : beta;
      return Probe<T>{[=](Graph<T>& g, Var<T> p) {
                        BatchNormStats<T> stats(2);
                        Var<T> vx = which == "input" ? p : g.constant(x);
                        Var<T> vg = which == "gamma" ? p : g.constant(gamma);
                        Var<T> vb = which == "beta" ? p : g.constant(beta);
                        return weighted_sum(batchnorm2d(vx, vg, vb, stats, Mode::kTrain), w);
                      },
                      probe};
    });
  }
  add("batchnorm2d.eval/input", [](Rng& rng) {
    auto gamma = uniform_tensor<T>(rng, {2}, 0.5, 1.5);
    auto beta = uniform_tensor<T>(rng, {2});
    BatchNormStats<T> stats(2);
    stats.running_mean = uniform_tensor<T>(rng, {2});
    stats.running_var = uniform_tensor<T>(rng, {2}, 0.5, 1.5);
    auto w = uniform_tensor<T>(rng, {2, 2, 3, 3});
    return Probe<T>{[=](Graph<T>& g, Var<T> x) mutable {
                      return weighted_sum(batchnorm2d(x, g.constant(gamma), g.constant(beta), stats, Mode::kEval), w);
                    },
                    uniform_tensor<T>(rng, {2, 2, 3, 3})};
  });
  add("softmax/input", [](Rng& rng) {
    auto w = uniform_tensor<T>(rng, {3, 5});
    return Probe<T>{[=](Graph<T>&, Var<T> x) { return weighted_sum(softmax(x), w); },
                    uniform_tensor<T>(rng, {3, 5}, -2.0, 2.0)};
  });
  add("cross_entropy/logits", [](Rng& rng) {
    std::vector<std::size_t> labels(4);
    for (auto& l : labels) l = rng.below(5);
    return Probe<T>{[=](Graph<T>&, Var<T> x) { return cross_entropy(x, std::span<const std::size_t>(labels)); },
                    uniform_tensor<T>(rng, {4, 5}, -2.0, 2.0)};
  });
  add("residual_add/a", [](Rng& rng) {
    auto b = uniform_tensor<T>(rng, {2, 3, 2, 2});
    auto w = uniform_tensor<T>(rng, {2, 3, 2, 2});
    return Probe<T>{[=](Graph<T>& g, Var<T> a) { return weighted_sum(residual_add(a, g.constant(b)), w); },
                    uniform_tensor<T>(rng, {2, 3, 2, 2})};
  });
  add("sub/b", [](Rng& rng) {
    auto a = uniform_tensor<T>(rng, {7});
    auto w = uniform_tensor<T>(rng, {7});
    return Probe<T>{[=](Graph<T>& g, Var<T> b) { return weighted_sum(sub(g.constant(a), b), w); },
                    uniform_tensor<T>(rng, {7})};
  });
  add("mul/a", [](Rng& rng) {
    auto b = uniform_tensor<T>(rng, {7});
    auto w = uniform_tensor<T>(rng, {7});
    return Probe<T>{[=](Graph<T>& g, Var<T> a) { return weighted_sum(mul(a, g.constant(b)), w); },
                    uniform_tensor<T>(rng, {7})};
  });
  add("scale/input", [](Rng& rng) {
    const T factor = static_cast<T>(rng.uniform(-2.0, 2.0));
    auto w = uniform_tensor<T>(rng, {7});
    return Probe<T>{[=](Graph<T>&, Var<T> x) { return weighted_sum(scale(x, factor), w); },
                    uniform_tensor<T>(rng, {7})};
  });
  add("add_scalar/input", [](Rng& rng) {
    const T offset = static_cast<T>(rng.uniform(-2.0, 2.0));
    auto w = uniform_tensor<T>(rng, {7});
    return Probe<T>{[=](Graph<T>&, Var<T> x) { return weighted_sum(add_scalar(x, offset), w); },
                    uniform_tensor<T>(rng, {7})};
  });
  add("mean/input", [](Rng& rng) {
    auto w = uniform_tensor<T>(rng, {3, 4});
    return Probe<T>{[=](Graph<T>& g, Var<T> x) { return mean(mul(x, g.constant(w))); },
                    uniform_tensor<T>(rng, {3, 4})};
  });
  add("global_avg_pool/input", [](Rng& rng) {
    auto w = uniform_tensor<T>(rng, {2, 3});
    return Probe<T>{[=](Graph<T>&, Var<T> x) { return weighted_sum(global_avg_pool(x), w); },
                    uniform_tensor<T>(rng, {2, 3, 4, 4})};
  });
  add("gather/input", [](Rng& rng) {
    std::vector<std::size_t> index(10);
    for (auto& i : index) i = rng.below(6);  // repeats exercise scatter-add
    auto w = uniform_tensor<T>(rng, {2, 5});
    return Probe<T>{[=](Graph<T>&, Var<T> x) { return weighted_sum(gather(x, index, Shape{2, 5}), w); },
                    uniform_tensor<T>(rng, {6})};
  });
  add("channel_mask/features", [](Rng& rng) {
    auto m = uniform_tensor<T>(rng, {2, 4, 4}, 0.2, 2.0);
    auto w = uniform_tensor<T>(rng, {2, 3, 4, 4});
    return Probe<T>{[=](Graph<T>& g, Var<T> f) { return weighted_sum(channel_mask(f, g.constant(m)), w); },
                    uniform_tensor<T>(rng, {2, 3, 4, 4})};
  });
  add("channel_mask/mask", [](Rng& rng) {
    auto f = uniform_tensor<T>(rng, {2, 3, 4, 4});
    auto w = uniform_tensor<T>(rng, {2, 3, 4, 4});
    return Probe<T>{[=](Graph<T>& g, Var<T> m) { return weighted_sum(channel_mask(g.constant(f), m), w); },
                    uniform_tensor<T>(rng, {2, 4, 4}, 0.2, 2.0)};
  });
  add("reshape_exp_mask/input", [](Rng& rng) {
    auto w = uniform_tensor<T>(rng, {2, 3, 4});
    return Probe<T>{[=](Graph<T>&, Var<T> m) { return weighted_sum(reshape_exp_mask(m, 3, 4), w); },
                    uniform_tensor<T>(rng, {2, 12})};
  });
  return cases;
}

/// Whole-network probes: the stage-1 objective against a stem kernel, and
/// the stage-2 objective against the mask weights and local-branch tensors.
template <typename T>
struct NetworkCase {
  std::string name;
  std::function<Tensor<T>&(NetworkParams<T>&)> select;
  int stage;
};

template <typename T>
std::vector<NetworkCase<T>> network_cases() {
  return {
      {"stage1_loss/grn.stem.weight", [](NetworkParams<T>& p) -> Tensor<T>& { return p.grn.stem.weight; }, 1},
      {"stage2_loss/mask.weight", [](NetworkParams<T>& p) -> Tensor<T>& { return p.mask_weight; }, 2},
      {"stage2_loss/lan.first_conv.weight",
       [](NetworkParams<T>& p) -> Tensor<T>& { return p.lan.stages.front().blocks.front().conv1.weight; }, 2},
      {"stage2_loss/lan.classifier.weight",
       [](NetworkParams<T>& p) -> Tensor<T>& { return p.lan.head.classifier_weight; }, 2},
  };
}

constexpr std::size_t kBatch = 4;

struct NetworkProblem {
  NetworkConfig net;
  NetworkParams<double> params;
  Tensor<double> images;
  std::vector<std::size_t> labels;
  double margin = 2.0;  // wide enough to keep every hinge active
};

NetworkProblem make_network_problem(Rng& rng) {
  NetworkProblem p;
  p.net = gradient_check_network();
  p.params = init_params<double>(p.net, rng.next_u64());
  // Larger mask weights than the training initialization keep the
  // transitional mask's pre-activations clear of the ReLU kink.
  p.params.mask_weight = uniform_tensor<double>(rng, p.params.mask_weight.shape(), -0.5, 0.5);
  for (double& w : p.params.mask_weight.data()) {
    if (std::abs(w) < 0.1) w = 0.1;
  }
  p.images = uniform_tensor<double>(rng, {kBatch, p.net.in_channels, p.net.height, p.net.width}, 0.0, 1.0);
  p.labels.resize(kBatch);
  for (auto& l : p.labels) l = rng.below(p.net.num_identities);
  return p;
}

template <typename T>
LossFn<T> network_loss(const NetworkCase<T>& c, const NetworkProblem& p, NetworkParams<T>& params,
                       const Tensor<T>& images) {
  if (c.stage == 1) {
    return [&](Graph<T>& g) {
      const GrnOutputs<T> out = grn_forward(g, g.constant(images), params.grn, p.net, Mode::kTrain);
      return cross_entropy(out.logits_g, std::span<const std::size_t>(p.labels));
    };
  }
  return [&](Graph<T>& g) {
    return stage2_loss(g, g.constant(images), std::span<const std::size_t>(p.labels), params, p.net, p.margin).total;
  };
}

template <typename T>
NetworkCase<double> as_double_case(const NetworkCase<T>& c) {
  for (const NetworkCase<double>& d : network_cases<double>()) {
    if (d.name == c.name) return d;
  }
  throw ContractError("unknown network case " + c.name);
}

template <typename T>
double run_network_case(const NetworkCase<T>& c, Rng& rng, double eps, GradientCaseResult& result) {
  NetworkProblem p = make_network_problem(rng);
  if constexpr (std::is_same_v<T, double>) {
    const LossFn<double> loss = network_loss(c, p, p.params, p.images);
    Tensor<double>& probed = c.select(p.params);
    std::size_t skipped = 0;
    const double err = parameter_grad_check(loss, probed, eps, &skipped);
    result.probes += probed.numel();
    result.skipped += skipped;
    return err;
  } else {
    // A single-precision loss over the whole backbone is too coarse for a
    // step small enough to avoid ReLU switches, so the reference derivative
    // comes from the same (rounded) parameters evaluated in double.
    NetworkParams<T> params = cast_params<T>(p.params);
    const Tensor<T> images = p.images.template cast<T>();
    p.params = cast_params<double>(params);
    p.images = images.template cast<double>();

    Tensor<T>& probed = c.select(params);
    probed.set_requires_grad(true);
    {
      Graph<T> g;
      g.backward(network_loss(c, p, params, images)(g));
    }
    std::vector<double> analytic(probed.numel(), 0.0);
    if (probed.has_grad()) {
      const auto grad = std::as_const(probed).grad();
      std::copy(grad.begin(), grad.end(), analytic.begin());
    }

    const NetworkCase<double> dc = as_double_case(c);
    const LossFn<double> reference = network_loss(dc, p, p.params, p.images);
    Tensor<double>& ref_param = dc.select(p.params);
    auto eval = [&] {
      Graph<double> g;
      g.track_branches(true);
      const double f = reference(g).value().item();
      return std::pair{f, g.branch_signature()};
    };
    const std::uint64_t base = eval().second;
    double worst = 0.0;
    for (std::size_t i = 0; i < ref_param.numel(); ++i) {
      const double original = ref_param[i];
      ref_param[i] = original + eps;
      const auto [f_up, sig_up] = eval();
      ref_param[i] = original - eps;
      const auto [f_down, sig_down] = eval();
      ref_param[i] = original;
      ++result.probes;
      if (sig_up != base || sig_down != base) {
        ++result.skipped;
        continue;
      }
      const double central = (f_up - f_down) / (2.0 * eps);
      worst = std::max(worst, std::abs(analytic[i] - central) / std::max(1.0, std::abs(central)));
    }
    return worst;
  }
}

template <typename T>
void run_precision(const GradientSuiteOptions& options, const char* precision, double eps, double network_eps,
                   double threshold,
                   std::vector<GradientCaseResult>& results) {
  for (const OpCase<T>& c : op_cases<T>(eps)) {
    Rng rng(derive_seed(options.seed, c.name));
    GradientCaseResult r{c.name, precision, options.trials, 0.0, threshold};
    for (std::size_t t = 0; t < options.trials; ++t) {
      Probe<T> p = c.make(rng);
      std::size_t skipped = 0;
      r.max_error = std::max(r.max_error, grad_check(p.fn, p.input, eps, &skipped));
      r.probes += p.input.numel();
      r.skipped += skipped;
    }
    results.push_back(std::move(r));
  }
  for (const NetworkCase<T>& c : network_cases<T>()) {
    Rng rng(derive_seed(options.seed, c.name));
    GradientCaseResult r{c.name, precision, options.trials, 0.0, threshold};
    for (std::size_t t = 0; t < options.trials; ++t) {
      r.max_error = std::max(r.max_error, run_network_case(c, rng, network_eps, r));
    }
    results.push_back(std::move(r));
  }
}

}  // namespace

std::vector<GradientCaseResult> run_gradient_suite(const GradientSuiteOptions& options) {
  std::vector<GradientCaseResult> results;
  run_precision<float>(options, "float", 1e-2, 1e-6, options.float_threshold, results);
  run_precision<double>(options, "double", 1e-6, 1e-6, options.double_threshold, results);
  return results;
}

}  // namespace fmn
