#include "fmn/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fmn/rng.hpp"

namespace fmn {

std::string_view to_string(MaskTap tap) {
  switch (tap) {
    case MaskTap::kPool1: return "Pool1";
    case MaskTap::kRes2: return "Res2";
    case MaskTap::kRes3: return "Res3";
    case MaskTap::kRes4: return "Res4";
  }
  return "?";
}

MaskTap parse_mask_tap(std::string_view name) {
  for (MaskTap tap : kAllMaskTaps) {
    if (to_string(tap) == name) return tap;
  }
  throw ContractError("network.mask_tap: unknown tap \"" + std::string(name) + "\" (expected Pool1, Res2, Res3 or Res4)");
}

std::size_t first_stage_after(MaskTap tap) { return static_cast<std::size_t>(tap); }

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw ContractError(message);
}

struct Extent {
  std::size_t h, w;
};

Extent conv_extent(Extent in, std::size_t kernel, std::size_t stride, std::size_t pad, const char* where) {
  require(in.h + 2 * pad >= kernel && in.w + 2 * pad >= kernel,
          std::string("network: input too small for ") + where);
  return {(in.h + 2 * pad - kernel) / stride + 1, (in.w + 2 * pad - kernel) / stride + 1};
}

}  // namespace

void NetworkConfig::validate() const {
  require(in_channels >= 1, "network.in_channels must be >= 1");
  require(height >= 1 && width >= 1, "network.height and network.width must be >= 1");
  require(stem_channels >= 1, "network.stem_channels must be >= 1");
  require(stem_kernel >= 1, "network.stem_kernel must be >= 1");
  require(stem_stride >= 1, "network.stem_stride must be >= 1");
  require(pool_window >= 1 && pool_stride >= 1, "network.pool_window and network.pool_stride must be >= 1");
  require(block_channels.size() == 4, "network.block_channels must list 4 stages");
  require(blocks_per_stage.size() == 4, "network.blocks_per_stage must list 4 stages");
  for (std::size_t i = 0; i < 4; ++i) {
    require(block_channels[i] >= 1, "network.block_channels entries must be >= 1");
    require(blocks_per_stage[i] >= 1, "network.blocks_per_stage entries must be >= 1");
  }
  require(feature_dim >= 1, "network.feature_dim must be >= 1");
  require(num_identities >= 2, "network.num_identities must be >= 2");
  require(alpha >= 0.0 && alpha <= 1.0, "network.alpha must lie in [0, 1]");
  for (MaskTap tap : kAllMaskTaps) tap_geometry(*this, tap);
}

TapGeometry tap_geometry(const NetworkConfig& c, MaskTap tap) {
  Extent e = conv_extent({c.height, c.width}, c.stem_kernel, c.stem_stride, c.stem_kernel / 2, "the stem");
  require(e.h >= c.pool_window && e.w >= c.pool_window, "network: pool window exceeds stem output");
  e = conv_extent(e, c.pool_window, c.pool_stride, 0, "Pool1");
  if (tap == MaskTap::kPool1) return {c.stem_channels, e.h, e.w};
  const std::size_t last = first_stage_after(tap);
  for (std::size_t s = 0; s < last; ++s) e = conv_extent(e, 3, s == 0 ? 1 : 2, 1, "a residual stage");
  return {c.block_channels.at(last - 1), e.h, e.w};
}

// ---- initialization -------------------------------------------------------------

namespace {

template <typename T>
ConvBn<T> make_conv_bn(Rng& rng, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                       std::size_t pad) {
  ConvBn<T> cb;
  const double stddev = std::sqrt(2.0 / static_cast<double>(in * kernel * kernel));
  std::vector<T> w(out * in * kernel * kernel);
  for (auto& v : w) v = static_cast<T>(rng.normal(0.0, stddev));
  cb.weight = Tensor<T>(Shape{out, in, kernel, kernel}, std::move(w));
  cb.gamma = Tensor<T>(Shape{out}, T{1});
  cb.beta = Tensor<T>(Shape{out}, T{0});
  cb.stats = BatchNormStats<T>(out);
  cb.stride = stride;
  cb.pad = pad;
  return cb;
}

template <typename T>
Tensor<T> uniform_tensor(Rng& rng, Shape shape, double bound) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(v));
}

}  // namespace

template <typename T>
NetworkParams<T> init_params(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  NetworkParams<T> p;
  const std::size_t k = config.stem_kernel;
  p.grn.stem = make_conv_bn<T>(rng, config.in_channels, config.stem_channels, k, config.stem_stride, k / 2);
  std::size_t in = config.stem_channels;
  for (std::size_t s = 0; s < 4; ++s) {
    ResidualStage<T> stage;
    const std::size_t out = config.block_channels[s];
    for (std::size_t b = 0; b < config.blocks_per_stage[s]; ++b) {
      const std::size_t stride = (b == 0 && s > 0) ? 2 : 1;
      ResidualBlock<T> block;
      block.conv1 = make_conv_bn<T>(rng, in, out, 3, stride, 1);
      block.conv2 = make_conv_bn<T>(rng, out, out, 3, 1, 1);
      if (stride != 1 || in != out) block.projection = make_conv_bn<T>(rng, in, out, 1, stride, 0);
      stage.blocks.push_back(std::move(block));
      in = out;
    }
    p.grn.stages.push_back(std::move(stage));
  }
  const std::size_t m = config.feature_dim;
  p.grn.head.embed_weight = uniform_tensor<T>(rng, Shape{in, m}, 1.0 / std::sqrt(static_cast<double>(in)));
  p.grn.head.embed_bias = Tensor<T>(Shape{m}, T{0});
  p.grn.head.classifier_weight =
      uniform_tensor<T>(rng, Shape{m, config.num_identities}, 1.0 / std::sqrt(static_cast<double>(m)));
  p.grn.head.classifier_bias = Tensor<T>(Shape{config.num_identities}, T{0});

  const TapGeometry tap = tap_geometry(config);
  std::vector<T> w(m * tap.height * tap.width);
  for (auto& v : w) v = static_cast<T>(rng.normal(0.0, 0.01));
  p.mask_weight = Tensor<T>(Shape{m, tap.height * tap.width}, std::move(w));

  p.lan.first_stage = first_stage_after(config.mask_tap);
  p.lan.stages.assign(p.grn.stages.begin() + static_cast<std::ptrdiff_t>(p.lan.first_stage), p.grn.stages.end());
  p.lan.head = p.grn.head;
  return p;
}

template <typename T>
void set_trainable(NetworkParams<T>& params, ParamGroup group, bool flag) {
  visit_tensors(params, [&](const std::string&, Tensor<T>& t, ParamGroup g, bool trainable) {
    if (g == group && trainable) t.set_requires_grad(flag);
  });
}

template <typename T>
std::vector<Tensor<T>*> trainable_tensors(NetworkParams<T>& params, std::initializer_list<ParamGroup> groups) {
  std::vector<Tensor<T>*> out;
  visit_tensors(params, [&](const std::string&, Tensor<T>& t, ParamGroup g, bool trainable) {
    if (trainable && std::find(groups.begin(), groups.end(), g) != groups.end()) out.push_back(&t);
  });
  return out;
}

template <typename T>
std::uint64_t hash_group(const NetworkParams<T>& params, ParamGroup group) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  visit_tensors(params, [&](const std::string&, const Tensor<T>& t, ParamGroup g, bool) {
    if (g != group) return;
    for (T v : t.data()) {
      unsigned char bytes[sizeof(T)];
      std::memcpy(bytes, &v, sizeof(T));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001B3ULL;
      }
    }
  });
  return h;
}

namespace {

template <typename U, typename T>
ConvBn<U> cast_conv_bn(const ConvBn<T>& in) {
  ConvBn<U> out;
  out.weight = in.weight.template cast<U>();
  out.gamma = in.gamma.template cast<U>();
  out.beta = in.beta.template cast<U>();
  out.stats.running_mean = in.stats.running_mean.template cast<U>();
  out.stats.running_var = in.stats.running_var.template cast<U>();
  out.stride = in.stride;
  out.pad = in.pad;
  return out;
}

template <typename U, typename T>
std::vector<ResidualStage<U>> cast_stages(const std::vector<ResidualStage<T>>& in) {
  std::vector<ResidualStage<U>> out;
  for (const auto& stage : in) {
    ResidualStage<U> s;
    for (const auto& b : stage.blocks) {
      ResidualBlock<U> nb;
      nb.conv1 = cast_conv_bn<U>(b.conv1);
      nb.conv2 = cast_conv_bn<U>(b.conv2);
      if (b.projection) nb.projection = cast_conv_bn<U>(*b.projection);
      s.blocks.push_back(std::move(nb));
    }
    out.push_back(std::move(s));
  }
  return out;
}

template <typename U, typename T>
Head<U> cast_head(const Head<T>& in) {
  return {in.embed_weight.template cast<U>(), in.embed_bias.template cast<U>(),
          in.classifier_weight.template cast<U>(), in.classifier_bias.template cast<U>()};
}

}  // namespace

template <typename U, typename T>
NetworkParams<U> cast_params(const NetworkParams<T>& in) {
  NetworkParams<U> out;
  out.grn.stem = cast_conv_bn<U>(in.grn.stem);
  out.grn.stages = cast_stages<U>(in.grn.stages);
  out.grn.head = cast_head<U>(in.grn.head);
  out.mask_weight = in.mask_weight.template cast<U>();
  out.lan.first_stage = in.lan.first_stage;
  out.lan.stages = cast_stages<U>(in.lan.stages);
  out.lan.head = cast_head<U>(in.lan.head);
  return out;
}

// ---- forward ------------------------------------------------------------------------

namespace {

template <typename T>
Var<T> conv_bn(Graph<T>& g, Var<T> x, ConvBn<T>& cb, Mode mode) {
  Var<T> y = conv2d(x, g.parameter(cb.weight), std::optional<Var<T>>{}, cb.stride, cb.pad);
  return batchnorm2d(y, g.parameter(cb.gamma), g.parameter(cb.beta), cb.stats, mode);
}

template <typename T>
Var<T> block_forward(Graph<T>& g, Var<T> x, ResidualBlock<T>& block, Mode mode) {
  Var<T> y = relu(conv_bn(g, x, block.conv1, mode));
  y = conv_bn(g, y, block.conv2, mode);
  Var<T> shortcut = block.projection ? conv_bn(g, x, *block.projection, mode) : x;
  return relu(residual_add(y, shortcut));
}

template <typename T>
Var<T> stage_forward(Graph<T>& g, Var<T> x, ResidualStage<T>& stage, Mode mode) {
  for (auto& block : stage.blocks) x = block_forward(g, x, block, mode);
  return x;
}

template <typename T>
std::pair<Var<T>, Var<T>> head_forward(Graph<T>& g, Var<T> x, Head<T>& head) {
  Var<T> pooled = global_avg_pool(x);
  Var<T> embedding = linear(pooled, g.parameter(head.embed_weight), std::optional(g.parameter(head.embed_bias)));
  Var<T> logits =
      linear(embedding, g.parameter(head.classifier_weight), std::optional(g.parameter(head.classifier_bias)));
  return {embedding, logits};
}

void require_shape(const char* what, const Shape& got, const Shape& want) {
  if (got != want) {
    throw DimensionError(std::string(what) + ": expected " + shape_to_string(want) + ", got " + shape_to_string(got));
  }
}

}  // namespace

template <typename T>
GrnOutputs<T> grn_forward(Graph<T>& graph, Var<T> images, GrnParams<T>& params, const NetworkConfig& config,
                          Mode mode) {
  const Shape& s = images.shape();
  if (s.size() != 4) throw DimensionError("grn_forward: expected [b,3,H,W] images, got " + shape_to_string(s));
  require_shape("grn_forward images", {s[1], s[2], s[3]}, config.input_shape());
  if (params.stages.size() != 4) throw ContractError("grn_forward: parameters must hold 4 residual stages");

  Var<T> x = relu(conv_bn(graph, images, params.stem, mode));
  x = maxpool2d(x, config.pool_window, config.pool_stride);
  GrnOutputs<T> out;
  if (config.mask_tap == MaskTap::kPool1) out.local_f = x;
  for (std::size_t i = 0; i < params.stages.size(); ++i) {
    x = stage_forward(graph, x, params.stages[i], mode);
    if (i + 1 == first_stage_after(config.mask_tap)) out.local_f = x;
  }
  out.final_map = x;
  auto [embedding, logits] = head_forward(graph, x, params.head);
  out.global_g = embedding;
  out.logits_g = logits;
  return out;
}

template <typename T>
Var<T> compute_transitional_mask(Var<T> global_g, Var<T> weight) {
  return relu(linear(global_g, weight, std::optional<Var<T>>{}));
}

template <typename T>
Var<T> reshape_exp_mask(Var<T> m_prime, std::size_t height, std::size_t width) {
  const Shape& s = m_prime.shape();
  const std::size_t n = s.back();
  if (s.size() > 2 || n != height * width) {
    throw DimensionError("reshape_exp_mask: transitional mask " + shape_to_string(s) + " cannot fill " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  const std::size_t batch = s.size() == 2 ? s[0] : 1;
  std::vector<std::size_t> index(batch * n);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < height; ++i) {
      for (std::size_t j = 0; j < width; ++j) index[(b * height + i) * width + j] = b * n + j * height + i;
    }
  }
  Shape out = s.size() == 2 ? Shape{batch, height, width} : Shape{height, width};
  return exp(gather(m_prime, std::move(index), std::move(out)));
}

template <typename T>
Var<T> apply_mask(Var<T> local_f, Var<T> mask) {
  return channel_mask(local_f, mask);
}

template <typename T>
LanOutputs<T> lan_forward(Graph<T>& graph, Var<T> masked_o, LanParams<T>& params, const NetworkConfig& config,
                          Mode mode) {
  const TapGeometry tap = tap_geometry(config);
  const Shape& s = masked_o.shape();
  if (s.size() != 4) throw DimensionError("lan_forward: expected [b,c,h,w] input, got " + shape_to_string(s));
  require_shape("lan_forward input", {s[1], s[2], s[3]}, {tap.channels, tap.height, tap.width});
  if (params.first_stage != first_stage_after(config.mask_tap) || params.stages.size() != 4 - params.first_stage) {
    throw ContractError("lan_forward: parameters were built for a different mask tap");
  }
  Var<T> x = masked_o;
  for (auto& stage : params.stages) x = stage_forward(graph, x, stage, mode);
  LanOutputs<T> out;
  out.final_map = x;
  auto [embedding, logits] = head_forward(graph, x, params.head);
  out.local_l = embedding;
  out.logits_l = logits;
  return out;
}

template <typename T>
FmnOutputs<T> fmn_forward(Graph<T>& graph, Var<T> images, NetworkParams<T>& params, const NetworkConfig& config,
                          Mode grn_mode, Mode lan_mode) {
  FmnOutputs<T> out;
  out.grn = grn_forward(graph, images, params.grn, config, grn_mode);
  const TapGeometry tap = tap_geometry(config);
  require_shape("mask weight", params.mask_weight.shape(), {config.feature_dim, tap.height * tap.width});
  out.transitional_mask = compute_transitional_mask(out.grn.global_g, graph.parameter(params.mask_weight));
  out.mask = reshape_exp_mask(out.transitional_mask, tap.height, tap.width);
  out.masked_o = apply_mask(out.grn.local_f, out.mask);
  out.lan = lan_forward(graph, out.masked_o, params.lan, config, lan_mode);
  return out;
}

// ---- value-level wrappers -------------------------------------------------------------

template <typename T>
Tensor<T> compute_transitional_mask(const Tensor<T>& global_g, const Tensor<T>& weight) {
  Graph<T> g;
  return compute_transitional_mask(g.constant(global_g), g.constant(weight)).value();
}

template <typename T>
FeatureMask<T> reshape_exp_mask(const Tensor<T>& m_prime, std::size_t height, std::size_t width) {
  if (m_prime.rank() != 1) throw DimensionError("reshape_exp_mask: expected a [n'] vector");
  Graph<T> g;
  const Tensor<T>& v = reshape_exp_mask(g.constant(m_prime), height, width).value();
  return {height, width, v.storage()};
}

template <typename T>
Tensor<T> apply_mask(const Tensor<T>& local_f, const FeatureMask<T>& mask) {
  Graph<T> g;
  Var<T> m = g.constant(Tensor<T>(Shape{mask.height, mask.width}, mask.values));
  return apply_mask(g.constant(local_f), m).value();
}

namespace {

template <typename T>
Tensor<T> drop_batch(const Tensor<T>& t) {
  Shape s(t.shape().begin() + 1, t.shape().end());
  return t.reshaped(std::move(s));
}

}  // namespace

template <typename T>
BranchOutputs<T> fmn_forward(const Tensor<T>& image, NetworkParams<T>& params, const NetworkConfig& config,
                             Mode mode) {
  require_shape("fmn_forward image", image.shape(), config.input_shape());
  Graph<T> g;
  Shape batched{1};
  batched.insert(batched.end(), image.shape().begin(), image.shape().end());
  FmnOutputs<T> v = fmn_forward(g, g.constant(image.reshaped(batched)), params, config, mode, mode);
  BranchOutputs<T> out;
  out.local_f = drop_batch(v.grn.local_f.value());
  out.global_g = drop_batch(v.grn.global_g.value());
  out.logits_g = drop_batch(v.grn.logits_g.value());
  const Tensor<T> mask = drop_batch(v.mask.value());
  out.mask = {mask.dim(0), mask.dim(1), mask.storage()};
  out.masked_o = drop_batch(v.masked_o.value());
  out.local_branch_l = drop_batch(v.lan.local_l.value());
  out.logits_l = drop_batch(v.lan.logits_l.value());
  out.grn_map = drop_batch(v.grn.final_map.value());
  out.lan_map = drop_batch(v.lan.final_map.value());
  return out;
}

GrayImage export_heatmap(const Tensor<float>& feature_map, std::size_t out_height, std::size_t out_width) {
  if (feature_map.rank() != 3) throw DimensionError("export_heatmap: expected a [c,h,w] feature map");
  if (out_height == 0 || out_width == 0) throw ContractError("export_heatmap: output size must be positive");
  const std::size_t c = feature_map.dim(0), h = feature_map.dim(1), w = feature_map.dim(2);
  std::vector<double> avg(h * w, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < h * w; ++i) avg[i] += static_cast<double>(feature_map[ch * h * w + i]);
  }
  for (double& v : avg) v /= static_cast<double>(c);
  const auto [lo, hi] = std::minmax_element(avg.begin(), avg.end());
  const double low = *lo, range = *hi - *lo;
  GrayImage img{out_height, out_width, std::vector<std::uint8_t>(out_height * out_width, 0)};
  if (!(range > 0.0)) return img;
  for (std::size_t y = 0; y < out_height; ++y) {
    const std::size_t sy = y * h / out_height;
    for (std::size_t x = 0; x < out_width; ++x) {
      const std::size_t sx = x * w / out_width;
      const double level = std::round((avg[sy * w + sx] - low) / range * 255.0);
      img.pixels[y * out_width + x] = static_cast<std::uint8_t>(std::clamp(level, 0.0, 255.0));
    }
  }
  return img;
}

template <typename T>
Tensor<T> stack(std::span<const Tensor<T>* const> items) {
  if (items.empty()) throw ContractError("stack: no tensors given");
  const Shape& inner = items.front()->shape();
  Shape shape{items.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  std::vector<T> data;
  data.reserve(shape_numel(shape));
  for (const Tensor<T>* t : items) {
    require_shape("stack", t->shape(), inner);
    data.insert(data.end(), t->data().begin(), t->data().end());
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

Embeddings extract_embeddings(std::span<const Tensor<float>> images, NetworkParams<float>& params,
                              const NetworkConfig& config, std::size_t batch_size) {
  if (batch_size == 0) throw ContractError("extract_embeddings: batch size must be positive");
  Embeddings out;
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const std::size_t end = std::min(images.size(), start + batch_size);
    std::vector<const Tensor<float>*> batch;
    for (std::size_t i = start; i < end; ++i) {
      require_shape("extract_embeddings image", images[i].shape(), config.input_shape());
      batch.push_back(&images[i]);
    }
    Graph<float> g;
    const FmnOutputs<float> v =
        fmn_forward(g, g.constant(stack<float>(batch)), params, config, Mode::kEval, Mode::kEval);
    const auto& gv = v.grn.global_g.value();
    const auto& lv = v.lan.local_l.value();
    const std::size_t m = gv.dim(1);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      out.global.emplace_back(gv.data().begin() + b * m, gv.data().begin() + (b + 1) * m);
      out.local.emplace_back(lv.data().begin() + b * m, lv.data().begin() + (b + 1) * m);
    }
  }
  return out;
}

#define FMN_INSTANTIATE_NETWORK(T)                                                                            \
  template NetworkParams<T> init_params<T>(const NetworkConfig&, std::uint64_t);                             \
  template void set_trainable(NetworkParams<T>&, ParamGroup, bool);                                          \
  template std::vector<Tensor<T>*> trainable_tensors(NetworkParams<T>&, std::initializer_list<ParamGroup>);    \
  template std::uint64_t hash_group(const NetworkParams<T>&, ParamGroup);                                    \
  template GrnOutputs<T> grn_forward(Graph<T>&, Var<T>, GrnParams<T>&, const NetworkConfig&, Mode);           \
  template Var<T> compute_transitional_mask(Var<T>, Var<T>);                                                 \
  template Var<T> reshape_exp_mask(Var<T>, std::size_t, std::size_t);                                        \
  template Var<T> apply_mask(Var<T>, Var<T>);                                                                \
  template LanOutputs<T> lan_forward(Graph<T>&, Var<T>, LanParams<T>&, const NetworkConfig&, Mode);           \
  template FmnOutputs<T> fmn_forward(Graph<T>&, Var<T>, NetworkParams<T>&, const NetworkConfig&, Mode, Mode); \
  template Tensor<T> compute_transitional_mask(const Tensor<T>&, const Tensor<T>&);                          \
  template FeatureMask<T> reshape_exp_mask(const Tensor<T>&, std::size_t, std::size_t);                      \
  template Tensor<T> apply_mask(const Tensor<T>&, const FeatureMask<T>&);                                    \
  template BranchOutputs<T> fmn_forward(const Tensor<T>&, NetworkParams<T>&, const NetworkConfig&, Mode);       \
  template Tensor<T> stack(std::span<const Tensor<T>* const>);

FMN_INSTANTIATE_NETWORK(float)
FMN_INSTANTIATE_NETWORK(double)

#undef FMN_INSTANTIATE_NETWORK

template NetworkParams<double> cast_params<double, float>(const NetworkParams<float>&);
template NetworkParams<float> cast_params<float, double>(const NetworkParams<double>&);
template NetworkParams<float> cast_params<float, float>(const NetworkParams<float>&);

}  // namespace fmn
