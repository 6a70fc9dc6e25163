#include "fmn/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

namespace fmn {

// ---- Graph ------------------------------------------------------------------

template <typename T>
void Graph<T>::check_owner(Var<T> v) const {
  if (v.graph_ != this || v.id_ >= nodes_.size()) {
    throw ContractError("variable does not belong to this graph");
  }
}

template <typename T>
Var<T> Graph<T>::parameter(Tensor<T>& tensor) {
  Node n;
  n.op = "parameter";
  n.external = &tensor;
  n.needs_grad = tensor.requires_grad();
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
  Node n;
  n.op = "constant";
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::input(Tensor<T> value, bool requires_grad) {
  Node n;
  n.op = "input";
  n.owned = std::move(value);
  n.needs_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
const Tensor<T>& Graph<T>::value(Var<T> v) const {
  check_owner(v);
  return nodes_[v.id_].value();
}

template <typename T>
std::span<const T> Graph<T>::grad(Var<T> v) const {
  check_owner(v);
  return nodes_[v.id_].adjoint;
}

template <typename T>
std::span<T> Graph<T>::adjoint(std::size_t id) {
  Node& n = nodes_[id];
  if (n.adjoint.empty()) n.adjoint.assign(n.value().numel(), T{0});
  return n.adjoint;
}

template <typename T>
Var<T> Graph<T>::record(std::string_view op, std::initializer_list<Var<T>> inputs, Tensor<T> out,
                        BackwardFn fn) {
  Node n;
  n.op = op;
  n.owned = std::move(out);
  for (Var<T> v : inputs) {
    check_owner(v);
    n.inputs.push_back(v.id_);
    n.needs_grad = n.needs_grad || nodes_[v.id_].needs_grad;
  }
  if (!fn) n.needs_grad = false;
  if (n.needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
  check_owner(loss);
  if (nodes_[loss.id_].value().numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_to_string(nodes_[loss.id_].value().shape()));
  }
  for (Node& n : nodes_) {
    n.adjoint.clear();
    if (n.external && n.external->requires_grad()) n.external->grad();
  }
  if (!nodes_[loss.id_].needs_grad) return;
  adjoint(loss.id_)[0] = T{1};
  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.adjoint.empty()) continue;
    if (n.backward) {
      GradContext<T> ctx(*this, id);
      n.backward(ctx);
    }
    if (n.external && n.external->requires_grad()) {
      auto g = n.external->grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.adjoint[i];
    }
  }
}

template <typename T>
std::span<const T> GradContext<T>::out_grad() const {
  return graph_.nodes_[node_].adjoint;
}

template <typename T>
const Tensor<T>& GradContext<T>::out_value() const {
  return graph_.nodes_[node_].value();
}

template <typename T>
const Tensor<T>& GradContext<T>::in_value(std::size_t i) const {
  return graph_.nodes_[graph_.nodes_[node_].inputs.at(i)].value();
}

template <typename T>
bool GradContext<T>::needs(std::size_t i) const {
  return graph_.nodes_[graph_.nodes_[node_].inputs.at(i)].needs_grad;
}

template <typename T>
std::span<T> GradContext<T>::in_grad(std::size_t i) {
  return graph_.adjoint(graph_.nodes_[node_].inputs.at(i));
}

// ---- helpers ----------------------------------------------------------------

namespace {

template <typename T>
Graph<T>& graph_of(Var<T> a) {
  if (!a.valid()) throw ContractError("operation on an empty variable");
  return a.graph();
}

template <typename T>
Graph<T>& graph_of(Var<T> a, Var<T> b) {
  Graph<T>& g = graph_of(a);
  if (!b.valid() || &b.graph() != &g) throw ContractError("operands belong to different graphs");
  return g;
}

template <typename T>
void require_same_shape(const char* op, Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

/// Batch/channel/spatial view of a [c,h,w] or [b,c,h,w] shape.
struct ImageDims {
  std::size_t batch, channels, height, width;
  bool batched;
};

ImageDims image_dims(const char* op, const Shape& s) {
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  throw DimensionError(std::string(op) + ": expected [c,h,w] or [b,c,h,w] input, got " + shape_to_string(s));
}

Shape image_shape(const ImageDims& d, std::size_t c, std::size_t h, std::size_t w) {
  return d.batched ? Shape{d.batch, c, h, w} : Shape{c, h, w};
}

/// Row view of a [r] or [b,r] shape.
struct RowDims {
  std::size_t rows, cols;
};

RowDims row_dims(const char* op, const Shape& s) {
  if (s.size() == 1) return {1, s[0]};
  if (s.size() == 2) return {s[0], s[1]};
  throw DimensionError(std::string(op) + ": expected [n] or [b,n] input, got " + shape_to_string(s));
}

template <typename T>
Var<T> elementwise_unary(const char* op, Var<T> x, auto forward, auto derivative) {
  Graph<T>& g = graph_of(x);
  const Tensor<T>& in = x.value();
  Tensor<T> out(in.shape());
  for (std::size_t i = 0; i < in.numel(); ++i) out[i] = forward(in[i]);
  return g.record(op, {x}, std::move(out), [derivative](GradContext<T>& ctx) {
    const auto& xin = ctx.in_value(0);
    const auto& y = ctx.out_value();
    auto go = ctx.out_grad();
    auto gi = ctx.in_grad(0);
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * derivative(xin[i], y[i]);
  });
}

/// Copies one image of a [c,h,w] block into column layout: row k = (ci,ky,kx),
/// column = output position offset by `col0` within a row of `ncols`.
template <typename T>
void im2col(const T* img, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, double* cols,
            std::size_t ncols, std::size_t col0) {
  std::size_t k = 0;
  for (std::size_t ci = 0; ci < c; ++ci) {
    const T* plane = img + ci * h * w;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx, ++k) {
        double* row = cols + k * ncols + col0;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                ix < static_cast<std::ptrdiff_t>(w);
            row[oy * ow + ox] = inside ? static_cast<double>(plane[iy * static_cast<std::ptrdiff_t>(w) + ix]) : 0.0;
          }
        }
      }
    }
  }
}

constexpr std::size_t kConvChunkColumns = 1024;

}  // namespace

// ---- conv2d -----------------------------------------------------------------

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, std::optional<std::type_identity_t<Var<T>>> bias, std::size_t stride,
              std::size_t pad) {
  Graph<T>& g = graph_of(input, kernel);
  const ImageDims d = image_dims("conv2d", input.shape());
  const Shape& ks = kernel.shape();
  if (ks.size() != 4) throw DimensionError("conv2d: kernel must be [c_out,c_in,kh,kw], got " + shape_to_string(ks));
  const std::size_t co = ks[0], kh = ks[2], kw = ks[3];
  if (ks[1] != d.channels) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(ks[1]) + " input channels, input has " +
                         std::to_string(d.channels));
  }
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  if (kh > d.height + 2 * pad || kw > d.width + 2 * pad) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  if (bias) {
    graph_of(input, *bias);
    if (bias->shape() != Shape{co}) throw DimensionError("conv2d: bias must be [c_out]");
  }
  const std::size_t oh = (d.height + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (d.width + 2 * pad - kw) / stride + 1;
  const std::size_t kdim = d.channels * kh * kw;
  const std::size_t positions = oh * ow;
  const std::size_t in_plane = d.channels * d.height * d.width;
  const std::size_t per_chunk = std::max<std::size_t>(1, kConvChunkColumns / positions);

  const T* x = input.value().data().data();
  const T* wt = kernel.value().data().data();
  std::vector<double> wd(wt, wt + co * kdim);
  std::vector<double> bd(co, 0.0);
  if (bias) {
    for (std::size_t o = 0; o < co; ++o) bd[o] = static_cast<double>(bias->value()[o]);
  }

  Tensor<T> out(image_shape(d, co, oh, ow));
  T* y = out.data().data();
  std::vector<double> cols;
  std::vector<double> acc;
  for (std::size_t b0 = 0; b0 < d.batch; b0 += per_chunk) {
    const std::size_t nb = std::min(per_chunk, d.batch - b0);
    const std::size_t ncols = nb * positions;
    cols.assign(kdim * ncols, 0.0);
    for (std::size_t bi = 0; bi < nb; ++bi) {
      im2col(x + (b0 + bi) * in_plane, d.channels, d.height, d.width, kh, kw, stride, pad, oh, ow, cols.data(),
             ncols, bi * positions);
    }
    acc.resize(ncols);
    for (std::size_t o = 0; o < co; ++o) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const double* wrow = wd.data() + o * kdim;
      for (std::size_t k = 0; k < kdim; ++k) {
        const double wk = wrow[k];
        const double* crow = cols.data() + k * ncols;
        for (std::size_t p = 0; p < ncols; ++p) acc[p] += wk * crow[p];
      }
      for (std::size_t bi = 0; bi < nb; ++bi) {
        T* dst = y + ((b0 + bi) * co + o) * positions;
        for (std::size_t p = 0; p < positions; ++p) dst[p] = static_cast<T>(acc[bi * positions + p] + bd[o]);
      }
    }
  }

  auto backward = [=](GradContext<T>& ctx) {
    auto go = ctx.out_grad();
    const T* xin = ctx.in_value(0).data().data();
    const T* kin = ctx.in_value(1).data().data();
    const bool need_x = ctx.needs(0), need_k = ctx.needs(1), need_b = bias.has_value() && ctx.needs(2);
    std::vector<double> dw(need_k ? co * kdim : 0, 0.0);
    std::vector<double> db(need_b ? co : 0, 0.0);
    std::vector<double> kd(kin, kin + co * kdim);
    std::vector<double> cols_buf, dcols, gt, dx;
    for (std::size_t b0 = 0; b0 < d.batch; b0 += per_chunk) {
      const std::size_t nb = std::min(per_chunk, d.batch - b0);
      const std::size_t ncols = nb * positions;
      if (need_b) {
        for (std::size_t bi = 0; bi < nb; ++bi) {
          for (std::size_t o = 0; o < co; ++o) {
            const T* src = go.data() + ((b0 + bi) * co + o) * positions;
            for (std::size_t p = 0; p < positions; ++p) db[o] += static_cast<double>(src[p]);
          }
        }
      }
      if (need_k) {
        cols_buf.assign(kdim * ncols, 0.0);
        for (std::size_t bi = 0; bi < nb; ++bi) {
          im2col(xin + (b0 + bi) * in_plane, d.channels, d.height, d.width, kh, kw, stride, pad, oh, ow,
                 cols_buf.data(), ncols, bi * positions);
        }
        // Output gradient transposed to [column][c_out] so the update runs
        // contiguously over output channels.
        gt.assign(ncols * co, 0.0);
        for (std::size_t bi = 0; bi < nb; ++bi) {
          for (std::size_t o = 0; o < co; ++o) {
            const T* src = go.data() + ((b0 + bi) * co + o) * positions;
            for (std::size_t p = 0; p < positions; ++p) gt[(bi * positions + p) * co + o] = static_cast<double>(src[p]);
          }
        }
        // dw stored as [k][c_out] during accumulation.
        for (std::size_t k = 0; k < kdim; ++k) {
          double* drow = dw.data() + k * co;
          const double* crow = cols_buf.data() + k * ncols;
          for (std::size_t p = 0; p < ncols; ++p) {
            const double c = crow[p];
            const double* grow = gt.data() + p * co;
            for (std::size_t o = 0; o < co; ++o) drow[o] += c * grow[o];
          }
        }
      }
      if (need_x) {
        dcols.assign(kdim * ncols, 0.0);
        for (std::size_t o = 0; o < co; ++o) {
          for (std::size_t k = 0; k < kdim; ++k) {
            const double wk = kd[o * kdim + k];
            double* drow = dcols.data() + k * ncols;
            for (std::size_t bi = 0; bi < nb; ++bi) {
              const T* src = go.data() + ((b0 + bi) * co + o) * positions;
              double* dst = drow + bi * positions;
              for (std::size_t p = 0; p < positions; ++p) dst[p] += wk * static_cast<double>(src[p]);
            }
          }
        }
        auto gi = ctx.in_grad(0);
        for (std::size_t bi = 0; bi < nb; ++bi) {
          dx.assign(in_plane, 0.0);
          std::size_t k = 0;
          for (std::size_t ci = 0; ci < d.channels; ++ci) {
            for (std::size_t ky = 0; ky < kh; ++ky) {
              for (std::size_t kx = 0; kx < kw; ++kx, ++k) {
                const double* row = dcols.data() + k * ncols + bi * positions;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                  const std::ptrdiff_t iy =
                      static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.height)) continue;
                  for (std::size_t ox = 0; ox < ow; ++ox) {
                    const std::ptrdiff_t ix =
                        static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.width)) continue;
                    dx[(ci * d.height + static_cast<std::size_t>(iy)) * d.width + static_cast<std::size_t>(ix)] +=
                        row[oy * ow + ox];
                  }
                }
              }
            }
          }
          T* dst = gi.data() + (b0 + bi) * in_plane;
          for (std::size_t i = 0; i < in_plane; ++i) dst[i] += static_cast<T>(dx[i]);
        }
      }
    }
    if (need_k) {
      auto gk = ctx.in_grad(1);
      for (std::size_t o = 0; o < co; ++o) {
        for (std::size_t k = 0; k < kdim; ++k) gk[o * kdim + k] += static_cast<T>(dw[k * co + o]);
      }
    }
    if (need_b) {
      auto gb = ctx.in_grad(2);
      for (std::size_t o = 0; o < co; ++o) gb[o] += static_cast<T>(db[o]);
    }
  };
  if (bias) return g.record("conv2d", {input, kernel, *bias}, std::move(out), backward);
  return g.record("conv2d", {input, kernel}, std::move(out), backward);
}

// ---- maxpool2d --------------------------------------------------------------

template <typename T>
Var<T> maxpool2d(Var<T> input, std::size_t window, std::size_t stride) {
  Graph<T>& g = graph_of(input);
  const ImageDims d = image_dims("maxpool2d", input.shape());
  if (window < 1 || stride < 1) throw ContractError("maxpool2d: window and stride must be >= 1");
  if (window > d.height || window > d.width) {
    throw DimensionError("maxpool2d: window " + std::to_string(window) + " exceeds spatial extent " +
                         std::to_string(d.height) + "x" + std::to_string(d.width));
  }
  const std::size_t oh = (d.height - window) / stride + 1;
  const std::size_t ow = (d.width - window) / stride + 1;
  const T* x = input.value().data().data();
  Tensor<T> out(image_shape(d, d.channels, oh, ow));
  std::vector<std::size_t> argmax(out.numel());
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < d.batch * d.channels; ++plane) {
    const std::size_t base = plane * d.height * d.width;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
        std::size_t best = base + (oy * stride) * d.width + ox * stride;
        for (std::size_t ky = 0; ky < window; ++ky) {
          for (std::size_t kx = 0; kx < window; ++kx) {
            const std::size_t idx = base + (oy * stride + ky) * d.width + ox * stride + kx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        argmax[o] = best;
        out[o] = x[best];
      }
    }
  }
  if (g.tracking_branches()) {
    for (std::size_t a : argmax) g.note_branch(a);
  }
  return g.record("maxpool2d", {input}, std::move(out), [argmax = std::move(argmax)](GradContext<T>& ctx) {
    auto go = ctx.out_grad();
    auto gi = ctx.in_grad(0);
    for (std::size_t i = 0; i < go.size(); ++i) gi[argmax[i]] += go[i];
  });
}

// ---- linear -----------------------------------------------------------------

template <typename T>
Var<T> linear(Var<T> input, Var<T> weight, std::optional<std::type_identity_t<Var<T>>> bias) {
  Graph<T>& g = graph_of(input, weight);
  const RowDims r = row_dims("linear", input.shape());
  const Shape& ws = weight.shape();
  if (ws.size() != 2 || ws[0] != r.cols) {
    throw DimensionError("linear: weight " + shape_to_string(ws) + " incompatible with input " +
                         shape_to_string(input.shape()));
  }
  const std::size_t m = r.cols, n = ws[1];
  if (bias) {
    graph_of(input, *bias);
    if (bias->shape() != Shape{n}) throw DimensionError("linear: bias must be [" + std::to_string(n) + "]");
  }
  const T* x = input.value().data().data();
  const T* w = weight.value().data().data();
  Tensor<T> out(input.shape().size() == 1 ? Shape{n} : Shape{r.rows, n});
  std::vector<double> acc(n);
  for (std::size_t b = 0; b < r.rows; ++b) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const double xi = static_cast<double>(x[b * m + i]);
      const T* wrow = w + i * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += xi * static_cast<double>(wrow[j]);
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double bj = bias ? static_cast<double>(bias->value()[j]) : 0.0;
      out[b * n + j] = static_cast<T>(acc[j] + bj);
    }
  }
  auto backward = [r, m, n, has_bias = bias.has_value()](GradContext<T>& ctx) {
    auto go = ctx.out_grad();
    const T* xin = ctx.in_value(0).data().data();
    const T* win = ctx.in_value(1).data().data();
    if (ctx.needs(0)) {
      auto gi = ctx.in_grad(0);
      for (std::size_t b = 0; b < r.rows; ++b) {
        for (std::size_t i = 0; i < m; ++i) {
          double s = 0.0;
          const T* wrow = win + i * n;
          for (std::size_t j = 0; j < n; ++j) s += static_cast<double>(go[b * n + j]) * static_cast<double>(wrow[j]);
          gi[b * m + i] += static_cast<T>(s);
        }
      }
    }
    if (ctx.needs(1)) {
      std::vector<double> dw(m * n, 0.0);
      for (std::size_t b = 0; b < r.rows; ++b) {
        for (std::size_t i = 0; i < m; ++i) {
          const double xi = static_cast<double>(xin[b * m + i]);
          double* drow = dw.data() + i * n;
          for (std::size_t j = 0; j < n; ++j) drow[j] += xi * static_cast<double>(go[b * n + j]);
        }
      }
      auto gw = ctx.in_grad(1);
      for (std::size_t i = 0; i < m * n; ++i) gw[i] += static_cast<T>(dw[i]);
    }
    if (has_bias && ctx.needs(2)) {
      auto gb = ctx.in_grad(2);
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t b = 0; b < r.rows; ++b) s += static_cast<double>(go[b * n + j]);
        gb[j] += static_cast<T>(s);
      }
    }
  };
  if (bias) return g.record("linear", {input, weight, *bias}, std::move(out), backward);
  return g.record("linear", {input, weight}, std::move(out), backward);
}

// ---- elementwise --------------------------------------------------------------

template <typename T>
Var<T> relu(Var<T> input) {
  Graph<T>& g = input.graph();
  if (g.tracking_branches()) {
    std::uint64_t bit = 0;
    for (T v : input.value().data()) g.note_branch((bit++ << 1) | (v > T{0} ? 1u : 0u));
  }
  return elementwise_unary<T>(
      "relu", input, [](T v) { return v > T{0} ? v : T{0}; },
      [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> exp(Var<T> input) {
  return elementwise_unary<T>(
      "exp", input, [](T v) { return static_cast<T>(std::exp(static_cast<double>(v))); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> scale(Var<T> input, T factor) {
  return elementwise_unary<T>(
      "scale", input, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Var<T> add_scalar(Var<T> input, T offset) {
  return elementwise_unary<T>(
      "add_scalar", input, [offset](T v) { return v + offset; }, [](T, T) { return T{1}; });
}

template <typename T>
Var<T> residual_add(Var<T> a, Var<T> b) {
  Graph<T>& g = graph_of(a, b);
  require_same_shape("residual_add", a, b);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return g.record("residual_add", {a, b}, std::move(out), [](GradContext<T>& ctx) {
    auto go = ctx.out_grad();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!ctx.needs(k)) continue;
      auto gi = ctx.in_grad(k);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  Graph<T>& g = graph_of(a, b);
  require_same_shape("sub", a, b);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  return g.record("sub", {a, b}, std::move(out), [](GradContext<T>& ctx) {
    auto go = ctx.out_grad();
    if (ctx.needs(0)) {
      auto gi = ctx.in_grad(0);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
    }
    if (ctx.needs(1)) {
      auto gi = ctx.in_grad(1);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] -= go[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Graph<T>& g = graph_of(a, b);
  require_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return g.record("mul", {a, b}, std::move(out), [](GradContext<T>& ctx) {
    auto go = ctx.out_grad();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!ctx.needs(k)) continue;
      const auto& other = ctx.in_value(1 - k);
      auto gi = ctx.in_grad(k);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * other[i];
    }
  });
}

// ---- reductions -------------------------------------------------------------

template <typename T>
Var<T> sum(Var<T> input) {
  Graph<T>& g = graph_of(input);
  double s = 0.0;
  for (T v : input.value().data()) s += static_cast<double>(v);
  return g.record("sum", {input}, Tensor<T>::scalar(static_cast<T>(s)), [](GradContext<T>& ctx) {
    const T go = ctx.out_grad()[0];
    for (T& v : ctx.in_grad(0)) v += go;
  });
}

template <typename T>
Var<T> mean(Var<T> input) {
  Graph<T>& g = graph_of(input);
  const std::size_t n = input.value().numel();
  double s = 0.0;
  for (T v : input.value().data()) s += static_cast<double>(v);
  return g.record("mean", {input}, Tensor<T>::scalar(static_cast<T>(s / static_cast<double>(n))),
                  [n](GradContext<T>& ctx) {
                    const T go = static_cast<T>(static_cast<double>(ctx.out_grad()[0]) / static_cast<double>(n));
                    for (T& v : ctx.in_grad(0)) v += go;
                  });
}

template <typename T>
Var<T> global_avg_pool(Var<T> input) {
  Graph<T>& g = graph_of(input);
  const ImageDims d = image_dims("global_avg_pool", input.shape());
  const std::size_t hw = d.height * d.width;
  const T* x = input.value().data().data();
  Tensor<T> out(d.batched ? Shape{d.batch, d.channels} : Shape{d.channels});
  for (std::size_t plane = 0; plane < d.batch * d.channels; ++plane) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += static_cast<double>(x[plane * hw + i]);
    out[plane] = static_cast<T>(s / static_cast<double>(hw));
  }
  return g.record("global_avg_pool", {input}, std::move(out), [hw](GradContext<T>& ctx) {
    auto go = ctx.out_grad();
    auto gi = ctx.in_grad(0);
    for (std::size_t plane = 0; plane < go.size(); ++plane) {
      const T share = static_cast<T>(static_cast<double>(go[plane]) / static_cast<double>(hw));
      for (std::size_t i = 0; i < hw; ++i) gi[plane * hw + i] += share;
    }
  });
}

// ---- batch norm ---------------------------------------------------------------

template <typename T>
Var<T> batchnorm2d(Var<T> input, Var<T> gamma, Var<T> beta, BatchNormStats<T>& stats, Mode mode) {
  Graph<T>& g = graph_of(input, gamma);
  graph_of(input, beta);
  const Shape& s = input.shape();
  if (s.size() != 4) throw DimensionError("batchnorm2d: expected [b,c,h,w] input, got " + shape_to_string(s));
  const std::size_t batch = s[0], channels = s[1], hw = s[2] * s[3];
  const Shape cshape{channels};
  if (gamma.shape() != cshape || beta.shape() != cshape || stats.running_mean.shape() != cshape ||
      stats.running_var.shape() != cshape) {
    throw DimensionError("batchnorm2d: per-channel parameters must be [" + std::to_string(channels) + "]");
  }
  if (mode == Mode::kTrain && batch < 2) {
    throw InvalidBatchError("batchnorm2d: train mode needs a batch of at least 2, got " + std::to_string(batch));
  }
  const T* x = input.value().data().data();
  const auto& gm = gamma.value();
  const auto& bt = beta.value();
  const std::size_t count = batch * hw;
  Tensor<T> out(s);
  std::vector<double> xhat(input.value().numel());
  std::vector<double> inv_std(channels);

  for (std::size_t c = 0; c < channels; ++c) {
    double mu, var;
    if (mode == Mode::kTrain) {
      double acc = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = x + (b * channels + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += static_cast<double>(p[i]);
      }
      mu = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = x + (b * channels + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double dv = static_cast<double>(p[i]) - mu;
          sq += dv * dv;
        }
      }
      var = sq / static_cast<double>(count);
      const double unbiased = sq / static_cast<double>(count - 1);
      stats.running_mean[c] = static_cast<T>((1.0 - kBatchNormMomentum) * static_cast<double>(stats.running_mean[c]) +
                                             kBatchNormMomentum * mu);
      stats.running_var[c] = static_cast<T>((1.0 - kBatchNormMomentum) * static_cast<double>(stats.running_var[c]) +
                                            kBatchNormMomentum * unbiased);
    } else {
      mu = static_cast<double>(stats.running_mean[c]);
      var = static_cast<double>(stats.running_var[c]);
    }
    inv_std[c] = 1.0 / std::sqrt(var + kBatchNormEps);
    const double gc = static_cast<double>(gm[c]);
    const double bc = static_cast<double>(bt[c]);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * channels + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double xh = (static_cast<double>(x[off + i]) - mu) * inv_std[c];
        xhat[off + i] = xh;
        out[off + i] = static_cast<T>(gc * xh + bc);
      }
    }
  }

  auto backward = [batch, channels, hw, mode, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      GradContext<T>& ctx) {
    auto go = ctx.out_grad();
    const auto& gm = ctx.in_value(1);
    const double n = static_cast<double>(batch * hw);
    std::vector<double> dgamma(channels, 0.0), dbeta(channels, 0.0);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t off = (b * channels + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double gv = static_cast<double>(go[off + i]);
          dbeta[c] += gv;
          dgamma[c] += gv * xhat[off + i];
        }
      }
    }
    if (ctx.needs(0)) {
      auto gi = ctx.in_grad(0);
      for (std::size_t c = 0; c < channels; ++c) {
        const double gc = static_cast<double>(gm[c]);
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t off = (b * channels + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            double dx;
            if (mode == Mode::kTrain) {
              const double dxh = static_cast<double>(go[off + i]) * gc;
              // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
              dx = inv_std[c] / n * (n * dxh - gc * dbeta[c] - xhat[off + i] * gc * dgamma[c]);
            } else {
              dx = static_cast<double>(go[off + i]) * gc * inv_std[c];
            }
            gi[off + i] += static_cast<T>(dx);
          }
        }
      }
    }
    if (ctx.needs(1)) {
      auto gg = ctx.in_grad(1);
      for (std::size_t c = 0; c < channels; ++c) gg[c] += static_cast<T>(dgamma[c]);
    }
    if (ctx.needs(2)) {
      auto gb = ctx.in_grad(2);
      for (std::size_t c = 0; c < channels; ++c) gb[c] += static_cast<T>(dbeta[c]);
    }
  };
  return g.record("batchnorm2d", {input, gamma, beta}, std::move(out), std::move(backward));
}

// ---- softmax / cross entropy --------------------------------------------------

template <typename T>
Var<T> softmax(Var<T> input) {
  Graph<T>& g = graph_of(input);
  const RowDims r = row_dims("softmax", input.shape());
  const T* x = input.value().data().data();
  Tensor<T> out(input.shape());
  for (std::size_t b = 0; b < r.rows; ++b) {
    const T* row = x + b * r.cols;
    const double mx = static_cast<double>(*std::max_element(row, row + r.cols));
    double z = 0.0;
    for (std::size_t j = 0; j < r.cols; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    for (std::size_t j = 0; j < r.cols; ++j) {
      out[b * r.cols + j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - mx) / z);
    }
  }
  return g.record("softmax", {input}, std::move(out), [r](GradContext<T>& ctx) {
    auto go = ctx.out_grad();
    const auto& y = ctx.out_value();
    auto gi = ctx.in_grad(0);
    for (std::size_t b = 0; b < r.rows; ++b) {
      double dot = 0.0;
      for (std::size_t j = 0; j < r.cols; ++j) {
        dot += static_cast<double>(go[b * r.cols + j]) * static_cast<double>(y[b * r.cols + j]);
      }
      for (std::size_t j = 0; j < r.cols; ++j) {
        const std::size_t i = b * r.cols + j;
        gi[i] += static_cast<T>(static_cast<double>(y[i]) * (static_cast<double>(go[i]) - dot));
      }
    }
  });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::size_t> labels) {
  Graph<T>& g = graph_of(logits);
  const RowDims r = row_dims("cross_entropy", logits.shape());
  if (labels.size() != r.rows) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(r.rows) + " rows");
  }
  const T* x = logits.value().data().data();
  std::vector<double> probs(r.rows * r.cols);
  double total = 0.0;
  for (std::size_t b = 0; b < r.rows; ++b) {
    if (labels[b] >= r.cols) {
      throw ContractError("cross_entropy: label " + std::to_string(labels[b]) + " outside [0, " +
                          std::to_string(r.cols) + ")");
    }
    const T* row = x + b * r.cols;
    const double mx = static_cast<double>(*std::max_element(row, row + r.cols));
    double z = 0.0;
    for (std::size_t j = 0; j < r.cols; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    for (std::size_t j = 0; j < r.cols; ++j) probs[b * r.cols + j] = std::exp(static_cast<double>(row[j]) - mx) / z;
    total += std::log(z) + mx - static_cast<double>(row[labels[b]]);
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return g.record("cross_entropy", {logits}, Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(r.rows))),
                  [r, probs = std::move(probs), lab = std::move(lab)](GradContext<T>& ctx) {
                    const double go = static_cast<double>(ctx.out_grad()[0]) / static_cast<double>(r.rows);
                    auto gi = ctx.in_grad(0);
                    for (std::size_t b = 0; b < r.rows; ++b) {
                      for (std::size_t j = 0; j < r.cols; ++j) {
                        const double target = j == lab[b] ? 1.0 : 0.0;
                        gi[b * r.cols + j] += static_cast<T>(go * (probs[b * r.cols + j] - target));
                      }
                    }
                  });
}

// ---- indexing / masking -------------------------------------------------------

template <typename T>
Var<T> gather(Var<T> input, std::vector<std::size_t> index, Shape shape) {
  Graph<T>& g = graph_of(input);
  if (shape_numel(shape) != index.size()) throw DimensionError("gather: index count does not match output shape");
  const auto& in = input.value();
  Tensor<T> out(std::move(shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= in.numel()) throw DimensionError("gather: index out of range");
    out[i] = in[index[i]];
  }
  return g.record("gather", {input}, std::move(out), [index = std::move(index)](GradContext<T>& ctx) {
    auto go = ctx.out_grad();
    auto gi = ctx.in_grad(0);
    for (std::size_t i = 0; i < index.size(); ++i) gi[index[i]] += go[i];
  });
}

template <typename T>
Var<T> channel_mask(Var<T> features, Var<T> mask) {
  Graph<T>& g = graph_of(features, mask);
  const ImageDims d = image_dims("channel_mask", features.shape());
  const Shape expected = d.batched ? Shape{d.batch, d.height, d.width} : Shape{d.height, d.width};
  if (mask.shape() != expected) {
    throw DimensionError("channel_mask: mask " + shape_to_string(mask.shape()) + " does not match features " +
                         shape_to_string(features.shape()));
  }
  const std::size_t hw = d.height * d.width;
  const auto& f = features.value();
  const auto& m = mask.value();
  Tensor<T> out(features.shape());
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t c = 0; c < d.channels; ++c) {
      const std::size_t off = (b * d.channels + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) out[off + i] = f[off + i] * m[b * hw + i];
    }
  }
  return g.record("channel_mask", {features, mask}, std::move(out), [d, hw](GradContext<T>& ctx) {
    auto go = ctx.out_grad();
    const auto& f = ctx.in_value(0);
    const auto& m = ctx.in_value(1);
    if (ctx.needs(0)) {
      auto gf = ctx.in_grad(0);
      for (std::size_t b = 0; b < d.batch; ++b) {
        for (std::size_t c = 0; c < d.channels; ++c) {
          const std::size_t off = (b * d.channels + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) gf[off + i] += go[off + i] * m[b * hw + i];
        }
      }
    }
    if (ctx.needs(1)) {
      auto gm = ctx.in_grad(1);
      std::vector<double> acc(hw);
      for (std::size_t b = 0; b < d.batch; ++b) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t c = 0; c < d.channels; ++c) {
          const std::size_t off = (b * d.channels + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            acc[i] += static_cast<double>(go[off + i]) * static_cast<double>(f[off + i]);
          }
        }
        for (std::size_t i = 0; i < hw; ++i) gm[b * hw + i] += static_cast<T>(acc[i]);
      }
    }
  });
}

template <typename T>
Var<T> detach(Var<T> input) {
  return graph_of(input).constant(input.value());
}

// ---- grad_check -----------------------------------------------------------------

namespace {

/// Shared probing loop: `eval` returns the loss and branch signature for the
/// current contents of `probe`.
template <typename T, typename Eval>
double central_difference_error(std::span<T> probe, std::span<const T> analytic, std::uint64_t signature,
                                double eps, Eval&& eval, std::size_t* skipped) {
  double worst = 0.0;
  std::size_t skip = 0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const T original = probe[i];
    const T up = static_cast<T>(static_cast<double>(original) + eps);
    const T down = static_cast<T>(static_cast<double>(original) - eps);
    probe[i] = up;
    const auto [f_up, sig_up] = eval();
    probe[i] = down;
    const auto [f_down, sig_down] = eval();
    probe[i] = original;
    if (sig_up != signature || sig_down != signature) {
      ++skip;
      continue;
    }
    // Divide by the step actually representable in T.
    const double central = (f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down));
    const double err = std::abs(static_cast<double>(analytic[i]) - central) / std::max(1.0, std::abs(central));
    worst = std::max(worst, err);
  }
  if (skipped) *skipped = skip;
  return worst;
}

}  // namespace

template <typename T>
double grad_check(const ScalarFn<T>& fn, const Tensor<T>& input, double eps, std::size_t* skipped) {
  if (!(eps > 0.0)) throw ContractError("grad_check: eps must be positive");
  std::vector<T> analytic(input.numel(), T{0});
  std::uint64_t signature = 0;
  {
    Graph<T> g;
    g.track_branches(true);
    Var<T> x = g.input(input, true);
    Var<T> y = fn(g, x);
    signature = g.branch_signature();
    g.backward(y);
    auto gr = g.grad(x);
    if (!gr.empty()) analytic.assign(gr.begin(), gr.end());
  }
  Tensor<T> probe = input;
  auto eval = [&] {
    Graph<T> g;
    g.track_branches(true);
    Var<T> x = g.input(probe, false);
    const double f = static_cast<double>(fn(g, x).value().item());
    return std::pair{f, g.branch_signature()};
  };
  return central_difference_error<T>(probe.data(), analytic, signature, eps, eval, skipped);
}

template <typename T>
double parameter_grad_check(const LossFn<T>& loss, Tensor<T>& param, double eps, std::size_t* skipped) {
  if (!(eps > 0.0)) throw ContractError("parameter_grad_check: eps must be positive");
  const bool had_flag = param.requires_grad();
  param.set_requires_grad(true);
  param.clear_grad();
  std::uint64_t signature = 0;
  {
    Graph<T> g;
    g.track_branches(true);
    Var<T> y = loss(g);
    signature = g.branch_signature();
    g.backward(y);
  }
  std::vector<T> analytic(param.numel(), T{0});
  if (param.has_grad()) analytic.assign(std::as_const(param).grad().begin(), std::as_const(param).grad().end());
  param.clear_grad();
  param.set_requires_grad(false);
  auto eval = [&] {
    Graph<T> g;
    g.track_branches(true);
    const double f = static_cast<double>(loss(g).value().item());
    return std::pair{f, g.branch_signature()};
  };
  const double worst = central_difference_error<T>(param.data(), analytic, signature, eps, eval, skipped);
  param.set_requires_grad(had_flag);
  return worst;
}

// ---- instantiations -------------------------------------------------------------

#define FMN_INSTANTIATE_AUTOGRAD(T)                                                                     \
  template class Graph<T>;                                                                             \
  template class GradContext<T>;                                                                       \
  template Var<T> conv2d(Var<T>, Var<T>, std::optional<Var<T>>, std::size_t, std::size_t);              \
  template Var<T> maxpool2d(Var<T>, std::size_t, std::size_t);                                          \
  template Var<T> linear(Var<T>, Var<T>, std::optional<Var<T>>);                                        \
  template Var<T> relu(Var<T>);                                                                         \
  template Var<T> exp(Var<T>);                                                                          \
  template Var<T> batchnorm2d(Var<T>, Var<T>, Var<T>, BatchNormStats<T>&, Mode);                        \
  template Var<T> softmax(Var<T>);                                                                      \
  template Var<T> cross_entropy(Var<T>, std::span<const std::size_t>);                                  \
  template Var<T> residual_add(Var<T>, Var<T>);                                                         \
  template Var<T> sub(Var<T>, Var<T>);                                                                  \
  template Var<T> mul(Var<T>, Var<T>);                                                                  \
  template Var<T> scale(Var<T>, T);                                                                     \
  template Var<T> add_scalar(Var<T>, T);                                                                \
  template Var<T> sum(Var<T>);                                                                          \
  template Var<T> mean(Var<T>);                                                                         \
  template Var<T> global_avg_pool(Var<T>);                                                              \
  template Var<T> gather(Var<T>, std::vector<std::size_t>, Shape);                                      \
  template Var<T> channel_mask(Var<T>, Var<T>);                                                         \
  template Var<T> detach(Var<T>);                                                                       \
  template double grad_check(const ScalarFn<T>&, const Tensor<T>&, double, std::size_t*);                            \
  template double parameter_grad_check(const LossFn<T>&, Tensor<T>&, double, std::size_t*);

FMN_INSTANTIATE_AUTOGRAD(float)
FMN_INSTANTIATE_AUTOGRAD(double)

#undef FMN_INSTANTIATE_AUTOGRAD

}  // namespace fmn
