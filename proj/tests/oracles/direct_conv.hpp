#pragma once

#include <cstddef>
#include <vector>

namespace fmn::oracle {

/// Convolution straight from its definition: one output at a time, zero
/// padding, double accumulation over (c_in, ky, kx), bias added last.
/// input is [c_in,h,w], kernel [c_out,c_in,kh,kw].
template <typename T>
std::vector<T> direct_conv2d(const std::vector<T>& input, std::size_t c_in, std::size_t h, std::size_t w,
                             const std::vector<T>& kernel, std::size_t c_out, std::size_t kh, std::size_t kw,
                             const std::vector<T>& bias, std::size_t stride, std::size_t pad, std::size_t& oh,
                             std::size_t& ow) {
  oh = (h + 2 * pad - kh) / stride + 1;
  ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<T> out(c_out * oh * ow);
  for (std::size_t o = 0; o < c_out; ++o) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (std::size_t c = 0; c < c_in; ++c) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long iy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(x * stride + kx) - static_cast<long>(pad);
              double v = 0.0;
              if (iy >= 0 && ix >= 0 && iy < static_cast<long>(h) && ix < static_cast<long>(w)) {
                v = static_cast<double>(input[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)]);
              }
              acc += static_cast<double>(kernel[((o * c_in + c) * kh + ky) * kw + kx]) * v;
            }
          }
        }
        out[(o * oh + y) * ow + x] = static_cast<T>(acc + (bias.empty() ? 0.0 : static_cast<double>(bias[o])));
      }
    }
  }
  return out;
}

}  // namespace fmn::oracle
