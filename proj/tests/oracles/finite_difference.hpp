#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace fmn::oracle {

/// Central-difference gradient of f at x, one coordinate at a time.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double eps) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double up = f(x);
    x[i] = keep - eps;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

/// max_i |a_i - b_i| / max(1, |b_i|)
template <typename A>
double max_relative_error(const A& analytic, const std::vector<double>& reference) {
  double worst = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double a = static_cast<double>(analytic[i]);
    worst = std::max(worst, std::abs(a - reference[i]) / std::max(1.0, std::abs(reference[i])));
  }
  return worst;
}

}  // namespace fmn::oracle
