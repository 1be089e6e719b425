#pragma once

// Shared test utilities: independent oracles and finite-difference helpers.
// Everything here must stay independent of the implementation paths it
// checks.

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "capembed/common.hpp"

namespace testutil {

// Brute-force Spearman coefficient 1 - 6*sum(d^2)/(n(n^2-1)) on integer
// ranks; only valid for tie-free inputs.
inline double spearman_formula(std::span<const double> rank_x, std::span<const double> rank_y) {
  const double n = static_cast<double>(rank_x.size());
  double sum_sq = 0.0;
  for (std::size_t i = 0; i < rank_x.size(); ++i) {
    const double d = rank_x[i] - rank_y[i];
    sum_sq += d * d;
  }
  return 1.0 - 6.0 * sum_sq / (n * (n * n - 1.0));
}

// Tie-free ranks by brute force: rank = 1 + count of strictly smaller values.
inline std::vector<double> brute_rank(std::span<const double> values) {
  std::vector<double> r(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    double rank = 1.0;
    for (std::size_t j = 0; j < values.size(); ++j) {
      if (values[j] < values[i]) rank += 1.0;
    }
    r[i] = rank;
  }
  return r;
}

// Central finite difference of a scalar function along coordinate i.
inline double central_diff(const std::function<double(std::span<const double>)>& f,
                           std::vector<double> x, std::size_t i, double h = 1e-5) {
  x[i] += h;
  const double up = f(x);
  x[i] -= 2.0 * h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

inline double rel_error(double got, double want) {
  const double scale = std::max({std::fabs(got), std::fabs(want), 1e-8});
  return std::fabs(got - want) / scale;
}

// Gradient-check comparison: relative tolerance with a small absolute floor
// that absorbs finite-difference roundoff on true-zero derivatives.
inline bool grad_close(double got, double want, double rtol = 1e-4, double atol = 1e-9) {
  return std::fabs(got - want) <= atol + rtol * std::max(std::fabs(got), std::fabs(want));
}

inline std::vector<double> random_vector(capembed::Rng& rng, std::size_t n, double lo = -1.0,
                                         double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace testutil
