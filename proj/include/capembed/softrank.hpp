#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace capembed {

struct SoftRankConfig {
  // Strength of the quadratic regularizer; soft ranks converge to hard ranks
  // as this goes to zero.
  double regularization = 1.0;
};

// Ascending ranks in {1..n}; tied values receive the average of the ranks
// they span (fractional ranks).
inline std::vector<double> hard_rank(std::span<const double> values) {
  const std::size_t n = values.size();
  if (n == 0) throw std::invalid_argument("hard_rank: empty input");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    // positions i..j (0-based) share the average rank
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

namespace detail {

// Pool-adjacent-violators for argmin_v 0.5*||v - y||^2 s.t. v_1 >= ... >= v_n.
// Also emits the block id per position; the Jacobian of the solution w.r.t.
// y averages within each block.
struct IsotonicResult {
  std::vector<double> solution;
  std::vector<std::size_t> block_of;
  std::size_t block_count = 0;
};

inline IsotonicResult isotonic_l2(std::span<const double> y) {
  const std::size_t n = y.size();
  IsotonicResult out;
  out.solution.resize(n);
  out.block_of.resize(n);
  std::vector<double> sum;
  std::vector<std::size_t> count;
  sum.reserve(n);
  count.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    sum.push_back(y[i]);
    count.push_back(1);
    // merge while the trailing block means violate the non-increasing order
    while (sum.size() > 1) {
      const std::size_t m = sum.size();
      if (sum[m - 2] * static_cast<double>(count[m - 1]) >
          sum[m - 1] * static_cast<double>(count[m - 2])) {
        break;  // strictly decreasing, no violation
      }
      sum[m - 2] += sum[m - 1];
      count[m - 2] += count[m - 1];
      sum.pop_back();
      count.pop_back();
    }
  }
  std::size_t pos = 0;
  for (std::size_t b = 0; b < sum.size(); ++b) {
    const double mean = sum[b] / static_cast<double>(count[b]);
    for (std::size_t k = 0; k < count[b]; ++k, ++pos) {
      out.solution[pos] = mean;
      out.block_of[pos] = b;
    }
  }
  out.block_count = sum.size();
  return out;
}

}  // namespace detail

// Result of the soft-rank operator: the ranks plus the exact Jacobian of the
// operator, available as a linear map through the isotonic block structure.
class SoftRanks {
 public:
  const std::vector<double>& ranks() const { return ranks_; }

  // Applies the Jacobian of soft_rank at the evaluated point to `v`.
  // The Jacobian is symmetric (a scaled permuted block-centering projection),
  // so the same call serves as both JVP and VJP.
  std::vector<double> apply_jacobian(std::span<const double> v) const {
    const std::size_t n = ranks_.size();
    if (v.size() != n) throw std::invalid_argument("SoftRanks::apply_jacobian: size mismatch");
    std::vector<double> w(n);
    for (std::size_t k = 0; k < n; ++k) w[k] = v[perm_[k]];
    std::vector<double> block_mean(block_count_, 0.0);
    std::vector<double> block_size(block_count_, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      block_mean[block_of_[k]] += w[k];
      block_size[block_of_[k]] += 1.0;
    }
    for (std::size_t b = 0; b < block_count_; ++b) block_mean[b] /= block_size[b];
    std::vector<double> out(n);
    for (std::size_t k = 0; k < n; ++k) {
      out[perm_[k]] = (w[k] - block_mean[block_of_[k]]) * inv_eps_;
    }
    return out;
  }

 private:
  friend SoftRanks soft_rank(std::span<const double>, const SoftRankConfig&);
  std::vector<double> ranks_;
  std::vector<std::size_t> perm_;      // descending order of the inputs
  std::vector<std::size_t> block_of_;  // isotonic block per sorted position
  std::size_t block_count_ = 0;
  double inv_eps_ = 1.0;
};

// Differentiable ascending ranks: the Euclidean projection of values/eps onto
// the permutahedron generated by (n, n-1, ..., 1), computed by sorting plus
// isotonic regression in O(n log n). Coordinates always sum to n(n+1)/2, the
// operator is monotone and shift-invariant, and it converges to hard_rank as
// eps -> 0.
inline SoftRanks soft_rank(std::span<const double> values, const SoftRankConfig& cfg = {}) {
  const std::size_t n = values.size();
  if (n < 2) throw std::invalid_argument("soft_rank: need at least 2 values");
  if (!(cfg.regularization > 0.0)) {
    throw std::invalid_argument("soft_rank: regularization must be positive");
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw std::invalid_argument("soft_rank: non-finite input");
  }

  SoftRanks result;
  result.inv_eps_ = 1.0 / cfg.regularization;
  result.perm_.resize(n);
  std::iota(result.perm_.begin(), result.perm_.end(), std::size_t{0});
  std::stable_sort(result.perm_.begin(), result.perm_.end(), [&](std::size_t a, std::size_t b) {
    return values[a] > values[b];
  });

  // Isotonic input: descending-sorted values/eps minus the target vertex
  // (n, n-1, ..., 1). The primal projection is (sorted input) - (dual sol).
  std::vector<double> y(n);
  for (std::size_t k = 0; k < n; ++k) {
    y[k] = values[result.perm_[k]] * result.inv_eps_ - static_cast<double>(n - k);
  }
  auto iso = detail::isotonic_l2(y);
  result.block_of_ = std::move(iso.block_of);
  result.block_count_ = iso.block_count;
  result.ranks_.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    result.ranks_[result.perm_[k]] =
        values[result.perm_[k]] * result.inv_eps_ - iso.solution[k];
  }
  return result;
}

// Pearson correlation; the building block for Spearman correlations on ranks.
inline double pearson(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  if (n != y.size() || n < 2) throw std::invalid_argument("pearson: bad inputs");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) {
    throw std::invalid_argument("pearson: zero variance input");
  }
  return sxy / std::sqrt(sxx * syy);
}

// Spearman rank correlation with fractional hard ranks on both sides.
inline double spearman_hard(std::span<const double> x, std::span<const double> y) {
  const auto rx = hard_rank(x);
  const auto ry = hard_rank(y);
  return pearson(rx, ry);
}

}  // namespace capembed
