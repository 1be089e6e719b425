#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

#include "capembed/softrank.hpp"
#include "helpers.hpp"

using capembed::Rng;
using capembed::SoftRankConfig;
using capembed::hard_rank;
using capembed::soft_rank;

TEST_CASE("hard_rank orders and averages ties") {
  const std::vector<double> a{0.3, 0.1, 0.2};
  CHECK(hard_rank(a) == std::vector<double>{3.0, 1.0, 2.0});

  const std::vector<double> tie{5.0, 5.0};
  CHECK(hard_rank(tie) == std::vector<double>{1.5, 1.5});

  std::vector<double> sorted{-3.0, -1.0, 0.5, 2.0, 7.0};
  CHECK(hard_rank(sorted) == std::vector<double>{1.0, 2.0, 3.0, 4.0, 5.0});

  const std::vector<double> multi{1.0, 2.0, 2.0, 2.0, 3.0};
  CHECK(hard_rank(multi) == std::vector<double>{1.0, 3.0, 3.0, 3.0, 5.0});
}

TEST_CASE("hard_rank matches brute-force counting on random tie-free data") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto v = testutil::random_vector(rng, 2 + rng.bounded(30));
    CHECK(hard_rank(v) == testutil::brute_rank(v));
  }
}

TEST_CASE("soft ranks converge to hard ranks as regularization vanishes") {
  Rng rng(7);
  const SoftRankConfig tight{1e-6};
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.bounded(11);
    const auto v = testutil::random_vector(rng, n);
    const auto soft = soft_rank(v, tight).ranks();
    const auto hard = hard_rank(v);
    for (std::size_t i = 0; i < n; ++i) {
      worst = std::max(worst, std::fabs(soft[i] - hard[i]));
    }
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("constant input collapses to the mean rank") {
  const std::vector<double> v(7, 0.25);
  const auto ranks = soft_rank(v, {1.0}).ranks();
  for (double r : ranks) CHECK(r == Catch::Approx(4.0).margin(1e-12));
}

TEST_CASE("soft rank coordinate sum is conserved") {
  Rng rng(23);
  for (double eps : {1e-3, 0.1, 1.0, 10.0}) {
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t n = 2 + rng.bounded(40);
      const auto v = testutil::random_vector(rng, n, -5.0, 5.0);
      const auto ranks = soft_rank(v, {eps}).ranks();
      const double sum = std::accumulate(ranks.begin(), ranks.end(), 0.0);
      const double want = 0.5 * static_cast<double>(n) * static_cast<double>(n + 1);
      CHECK(std::fabs(sum - want) < 1e-9);
    }
  }
}

TEST_CASE("soft rank is permutation equivariant") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 3 + rng.bounded(20);
    const auto v = testutil::random_vector(rng, n);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    std::vector<double> pv(n);
    for (std::size_t i = 0; i < n; ++i) pv[i] = v[perm[i]];
    const auto r = soft_rank(v, {0.5}).ranks();
    const auto pr = soft_rank(pv, {0.5}).ranks();
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(pr[i] == Catch::Approx(r[perm[i]]).margin(1e-12));
    }
  }
}

TEST_CASE("soft rank is shift invariant and monotone") {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.bounded(20);
    const auto v = testutil::random_vector(rng, n, -2.0, 2.0);
    const auto r = soft_rank(v, {1.0}).ranks();

    const double shift = rng.uniform(-10.0, 10.0);
    std::vector<double> w(v);
    for (auto& x : w) x += shift;
    const auto rs = soft_rank(w, {1.0}).ranks();
    for (std::size_t i = 0; i < n; ++i) CHECK(std::fabs(rs[i] - r[i]) < 1e-9);

    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (v[i] > v[j]) CHECK(r[i] >= r[j] - 1e-12);
      }
    }
  }
}

TEST_CASE("soft rank Jacobian-vector products match finite differences") {
  Rng rng(53);
  std::size_t checked = 0, skipped = 0;
  for (double eps : {0.3, 1.0, 3.0}) {
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t n = 3 + rng.bounded(8);
      const auto v = testutil::random_vector(rng, n, -2.0, 2.0);
      const auto u = testutil::random_vector(rng, n);
      const auto sr = soft_rank(v, {eps});
      const auto jvp = sr.apply_jacobian(u);

      // directional derivative of each rank along u
      const double h = 1e-5;
      std::vector<double> up(v), down(v);
      for (std::size_t i = 0; i < n; ++i) {
        up[i] += h * u[i];
        down[i] -= h * u[i];
      }
      const auto r_up = soft_rank(up, {eps}).ranks();
      const auto r_down = soft_rank(down, {eps}).ranks();
      for (std::size_t i = 0; i < n; ++i) {
        // The operator is piecewise linear; a nonzero second difference
        // means the step straddles a kink, where FD says nothing.
        const double curvature = r_up[i] + r_down[i] - 2.0 * sr.ranks()[i];
        if (std::fabs(curvature) > 1e-10) {
          ++skipped;
          continue;
        }
        const double fd = (r_up[i] - r_down[i]) / (2.0 * h);
        CHECK(testutil::grad_close(jvp[i], fd));
        ++checked;
      }
    }
  }
  CHECK(checked > 10 * skipped);  // kinks must stay rare
}

TEST_CASE("soft rank rejects bad inputs") {
  CHECK_THROWS_AS(soft_rank(std::vector<double>{1.0}, {1.0}), std::invalid_argument);
  CHECK_THROWS_AS(soft_rank(std::vector<double>{1.0, 2.0}, {0.0}), std::invalid_argument);
  const std::vector<double> nan{1.0, std::nan("")};
  CHECK_THROWS_AS(soft_rank(nan, {1.0}), std::invalid_argument);
}
