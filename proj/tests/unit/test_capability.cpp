#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "capembed/capability.hpp"
#include "helpers.hpp"

using namespace capembed;

TEST_CASE("jaccard hand values and conventions") {
  CHECK(jaccard({"x", "y"}, {"x", "y"}) == 1.0);
  CHECK(jaccard({"a", "b"}, {"b", "c"}) == Catch::Approx(1.0 / 3.0));
  CHECK(jaccard({}, {}) == 1.0);
  CHECK(jaccard({}, {"a"}) == 0.0);
  CHECK(jaccard({"a"}, {}) == 0.0);
}

TEST_CASE("jaccard is symmetric and bounded") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    CapabilitySet a, b;
    for (int i = 0; i < 12; ++i) {
      const auto label = "cap" + std::to_string(rng.bounded(16));
      if (rng.uniform() < 0.5) a.insert(label);
      if (rng.uniform() < 0.5) b.insert(label);
    }
    const double jab = jaccard(a, b);
    CHECK(jab == jaccard(b, a));
    CHECK(jab >= 0.0);
    CHECK(jab <= 1.0);
    CHECK(jaccard(a, a) == 1.0);
  }
}

TEST_CASE("singleton signature equals the per-permutation hash") {
  const MinHasher h(42, 16);
  const auto sig = h.signature({"only label"});
  REQUIRE(sig.size() == 16);
  for (std::size_t i = 0; i < 16; ++i) {
    CHECK(sig[i] == seeded_string_hash(h.seeds()[i], "only label"));
  }
  CHECK_THROWS_AS(h.signature({}), DataError);
}

TEST_CASE("signatures are set functions and deterministic per master seed") {
  const MinHasher h(7, 64);
  const CapabilitySet s{"c", "a", "b"};
  const CapabilitySet t{"b", "c", "a"};
  CHECK(h.signature(s) == h.signature(t));
  const MinHasher h2(7, 64);
  CHECK(h.signature(s) == h2.signature(s));
  const MinHasher h3(8, 64);
  CHECK(h.signature(s) != h3.signature(s));
}

TEST_CASE("per-row collision probability estimates Jaccard") {
  // Monte-Carlo oracle: over many independent permutations the fraction of
  // matching signature rows estimates J.
  struct Case {
    CapabilitySet a, b;
    double j;
  };
  const std::vector<Case> cases = {
      {{"a"}, {"a", "b", "c"}, 1.0 / 3.0},
      {{"a", "b"}, {"a"}, 0.5},
      {{"a", "b", "c"}, {"a", "b"}, 2.0 / 3.0},
  };
  const MinHasher h(12345, 10000, 1);
  for (const auto& c : cases) {
    const auto sa = h.signature(c.a);
    const auto sb = h.signature(c.b);
    std::size_t same = 0;
    for (std::size_t i = 0; i < sa.size(); ++i) same += sa[i] == sb[i];
    const double estimate = static_cast<double>(same) / static_cast<double>(sa.size());
    CHECK(std::fabs(estimate - c.j) < 0.02);
  }
}

TEST_CASE("minhasher validates band structure") {
  CHECK_THROWS_AS(MinHasher(0, 64, 5), ConfigError);
  CHECK_THROWS_AS(MinHasher(0, 0, 1), ConfigError);
  CHECK_NOTHROW(MinHasher(0, 64, 4));
}

TEST_CASE("cluster assignment groups identical sets and splits by label") {
  Dataset ds;
  ds.d = 1;
  ds.samples = {
      Sample{"g1", {0.0}, Label::kGoodware, {}, {}, {"a", "b"}},
      Sample{"g2", {0.0}, Label::kGoodware, {}, {}, {"a", "b"}},
      Sample{"m1", {0.0}, Label::kMalware, {}, {}, {"a", "b"}},
      Sample{"m2", {0.0}, Label::kMalware, {}, {}, {"x"}},
      Sample{"e1", {0.0}, Label::kGoodware, {}, {}, {}},
      Sample{"e2", {0.0}, Label::kMalware, {}, {}, {}},
  };
  const MinHasher h(99);
  const auto map = cluster_assign(h, ds);

  CHECK(map.cluster_of("g1") == map.cluster_of("g2"));
  CHECK(map.split_cluster_of("g1") == map.split_cluster_of("g2"));

  // same capabilities, different label: same cluster, different split id
  CHECK(map.cluster_of("g1") == map.cluster_of("m1"));
  CHECK(map.split_cluster_of("g1") != map.split_cluster_of("m1"));

  CHECK(map.cluster_of("m2") != map.cluster_of("m1"));

  // capability-free samples all land in the reserved cluster
  CHECK(map.cluster_of("e1") == kEmptyCapabilityCluster);
  CHECK(map.cluster_of("e2") == kEmptyCapabilityCluster);
  CHECK(map.split_cluster_of("e1") != map.split_cluster_of("e2"));
}

TEST_CASE("split ids are consistent with cluster ids and labels") {
  SyntheticConfig cfg;
  cfg.num_archetypes = 8;
  cfg.train_samples_per_archetype = 25;
  auto [train, test] = generate_synthetic(cfg, 77);
  const MinHasher h(5);
  const auto map = cluster_assign(h, train);

  std::unordered_map<std::uint64_t, std::pair<std::uint64_t, Label>> seen;
  for (const auto& s : train.samples) {
    const auto split = map.split_cluster_of(s.id);
    const auto cluster = map.cluster_of(s.id);
    const auto [it, inserted] = seen.try_emplace(split, cluster, s.label);
    if (!inserted) {
      // sharing a split id forces sharing cluster id AND detection label
      CHECK(it->second.first == cluster);
      CHECK(it->second.second == s.label);
    }
  }
}

TEST_CASE("one-band 64-row clustering never merges moderately similar sets") {
  // J = 0.5 pair; full-signature collision probability is 0.5^64.
  std::size_t collisions = 0;
  for (std::uint64_t trial = 0; trial < 10000; ++trial) {
    const MinHasher h(trial);
    const auto a = "item" + std::to_string(trial);
    const auto b = "other" + std::to_string(trial);
    if (h.cluster_id({a, b}) == h.cluster_id({a})) ++collisions;
  }
  CHECK(collisions == 0);
}

TEST_CASE("cluster map export round-trips") {
  SyntheticConfig cfg;
  cfg.num_archetypes = 4;
  cfg.train_samples_per_archetype = 5;
  auto [train, test] = generate_synthetic(cfg, 3);
  const auto map = cluster_assign(MinHasher(11), train);
  const auto p = std::filesystem::temp_directory_path() / "capembed_tests" / "clusters.ndjson";
  std::filesystem::create_directories(p.parent_path());
  save_cluster_map(map, p);
  const auto back = load_cluster_map(p);
  CHECK(back.ordered_ids == map.ordered_ids);
  CHECK(back.assignments == map.assignments);
  CHECK(back.split_assignments == map.split_assignments);
}
