#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "capembed/capability.hpp"
#include "capembed/common.hpp"
#include "capembed/dataio.hpp"

namespace capembed {

// One training batch: C split clusters, M samples each (with replacement).
struct Batch {
  std::vector<std::uint64_t> cluster_ids;       // split cluster ids, C or fewer
  std::vector<std::size_t> sample_indices;      // dataset indices, M per cluster
};

struct BatchPlan {
  std::vector<Batch> batches;
};

// Cluster-balanced epoch plan: split clusters are shuffled once and consumed
// C per batch without replacement, so an epoch touches every split cluster
// exactly once (the final batch may be ragged). Within a chosen cluster, M
// members are drawn uniformly with replacement, so singleton clusters simply
// repeat their sample.
inline BatchPlan build_epoch(const CapabilityClusterMap& map, const Dataset& ds, int c,
                             int m, std::uint64_t seed) {
  if (c < 2) throw ConfigError("build_epoch: C must be at least 2");
  if (m < 1) throw ConfigError("build_epoch: M must be at least 1");
  if (ds.samples.empty()) throw DataError("build_epoch: empty dataset");

  // split clusters in first-occurrence order, members in dataset order
  std::vector<std::uint64_t> cluster_ids;
  std::vector<std::vector<std::size_t>> members;
  std::unordered_map<std::uint64_t, std::size_t> index_of;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const std::uint64_t split = map.split_cluster_of(ds.samples[i].id);
    auto [it, inserted] = index_of.try_emplace(split, cluster_ids.size());
    if (inserted) {
      cluster_ids.push_back(split);
      members.emplace_back();
    }
    members[it->second].push_back(i);
  }
  if (cluster_ids.size() < static_cast<std::size_t>(c)) {
    throw ConfigError("build_epoch: fewer than C split clusters (" +
                      std::to_string(cluster_ids.size()) + " < " + std::to_string(c) + ")");
  }

  Rng rng(mix64(seed));
  std::vector<std::size_t> order(cluster_ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  BatchPlan plan;
  const std::size_t cc = static_cast<std::size_t>(c);
  for (std::size_t start = 0; start < order.size(); start += cc) {
    Batch batch;
    const std::size_t end = std::min(order.size(), start + cc);
    for (std::size_t k = start; k < end; ++k) {
      const std::size_t ci = order[k];
      batch.cluster_ids.push_back(cluster_ids[ci]);
      const auto& pool = members[ci];
      for (int draw = 0; draw < m; ++draw) {
        batch.sample_indices.push_back(pool[rng.bounded(pool.size())]);
      }
    }
    plan.batches.push_back(std::move(batch));
  }
  return plan;
}

}  // namespace capembed
