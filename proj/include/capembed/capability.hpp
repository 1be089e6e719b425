#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "capembed/common.hpp"
#include "capembed/dataio.hpp"

namespace capembed {

// Capability sets are plain string sets ("encode base64 data", ...).
using CapabilitySet = std::set<std::string>;

// Empty-against-empty is defined as 1 so capability-free samples count as
// mutually similar rather than hitting 0/0.
inline double jaccard(const CapabilitySet& a, const CapabilitySet& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t shared = 0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia < *ib) {
      ++ia;
    } else if (*ib < *ia) {
      ++ib;
    } else {
      ++shared;
      ++ia;
      ++ib;
    }
  }
  return static_cast<double>(shared) /
         static_cast<double>(a.size() + b.size() - shared);
}

// Reserved cluster for samples with no capabilities at all; they are treated
// as one mutually-similar group instead of exploding into singletons.
inline constexpr std::uint64_t kEmptyCapabilityCluster = 0xE3B0C44298FC1C14ULL;

// MinHash signatures over capability sets. One band over 64 permutations is
// the default, so two samples share a cluster only when all 64 minima agree
// (collision probability J^64 for Jaccard similarity J).
class MinHasher {
 public:
  explicit MinHasher(std::uint64_t master_seed, std::size_t num_perms = 64,
                     std::size_t band_count = 1)
      : master_seed_(master_seed), num_perms_(num_perms), band_count_(band_count) {
    if (num_perms_ == 0) throw ConfigError("MinHasher: num_perms must be positive");
    if (band_count_ == 0) throw ConfigError("MinHasher: band_count must be positive");
    if (num_perms_ % band_count_ != 0) {
      throw ConfigError("MinHasher: num_perms must be divisible by band_count");
    }
    seeds_.resize(num_perms_);
    // Documented derivation: seed_i = mix64(master_seed ^ ((i + 1) * golden)).
    for (std::size_t i = 0; i < num_perms_; ++i) {
      seeds_[i] = mix64(master_seed_ ^ ((i + 1) * kGolden64));
    }
  }

  std::uint64_t master_seed() const { return master_seed_; }
  std::size_t num_perms() const { return num_perms_; }
  std::size_t band_count() const { return band_count_; }
  const std::vector<std::uint64_t>& seeds() const { return seeds_; }

  // Entry i is the minimum of hash_i over the labels. Order-free by
  // construction; empty sets bypass signatures entirely (see cluster_id).
  std::vector<std::uint64_t> signature(const CapabilitySet& s) const {
    if (s.empty()) throw DataError("minhash_signature: empty capability set");
    std::vector<std::uint64_t> sig(num_perms_, ~std::uint64_t{0});
    for (const auto& label : s) {
      for (std::size_t i = 0; i < num_perms_; ++i) {
        const std::uint64_t h = seeded_string_hash(seeds_[i], label);
        if (h < sig[i]) sig[i] = h;
      }
    }
    return sig;
  }

  // 64-bit digest of the signature: per-band digests folded together, which
  // partitions samples by full-signature equality for any band count.
  std::uint64_t cluster_id(const CapabilitySet& s) const {
    if (s.empty()) return kEmptyCapabilityCluster;
    const auto sig = signature(s);
    const std::size_t rows = num_perms_ / band_count_;
    std::uint64_t digest = mix64(master_seed_);
    for (std::size_t b = 0; b < band_count_; ++b) {
      std::uint64_t band = mix64(b);
      for (std::size_t r = 0; r < rows; ++r) {
        band = mix64(band ^ sig[b * rows + r]);
      }
      digest = mix64(digest ^ band);
    }
    return digest;
  }

 private:
  std::uint64_t master_seed_;
  std::size_t num_perms_;
  std::size_t band_count_;
  std::vector<std::uint64_t> seeds_;
};

inline std::uint64_t split_cluster_id(std::uint64_t cluster, Label label) {
  return mix64(cluster ^ (label == Label::kMalware ? 0x6D616C7761726521ULL
                                                   : 0x676F6F6477617265ULL));
}

// Hard clustering used as contrastive supervision: cluster ids partition by
// capability signature, split ids additionally separate goodware from
// malware within each cluster.
struct CapabilityClusterMap {
  std::vector<std::string> ordered_ids;  // dataset order, for deterministic export
  std::unordered_map<std::string, std::uint64_t> assignments;
  std::unordered_map<std::string, std::uint64_t> split_assignments;

  std::uint64_t cluster_of(const std::string& id) const {
    const auto it = assignments.find(id);
    if (it == assignments.end()) throw DataError("no cluster assignment for id '" + id + "'");
    return it->second;
  }

  std::uint64_t split_cluster_of(const std::string& id) const {
    const auto it = split_assignments.find(id);
    if (it == split_assignments.end()) {
      throw DataError("no split cluster assignment for id '" + id + "'");
    }
    return it->second;
  }
};

inline CapabilityClusterMap cluster_assign(const MinHasher& hasher, const Dataset& ds) {
  CapabilityClusterMap map;
  map.ordered_ids.reserve(ds.samples.size());
  map.assignments.reserve(ds.samples.size());
  map.split_assignments.reserve(ds.samples.size());
  for (const auto& s : ds.samples) {
    const std::uint64_t cluster = hasher.cluster_id(s.capabilities);
    map.ordered_ids.push_back(s.id);
    map.assignments.emplace(s.id, cluster);
    map.split_assignments.emplace(s.id, split_cluster_id(cluster, s.label));
  }
  return map;
}

inline void save_cluster_map(const CapabilityClusterMap& map,
                             const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write cluster map file: " + path.string());
  for (const auto& id : map.ordered_ids) {
    ordered_json rec;
    rec["id"] = id;
    rec["cluster"] = map.assignments.at(id);
    rec["split_cluster"] = map.split_assignments.at(id);
    out << rec.dump() << '\n';
  }
}

inline CapabilityClusterMap load_cluster_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open cluster map file: " + path.string());
  CapabilityClusterMap map;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json rec = json::parse(line);
      const auto id = rec.at("id").get<std::string>();
      map.ordered_ids.push_back(id);
      map.assignments[id] = rec.at("cluster").get<std::uint64_t>();
      map.split_assignments[id] = rec.at("split_cluster").get<std::uint64_t>();
    } catch (const json::exception& e) {
      throw DataError("malformed cluster record at line " + std::to_string(line_no) +
                      ": " + e.what());
    }
  }
  return map;
}

}  // namespace capembed
