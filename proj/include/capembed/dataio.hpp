#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "capembed/common.hpp"

namespace capembed {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

enum class Label { kGoodware, kMalware };
enum class Split { kTrain, kTest };

inline const char* to_string(Label l) {
  return l == Label::kMalware ? "malware" : "goodware";
}

inline Label label_from_string(const std::string& s) {
  if (s == "malware") return Label::kMalware;
  if (s == "goodware") return Label::kGoodware;
  throw DataError("unknown label '" + s + "'");
}

// One executable's record: static feature vector plus supervision signals.
struct Sample {
  std::string id;
  std::vector<double> features;
  Label label = Label::kGoodware;
  std::optional<std::string> family;
  std::set<std::string> tags;
  std::set<std::string> capabilities;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
  std::vector<Sample> samples;
  Split split = Split::kTrain;
  std::size_t d = 0;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Per-dimension standardization statistics, fit on the train split only.
// Uses the population (divide-by-N) convention; std is floored at 1e-8 so
// constant features do not blow up the transform.
struct StandardScaler {
  std::vector<double> mean;
  std::vector<double> std;
};

inline constexpr double kScalerStdFloor = 1e-8;

namespace detail {

inline std::set<std::string> string_set_field(const json& rec, const char* key,
                                              std::size_t line_no) {
  std::set<std::string> out;
  if (!rec.contains(key) || rec[key].is_null()) return out;
  if (!rec[key].is_array()) {
    throw DataError("malformed record at line " + std::to_string(line_no) + ": '" +
                    key + "' must be an array of strings");
  }
  for (const auto& v : rec[key]) {
    if (!v.is_string()) {
      throw DataError("malformed record at line " + std::to_string(line_no) + ": '" +
                      key + "' must be an array of strings");
    }
    out.insert(v.get<std::string>());
  }
  return out;
}

}  // namespace detail

// Parses one newline-delimited dataset file. Every record must carry
// id/features/label; family, tags and capabilities are optional. Feature
// vectors must share one length and contain only finite values.
inline Dataset load_dataset(const std::filesystem::path& path, Split split) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file: " + path.string());
  Dataset ds;
  ds.split = split;
  std::unordered_set<std::string> seen_ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError("malformed record at line " + std::to_string(line_no) + ": " +
                      e.what());
    }
    Sample s;
    try {
      s.id = rec.at("id").get<std::string>();
      const auto& feats = rec.at("features");
      if (!feats.is_array()) throw DataError("'features' must be an array");
      s.features.reserve(feats.size());
      for (const auto& v : feats) {
        if (!v.is_number()) throw DataError("'features' must be numeric");
        s.features.push_back(v.get<double>());
      }
      s.label = label_from_string(rec.at("label").get<std::string>());
    } catch (const DataError&) {
      throw;
    } catch (const json::exception& e) {
      throw DataError("malformed record at line " + std::to_string(line_no) + ": " +
                      e.what());
    }
    for (double v : s.features) {
      if (!std::isfinite(v)) {
        throw DataError("malformed record at line " + std::to_string(line_no) +
                        ": non-finite feature value");
      }
    }
    if (rec.contains("family") && !rec["family"].is_null()) {
      s.family = rec["family"].get<std::string>();
    }
    s.tags = detail::string_set_field(rec, "tags", line_no);
    s.capabilities = detail::string_set_field(rec, "capabilities", line_no);

    if (ds.samples.empty()) {
      ds.d = s.features.size();
    } else if (s.features.size() != ds.d) {
      throw DataError("inconsistent feature length at line " + std::to_string(line_no));
    }
    if (!seen_ids.insert(s.id).second) {
      throw DataError("duplicate sample id '" + s.id + "' at line " +
                      std::to_string(line_no));
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline ordered_json sample_to_json(const Sample& s) {
  ordered_json rec;
  rec["id"] = s.id;
  rec["features"] = s.features;
  rec["label"] = to_string(s.label);
  if (s.family) rec["family"] = *s.family;
  if (!s.tags.empty()) rec["tags"] = s.tags;
  if (!s.capabilities.empty()) rec["capabilities"] = s.capabilities;
  return rec;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset file: " + path.string());
  for (const auto& s : ds.samples) {
    out << sample_to_json(s).dump() << '\n';
  }
}

inline StandardScaler fit_scaler(const Dataset& train) {
  if (train.samples.empty()) throw DataError("fit_scaler: empty dataset");
  const std::size_t d = train.d;
  const double n = static_cast<double>(train.samples.size());
  StandardScaler sc;
  sc.mean.assign(d, 0.0);
  sc.std.assign(d, 0.0);
  for (const auto& s : train.samples) {
    for (std::size_t j = 0; j < d; ++j) sc.mean[j] += s.features[j];
  }
  for (std::size_t j = 0; j < d; ++j) sc.mean[j] /= n;
  for (const auto& s : train.samples) {
    for (std::size_t j = 0; j < d; ++j) {
      const double delta = s.features[j] - sc.mean[j];
      sc.std[j] += delta * delta;
    }
  }
  for (std::size_t j = 0; j < d; ++j) {
    sc.std[j] = std::max(std::sqrt(sc.std[j] / n), kScalerStdFloor);
  }
  return sc;
}

inline std::vector<double> transform(const StandardScaler& sc,
                                     std::span<const double> features) {
  if (features.size() != sc.mean.size()) {
    throw DataError("transform: feature length mismatch");
  }
  std::vector<double> out(features.size());
  for (std::size_t j = 0; j < features.size(); ++j) {
    out[j] = (features[j] - sc.mean[j]) / sc.std[j];
  }
  return out;
}

inline void save_scaler(const StandardScaler& sc, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write scaler file: " + path.string());
  ordered_json rec;
  rec["mean"] = sc.mean;
  rec["std"] = sc.std;
  out << rec.dump() << '\n';
}

inline StandardScaler load_scaler(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open scaler file: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty scaler file: " + path.string());
  json rec;
  try {
    rec = json::parse(line);
    StandardScaler sc;
    sc.mean = rec.at("mean").get<std::vector<double>>();
    sc.std = rec.at("std").get<std::vector<double>>();
    if (sc.mean.size() != sc.std.size()) throw DataError("scaler mean/std length mismatch");
    return sc;
  } catch (const json::exception& e) {
    throw DataError("malformed scaler file: " + std::string(e.what()));
  }
}

// ---------------------------------------------------------------------------
// Synthetic planted-cluster generator.
//
// Each archetype owns a capability-set template, a detection label, a family
// (malware only) and a tag subset. A sample perturbs its archetype's set by
// independently flipping membership of every vocabulary item, then maps the
// resulting indicator vector through one fixed random linear map into feature
// space, plus Gaussian noise. Capability similarity is therefore recoverable
// from features, which is what makes metric-learning checks on this data
// meaningful.
// ---------------------------------------------------------------------------

struct SyntheticConfig {
  int num_archetypes = 10;
  int families_per_class = 5;
  int train_samples_per_archetype = 100;
  int test_samples_per_archetype = 25;
  std::size_t feature_dim = 64;
  double feature_noise = 0.1;
  double capability_flip_prob = 0.02;
  int vocabulary_size = 32;
  int tag_pool_size = 6;
};

namespace detail {

inline std::vector<std::string> capability_vocabulary(int size) {
  static const char* kActions[] = {"encode", "decode", "read", "write",
                                   "spawn",  "query",  "send", "hook"};
  static const char* kObjects[] = {"base64 data",  "registry keys", "files on disk",
                                   "raw sockets",  "processes",     "http requests",
                                   "mutex objects", "system services"};
  std::vector<std::string> vocab;
  vocab.reserve(static_cast<std::size_t>(size));
  for (int i = 0; vocab.size() < static_cast<std::size_t>(size); ++i) {
    const int a = i % 8;
    const int o = (i / 8) % 8;
    std::string label = std::string(kActions[a]) + " " + kObjects[o];
    if (i >= 64) label += " #" + std::to_string(i / 64);
    vocab.push_back(std::move(label));
  }
  return vocab;
}

inline std::vector<std::string> tag_pool(int size) {
  static const char* kTags[] = {"packed",   "downloader", "dropper", "spyware",
                                "worm",     "installer",  "adware",  "flooder",
                                "ransomware", "miner"};
  std::vector<std::string> pool;
  for (int i = 0; i < size; ++i) {
    std::string t = kTags[i % 10];
    if (i >= 10) t += "-" + std::to_string(i / 10);
    pool.push_back(std::move(t));
  }
  return pool;
}

struct Archetype {
  std::vector<bool> capability_mask;
  Label label;
  std::optional<std::string> family;
  std::set<std::string> tags;
};

}  // namespace detail

inline void validate(const SyntheticConfig& cfg) {
  if (cfg.num_archetypes < 2) throw ConfigError("generator: need at least 2 archetypes");
  if (cfg.train_samples_per_archetype < 1) {
    throw ConfigError("generator: need at least 1 sample per archetype");
  }
  if (cfg.test_samples_per_archetype < 0) {
    throw ConfigError("generator: test samples per archetype must be >= 0");
  }
  if (cfg.feature_dim == 0) throw ConfigError("generator: feature_dim must be positive");
  if (cfg.vocabulary_size < 1) throw ConfigError("generator: vocabulary_size must be positive");
  if (cfg.capability_flip_prob < 0.0 || cfg.capability_flip_prob >= 1.0) {
    throw ConfigError("generator: capability_flip_prob must lie in [0, 1)");
  }
  if (cfg.feature_noise < 0.0) throw ConfigError("generator: feature_noise must be >= 0");
  if (cfg.families_per_class < 1) {
    throw ConfigError("generator: families_per_class must be positive");
  }
  if (cfg.tag_pool_size < 0) throw ConfigError("generator: tag_pool_size must be >= 0");
}

inline std::pair<Dataset, Dataset> generate_synthetic(const SyntheticConfig& cfg,
                                                      std::uint64_t seed) {
  validate(cfg);
  Rng rng(mix64(seed));
  const auto vocab = detail::capability_vocabulary(cfg.vocabulary_size);
  const auto tags = detail::tag_pool(cfg.tag_pool_size);
  const std::size_t v = vocab.size();

  // Fixed random linear map from capability indicators to feature space.
  std::vector<double> map(cfg.feature_dim * v);
  const double map_scale = 1.0 / std::sqrt(static_cast<double>(v));
  for (auto& x : map) x = rng.normal() * map_scale;

  std::vector<detail::Archetype> archetypes;
  archetypes.reserve(static_cast<std::size_t>(cfg.num_archetypes));
  int malware_count = 0;
  for (int k = 0; k < cfg.num_archetypes; ++k) {
    detail::Archetype a;
    a.capability_mask.resize(v);
    bool any = false;
    for (std::size_t i = 0; i < v; ++i) {
      a.capability_mask[i] = rng.uniform() < 0.5;
      any = any || a.capability_mask[i];
    }
    if (!any) a.capability_mask[static_cast<std::size_t>(k) % v] = true;
    a.label = (k % 2 == 0) ? Label::kGoodware : Label::kMalware;
    if (a.label == Label::kMalware) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "family_%02d", malware_count % cfg.families_per_class);
      a.family = buf;
      ++malware_count;
      for (const auto& t : tags) {
        if (rng.uniform() < 0.5) a.tags.insert(t);
      }
    }
    archetypes.push_back(std::move(a));
  }

  auto make_split = [&](Split split, int per_archetype) {
    Dataset ds;
    ds.split = split;
    ds.d = cfg.feature_dim;
    const char* prefix = split == Split::kTrain ? "train" : "test";
    for (int k = 0; k < cfg.num_archetypes; ++k) {
      const auto& a = archetypes[static_cast<std::size_t>(k)];
      for (int i = 0; i < per_archetype; ++i) {
        Sample s;
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%s_a%02d_%04d", prefix, k, i);
        s.id = buf;
        s.label = a.label;
        s.family = a.family;
        s.tags = a.tags;
        std::vector<double> indicator(v, 0.0);
        for (std::size_t c = 0; c < v; ++c) {
          bool present = a.capability_mask[c];
          if (rng.uniform() < cfg.capability_flip_prob) present = !present;
          if (present) {
            indicator[c] = 1.0;
            s.capabilities.insert(vocab[c]);
          }
        }
        s.features.resize(cfg.feature_dim);
        for (std::size_t j = 0; j < cfg.feature_dim; ++j) {
          double acc = 0.0;
          const double* row = map.data() + j * v;
          for (std::size_t c = 0; c < v; ++c) acc += row[c] * indicator[c];
          s.features[j] = acc + rng.normal() * cfg.feature_noise;
        }
        ds.samples.push_back(std::move(s));
      }
    }
    return ds;
  };

  Dataset train = make_split(Split::kTrain, cfg.train_samples_per_archetype);
  Dataset test = make_split(Split::kTest, cfg.test_samples_per_archetype);
  return {std::move(train), std::move(test)};
}

// Archetype index embedded in generated ids ("train_a03_0017" -> 3).
// Test-side ground truth for planted-cluster checks.
inline int synthetic_archetype_of(const std::string& id) {
  const auto pos = id.find("_a");
  if (pos == std::string::npos || pos + 3 >= id.size()) {
    throw DataError("not a synthetic sample id: " + id);
  }
  return std::stoi(id.substr(pos + 2, 2));
}

}  // namespace capembed
