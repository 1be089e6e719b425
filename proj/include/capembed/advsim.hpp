#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capembed/common.hpp"
#include "capembed/dataio.hpp"

namespace capembed {

// Black-box scoring contract: detection probability in [0, 1] from a raw
// feature vector. No gradients are ever exposed to the attacker.
using ScoreFn = std::function<double(std::span<const double>)>;

enum class AttackMode {
  kAdditiveOnly,  // deltas >= 0 on masked dims (content-injection analogue)
  kShiftLike,     // unconstrained deltas on a disjoint mask (offset-shift analogue)
};

inline AttackMode attack_mode_from_string(const std::string& s) {
  if (s == "additive_only") return AttackMode::kAdditiveOnly;
  if (s == "shift_like") return AttackMode::kShiftLike;
  throw ConfigError("unknown attack mode '" + s + "'");
}

inline const char* to_string(AttackMode m) {
  return m == AttackMode::kAdditiveOnly ? "additive_only" : "shift_like";
}

struct AttackConfig {
  std::vector<bool> manipulable_mask;  // length d
  AttackMode mode = AttackMode::kAdditiveOnly;
  int population = 20;
  int iterations = 50;
  double mutation_scale = 1.0;
  double evasion_threshold = 0.5;
  std::uint64_t seed = 0;

  void validate(std::size_t d) const {
    if (manipulable_mask.size() != d) {
      throw ConfigError("attack: mask length does not match feature dimension");
    }
    if (std::find(manipulable_mask.begin(), manipulable_mask.end(), true) ==
        manipulable_mask.end()) {
      throw ConfigError("attack: mask selects no manipulable feature");
    }
    if (iterations < 1) throw ConfigError("attack: iterations must be >= 1");
    if (population < 2) throw ConfigError("attack: population must be >= 2");
    if (!(mutation_scale > 0.0)) throw ConfigError("attack: mutation_scale must be positive");
  }
};

struct SampleAttackResult {
  std::string id;
  double initial_score = 0.0;
  double final_score = 0.0;
  bool evaded = false;
  int iterations_used = 0;
  std::vector<double> best_score_per_generation;
  std::vector<double> final_features;
};

struct AttackReport {
  std::vector<SampleAttackResult> samples;
  double baseline_detection_rate = 0.0;
  double post_attack_detection_rate = 0.0;
};

namespace detail {

// (mu + lambda) truncation evolution for one sample. Survivor deltas carry
// over between generations, so the best score never increases.
inline SampleAttackResult attack_one(const ScoreFn& model, const Sample& sample,
                                     const AttackConfig& cfg, std::uint64_t sample_seed) {
  Rng rng(sample_seed);
  const std::size_t d = sample.features.size();
  const std::size_t mu = static_cast<std::size_t>(cfg.population) / 2;
  const std::size_t lambda = static_cast<std::size_t>(cfg.population) - mu;

  std::vector<std::size_t> masked;
  for (std::size_t i = 0; i < d; ++i) {
    if (cfg.manipulable_mask[i]) masked.push_back(i);
  }

  SampleAttackResult res;
  res.id = sample.id;
  res.initial_score = model(sample.features);
  res.final_score = res.initial_score;
  res.final_features = sample.features;

  std::vector<double> candidate(sample.features);
  auto score_delta = [&](const std::vector<double>& delta) {
    candidate = sample.features;
    for (std::size_t k = 0; k < masked.size(); ++k) candidate[masked[k]] += delta[k];
    return model(candidate);
  };

  struct Scored {
    std::vector<double> delta;
    double score;
  };
  // survivors start as the unmodified sample so elitism holds from the
  // baseline onward
  std::vector<Scored> survivors(mu, Scored{std::vector<double>(masked.size(), 0.0),
                                           res.initial_score});

  if (res.initial_score < cfg.evasion_threshold) {
    res.evaded = true;  // never detected in the first place
    return res;
  }

  std::vector<Scored> pool;
  for (int gen = 1; gen <= cfg.iterations; ++gen) {
    pool.assign(survivors.begin(), survivors.end());
    for (std::size_t o = 0; o < lambda; ++o) {
      Scored child;
      child.delta = survivors[o % mu].delta;
      for (auto& v : child.delta) {
        v += rng.normal() * cfg.mutation_scale;
        if (cfg.mode == AttackMode::kAdditiveOnly && v < 0.0) v = 0.0;
      }
      child.score = score_delta(child.delta);
      pool.push_back(std::move(child));
    }
    std::stable_sort(pool.begin(), pool.end(),
                     [](const Scored& a, const Scored& b) { return a.score < b.score; });
    survivors.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(mu));

    res.best_score_per_generation.push_back(survivors.front().score);
    res.iterations_used = gen;
    if (survivors.front().score < cfg.evasion_threshold) break;
  }

  res.final_score = survivors.front().score;
  res.evaded = res.final_score < cfg.evasion_threshold;
  res.final_features = sample.features;
  for (std::size_t k = 0; k < masked.size(); ++k) {
    res.final_features[masked[k]] += survivors.front().delta[k];
  }
  return res;
}

}  // namespace detail

// Runs the evolutionary evasion attack against every sample of the (malware)
// subset. Per-sample searches are independent, seeded by (cfg.seed, index),
// and parallelize deterministically.
inline AttackReport attack(const ScoreFn& model, const std::vector<Sample>& samples,
                           const AttackConfig& cfg, int threads = 1) {
  if (samples.empty()) throw DataError("attack: empty sample set");
  cfg.validate(samples.front().features.size());

  AttackReport report;
  report.samples.resize(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      report.samples[i] =
          detail::attack_one(model, samples[i], cfg, mix64(cfg.seed ^ mix64(i + 1)));
    }
  });

  std::size_t baseline = 0, post = 0;
  for (const auto& s : report.samples) {
    baseline += s.initial_score >= cfg.evasion_threshold;
    post += s.final_score >= cfg.evasion_threshold;
  }
  const double n = static_cast<double>(report.samples.size());
  report.baseline_detection_rate = static_cast<double>(baseline) / n;
  report.post_attack_detection_rate = static_cast<double>(post) / n;
  return report;
}

inline void save_attack_csv(const AttackReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write attack report: " + path.string());
  out << "id,initial_score,final_score,evaded,iterations_used\n";
  char buf[64];
  for (const auto& s : report.samples) {
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f", s.initial_score, s.final_score);
    out << s.id << ',' << buf << ',' << (s.evaded ? 1 : 0) << ',' << s.iterations_used
        << '\n';
  }
}

inline void save_attack_summary(const AttackReport& report, const AttackConfig& cfg,
                                const std::filesystem::path& path) {
  ordered_json j;
  j["samples"] = report.samples.size();
  j["baseline_detection_rate"] = report.baseline_detection_rate;
  j["post_attack_detection_rate"] = report.post_attack_detection_rate;
  std::size_t evaded = 0;
  for (const auto& s : report.samples) evaded += s.evaded;
  j["evaded"] = evaded;
  j["mode"] = to_string(cfg.mode);
  j["population"] = cfg.population;
  j["iterations"] = cfg.iterations;
  j["mutation_scale"] = cfg.mutation_scale;
  j["evasion_threshold"] = cfg.evasion_threshold;
  j["seed"] = cfg.seed;
  std::ofstream out(path);
  if (!out) throw DataError("cannot write attack summary: " + path.string());
  out << j.dump(2) << '\n';
}

// Default mask for synthetic data when the user supplies none: the first
// quarter of the feature dimensions (rounded up).
inline std::vector<bool> default_mask(std::size_t d) {
  std::vector<bool> mask(d, false);
  for (std::size_t i = 0; i < (d + 3) / 4; ++i) mask[i] = true;
  return mask;
}

inline std::vector<bool> load_mask(const std::filesystem::path& path, std::size_t d) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open mask file: " + path.string());
  std::vector<bool> mask(d, false);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const long idx = std::stol(line);
      if (idx < 0 || static_cast<std::size_t>(idx) >= d) {
        throw DataError("mask index " + std::to_string(idx) + " out of range at line " +
                        std::to_string(line_no));
      }
      mask[static_cast<std::size_t>(idx)] = true;
    } catch (const std::invalid_argument&) {
      throw DataError("malformed mask entry at line " + std::to_string(line_no));
    }
  }
  return mask;
}

}  // namespace capembed
