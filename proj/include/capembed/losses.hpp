#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "capembed/capability.hpp"
#include "capembed/common.hpp"
#include "capembed/dataio.hpp"
#include "capembed/matrix.hpp"
#include "capembed/softrank.hpp"

namespace capembed {

enum class LossKind { kContrastive, kSpearman, kMixed, kBce, kMultiObjective };

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::kContrastive: return "contrastive";
    case LossKind::kSpearman: return "spearman";
    case LossKind::kMixed: return "mixed";
    case LossKind::kBce: return "bce";
    case LossKind::kMultiObjective: return "multi_objective";
  }
  return "?";
}

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "contrastive") return LossKind::kContrastive;
  if (s == "spearman") return LossKind::kSpearman;
  if (s == "mixed") return LossKind::kMixed;
  if (s == "bce") return LossKind::kBce;
  if (s == "multi_objective") return LossKind::kMultiObjective;
  throw ConfigError("unknown loss kind '" + s + "'");
}

struct LossConfig {
  LossKind kind = LossKind::kContrastive;
  double margin = 10.0;
  double spearman_weight = 1.0;  // 10 reproduces the weighted "Mixed-10" run
  double bce_weight = 1.0;
  SoftRankConfig soft_rank;

  void validate() const {
    if (!(margin > 0.0)) throw ConfigError("loss: margin must be positive");
    if (spearman_weight < 0.0 || bce_weight < 0.0) {
      throw ConfigError("loss: weights must be non-negative");
    }
  }
};

// One unordered batch pair with its supervision: hard same-cluster indicator
// (split clusters, so label-heterogeneous matches are negatives) and the
// capability-set Jaccard similarity.
struct BatchPair {
  std::size_t i = 0;
  std::size_t j = 0;
  bool same_cluster = false;
  double jaccard = 0.0;
};

struct PairSet {
  std::vector<BatchPair> pairs;
};

// All unordered pairs of the batch, exactly once, i < j.
inline PairSet make_pairs(const Dataset& ds, std::span<const std::size_t> batch,
                          const CapabilityClusterMap& map) {
  PairSet out;
  const std::size_t b = batch.size();
  out.pairs.reserve(b * (b - 1) / 2);
  std::vector<std::uint64_t> split_ids(b);
  for (std::size_t i = 0; i < b; ++i) {
    split_ids[i] = map.split_cluster_of(ds.samples[batch[i]].id);
  }
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = i + 1; j < b; ++j) {
      BatchPair p;
      p.i = i;
      p.j = j;
      p.same_cluster = split_ids[i] == split_ids[j];
      p.jaccard = jaccard(ds.samples[batch[i]].capabilities,
                          ds.samples[batch[j]].capabilities);
      out.pairs.push_back(p);
    }
  }
  return out;
}

struct LossResult {
  double loss = 0.0;
  Matrix d_embeddings;
  std::vector<double> d_scores;
  bool spearman_degenerate = false;
};

namespace detail {

inline std::vector<double> pair_distances(const Matrix& emb, const PairSet& pairs) {
  std::vector<double> d(pairs.pairs.size());
  for (std::size_t p = 0; p < pairs.pairs.size(); ++p) {
    d[p] = std::sqrt(
        squared_distance(emb.row(pairs.pairs[p].i), emb.row(pairs.pairs[p].j)));
  }
  return d;
}

// Accumulates g * dD/d(embeddings) for one pair; the D = 0 singularity takes
// a zero subgradient.
inline void add_distance_gradient(Matrix& d_emb, const Matrix& emb, const BatchPair& pair,
                                  double distance, double g) {
  if (distance <= 0.0 || g == 0.0) return;
  const auto ei = emb.row(pair.i);
  const auto ej = emb.row(pair.j);
  for (std::size_t c = 0; c < ei.size(); ++c) {
    const double dir = (ei[c] - ej[c]) / distance;
    d_emb(pair.i, c) += g * dir;
    d_emb(pair.j, c) -= g * dir;
  }
}

}  // namespace detail

// Siamese contrastive loss, averaged over pairs:
//   Y*D + (1-Y)*max(margin - D, 0)
// with Euclidean D and Y = same split cluster.
inline LossResult contrastive_loss(const Matrix& emb, const PairSet& pairs, double margin) {
  if (pairs.pairs.empty()) throw DataError("contrastive_loss: need at least one pair");
  if (!(margin > 0.0)) throw ConfigError("contrastive_loss: margin must be positive");
  LossResult res;
  res.d_embeddings = Matrix(emb.rows(), emb.cols());
  const auto dist = detail::pair_distances(emb, pairs);
  const double inv_p = 1.0 / static_cast<double>(pairs.pairs.size());
  for (std::size_t p = 0; p < pairs.pairs.size(); ++p) {
    const auto& pr = pairs.pairs[p];
    if (pr.same_cluster) {
      res.loss += dist[p] * inv_p;
      detail::add_distance_gradient(res.d_embeddings, emb, pr, dist[p], inv_p);
    } else if (dist[p] < margin) {
      res.loss += (margin - dist[p]) * inv_p;
      detail::add_distance_gradient(res.d_embeddings, emb, pr, dist[p], -inv_p);
    }
  }
  return res;
}

struct SoftSpearmanResult {
  double loss = 0.0;
  std::vector<double> d_predicted;
  bool degenerate = false;
};

// 1 - r where r is the Pearson correlation between the soft ranks of the
// predicted values and the fractional hard ranks of the ground values. The
// gradient flows only through the predicted side. Constant ground values (no
// ranking signal) or fully collapsed predictions yield the degenerate skip:
// zero loss, zero gradient.
inline SoftSpearmanResult soft_spearman_loss(std::span<const double> predicted,
                                             std::span<const double> ground,
                                             const SoftRankConfig& cfg = {}) {
  const std::size_t n = predicted.size();
  if (n != ground.size()) throw DataError("soft_spearman_loss: size mismatch");
  if (n < 3) throw DataError("soft_spearman_loss: need at least 3 values");

  SoftSpearmanResult res;
  res.d_predicted.assign(n, 0.0);

  bool all_equal = true;
  for (std::size_t i = 1; i < n && all_equal; ++i) all_equal = ground[i] == ground[0];
  if (all_equal) {
    res.degenerate = true;
    return res;
  }

  const auto ground_ranks = hard_rank(ground);
  const auto sr = soft_rank(predicted, cfg);
  const auto& pred_ranks = sr.ranks();

  const double mean_rank = 0.5 * static_cast<double>(n + 1);
  double spp = 0.0, sgg = 0.0, spg = 0.0;
  std::vector<double> pc(n), gc(n);
  for (std::size_t i = 0; i < n; ++i) {
    // both rank vectors sum to n(n+1)/2, so they share the mean
    pc[i] = pred_ranks[i] - mean_rank;
    gc[i] = ground_ranks[i] - mean_rank;
    spp += pc[i] * pc[i];
    sgg += gc[i] * gc[i];
    spg += pc[i] * gc[i];
  }
  if (spp <= 0.0) {
    res.degenerate = true;  // predictions fully collapsed
    return res;
  }
  const double sp = std::sqrt(spp);
  const double sg = std::sqrt(sgg);
  const double r = spg / (sp * sg);
  res.loss = 1.0 - r;

  std::vector<double> d_ranks(n);
  for (std::size_t i = 0; i < n; ++i) {
    d_ranks[i] = -(gc[i] / (sp * sg) - r * pc[i] / spp);
  }
  res.d_predicted = sr.apply_jacobian(d_ranks);
  return res;
}

// Spearman loss over a batch: predicted similarity of a pair is the negative
// Euclidean distance of its embeddings, ground similarity is the Jaccard of
// the capability sets.
inline LossResult spearman_loss(const Matrix& emb, const PairSet& pairs,
                                const SoftRankConfig& cfg = {}) {
  if (pairs.pairs.size() < 3) {
    throw DataError("spearman_loss: need at least 3 pairs (batch of 3)");
  }
  LossResult res;
  res.d_embeddings = Matrix(emb.rows(), emb.cols());
  const auto dist = detail::pair_distances(emb, pairs);
  std::vector<double> predicted(dist.size());
  std::vector<double> ground(dist.size());
  for (std::size_t p = 0; p < dist.size(); ++p) {
    predicted[p] = -dist[p];
    ground[p] = pairs.pairs[p].jaccard;
  }
  const auto ss = soft_spearman_loss(predicted, ground, cfg);
  res.loss = ss.loss;
  res.spearman_degenerate = ss.degenerate;
  if (!ss.degenerate) {
    for (std::size_t p = 0; p < dist.size(); ++p) {
      detail::add_distance_gradient(res.d_embeddings, emb, pairs.pairs[p], dist[p],
                                    -ss.d_predicted[p]);
    }
  }
  return res;
}

struct BceResult {
  double loss = 0.0;
  std::vector<double> d_scores;
};

// Mean binary cross-entropy on probabilities, clamped to [1e-12, 1-1e-12].
// The gradient is exact for the clamped function (zero where the clamp is
// active).
inline BceResult bce_loss(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw DataError("bce_loss: scores/labels size mismatch");
  }
  constexpr double kLo = 1e-12;
  constexpr double kHi = 1.0 - 1e-12;
  BceResult res;
  res.d_scores.assign(scores.size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double y = labels[i];
    if (y != 0.0 && y != 1.0) throw DataError("bce_loss: labels must be 0 or 1");
    const double s = std::clamp(scores[i], kLo, kHi);
    res.loss += -(y * std::log(s) + (1.0 - y) * std::log(1.0 - s)) * inv_n;
    if (scores[i] > kLo && scores[i] < kHi) {
      res.d_scores[i] = (s - y) / (s * (1.0 - s)) * inv_n;
    }
  }
  return res;
}

// Weighted mixture dispatch:
//   contrastive                              (kContrastive)
//   spearman                                 (kSpearman)
//   bce                                      (kBce; scores/labels required)
//   contrastive + w_s * spearman             (kMixed)
//   contrastive + w_s * spearman + w_b * bce (kMultiObjective)
// Zero-weight terms are skipped entirely, so e.g. kMixed with w_s = 0 equals
// the contrastive loss exactly. Inside mixtures, a batch too small to rank
// (< 3 pairs) degrades to the degenerate-spearman skip instead of throwing.
inline LossResult evaluate_loss(const LossConfig& cfg, const Matrix& emb,
                                const PairSet& pairs,
                                std::span<const double> scores = {},
                                std::span<const double> labels = {}) {
  cfg.validate();
  const bool wants_bce =
      cfg.kind == LossKind::kBce ||
      (cfg.kind == LossKind::kMultiObjective && cfg.bce_weight > 0.0);
  if (wants_bce && (scores.empty() || labels.empty())) {
    throw DataError("evaluate_loss: bce term requires scores and labels");
  }

  LossResult res;
  res.d_embeddings = Matrix(emb.rows(), emb.cols());

  const bool wants_contrastive = cfg.kind == LossKind::kContrastive ||
                                 cfg.kind == LossKind::kMixed ||
                                 cfg.kind == LossKind::kMultiObjective;
  const double spearman_w = cfg.kind == LossKind::kSpearman ? 1.0 : cfg.spearman_weight;
  const bool wants_spearman =
      cfg.kind == LossKind::kSpearman ||
      ((cfg.kind == LossKind::kMixed || cfg.kind == LossKind::kMultiObjective) &&
       cfg.spearman_weight > 0.0);

  if (wants_contrastive) {
    auto c = contrastive_loss(emb, pairs, cfg.margin);
    res.loss += c.loss;
    axpy(res.d_embeddings, 1.0, c.d_embeddings);
  }
  if (wants_spearman) {
    if (pairs.pairs.size() < 3) {
      if (cfg.kind == LossKind::kSpearman) {
        throw DataError("spearman_loss: need at least 3 pairs (batch of 3)");
      }
      res.spearman_degenerate = true;
    } else {
      auto s = spearman_loss(emb, pairs, cfg.soft_rank);
      res.loss += spearman_w * s.loss;
      axpy(res.d_embeddings, spearman_w, s.d_embeddings);
      res.spearman_degenerate = s.spearman_degenerate;
    }
  }
  if (wants_bce) {
    const double w = cfg.kind == LossKind::kBce ? 1.0 : cfg.bce_weight;
    auto b = bce_loss(scores, labels);
    res.loss += w * b.loss;
    res.d_scores.assign(scores.size(), 0.0);
    for (std::size_t i = 0; i < scores.size(); ++i) res.d_scores[i] = w * b.d_scores[i];
  }
  return res;
}

}  // namespace capembed
