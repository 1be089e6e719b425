#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capembed/capability.hpp"
#include "capembed/common.hpp"
#include "capembed/dataio.hpp"
#include "capembed/losses.hpp"
#include "capembed/nn.hpp"
#include "capembed/sampler.hpp"

namespace capembed {

struct TrainConfig {
  LossConfig loss;
  int epochs = 30;
  double lr = 0.001;
  int clusters_per_batch = 20;  // C
  int samples_per_cluster = 4;  // M
  std::uint64_t seed = 0;
  bool normalize_embeddings = false;
  std::size_t embedding_dim = 32;
  std::vector<std::size_t> hidden_dims = {4000, 1024, 512, 512};
  double dropout_p = 0.1;
  int pretrain_epochs = 30;     // used by the multi-objective CLI pipeline
  int pretrain_batch_size = 80;

  void validate() const {
    loss.validate();
    if (epochs < 1) throw ConfigError("train: epochs must be at least 1");
    // lr = 0 is a legal degenerate (no-op updates), negative is not
    if (lr < 0.0) throw ConfigError("train: learning rate must be non-negative");
    if (embedding_dim == 0) throw ConfigError("train: embedding_dim must be positive");
    if (pretrain_batch_size < 2) throw ConfigError("train: pretrain batch size must be >= 2");
    if (pretrain_epochs < 1) throw ConfigError("train: pretrain_epochs must be at least 1");
  }
};

struct BatchRecord {
  int epoch = 0;
  int batch = 0;
  double loss = 0.0;
  bool spearman_skipped = false;
  std::size_t batch_size = 0;
};

struct TrainLog {
  std::vector<BatchRecord> batches;
  std::vector<double> epoch_mean_loss;
  std::size_t skipped_spearman_batches = 0;
  std::size_t skipped_small_batches = 0;
  double wall_clock_sec = 0.0;
};

inline void save_train_log(const TrainLog& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write train log: " + path.string());
  for (const auto& b : log.batches) {
    ordered_json rec;
    rec["epoch"] = b.epoch;
    rec["batch"] = b.batch;
    rec["loss"] = b.loss;
    rec["spearman_skipped"] = b.spearman_skipped;
    rec["batch_size"] = b.batch_size;
    out << rec.dump() << '\n';
  }
  for (std::size_t e = 0; e < log.epoch_mean_loss.size(); ++e) {
    ordered_json rec;
    rec["epoch"] = e;
    rec["mean_loss"] = log.epoch_mean_loss[e];
    out << rec.dump() << '\n';
  }
  ordered_json summary;
  summary["skipped_spearman_batches"] = log.skipped_spearman_batches;
  summary["skipped_small_batches"] = log.skipped_small_batches;
  summary["wall_clock_sec"] = log.wall_clock_sec;
  out << summary.dump() << '\n';
}

struct TrainResult {
  EmbeddingNetwork net;
  TrainLog log;
  StandardScaler scaler;
};

// --- checkpoints ------------------------------------------------------------

inline constexpr const char* kCheckpointFormat = "capembed.checkpoint.v1";

inline void save_checkpoint(const EmbeddingNetwork& net, const StandardScaler* scaler,
                            const std::filesystem::path& path) {
  ordered_json j;
  j["format"] = kCheckpointFormat;
  j["network"] = network_to_json(net);
  if (scaler) {
    ordered_json sj;
    sj["mean"] = scaler->mean;
    sj["std"] = scaler->std;
    j["scaler"] = std::move(sj);
  } else {
    j["scaler"] = nullptr;
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write checkpoint: " + path.string());
  out << j.dump(2) << '\n';
}

struct LoadedCheckpoint {
  EmbeddingNetwork net;
  std::optional<StandardScaler> scaler;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  json j;
  try {
    in >> j;
    if (j.at("format").get<std::string>() != kCheckpointFormat) {
      throw DataError("unsupported checkpoint format tag");
    }
    LoadedCheckpoint lc;
    lc.net = network_from_json(j.at("network"));
    if (!j.at("scaler").is_null()) {
      StandardScaler sc;
      sc.mean = j["scaler"].at("mean").get<std::vector<double>>();
      sc.std = j["scaler"].at("std").get<std::vector<double>>();
      lc.scaler = std::move(sc);
    }
    return lc;
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint " + path.string() + ": " + e.what());
  }
}

// --- shared loop machinery ---------------------------------------------------

namespace detail {

inline constexpr std::uint64_t kDropoutSalt = 0xD80D0317A11EULL;
inline constexpr std::uint64_t kEpochSalt = 0xE70C500000ULL;

inline Matrix standardized_features(const Dataset& ds, const StandardScaler& sc) {
  Matrix x(ds.samples.size(), ds.d);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto z = transform(sc, ds.samples[i].features);
    for (std::size_t j = 0; j < ds.d; ++j) x(i, j) = z[j];
  }
  return x;
}

inline Matrix gather_rows(const Matrix& all, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), all.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto src = all.row(idx[r]);
    for (std::size_t c = 0; c < all.cols(); ++c) out(r, c) = src[c];
  }
  return out;
}

inline std::vector<double> gather_labels(const Dataset& ds,
                                         std::span<const std::size_t> idx) {
  std::vector<double> y(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    y[r] = ds.samples[idx[r]].label == Label::kMalware ? 1.0 : 0.0;
  }
  return y;
}

inline void write_epoch_checkpoint(const EmbeddingNetwork& net, const StandardScaler& sc,
                                   const std::string& dir, int epoch) {
  if (dir.empty()) return;
  char name[48];
  std::snprintf(name, sizeof(name), "checkpoint_epoch_%03d.json", epoch);
  save_checkpoint(net, &sc, std::filesystem::path(dir) / name);
}

// One pass of sampler-driven metric training over an already-initialized
// network. Used by both scratch metric training and multi-objective
// fine-tuning; `with_scores` routes the detection head into the loss.
inline TrainResult run_metric_loop(EmbeddingNetwork net, const Dataset& train,
                                   const CapabilityClusterMap& map, const TrainConfig& cfg,
                                   bool with_scores, const std::string& checkpoint_dir) {
  const auto start = std::chrono::steady_clock::now();
  TrainResult res;
  res.scaler = fit_scaler(train);
  const Matrix x_all = standardized_features(train, res.scaler);

  net.set_mode(Mode::kTrain);
  net.normalize_default = cfg.normalize_embeddings;
  net.reseed_dropout(mix64(cfg.seed ^ kDropoutSalt));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::uint64_t epoch_seed =
        mix64(cfg.seed ^ (kEpochSalt + static_cast<std::uint64_t>(epoch)));
    const auto plan = build_epoch(map, train, cfg.clusters_per_batch,
                                  cfg.samples_per_cluster, epoch_seed);
    double epoch_sum = 0.0;
    std::size_t executed = 0;
    for (std::size_t bi = 0; bi < plan.batches.size(); ++bi) {
      const auto& batch = plan.batches[bi];
      if (batch.sample_indices.size() < 2) {
        ++res.log.skipped_small_batches;
        continue;
      }
      const Matrix xb = gather_rows(x_all, batch.sample_indices);
      auto fwd = forward(net, xb, cfg.normalize_embeddings, with_scores);
      const auto pairs = make_pairs(train, batch.sample_indices, map);
      std::vector<double> labels;
      if (with_scores) labels = gather_labels(train, batch.sample_indices);
      const auto loss = evaluate_loss(cfg.loss, fwd.embeddings, pairs, fwd.scores, labels);
      const auto grads = backward(net, fwd.tape, loss.d_embeddings, loss.d_scores);
      sgd_step(net, grads, cfg.lr);

      res.log.batches.push_back({epoch, static_cast<int>(bi), loss.loss,
                                 loss.spearman_degenerate, batch.sample_indices.size()});
      if (loss.spearman_degenerate) ++res.log.skipped_spearman_batches;
      epoch_sum += loss.loss;
      ++executed;
    }
    res.log.epoch_mean_loss.push_back(executed ? epoch_sum / static_cast<double>(executed)
                                               : 0.0);
    write_epoch_checkpoint(net, res.scaler, checkpoint_dir, epoch);
  }
  if (!checkpoint_dir.empty()) {
    save_checkpoint(net, &res.scaler, std::filesystem::path(checkpoint_dir) / "checkpoint.json");
  }
  res.log.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  res.net = std::move(net);
  return res;
}

// Proportional interleave of the shuffled per-class index lists, so every
// batch tracks the dataset's class ratio.
inline std::vector<std::size_t> stratified_order(const Dataset& ds, std::uint64_t seed) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    (ds.samples[i].label == Label::kMalware ? pos : neg).push_back(i);
  }
  Rng rng(mix64(seed));
  rng.shuffle(pos);
  rng.shuffle(neg);
  std::vector<std::size_t> order;
  order.reserve(ds.samples.size());
  std::size_t pi = 0, ni = 0;
  while (pi < pos.size() || ni < neg.size()) {
    const bool take_pos =
        pi < pos.size() &&
        (ni >= neg.size() || pi * neg.size() <= ni * pos.size());
    order.push_back(take_pos ? pos[pi++] : neg[ni++]);
  }
  return order;
}

}  // namespace detail

// Trains an embedding network from Xavier initialization with a metric loss
// (contrastive, spearman or a mixture) over cluster-balanced batches.
// Deterministic per (dataset, map, cfg.seed); a checkpoint is written after
// every epoch when checkpoint_dir is given.
inline TrainResult train_metric_from(EmbeddingNetwork net, const Dataset& train,
                                     const CapabilityClusterMap& map, const TrainConfig& cfg,
                                     const std::string& checkpoint_dir = "") {
  cfg.validate();
  if (cfg.loss.kind == LossKind::kBce || cfg.loss.kind == LossKind::kMultiObjective) {
    throw ConfigError(
        "train_metric: use pretrain_detection / train_multi_objective for bce-bearing losses");
  }
  if (train.samples.empty()) throw DataError("train_metric: empty dataset");
  if (net.input_dim() != train.d) throw ConfigError("train_metric: network/input dim mismatch");
  return detail::run_metric_loop(std::move(net), train, map, cfg, false, checkpoint_dir);
}

inline TrainResult train_metric(const Dataset& train, const CapabilityClusterMap& map,
                                const TrainConfig& cfg, const std::string& checkpoint_dir = "") {
  cfg.validate();
  if (train.samples.empty()) throw DataError("train_metric: empty dataset");
  auto net = xavier_init(
      make_embedding_specs(train.d, cfg.hidden_dims, cfg.embedding_dim, cfg.dropout_p),
      cfg.seed);
  net.normalize_default = cfg.normalize_embeddings;
  return train_metric_from(std::move(net), train, map, cfg, checkpoint_dir);
}

// Goodware/malware pretraining: body plus a scalar sigmoid head trained with
// binary cross-entropy over label-stratified shuffled batches. The returned
// network keeps its head so it can seed multi-objective fine-tuning.
inline TrainResult pretrain_detection(const Dataset& train, const TrainConfig& cfg,
                                      const std::string& checkpoint_dir = "") {
  cfg.validate();
  if (train.samples.empty()) throw DataError("pretrain_detection: empty dataset");
  std::size_t pos = 0;
  for (const auto& s : train.samples) pos += s.label == Label::kMalware;
  if (pos == 0 || pos == train.samples.size()) {
    throw DataError("pretrain_detection: single-class dataset");
  }

  const auto start = std::chrono::steady_clock::now();
  TrainResult res;
  res.scaler = fit_scaler(train);
  const Matrix x_all = detail::standardized_features(train, res.scaler);

  auto net = xavier_init(
      make_embedding_specs(train.d, cfg.hidden_dims, cfg.embedding_dim, cfg.dropout_p),
      cfg.seed);
  net.normalize_default = cfg.normalize_embeddings;
  net = append_head(net, {cfg.embedding_dim, 1, Activation::kSigmoid, false, 0.0});
  net.set_mode(Mode::kTrain);
  net.reseed_dropout(mix64(cfg.seed ^ detail::kDropoutSalt));

  LossConfig bce_cfg;
  bce_cfg.kind = LossKind::kBce;
  const PairSet no_pairs;

  const std::size_t bsz = static_cast<std::size_t>(cfg.pretrain_batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = detail::stratified_order(
        train, cfg.seed ^ (detail::kEpochSalt + static_cast<std::uint64_t>(epoch)));
    double epoch_sum = 0.0;
    std::size_t executed = 0;
    int bi = 0;
    for (std::size_t startIdx = 0; startIdx < order.size(); startIdx += bsz, ++bi) {
      const std::size_t end = std::min(order.size(), startIdx + bsz);
      if (end - startIdx < 2) {
        ++res.log.skipped_small_batches;  // train-mode batchnorm needs >= 2 rows
        continue;
      }
      const std::span<const std::size_t> idx{order.data() + startIdx, end - startIdx};
      const Matrix xb = detail::gather_rows(x_all, idx);
      auto fwd = forward(net, xb, false, true);
      const auto labels = detail::gather_labels(train, idx);
      const auto loss = evaluate_loss(bce_cfg, fwd.embeddings, no_pairs, fwd.scores, labels);
      const auto grads = backward(net, fwd.tape, loss.d_embeddings, loss.d_scores);
      sgd_step(net, grads, cfg.lr);
      res.log.batches.push_back({epoch, bi, loss.loss, false, idx.size()});
      epoch_sum += loss.loss;
      ++executed;
    }
    res.log.epoch_mean_loss.push_back(executed ? epoch_sum / static_cast<double>(executed)
                                               : 0.0);
    detail::write_epoch_checkpoint(net, res.scaler, checkpoint_dir, epoch);
  }
  if (!checkpoint_dir.empty()) {
    save_checkpoint(net, &res.scaler, std::filesystem::path(checkpoint_dir) / "checkpoint.json");
  }
  res.log.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  res.net = std::move(net);
  return res;
}

// Joint fine-tuning on metric structure and detection: contrastive
// (optionally plus weighted spearman) on the embeddings together with a
// weighted bce term on the detection head, both gradients summed per batch.
inline TrainResult train_multi_objective(const Dataset& train, const CapabilityClusterMap& map,
                                         const TrainConfig& cfg,
                                         const EmbeddingNetwork& pretrained,
                                         const std::string& checkpoint_dir = "") {
  cfg.validate();
  if (cfg.loss.kind != LossKind::kMultiObjective) {
    throw ConfigError("train_multi_objective: loss kind must be multi_objective");
  }
  if (train.samples.empty()) throw DataError("train_multi_objective: empty dataset");
  if (pretrained.input_dim() != train.d || pretrained.embedding_dim() != cfg.embedding_dim) {
    throw ConfigError("train_multi_objective: pretrained body dims do not match config");
  }
  EmbeddingNetwork net = pretrained;
  const bool with_scores = cfg.loss.bce_weight > 0.0;
  if (with_scores && !net.head) {
    net = append_head(net, {cfg.embedding_dim, 1, Activation::kSigmoid, false, 0.0});
  }
  return detail::run_metric_loop(std::move(net), train, map, cfg, with_scores,
                                 checkpoint_dir);
}

}  // namespace capembed
