#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capembed/common.hpp"
#include "capembed/dataio.hpp"
#include "capembed/matrix.hpp"
#include "capembed/nn.hpp"
#include "capembed/softrank.hpp"

namespace capembed {

// Frozen embeddings plus the supervision columns needed downstream.
struct EmbeddedDataset {
  std::vector<std::string> ids;
  Matrix embeddings;  // N x e
  std::vector<Label> labels;
  std::vector<std::optional<std::string>> families;
  std::vector<std::set<std::string>> tags;
};

// Eval-mode extraction; batch composition cannot affect the outputs (eval
// batchnorm uses running statistics), so row ranges parallelize exactly.
inline EmbeddedDataset extract_embeddings(const EmbeddingNetwork& net,
                                          const StandardScaler& scaler, const Dataset& ds,
                                          bool normalize, int threads = 1,
                                          std::size_t batch_size = 256) {
  if (ds.d != net.input_dim()) throw DataError("extract_embeddings: dimension mismatch");
  if (scaler.mean.size() != ds.d) throw DataError("extract_embeddings: scaler mismatch");
  EmbeddedDataset out;
  const std::size_t n = ds.samples.size();
  out.ids.resize(n);
  out.labels.resize(n);
  out.families.resize(n);
  out.tags.resize(n);
  out.embeddings = Matrix(n, net.embedding_dim());
  for (std::size_t i = 0; i < n; ++i) {
    out.ids[i] = ds.samples[i].id;
    out.labels[i] = ds.samples[i].label;
    out.families[i] = ds.samples[i].family;
    out.tags[i] = ds.samples[i].tags;
  }
  parallel_for(n, threads, [&](std::size_t lo, std::size_t hi) {
    EmbeddingNetwork worker = net;  // private copy; forward bumps counters
    worker.set_mode(Mode::kEval);
    for (std::size_t start = lo; start < hi; start += batch_size) {
      const std::size_t end = std::min(hi, start + batch_size);
      Matrix x(end - start, ds.d);
      for (std::size_t r = start; r < end; ++r) {
        const auto z = transform(scaler, ds.samples[r].features);
        for (std::size_t c = 0; c < ds.d; ++c) x(r - start, c) = z[c];
      }
      const auto emb = forward(worker, x, normalize).embeddings;
      for (std::size_t r = start; r < end; ++r) {
        for (std::size_t c = 0; c < emb.cols(); ++c) {
          out.embeddings(r, c) = emb(r - start, c);
        }
      }
    }
  });
  return out;
}

// Single-precision payload of an N x dim matrix; the storage-saving argument
// for embeddings is plain byte arithmetic.
inline std::uint64_t payload_bytes(std::uint64_t rows, std::uint64_t cols) {
  return rows * cols * 4;
}

// --- gradient boosted trees ---------------------------------------------------

struct GbtParams {
  int n_trees = 100;
  int max_depth = 4;
  double learning_rate = 0.1;
  int min_samples_leaf = 5;

  void validate() const {
    if (n_trees < 1) throw ConfigError("gbt: n_trees must be positive");
    if (max_depth < 0) throw ConfigError("gbt: max_depth must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("gbt: learning_rate must be positive");
    if (min_samples_leaf < 1) throw ConfigError("gbt: min_samples_leaf must be positive");
  }
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  double value = 0.0;
  int left = -1;
  int right = -1;
};

struct RegressionTree {
  std::vector<TreeNode> nodes;

  double predict(std::span<const double> x) const {
    int idx = 0;
    while (nodes[idx].feature >= 0) {
      idx = x[static_cast<std::size_t>(nodes[idx].feature)] < nodes[idx].threshold
                ? nodes[idx].left
                : nodes[idx].right;
    }
    return nodes[idx].value;
  }
};

// Boosted-tree head on log-odds scale: initial log-odds plus learning-rate
// scaled tree outputs, squashed through a sigmoid for scores.
struct GbtHead {
  std::vector<RegressionTree> trees;
  double learning_rate = 0.1;
  double initial_log_odds = 0.0;

  double decision(std::span<const double> x) const {
    double f = initial_log_odds;
    for (const auto& t : trees) f += learning_rate * t.predict(x);
    return f;
  }

  double score(std::span<const double> x) const { return sigmoid(decision(x)); }
};

namespace detail {

struct SplitChoice {
  bool found = false;
  int feature = -1;
  double threshold = 0.0;
  double gain = 0.0;
};

// Exact greedy squared-error split over all features. Ties break toward the
// lower feature index and lower threshold (first candidate scanned).
// Sum in value-sorted order so node reductions do not depend on how the
// caller ordered the rows (tie-free inputs then reduce bit-identically).
inline double canonical_sum(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  double acc = 0.0;
  for (double v : values) acc += v;
  return acc;
}

inline SplitChoice best_split(const Matrix& x, const std::vector<double>& residual,
                              const std::vector<std::size_t>& idx, int min_leaf) {
  SplitChoice best;
  const std::size_t n = idx.size();
  if (n < 2 * static_cast<std::size_t>(min_leaf)) return best;
  std::vector<double> r(n), r2(n);
  for (std::size_t k = 0; k < n; ++k) {
    r[k] = residual[idx[k]];
    r2[k] = r[k] * r[k];
  }
  const double total = canonical_sum(std::move(r));
  const double total_sq = canonical_sum(std::move(r2));
  const double parent_sse = total_sq - total * total / static_cast<double>(n);

  std::vector<std::size_t> order;
  for (std::size_t f = 0; f < x.cols(); ++f) {
    order = idx;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return x(a, f) < x(b, f);
    });
    double left_sum = 0.0, left_sq = 0.0;
    for (std::size_t k = 0; k + 1 < n; ++k) {
      const std::size_t i = order[k];
      left_sum += residual[i];
      left_sq += residual[i] * residual[i];
      if (x(order[k], f) == x(order[k + 1], f)) continue;  // no boundary here
      const std::size_t left_n = k + 1;
      const std::size_t right_n = n - left_n;
      if (left_n < static_cast<std::size_t>(min_leaf) ||
          right_n < static_cast<std::size_t>(min_leaf)) {
        continue;
      }
      const double right_sum = total - left_sum;
      const double right_sq = total_sq - left_sq;
      const double sse =
          (left_sq - left_sum * left_sum / static_cast<double>(left_n)) +
          (right_sq - right_sum * right_sum / static_cast<double>(right_n));
      const double gain = parent_sse - sse;
      if (gain > best.gain) {
        best.found = true;
        best.feature = static_cast<int>(f);
        best.threshold = 0.5 * (x(order[k], f) + x(order[k + 1], f));
        best.gain = gain;
      }
    }
  }
  return best;
}

// Newton leaf value for logistic loss: sum(residual) / sum(hessian).
inline double leaf_value(const std::vector<double>& residual, const std::vector<double>& hessian,
                         const std::vector<std::size_t>& idx) {
  std::vector<double> num(idx.size()), den(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    num[k] = residual[idx[k]];
    den[k] = hessian[idx[k]];
  }
  return canonical_sum(std::move(num)) / std::max(canonical_sum(std::move(den)), 1e-12);
}

inline int build_tree(RegressionTree& tree, const Matrix& x, const std::vector<double>& residual,
                      const std::vector<double>& hessian, std::vector<std::size_t> idx,
                      int depth, const GbtParams& params) {
  const int node_id = static_cast<int>(tree.nodes.size());
  tree.nodes.emplace_back();
  if (depth < params.max_depth) {
    const auto split = best_split(x, residual, idx, params.min_samples_leaf);
    if (split.found) {
      std::vector<std::size_t> left, right;
      for (auto i : idx) {
        (x(i, static_cast<std::size_t>(split.feature)) < split.threshold ? left : right)
            .push_back(i);
      }
      tree.nodes[static_cast<std::size_t>(node_id)].feature = split.feature;
      tree.nodes[static_cast<std::size_t>(node_id)].threshold = split.threshold;
      const int l = build_tree(tree, x, residual, hessian, std::move(left), depth + 1, params);
      const int r = build_tree(tree, x, residual, hessian, std::move(right), depth + 1, params);
      tree.nodes[static_cast<std::size_t>(node_id)].left = l;
      tree.nodes[static_cast<std::size_t>(node_id)].right = r;
      return node_id;
    }
  }
  tree.nodes[static_cast<std::size_t>(node_id)].value = leaf_value(residual, hessian, idx);
  return node_id;
}

}  // namespace detail

// Gradient boosting with logistic loss: each round fits an exact-greedy
// depth-limited regression tree to the negative gradient, with Newton-step
// leaf values. Deterministic and invariant to sample order.
inline GbtHead fit_gbt(const Matrix& x, const std::vector<int>& y, const GbtParams& params = {},
                       std::vector<double>* train_logloss = nullptr) {
  params.validate();
  if (x.rows() != y.size() || x.rows() == 0) throw DataError("fit_gbt: bad training data");
  std::size_t pos = 0;
  for (int v : y) {
    if (v != 0 && v != 1) throw DataError("fit_gbt: labels must be 0/1");
    pos += v;
  }
  if (pos == 0 || pos == y.size()) throw DataError("fit_gbt: single-class target");

  const std::size_t n = x.rows();
  GbtHead head;
  head.learning_rate = params.learning_rate;
  const double base = static_cast<double>(pos) / static_cast<double>(n);
  head.initial_log_odds = std::log(base / (1.0 - base));

  std::vector<double> f(n, head.initial_log_odds);
  std::vector<double> residual(n), hessian(n);
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;

  for (int round = 0; round < params.n_trees; ++round) {
    for (std::size_t i = 0; i < n; ++i) {
      const double p = sigmoid(f[i]);
      residual[i] = static_cast<double>(y[i]) - p;
      hessian[i] = p * (1.0 - p);
    }
    RegressionTree tree;
    detail::build_tree(tree, x, residual, hessian, all, 0, params);
    for (std::size_t i = 0; i < n; ++i) {
      f[i] += params.learning_rate * tree.predict(x.row(i));
    }
    head.trees.push_back(std::move(tree));
    if (train_logloss) {
      double ll = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double p = std::clamp(sigmoid(f[i]), 1e-12, 1.0 - 1e-12);
        ll += y[i] ? -std::log(p) : -std::log(1.0 - p);
      }
      train_logloss->push_back(ll / static_cast<double>(n));
    }
  }
  return head;
}

inline GbtHead fit_gbt(const EmbeddedDataset& emb, const std::vector<int>& target,
                       const GbtParams& params = {},
                       std::vector<double>* train_logloss = nullptr) {
  return fit_gbt(emb.embeddings, target, params, train_logloss);
}

inline void save_gbt(const GbtHead& head, const std::filesystem::path& path) {
  ordered_json j;
  j["format"] = "capembed.gbt.v1";
  j["learning_rate"] = head.learning_rate;
  j["initial_log_odds"] = head.initial_log_odds;
  j["trees"] = ordered_json::array();
  for (const auto& t : head.trees) {
    ordered_json nodes = ordered_json::array();
    for (const auto& nd : t.nodes) {
      nodes.push_back(ordered_json::array(
          {nd.feature, nd.threshold, nd.value, nd.left, nd.right}));
    }
    j["trees"].push_back(std::move(nodes));
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write gbt model: " + path.string());
  out << j.dump() << '\n';
}

inline GbtHead load_gbt(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open gbt model: " + path.string());
  json j;
  try {
    in >> j;
    if (j.at("format").get<std::string>() != "capembed.gbt.v1") {
      throw DataError("unsupported gbt format tag");
    }
    GbtHead head;
    head.learning_rate = j.at("learning_rate").get<double>();
    head.initial_log_odds = j.at("initial_log_odds").get<double>();
    for (const auto& tj : j.at("trees")) {
      RegressionTree t;
      for (const auto& nj : tj) {
        TreeNode nd;
        nd.feature = nj.at(0).get<int>();
        nd.threshold = nj.at(1).get<double>();
        nd.value = nj.at(2).get<double>();
        nd.left = nj.at(3).get<int>();
        nd.right = nj.at(4).get<int>();
        t.nodes.push_back(nd);
      }
      head.trees.push_back(std::move(t));
    }
    return head;
  } catch (const json::exception& e) {
    throw DataError("malformed gbt model " + path.string() + ": " + e.what());
  }
}

// --- nearest neighbors ---------------------------------------------------------

// Euclidean k-NN family prediction (default 1-NN). Distance ties break toward
// the lowest training index; with k > 1 the majority family wins and vote
// ties fall back to the nearest tied member.
inline std::vector<std::string> knn_predict(const EmbeddedDataset& train,
                                            const EmbeddedDataset& query, int k = 1) {
  if (k < 1) throw ConfigError("knn_predict: k must be positive");
  std::vector<std::size_t> train_rows;
  for (std::size_t i = 0; i < train.ids.size(); ++i) {
    if (train.families[i].has_value()) train_rows.push_back(i);
  }
  if (train_rows.empty()) throw DataError("knn_predict: no family labels in training set");

  std::vector<std::string> out(query.ids.size());
  for (std::size_t q = 0; q < query.ids.size(); ++q) {
    std::vector<std::pair<double, std::size_t>> best;  // (squared distance, index)
    for (auto i : train_rows) {
      const double d2 = squared_distance(train.embeddings.row(i), query.embeddings.row(q));
      best.emplace_back(d2, i);
    }
    const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), best.size());
    std::partial_sort(best.begin(), best.begin() + static_cast<std::ptrdiff_t>(kk), best.end());
    if (kk == 1) {
      out[q] = *train.families[best[0].second];
      continue;
    }
    std::map<std::string, int> votes;
    for (std::size_t i = 0; i < kk; ++i) votes[*train.families[best[i].second]] += 1;
    int top = 0;
    for (const auto& [fam, v] : votes) top = std::max(top, v);
    for (std::size_t i = 0; i < kk; ++i) {  // nearest member of a top family
      const auto& fam = *train.families[best[i].second];
      if (votes[fam] == top) {
        out[q] = fam;
        break;
      }
    }
  }
  return out;
}

// --- metrics --------------------------------------------------------------------

// Mann-Whitney AU-ROC: P(score_pos > score_neg) + 0.5 * P(equal), computed
// through fractional ranks.
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw DataError("auroc: scores/labels mismatch");
  }
  std::size_t pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw DataError("auroc: labels must be 0/1");
    pos += y;
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw DataError("auroc: need both classes");
  const auto ranks = hard_rank(scores);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) rank_sum += ranks[i];
  }
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

inline std::vector<int> detection_targets(const EmbeddedDataset& emb) {
  std::vector<int> y(emb.labels.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = emb.labels[i] == Label::kMalware;
  return y;
}

// --- attribute tagging -----------------------------------------------------------

struct TagResult {
  std::string tag;
  double auroc = 0.0;
};

struct TagTable {
  std::vector<TagResult> rows;
  std::vector<std::string> skipped;  // degenerate tags, with a warning each
};

inline std::vector<int> tag_targets(const EmbeddedDataset& emb, const std::string& tag) {
  std::vector<int> y(emb.tags.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = emb.tags[i].count(tag) > 0;
  return y;
}

// One independent boosted-tree head per tag (1-hit presence criterion), fit
// on the train embeddings and scored on the test embeddings. Tags lacking
// both classes on either side are skipped with a warning.
inline TagTable eval_tags(const EmbeddedDataset& train, const EmbeddedDataset& test,
                          const std::vector<std::string>& tag_list,
                          const GbtParams& params = {}, int threads = 1) {
  TagTable table;
  std::vector<int> usable;
  for (std::size_t t = 0; t < tag_list.size(); ++t) {
    const auto y_train = tag_targets(train, tag_list[t]);
    const auto y_test = tag_targets(test, tag_list[t]);
    auto degenerate = [](const std::vector<int>& y) {
      const auto pos = static_cast<std::size_t>(std::count(y.begin(), y.end(), 1));
      return pos == 0 || pos == y.size();
    };
    if (degenerate(y_train) || degenerate(y_test)) {
      table.skipped.push_back(tag_list[t]);
    } else {
      usable.push_back(static_cast<int>(t));
    }
  }
  table.rows.resize(usable.size());
  parallel_for(usable.size(), threads, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t u = lo; u < hi; ++u) {
      const auto& tag = tag_list[static_cast<std::size_t>(usable[u])];
      const auto head = fit_gbt(train, tag_targets(train, tag), params);
      std::vector<double> scores(test.ids.size());
      for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] = head.score(test.embeddings.row(i));
      }
      const auto y_test = tag_targets(test, tag);
      table.rows[u] = {tag, auroc(scores, y_test)};
    }
  });
  return table;
}

// Aggregates per-seed tag tables into mean +- std rows (only tags present in
// every run survive).
struct AggregateTagRow {
  std::string tag;
  MeanStd stats;
};

inline std::vector<AggregateTagRow> aggregate_tag_tables(const std::vector<TagTable>& tables) {
  if (tables.empty()) throw DataError("aggregate_tag_tables: no tables");
  std::vector<AggregateTagRow> out;
  for (const auto& row : tables.front().rows) {
    std::vector<double> values;
    bool everywhere = true;
    for (const auto& t : tables) {
      const auto it = std::find_if(t.rows.begin(), t.rows.end(),
                                   [&](const TagResult& r) { return r.tag == row.tag; });
      if (it == t.rows.end()) {
        everywhere = false;
        break;
      }
      values.push_back(it->auroc);
    }
    if (everywhere) out.push_back({row.tag, aggregate_runs(values)});
  }
  return out;
}

// --- exports ---------------------------------------------------------------------

inline void save_embeddings_ndjson(const EmbeddedDataset& emb,
                                   const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write embeddings: " + path.string());
  for (std::size_t i = 0; i < emb.ids.size(); ++i) {
    ordered_json rec;
    rec["id"] = emb.ids[i];
    rec["embedding"] = std::vector<double>(emb.embeddings.row(i).begin(),
                                           emb.embeddings.row(i).end());
    rec["label"] = to_string(emb.labels[i]);
    if (emb.families[i]) rec["family"] = *emb.families[i];
    if (!emb.tags[i].empty()) rec["tags"] = emb.tags[i];
    out << rec.dump() << '\n';
  }
}

inline EmbeddedDataset load_embeddings_ndjson(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open embeddings: " + path.string());
  EmbeddedDataset emb;
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json rec = json::parse(line);
      emb.ids.push_back(rec.at("id").get<std::string>());
      rows.push_back(rec.at("embedding").get<std::vector<double>>());
      emb.labels.push_back(label_from_string(rec.at("label").get<std::string>()));
      if (rec.contains("family") && !rec["family"].is_null()) {
        emb.families.push_back(rec["family"].get<std::string>());
      } else {
        emb.families.push_back(std::nullopt);
      }
      std::set<std::string> tags;
      if (rec.contains("tags")) {
        for (const auto& t : rec["tags"]) tags.insert(t.get<std::string>());
      }
      emb.tags.push_back(std::move(tags));
    } catch (const json::exception& e) {
      throw DataError("malformed embedding record at line " + std::to_string(line_no) +
                      ": " + e.what());
    }
    if (rows.back().size() != rows.front().size()) {
      throw DataError("inconsistent embedding length at line " + std::to_string(line_no));
    }
  }
  emb.embeddings = Matrix(rows.size(), rows.empty() ? 0 : rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) emb.embeddings(r, c) = rows[r][c];
  }
  return emb;
}

// Flat little-endian float32 matrix plus a JSON sidecar describing it.
inline void save_matrix_f32(const Matrix& m, const std::filesystem::path& data_path,
                            const std::filesystem::path& sidecar_path) {
  std::ofstream out(data_path, std::ios::binary);
  if (!out) throw DataError("cannot write matrix: " + data_path.string());
  for (double v : m.data()) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    const char bytes[4] = {static_cast<char>(bits & 0xFF), static_cast<char>((bits >> 8) & 0xFF),
                           static_cast<char>((bits >> 16) & 0xFF),
                           static_cast<char>((bits >> 24) & 0xFF)};
    out.write(bytes, 4);
  }
  ordered_json side;
  side["format"] = "capembed.matrix.v1";
  side["rows"] = m.rows();
  side["cols"] = m.cols();
  side["dtype"] = "float32";
  side["byte_order"] = "little";
  side["layout"] = "row-major";
  std::ofstream sidecar(sidecar_path);
  if (!sidecar) throw DataError("cannot write sidecar: " + sidecar_path.string());
  sidecar << side.dump(2) << '\n';
}

struct MetricRow {
  std::string task;
  std::string name;
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t runs = 1;
};

inline void save_metrics_csv(const std::vector<MetricRow>& rows,
                             const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write metrics: " + path.string());
  out << "task,metric,mean,std,runs\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f", r.mean, r.stddev);
    out << r.task << ',' << r.name << ',' << buf << ',' << r.runs << '\n';
  }
}

}  // namespace capembed
