// capembed command-line driver: gen | cluster | train | embed | eval | attack
// | rerun. Every command resolves its configuration (defaults < --config file
// < flags), runs, and records a manifest next to its artifacts; `rerun`
// replays a manifest into a fresh output directory.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "capembed/advsim.hpp"
#include "capembed/capability.hpp"
#include "capembed/common.hpp"
#include "capembed/dataio.hpp"
#include "capembed/losses.hpp"
#include "capembed/manifest.hpp"
#include "capembed/nn.hpp"
#include "capembed/sampler.hpp"
#include "capembed/trainer.hpp"
#include "capembed/transfer.hpp"

namespace fs = std::filesystem;
using capembed::json;
using capembed::ordered_json;

namespace {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

fs::path ensure_out_dir(const json& cfg) {
  const auto out = fs::path(cfg.at("out").get<std::string>());
  fs::create_directories(out);
  return out;
}

void finish(const std::string& command, const json& cfg, json inputs, json outputs,
            json versions, const Stopwatch& watch) {
  capembed::RunManifest m;
  m.command = command;
  m.config = cfg;
  m.inputs = std::move(inputs);
  m.outputs = std::move(outputs);
  m.artifact_versions = std::move(versions);
  m.wall_clock_sec = watch.seconds();
  capembed::write_manifest(m, fs::path(cfg.at("out").get<std::string>()));
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

void run_gen(const json& cfg) {
  Stopwatch watch;
  capembed::SyntheticConfig gen;
  gen.num_archetypes = cfg.at("k").get<int>();
  gen.families_per_class = cfg.at("families_per_class").get<int>();
  gen.train_samples_per_archetype = cfg.at("samples_per_archetype").get<int>();
  gen.test_samples_per_archetype = cfg.at("test_samples_per_archetype").get<int>();
  gen.feature_dim = cfg.at("d").get<std::size_t>();
  gen.feature_noise = cfg.at("noise").get<double>();
  gen.capability_flip_prob = cfg.at("flip_prob").get<double>();
  gen.vocabulary_size = cfg.at("vocab").get<int>();
  gen.tag_pool_size = cfg.at("tag_pool").get<int>();
  const auto seed = cfg.at("seed").get<std::uint64_t>();

  const auto out = ensure_out_dir(cfg);
  auto [train, test] = capembed::generate_synthetic(gen, seed);
  capembed::save_dataset(train, out / "train.ndjson");
  capembed::save_dataset(test, out / "test.ndjson");
  std::cout << "generated " << train.samples.size() << " train / " << test.samples.size()
            << " test samples (d=" << train.d << ")\n";
  finish("gen", cfg, json::object(),
         {{"train", "train.ndjson"}, {"test", "test.ndjson"}},
         {{"dataset", "capembed.dataset.ndjson.v1"}}, watch);
}

// ---------------------------------------------------------------------------
// cluster
// ---------------------------------------------------------------------------

void run_cluster(const json& cfg) {
  Stopwatch watch;
  const auto ds =
      capembed::load_dataset(cfg.at("dataset").get<std::string>(), capembed::Split::kTrain);
  const capembed::MinHasher hasher(cfg.at("seed").get<std::uint64_t>(),
                                   cfg.at("num_perms").get<std::size_t>(),
                                   cfg.at("bands").get<std::size_t>());
  const auto map = capembed::cluster_assign(hasher, ds);
  const auto out = ensure_out_dir(cfg);
  capembed::save_cluster_map(map, out / "clusters.ndjson");

  std::set<std::uint64_t> clusters, splits;
  for (const auto& id : map.ordered_ids) {
    clusters.insert(map.cluster_of(id));
    splits.insert(map.split_cluster_of(id));
  }
  std::cout << "assigned " << map.ordered_ids.size() << " samples to " << clusters.size()
            << " clusters (" << splits.size() << " split clusters)\n";
  finish("cluster", cfg, {{"dataset", cfg.at("dataset")}},
         {{"clusters", "clusters.ndjson"}},
         {{"clusters", "capembed.clusters.ndjson.v1"}}, watch);
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

capembed::TrainConfig train_config_from_json(const json& cfg) {
  capembed::TrainConfig tc;
  tc.loss.kind = capembed::loss_kind_from_string(cfg.at("loss").get<std::string>());
  tc.loss.margin = cfg.at("margin").get<double>();
  tc.loss.spearman_weight = cfg.at("spearman_weight").get<double>();
  tc.loss.bce_weight = cfg.at("bce_weight").get<double>();
  tc.loss.soft_rank.regularization = cfg.at("softrank_eps").get<double>();
  tc.epochs = cfg.at("epochs").get<int>();
  tc.lr = cfg.at("lr").get<double>();
  tc.clusters_per_batch = cfg.at("clusters_per_batch").get<int>();
  tc.samples_per_cluster = cfg.at("samples_per_cluster").get<int>();
  tc.seed = cfg.at("seed").get<std::uint64_t>();
  tc.normalize_embeddings = cfg.at("normalize").get<bool>();
  tc.embedding_dim = cfg.at("embedding_dim").get<std::size_t>();
  tc.hidden_dims = cfg.at("hidden").get<std::vector<std::size_t>>();
  tc.dropout_p = cfg.at("dropout").get<double>();
  tc.pretrain_epochs = cfg.at("pretrain_epochs").get<int>();
  tc.pretrain_batch_size = cfg.at("pretrain_batch_size").get<int>();
  return tc;
}

void run_train(const json& cfg) {
  Stopwatch watch;
  const auto tc = train_config_from_json(cfg);
  const auto train =
      capembed::load_dataset(cfg.at("train").get<std::string>(), capembed::Split::kTrain);
  const auto out = ensure_out_dir(cfg);

  json inputs = {{"train", cfg.at("train")}};
  json outputs = {{"checkpoint", "checkpoint.json"},
                  {"scaler", "scaler.json"},
                  {"trainlog", "trainlog.ndjson"}};

  capembed::TrainResult res;
  if (tc.loss.kind == capembed::LossKind::kBce) {
    res = capembed::pretrain_detection(train, tc, out.string());
  } else {
    const auto map =
        capembed::load_cluster_map(cfg.at("clusters").get<std::string>());
    inputs["clusters"] = cfg.at("clusters");
    if (tc.loss.kind == capembed::LossKind::kMultiObjective) {
      auto pre_cfg = tc;
      pre_cfg.epochs = tc.pretrain_epochs;
      auto pre = capembed::pretrain_detection(train, pre_cfg);
      capembed::save_checkpoint(pre.net, &pre.scaler, out / "pretrain_checkpoint.json");
      capembed::save_train_log(pre.log, out / "pretrain_log.ndjson");
      outputs["pretrain_checkpoint"] = "pretrain_checkpoint.json";
      outputs["pretrain_log"] = "pretrain_log.ndjson";
      res = capembed::train_multi_objective(train, map, tc, pre.net, out.string());
    } else {
      res = capembed::train_metric(train, map, tc, out.string());
    }
  }
  capembed::save_scaler(res.scaler, out / "scaler.json");
  capembed::save_train_log(res.log, out / "trainlog.ndjson");
  std::cout << "trained " << res.log.epoch_mean_loss.size() << " epochs; final mean loss "
            << (res.log.epoch_mean_loss.empty() ? 0.0 : res.log.epoch_mean_loss.back())
            << " (" << res.log.skipped_spearman_batches << " spearman-degenerate batches)\n";
  finish("train", cfg, inputs, outputs,
         {{"checkpoint", capembed::kCheckpointFormat},
          {"scaler", "capembed.scaler.v1"},
          {"trainlog", "capembed.trainlog.ndjson.v1"}},
         watch);
}

// ---------------------------------------------------------------------------
// embed
// ---------------------------------------------------------------------------

void run_embed(const json& cfg) {
  Stopwatch watch;
  auto lc = capembed::load_checkpoint(cfg.at("checkpoint").get<std::string>());
  const auto split = cfg.at("split").get<std::string>() == "train" ? capembed::Split::kTrain
                                                                   : capembed::Split::kTest;
  const auto ds = capembed::load_dataset(cfg.at("dataset").get<std::string>(), split);

  capembed::StandardScaler scaler;
  if (!cfg.at("scaler").is_null()) {
    scaler = capembed::load_scaler(cfg.at("scaler").get<std::string>());
  } else if (lc.scaler) {
    scaler = *lc.scaler;
  } else {
    throw capembed::ConfigError("embed: checkpoint has no scaler; pass --scaler");
  }
  const bool normalize = cfg.at("normalize").is_null() ? lc.net.normalize_default
                                                       : cfg.at("normalize").get<bool>();
  const int threads = cfg.at("threads").get<int>();

  const auto emb = capembed::extract_embeddings(lc.net, scaler, ds, normalize, threads);
  const auto out = ensure_out_dir(cfg);
  capembed::save_embeddings_ndjson(emb, out / "embeddings.ndjson");
  capembed::save_matrix_f32(emb.embeddings, out / "embeddings.f32",
                            out / "embeddings.meta.json");
  std::cout << "embedded " << emb.ids.size() << " samples to dimension "
            << emb.embeddings.cols() << (normalize ? " (L2-normalized)" : "") << "\n";
  finish("embed", cfg,
         {{"checkpoint", cfg.at("checkpoint")}, {"dataset", cfg.at("dataset")}},
         {{"embeddings", "embeddings.ndjson"},
          {"matrix", "embeddings.f32"},
          {"matrix_meta", "embeddings.meta.json"}},
         {{"embeddings", "capembed.embeddings.ndjson.v1"},
          {"matrix", "capembed.matrix.v1"}},
         watch);
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

capembed::EmbeddedDataset family_rows(const capembed::EmbeddedDataset& emb) {
  capembed::EmbeddedDataset out;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < emb.ids.size(); ++i) {
    if (emb.families[i].has_value()) keep.push_back(i);
  }
  out.embeddings = capembed::Matrix(keep.size(), emb.embeddings.cols());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    out.ids.push_back(emb.ids[keep[r]]);
    out.labels.push_back(emb.labels[keep[r]]);
    out.families.push_back(emb.families[keep[r]]);
    out.tags.push_back(emb.tags[keep[r]]);
    for (std::size_t c = 0; c < emb.embeddings.cols(); ++c) {
      out.embeddings(r, c) = emb.embeddings(keep[r], c);
    }
  }
  return out;
}

void run_eval(const json& cfg) {
  Stopwatch watch;
  const auto task = cfg.at("task").get<std::string>();
  const auto train_paths = cfg.at("train_emb").get<std::vector<std::string>>();
  const auto test_paths = cfg.at("test_emb").get<std::vector<std::string>>();
  if (train_paths.empty() || train_paths.size() != test_paths.size()) {
    throw capembed::ConfigError("eval: need matching --train-emb/--test-emb lists");
  }
  capembed::GbtParams params;
  params.n_trees = cfg.at("trees").get<int>();
  params.max_depth = cfg.at("depth").get<int>();
  params.learning_rate = cfg.at("learning_rate").get<double>();
  params.min_samples_leaf = cfg.at("min_leaf").get<int>();
  const int threads = cfg.at("threads").get<int>();
  const auto out = ensure_out_dir(cfg);

  std::vector<capembed::MetricRow> rows;
  if (task == "detect") {
    std::vector<double> values;
    for (std::size_t p = 0; p < train_paths.size(); ++p) {
      const auto train = capembed::load_embeddings_ndjson(train_paths[p]);
      const auto test = capembed::load_embeddings_ndjson(test_paths[p]);
      const auto head = capembed::fit_gbt(train, capembed::detection_targets(train), params);
      std::vector<double> scores(test.ids.size());
      for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] = head.score(test.embeddings.row(i));
      }
      values.push_back(capembed::auroc(scores, capembed::detection_targets(test)));
      if (p == 0 && cfg.at("save_model").get<bool>()) {
        capembed::save_gbt(head, out / "gbt_model.json");
      }
    }
    const auto agg = capembed::aggregate_runs(values);
    rows.push_back({"detect", "auroc", agg.mean, agg.stddev, values.size()});
  } else if (task == "family") {
    const int k = cfg.at("k").get<int>();
    std::vector<double> values;
    for (std::size_t p = 0; p < train_paths.size(); ++p) {
      const auto train = family_rows(capembed::load_embeddings_ndjson(train_paths[p]));
      const auto test = family_rows(capembed::load_embeddings_ndjson(test_paths[p]));
      if (test.ids.empty()) throw capembed::DataError("eval family: no labeled test rows");
      const auto predicted = capembed::knn_predict(train, test, k);
      std::size_t hits = 0;
      for (std::size_t i = 0; i < predicted.size(); ++i) {
        hits += predicted[i] == *test.families[i];
      }
      values.push_back(static_cast<double>(hits) / static_cast<double>(predicted.size()));
    }
    const auto agg = capembed::aggregate_runs(values);
    rows.push_back({"family", "accuracy", agg.mean, agg.stddev, values.size()});
  } else if (task == "tags") {
    std::vector<std::string> tags = cfg.at("tags").get<std::vector<std::string>>();
    std::vector<capembed::TagTable> tables;
    for (std::size_t p = 0; p < train_paths.size(); ++p) {
      const auto train = capembed::load_embeddings_ndjson(train_paths[p]);
      const auto test = capembed::load_embeddings_ndjson(test_paths[p]);
      if (tags.empty()) {
        std::set<std::string> tag_union;
        for (const auto& t : train.tags) tag_union.insert(t.begin(), t.end());
        tags.assign(tag_union.begin(), tag_union.end());
      }
      auto table = capembed::eval_tags(train, test, tags, params, threads);
      for (const auto& skipped : table.skipped) {
        std::cerr << "warning: tag '" << skipped << "' is degenerate, skipped\n";
      }
      tables.push_back(std::move(table));
    }
    for (const auto& row : capembed::aggregate_tag_tables(tables)) {
      rows.push_back({"tags", row.tag, row.stats.mean, row.stats.stddev,
                      row.stats.values.size()});
    }
  } else {
    throw capembed::ConfigError("eval: unknown task '" + task + "'");
  }

  capembed::save_metrics_csv(rows, out / "metrics.csv");
  for (const auto& r : rows) {
    std::printf("%s %s: %.4f +- %.4f (n=%zu)\n", r.task.c_str(), r.name.c_str(), r.mean,
                r.stddev, r.runs);
  }
  finish("eval", cfg,
         {{"train_emb", cfg.at("train_emb")}, {"test_emb", cfg.at("test_emb")}},
         {{"metrics", "metrics.csv"}}, {{"metrics", "capembed.metrics.csv.v1"}}, watch);
}

// ---------------------------------------------------------------------------
// attack
// ---------------------------------------------------------------------------

capembed::ScoreFn build_scorer(const json& cfg) {
  const auto scorer = cfg.at("scorer").get<std::string>();
  const bool needs_gbt = scorer == "gbt-raw" || scorer == "gbt-emb";
  const bool needs_checkpoint = scorer == "head" || scorer == "gbt-emb";
  if (needs_gbt && cfg.at("gbt_model").is_null()) {
    throw capembed::ConfigError("attack: --gbt-model is required for scorer " + scorer);
  }
  if (needs_checkpoint && cfg.at("checkpoint").is_null()) {
    throw capembed::ConfigError("attack: --checkpoint is required for scorer " + scorer);
  }
  if (scorer == "gbt-raw") {
    auto head = capembed::load_gbt(cfg.at("gbt_model").get<std::string>());
    return [head = std::move(head)](std::span<const double> x) { return head.score(x); };
  }
  auto lc = capembed::load_checkpoint(cfg.at("checkpoint").get<std::string>());
  if (!lc.scaler) throw capembed::ConfigError("attack: checkpoint has no scaler");
  if (scorer == "head") {
    if (!lc.net.head) throw capembed::ConfigError("attack: checkpoint has no detection head");
    lc.net.set_mode(capembed::Mode::kEval);
    return [net = lc.net, scaler = *lc.scaler](std::span<const double> x) mutable {
      const auto z = capembed::transform(scaler, x);
      capembed::Matrix m(1, z.size());
      for (std::size_t c = 0; c < z.size(); ++c) m(0, c) = z[c];
      return capembed::forward(net, m, false, true).scores[0];
    };
  }
  if (scorer == "gbt-emb") {
    auto head = capembed::load_gbt(cfg.at("gbt_model").get<std::string>());
    lc.net.set_mode(capembed::Mode::kEval);
    const bool normalize = lc.net.normalize_default;
    return [net = lc.net, scaler = *lc.scaler, head = std::move(head),
            normalize](std::span<const double> x) mutable {
      const auto z = capembed::transform(scaler, x);
      capembed::Matrix m(1, z.size());
      for (std::size_t c = 0; c < z.size(); ++c) m(0, c) = z[c];
      const auto emb = capembed::forward(net, m, normalize).embeddings;
      return head.score(emb.row(0));
    };
  }
  throw capembed::ConfigError("attack: unknown scorer '" + scorer + "'");
}

void run_attack(const json& cfg) {
  Stopwatch watch;
  const auto model = build_scorer(cfg);
  const auto ds =
      capembed::load_dataset(cfg.at("dataset").get<std::string>(), capembed::Split::kTest);
  std::vector<capembed::Sample> malware;
  for (const auto& s : ds.samples) {
    if (s.label == capembed::Label::kMalware) malware.push_back(s);
  }
  capembed::AttackConfig ac;
  ac.manipulable_mask = cfg.at("mask").is_null()
                            ? capembed::default_mask(ds.d)
                            : capembed::load_mask(cfg.at("mask").get<std::string>(), ds.d);
  ac.mode = capembed::attack_mode_from_string(cfg.at("mode").get<std::string>());
  ac.population = cfg.at("population").get<int>();
  ac.iterations = cfg.at("iterations").get<int>();
  ac.mutation_scale = cfg.at("mutation_scale").get<double>();
  ac.evasion_threshold = cfg.at("threshold").get<double>();
  ac.seed = cfg.at("seed").get<std::uint64_t>();

  const auto report = capembed::attack(model, malware, ac, cfg.at("threads").get<int>());
  const auto out = ensure_out_dir(cfg);
  capembed::save_attack_csv(report, out / "attack_report.csv");
  capembed::save_attack_summary(report, ac, out / "attack_summary.json");
  std::printf("detection rate: baseline %.3f -> post-attack %.3f over %zu samples\n",
              report.baseline_detection_rate, report.post_attack_detection_rate,
              report.samples.size());
  finish("attack", cfg, {{"dataset", cfg.at("dataset")}},
         {{"report", "attack_report.csv"}, {"summary", "attack_summary.json"}},
         {{"report", "capembed.attack.csv.v1"}, {"summary", "capembed.attack.summary.v1"}},
         watch);
}

// ---------------------------------------------------------------------------
// dispatch + CLI
// ---------------------------------------------------------------------------

void dispatch(const std::string& command, const json& cfg) {
  if (command == "gen") return run_gen(cfg);
  if (command == "cluster") return run_cluster(cfg);
  if (command == "train") return run_train(cfg);
  if (command == "embed") return run_embed(cfg);
  if (command == "eval") return run_eval(cfg);
  if (command == "attack") return run_attack(cfg);
  throw capembed::ConfigError("unknown command '" + command + "'");
}

// Pre-parse scan for --config so file values can seed the flag defaults
// (flags win over the file).
json load_config_file(int argc, char** argv) {
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--config") {
      std::ifstream in(argv[i + 1]);
      if (!in) throw capembed::ConfigError(std::string("cannot open config file: ") + argv[i + 1]);
      try {
        json j;
        in >> j;
        return j;
      } catch (const json::exception& e) {
        throw capembed::ConfigError(std::string("malformed config file: ") + e.what());
      }
    }
  }
  return json::object();
}

template <typename T>
T cval(const json& file_cfg, const char* key, T fallback) {
  return file_cfg.value(key, fallback);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capability-supervised metric embeddings: training, transfer and evasion"};
  app.require_subcommand(1);
  std::string config_path;

  json file_cfg;
  try {
    file_cfg = load_config_file(argc, argv);
  } catch (const capembed::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  // gen ----------------------------------------------------------------
  auto* gen = app.add_subcommand("gen", "generate a synthetic planted-cluster dataset");
  struct {
    int k, families, samples, test_samples, vocab, tag_pool;
    std::size_t d;
    double noise, flip;
    std::uint64_t seed;
    std::string out;
  } g{cval(file_cfg, "k", 10),
      cval(file_cfg, "families_per_class", 5),
      cval(file_cfg, "samples_per_archetype", 100),
      cval(file_cfg, "test_samples_per_archetype", 25),
      cval(file_cfg, "vocab", 32),
      cval(file_cfg, "tag_pool", 6),
      cval<std::size_t>(file_cfg, "d", 64),
      cval(file_cfg, "noise", 0.1),
      cval(file_cfg, "flip_prob", 0.02),
      cval<std::uint64_t>(file_cfg, "seed", 0),
      cval<std::string>(file_cfg, "out", "")};
  gen->add_option("--config", config_path, "JSON config file (flags win)");
  gen->add_option("--k", g.k, "number of capability archetypes");
  gen->add_option("--families-per-class", g.families);
  gen->add_option("--samples-per-archetype", g.samples);
  gen->add_option("--test-samples-per-archetype", g.test_samples);
  gen->add_option("--d", g.d, "feature dimension");
  gen->add_option("--noise", g.noise, "gaussian feature noise");
  gen->add_option("--flip-prob", g.flip, "capability flip probability");
  gen->add_option("--vocab", g.vocab, "capability vocabulary size");
  gen->add_option("--tag-pool", g.tag_pool, "attribute tag pool size");
  gen->add_option("--seed", g.seed);
  gen->add_option("--out", g.out, "output directory")->required();

  // cluster ------------------------------------------------------------
  auto* cluster = app.add_subcommand("cluster", "MinHash capability clustering");
  struct {
    std::string dataset, out;
    std::size_t num_perms, bands;
    std::uint64_t seed;
  } c{cval<std::string>(file_cfg, "dataset", ""), cval<std::string>(file_cfg, "out", ""),
      cval<std::size_t>(file_cfg, "num_perms", 64), cval<std::size_t>(file_cfg, "bands", 1),
      cval<std::uint64_t>(file_cfg, "seed", 0)};
  cluster->add_option("--config", config_path, "JSON config file (flags win)");
  cluster->add_option("--dataset", c.dataset)->required();
  cluster->add_option("--num-perms", c.num_perms, "MinHash permutations");
  cluster->add_option("--bands", c.bands, "LSH bands (num_perms divisible)");
  cluster->add_option("--seed", c.seed, "master hash seed");
  cluster->add_option("--out", c.out)->required();

  // train ----------------------------------------------------------------
  auto* train = app.add_subcommand("train", "train an embedding network");
  struct {
    std::string train_path, clusters, loss, out;
    double margin, sw, bw, eps, lr, dropout;
    int epochs, pretrain_epochs, cpb, spc, pbs;
    std::uint64_t seed;
    bool normalize;
    std::size_t embedding_dim;
    std::vector<std::size_t> hidden;
  } t{cval<std::string>(file_cfg, "train", ""),
      cval<std::string>(file_cfg, "clusters", ""),
      cval<std::string>(file_cfg, "loss", "contrastive"),
      cval<std::string>(file_cfg, "out", ""),
      cval(file_cfg, "margin", 10.0),
      cval(file_cfg, "spearman_weight", 1.0),
      cval(file_cfg, "bce_weight", 1.0),
      cval(file_cfg, "softrank_eps", 1.0),
      cval(file_cfg, "lr", 0.001),
      cval(file_cfg, "dropout", 0.1),
      cval(file_cfg, "epochs", 30),
      cval(file_cfg, "pretrain_epochs", 30),
      cval(file_cfg, "clusters_per_batch", 20),
      cval(file_cfg, "samples_per_cluster", 4),
      cval(file_cfg, "pretrain_batch_size", 80),
      cval<std::uint64_t>(file_cfg, "seed", 0),
      cval(file_cfg, "normalize", false),
      cval<std::size_t>(file_cfg, "embedding_dim", 32),
      cval(file_cfg, "hidden", std::vector<std::size_t>{4000, 1024, 512, 512})};
  train->add_option("--config", config_path, "JSON config file (flags win)");
  train->add_option("--train", t.train_path, "training dataset (ndjson)")->required();
  train->add_option("--clusters", t.clusters, "cluster map (required unless loss=bce)");
  train->add_option("--loss", t.loss,
                    "contrastive|spearman|mixed|bce|multi_objective");
  train->add_option("--margin", t.margin, "contrastive margin");
  train->add_option("--spearman-weight", t.sw);
  train->add_option("--bce-weight", t.bw);
  train->add_option("--softrank-eps", t.eps, "soft-rank regularization");
  train->add_option("--epochs", t.epochs);
  train->add_option("--pretrain-epochs", t.pretrain_epochs);
  train->add_option("--lr", t.lr);
  train->add_option("--clusters-per-batch", t.cpb, "C");
  train->add_option("--samples-per-cluster", t.spc, "M");
  train->add_option("--pretrain-batch-size", t.pbs);
  train->add_option("--seed", t.seed);
  train->add_flag("--normalize,!--no-normalize", t.normalize, "L2-normalize embeddings");
  train->add_option("--embedding-dim", t.embedding_dim);
  train->add_option("--hidden", t.hidden, "hidden layer widths")->expected(-1);
  train->add_option("--dropout", t.dropout);
  train->add_option("--out", t.out)->required();

  // embed -----------------------------------------------------------------
  auto* embed = app.add_subcommand("embed", "extract embeddings with a checkpoint");
  struct {
    std::string checkpoint, dataset, split, scaler, out;
    int threads;
    bool normalize_on = false, normalize_off = false;
  } e{cval<std::string>(file_cfg, "checkpoint", ""),
      cval<std::string>(file_cfg, "dataset", ""),
      cval<std::string>(file_cfg, "split", "test"),
      cval<std::string>(file_cfg, "scaler", ""),
      cval<std::string>(file_cfg, "out", ""),
      cval(file_cfg, "threads", 0)};
  embed->add_option("--config", config_path, "JSON config file (flags win)");
  embed->add_option("--checkpoint", e.checkpoint)->required();
  embed->add_option("--dataset", e.dataset)->required();
  embed->add_option("--split", e.split, "train|test tag for the loaded dataset");
  embed->add_option("--scaler", e.scaler, "override the checkpoint scaler");
  embed->add_flag("--normalize", e.normalize_on, "force L2 normalization on");
  embed->add_flag("--raw", e.normalize_off, "force L2 normalization off");
  embed->add_option("--threads", e.threads, "0 = all cores");
  embed->add_option("--out", e.out)->required();

  // eval -------------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "downstream transfer evaluation");
  struct {
    std::string task, out;
    std::vector<std::string> train_emb, test_emb, tags;
    int trees, depth, min_leaf, k, threads;
    double lr;
    bool save_model;
  } v{cval<std::string>(file_cfg, "task", "detect"),
      cval<std::string>(file_cfg, "out", ""),
      cval(file_cfg, "train_emb", std::vector<std::string>{}),
      cval(file_cfg, "test_emb", std::vector<std::string>{}),
      cval(file_cfg, "tags", std::vector<std::string>{}),
      cval(file_cfg, "trees", 100),
      cval(file_cfg, "depth", 4),
      cval(file_cfg, "min_leaf", 5),
      cval(file_cfg, "k", 1),
      cval(file_cfg, "threads", 0),
      cval(file_cfg, "learning_rate", 0.1),
      cval(file_cfg, "save_model", false)};
  eval->add_option("--config", config_path, "JSON config file (flags win)");
  eval->add_option("--task", v.task, "detect|family|tags")->required();
  eval->add_option("--train-emb", v.train_emb, "train embeddings (repeat per seed)")
      ->expected(-1);
  eval->add_option("--test-emb", v.test_emb, "test embeddings (repeat per seed)")
      ->expected(-1);
  eval->add_option("--tags", v.tags, "tags to evaluate (default: all present)")
      ->expected(-1);
  eval->add_option("--trees", v.trees);
  eval->add_option("--depth", v.depth);
  eval->add_option("--learning-rate", v.lr);
  eval->add_option("--min-leaf", v.min_leaf);
  eval->add_option("--k", v.k, "k for the family k-NN head");
  eval->add_flag("--save-model", v.save_model, "write the detection GBT model");
  eval->add_option("--threads", v.threads);
  eval->add_option("--out", v.out)->required();

  // attack --------------------------------------------------------------------
  auto* atk = app.add_subcommand("attack", "black-box evolutionary evasion");
  struct {
    std::string scorer, checkpoint, gbt_model, dataset, mask, mode, out;
    int population, iterations, threads;
    double scale, threshold;
    std::uint64_t seed;
  } a{cval<std::string>(file_cfg, "scorer", "head"),
      cval<std::string>(file_cfg, "checkpoint", ""),
      cval<std::string>(file_cfg, "gbt_model", ""),
      cval<std::string>(file_cfg, "dataset", ""),
      cval<std::string>(file_cfg, "mask", ""),
      cval<std::string>(file_cfg, "mode", "additive_only"),
      cval<std::string>(file_cfg, "out", ""),
      cval(file_cfg, "population", 20),
      cval(file_cfg, "iterations", 50),
      cval(file_cfg, "threads", 0),
      cval(file_cfg, "mutation_scale", 1.0),
      cval(file_cfg, "threshold", 0.5),
      cval<std::uint64_t>(file_cfg, "seed", 0)};
  atk->add_option("--config", config_path, "JSON config file (flags win)");
  atk->add_option("--scorer", a.scorer, "head|gbt-raw|gbt-emb");
  atk->add_option("--checkpoint", a.checkpoint, "network checkpoint (head/gbt-emb)");
  atk->add_option("--gbt-model", a.gbt_model, "gbt model file (gbt-raw/gbt-emb)");
  atk->add_option("--dataset", a.dataset, "dataset; the malware subset is attacked")
      ->required();
  atk->add_option("--mask", a.mask, "manipulable feature indices, one per line");
  atk->add_option("--mode", a.mode, "additive_only|shift_like");
  atk->add_option("--population", a.population);
  atk->add_option("--iterations", a.iterations);
  atk->add_option("--mutation-scale", a.scale);
  atk->add_option("--threshold", a.threshold, "evasion threshold");
  atk->add_option("--seed", a.seed);
  atk->add_option("--threads", a.threads);
  atk->add_option("--out", a.out)->required();

  // rerun -----------------------------------------------------------------------
  auto* rerun = app.add_subcommand("rerun", "replay a manifest into a new directory");
  struct {
    std::string manifest, out;
  } r;
  rerun->add_option("--manifest", r.manifest)->required();
  rerun->add_option("--out", r.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& help) {
    return app.exit(help);
  } catch (const CLI::CallForAllHelp& help) {
    return app.exit(help);
  } catch (const CLI::ParseError& pe) {
    app.exit(pe);
    return 2;
  }

  try {
    if (gen->parsed()) {
      dispatch("gen", json{{"k", g.k},
                           {"families_per_class", g.families},
                           {"samples_per_archetype", g.samples},
                           {"test_samples_per_archetype", g.test_samples},
                           {"d", g.d},
                           {"noise", g.noise},
                           {"flip_prob", g.flip},
                           {"vocab", g.vocab},
                           {"tag_pool", g.tag_pool},
                           {"seed", g.seed},
                           {"out", g.out}});
    } else if (cluster->parsed()) {
      dispatch("cluster", json{{"dataset", c.dataset},
                               {"num_perms", c.num_perms},
                               {"bands", c.bands},
                               {"seed", c.seed},
                               {"out", c.out}});
    } else if (train->parsed()) {
      const auto kind = capembed::loss_kind_from_string(t.loss);
      if (kind != capembed::LossKind::kBce && t.clusters.empty()) {
        throw capembed::ConfigError("train: --clusters is required for this loss");
      }
      dispatch("train", json{{"train", t.train_path},
                             {"clusters", t.clusters},
                             {"loss", t.loss},
                             {"margin", t.margin},
                             {"spearman_weight", t.sw},
                             {"bce_weight", t.bw},
                             {"softrank_eps", t.eps},
                             {"epochs", t.epochs},
                             {"pretrain_epochs", t.pretrain_epochs},
                             {"lr", t.lr},
                             {"clusters_per_batch", t.cpb},
                             {"samples_per_cluster", t.spc},
                             {"pretrain_batch_size", t.pbs},
                             {"seed", t.seed},
                             {"normalize", t.normalize},
                             {"embedding_dim", t.embedding_dim},
                             {"hidden", t.hidden},
                             {"dropout", t.dropout},
                             {"out", t.out}});
    } else if (embed->parsed()) {
      json normalize = nullptr;
      if (!file_cfg.is_null() && file_cfg.contains("normalize")) {
        normalize = file_cfg["normalize"];
      }
      if (e.normalize_on && e.normalize_off) {
        throw capembed::ConfigError("embed: --normalize and --raw conflict");
      }
      if (e.normalize_on) normalize = true;
      if (e.normalize_off) normalize = false;
      dispatch("embed", json{{"checkpoint", e.checkpoint},
                             {"dataset", e.dataset},
                             {"split", e.split},
                             {"scaler", e.scaler.empty() ? json(nullptr) : json(e.scaler)},
                             {"normalize", normalize},
                             {"threads", e.threads},
                             {"out", e.out}});
    } else if (eval->parsed()) {
      dispatch("eval", json{{"task", v.task},
                            {"train_emb", v.train_emb},
                            {"test_emb", v.test_emb},
                            {"tags", v.tags},
                            {"trees", v.trees},
                            {"depth", v.depth},
                            {"learning_rate", v.lr},
                            {"min_leaf", v.min_leaf},
                            {"k", v.k},
                            {"save_model", v.save_model},
                            {"threads", v.threads},
                            {"out", v.out}});
    } else if (atk->parsed()) {
      dispatch("attack",
               json{{"scorer", a.scorer},
                    {"checkpoint", a.checkpoint.empty() ? json(nullptr) : json(a.checkpoint)},
                    {"gbt_model", a.gbt_model.empty() ? json(nullptr) : json(a.gbt_model)},
                    {"dataset", a.dataset},
                    {"mask", a.mask.empty() ? json(nullptr) : json(a.mask)},
                    {"mode", a.mode},
                    {"population", a.population},
                    {"iterations", a.iterations},
                    {"mutation_scale", a.scale},
                    {"threshold", a.threshold},
                    {"seed", a.seed},
                    {"threads", a.threads},
                    {"out", a.out}});
    } else if (rerun->parsed()) {
      auto m = capembed::read_manifest(r.manifest);
      m.config["out"] = r.out;
      dispatch(m.command, m.config);
    }
  } catch (const capembed::ConfigError& ce) {
    std::cerr << "error: " << ce.what() << "\n";
    return 2;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
