#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "capembed/trainer.hpp"
#include "capembed/transfer.hpp"
#include "helpers.hpp"

using namespace capembed;
namespace fs = std::filesystem;

namespace {

EmbeddedDataset toy_embedded(const std::vector<std::vector<double>>& rows,
                             const std::vector<Label>& labels,
                             const std::vector<std::optional<std::string>>& families = {}) {
  EmbeddedDataset emb;
  emb.embeddings = Matrix(rows.size(), rows[0].size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    emb.ids.push_back("s" + std::to_string(r));
    for (std::size_t c = 0; c < rows[r].size(); ++c) emb.embeddings(r, c) = rows[r][c];
  }
  emb.labels = labels;
  emb.families = families.empty()
                     ? std::vector<std::optional<std::string>>(rows.size(), std::nullopt)
                     : families;
  emb.tags.resize(rows.size());
  return emb;
}

fs::path temp_dir() {
  const auto dir = fs::temp_directory_path() / "capembed_tests";
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("depth-0 single tree predicts the base rate") {
  Rng rng(1);
  Matrix x(20, 3);
  for (auto& v : x.data()) v = rng.uniform(-1.0, 1.0);
  std::vector<int> y(20, 0);
  for (int i = 0; i < 7; ++i) y[static_cast<std::size_t>(i)] = 1;  // base rate 0.35
  GbtParams params;
  params.n_trees = 1;
  params.max_depth = 0;
  const auto head = fit_gbt(x, y, params);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    CHECK(head.score(x.row(i)) == Catch::Approx(0.35).margin(1e-12));
  }
}

TEST_CASE("gbt solves the XOR-style planted clusters") {
  Rng rng(2);
  Matrix x(80, 2);
  std::vector<int> y(80);
  for (std::size_t i = 0; i < 80; ++i) {
    const int cx = static_cast<int>(i % 2);
    const int cy = static_cast<int>((i / 2) % 2);
    x(i, 0) = cx + rng.uniform(-0.2, 0.2);
    x(i, 1) = cy + rng.uniform(-0.2, 0.2);
    y[i] = cx == cy ? 1 : 0;
  }
  GbtParams params;
  params.n_trees = 50;
  params.max_depth = 2;
  const auto head = fit_gbt(x, y, params);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    hits += (head.score(x.row(i)) >= 0.5 ? 1 : 0) == y[i];
  }
  CHECK(hits == 80);
}

TEST_CASE("gbt train log-loss never increases per boosting round") {
  Rng rng(3);
  Matrix x(60, 4);
  for (auto& v : x.data()) v = rng.uniform(-1.0, 1.0);
  std::vector<int> y(60);
  for (std::size_t i = 0; i < 60; ++i) y[i] = x(i, 1) + 0.3 * x(i, 2) > 0.0 ? 1 : 0;
  std::vector<double> logloss;
  GbtParams params;
  params.n_trees = 60;
  fit_gbt(x, y, params, &logloss);
  REQUIRE(logloss.size() == 60);
  for (std::size_t r = 1; r < logloss.size(); ++r) {
    CHECK(logloss[r] <= logloss[r - 1] + 1e-12);
  }
}

TEST_CASE("gbt predictions are invariant to sample order") {
  Rng rng(4);
  Matrix x(50, 3);
  for (auto& v : x.data()) v = rng.uniform(-1.0, 1.0);
  std::vector<int> y(50);
  for (std::size_t i = 0; i < 50; ++i) y[i] = x(i, 0) > 0.1 ? 1 : 0;
  const auto head = fit_gbt(x, y);

  std::vector<std::size_t> perm(50);
  for (std::size_t i = 0; i < 50; ++i) perm[i] = i;
  rng.shuffle(perm);
  Matrix xp(50, 3);
  std::vector<int> yp(50);
  for (std::size_t i = 0; i < 50; ++i) {
    for (std::size_t c = 0; c < 3; ++c) xp(i, c) = x(perm[i], c);
    yp[i] = y[perm[i]];
  }
  const auto head_p = fit_gbt(xp, yp);
  for (std::size_t i = 0; i < 50; ++i) {
    CHECK(head.score(x.row(i)) == head_p.score(x.row(i)));
  }
}

TEST_CASE("gbt rejects degenerate targets and round-trips through disk") {
  Matrix x(10, 2, 0.5);
  CHECK_THROWS_AS(fit_gbt(x, std::vector<int>(10, 1)), DataError);

  Rng rng(5);
  Matrix xr(30, 2);
  for (auto& v : xr.data()) v = rng.uniform(-1.0, 1.0);
  std::vector<int> y(30);
  for (std::size_t i = 0; i < 30; ++i) y[i] = xr(i, 0) > 0.0 ? 1 : 0;
  const auto head = fit_gbt(xr, y);
  const auto p = temp_dir() / "model.gbt.json";
  save_gbt(head, p);
  const auto back = load_gbt(p);
  for (std::size_t i = 0; i < xr.rows(); ++i) {
    CHECK(head.score(xr.row(i)) == back.score(xr.row(i)));
  }
}

TEST_CASE("knn hand cases: zero distance, index tie break, self match") {
  auto train = toy_embedded({{0.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}},
                            {Label::kMalware, Label::kMalware, Label::kMalware},
                            {{"alpha"}, {"beta"}, {"gamma"}});
  auto query = toy_embedded({{1.0, 0.0}}, {Label::kMalware});
  CHECK(knn_predict(train, query) == std::vector<std::string>{"beta"});

  // equidistant between "beta" (index 1) and "gamma" (index 2)
  auto mid = toy_embedded({{1.0, 1.0}}, {Label::kMalware});
  CHECK(knn_predict(train, mid) == std::vector<std::string>{"beta"});

  const auto self = knn_predict(train, train);
  CHECK(self == std::vector<std::string>{"alpha", "beta", "gamma"});

  auto unlabeled = toy_embedded({{0.0, 0.0}}, {Label::kMalware});
  CHECK_THROWS_AS(knn_predict(unlabeled, query), DataError);
}

TEST_CASE("auroc hand values and tie convention") {
  CHECK(auroc(std::vector<double>{0.9, 0.8, 0.1, 0.2}, std::vector<int>{1, 1, 0, 0}) == 1.0);
  CHECK(auroc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, std::vector<int>{1, 0, 1, 0}) == 0.5);
  // brute force over the 4 positive-negative pairs: 3 wins, 1 loss
  CHECK(auroc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}) == 0.75);
  CHECK_THROWS_AS(auroc(std::vector<double>{0.1}, std::vector<int>{1}), DataError);
}

TEST_CASE("auroc is invariant under strictly increasing transforms") {
  Rng rng(6);
  std::vector<double> scores = testutil::random_vector(rng, 40, 0.0, 1.0);
  std::vector<int> labels(40);
  for (auto& l : labels) l = rng.uniform() < 0.5;
  labels[0] = 1;
  labels[1] = 0;
  const double base = auroc(scores, labels);
  std::vector<double> warped(scores);
  for (auto& s : warped) s = std::exp(3.0 * s) - 7.0;
  CHECK(auroc(warped, labels) == base);
}

TEST_CASE("embedding extraction is deterministic, parallel-safe and normalizable") {
  SyntheticConfig gen;
  gen.num_archetypes = 4;
  gen.train_samples_per_archetype = 30;
  gen.feature_dim = 10;
  auto [train, test] = generate_synthetic(gen, 9);
  const auto scaler = fit_scaler(train);
  auto net = xavier_init(make_embedding_specs(10, {8}, 4, 0.1), 77);

  const auto a = extract_embeddings(net, scaler, train, false, 1);
  const auto b = extract_embeddings(net, scaler, train, false, 1);
  CHECK(a.embeddings == b.embeddings);

  const auto par = extract_embeddings(net, scaler, train, false, 4, 16);
  CHECK(par.embeddings == a.embeddings);

  const auto norm = extract_embeddings(net, scaler, train, true, 2);
  for (std::size_t r = 0; r < norm.embeddings.rows(); ++r) {
    double nsq = 0.0;
    for (std::size_t c = 0; c < norm.embeddings.cols(); ++c) {
      nsq += norm.embeddings(r, c) * norm.embeddings(r, c);
    }
    CHECK(std::fabs(std::sqrt(nsq) - 1.0) < 1e-9);
  }

  Dataset wrong = train;
  wrong.d = 11;
  for (auto& s : wrong.samples) s.features.push_back(0.0);
  CHECK_THROWS_AS(extract_embeddings(net, scaler, wrong, false), DataError);
}

TEST_CASE("storage payload arithmetic matches the reference ratio") {
  CHECK(payload_bytes(1000, 2381) == 9524000);
  CHECK(payload_bytes(1000, 32) == 128000);
  CHECK(static_cast<double>(payload_bytes(10000, 2381)) /
            static_cast<double>(payload_bytes(10000, 32)) ==
        Catch::Approx(74.40625));

  Matrix m(7, 5);
  Rng rng(8);
  for (auto& v : m.data()) v = rng.uniform(-1.0, 1.0);
  const auto data = temp_dir() / "m.f32";
  const auto side = temp_dir() / "m.meta.json";
  save_matrix_f32(m, data, side);
  CHECK(fs::file_size(data) == payload_bytes(7, 5));
}

TEST_CASE("embedding ndjson round-trips") {
  auto emb = toy_embedded({{0.25, -1.5}, {2.0, 0.125}}, {Label::kGoodware, Label::kMalware},
                          {std::nullopt, {"zeus"}});
  emb.tags[1] = {"worm", "packed"};
  const auto p = temp_dir() / "emb.ndjson";
  save_embeddings_ndjson(emb, p);
  const auto back = load_embeddings_ndjson(p);
  CHECK(back.ids == emb.ids);
  CHECK(back.embeddings == emb.embeddings);
  CHECK(back.labels == emb.labels);
  CHECK(back.families == emb.families);
  CHECK(back.tags == emb.tags);
}

TEST_CASE("eval_tags skips degenerate tags and beats the permutation baseline") {
  SyntheticConfig gen;
  gen.num_archetypes = 6;
  gen.train_samples_per_archetype = 50;
  gen.test_samples_per_archetype = 25;
  gen.feature_dim = 16;
  gen.tag_pool_size = 4;
  auto [train_ds, test_ds] = generate_synthetic(gen, 31);

  // identity "embedding": raw standardized features, tags carried over
  const auto scaler = fit_scaler(train_ds);
  auto ident = xavier_init({{16, 8, Activation::kLinear, false, 0.0}}, 3);
  auto train = extract_embeddings(ident, scaler, train_ds, false);
  auto test = extract_embeddings(ident, scaler, test_ds, false);

  std::set<std::string> tag_union;
  for (const auto& t : train.tags) tag_union.insert(t.begin(), t.end());
  REQUIRE(!tag_union.empty());
  std::vector<std::string> tags(tag_union.begin(), tag_union.end());
  tags.push_back("never-present");

  GbtParams params;
  params.n_trees = 30;
  params.max_depth = 3;
  const auto table = eval_tags(train, test, tags, params, 2);

  // exactly the requested non-degenerate tags appear
  CHECK(std::find(table.skipped.begin(), table.skipped.end(), "never-present") !=
        table.skipped.end());
  CHECK(table.rows.size() + table.skipped.size() == tags.size());

  Rng rng(32);
  for (const auto& row : table.rows) {
    // permutation-label null: 97.5th percentile of AU-ROC under shuffled labels
    auto y = tag_targets(test, row.tag);
    const auto head = fit_gbt(train, tag_targets(train, row.tag), params);
    std::vector<double> scores(test.ids.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
      scores[i] = head.score(test.embeddings.row(i));
    }
    std::vector<double> null_dist;
    for (int perm = 0; perm < 200; ++perm) {
      rng.shuffle(y);
      null_dist.push_back(auroc(scores, y));
    }
    std::sort(null_dist.begin(), null_dist.end());
    const double cutoff = null_dist[static_cast<std::size_t>(0.975 * 200)];
    CHECK(row.auroc > cutoff);
  }
}

TEST_CASE("multi-objective embeddings keep detection transfer at least on par") {
  // statistical trend over 5 seeds, not a per-seed assertion
  SyntheticConfig gen;
  gen.num_archetypes = 6;
  gen.train_samples_per_archetype = 40;
  gen.test_samples_per_archetype = 15;
  gen.feature_dim = 24;
  gen.vocabulary_size = 24;
  auto [train_ds, test_ds] = generate_synthetic(gen, 606);
  const auto map = cluster_assign(MinHasher(61), train_ds);

  GbtParams gbt;
  gbt.n_trees = 40;
  gbt.max_depth = 3;

  std::vector<double> auroc_contrastive, auroc_multi;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainConfig cfg;
    cfg.loss.kind = LossKind::kContrastive;
    cfg.epochs = 4;
    cfg.lr = 0.05;
    cfg.clusters_per_batch = 8;
    cfg.samples_per_cluster = 4;
    cfg.seed = seed;
    cfg.embedding_dim = 8;
    cfg.hidden_dims = {24, 16};

    auto evaluate = [&](const TrainResult& res) {
      const auto tr = extract_embeddings(res.net, res.scaler, train_ds, false);
      const auto te = extract_embeddings(res.net, res.scaler, test_ds, false);
      const auto head = fit_gbt(tr, detection_targets(tr), gbt);
      std::vector<double> scores(te.ids.size());
      for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] = head.score(te.embeddings.row(i));
      }
      return auroc(scores, detection_targets(te));
    };

    auroc_contrastive.push_back(evaluate(train_metric(train_ds, map, cfg)));

    TrainConfig pre_cfg = cfg;
    pre_cfg.epochs = 3;
    auto pre = pretrain_detection(train_ds, pre_cfg);
    TrainConfig multi_cfg = cfg;
    multi_cfg.loss.kind = LossKind::kMultiObjective;
    multi_cfg.loss.spearman_weight = 0.0;
    multi_cfg.loss.bce_weight = 1.0;
    auroc_multi.push_back(
        evaluate(train_multi_objective(train_ds, map, multi_cfg, pre.net)));
  }
  const auto c = aggregate_runs(auroc_contrastive);
  const auto m = aggregate_runs(auroc_multi);
  INFO("contrastive " << c.mean << " +- " << c.stddev << ", multi " << m.mean << " +- "
                      << m.stddev);
  CHECK(m.mean >= c.mean - 0.02);
}
