// Minimal library walkthrough: plant a synthetic capability dataset, train a
// mixed-objective embedding, and score the usual transfer heads on it.

#include <cstdio>

#include "capembed/capability.hpp"
#include "capembed/dataio.hpp"
#include "capembed/trainer.hpp"
#include "capembed/transfer.hpp"

using namespace capembed;

int main() {
  SyntheticConfig gen;
  gen.num_archetypes = 10;
  gen.train_samples_per_archetype = 100;
  gen.test_samples_per_archetype = 25;
  gen.feature_dim = 64;
  gen.feature_noise = 1.0;
  auto [train_ds, test_ds] = generate_synthetic(gen, 7);

  const MinHasher hasher(3);  // one band, 64 permutations
  const auto clusters = cluster_assign(hasher, train_ds);

  TrainConfig cfg;
  cfg.loss.kind = LossKind::kMixed;
  cfg.loss.spearman_weight = 10.0;
  cfg.epochs = 10;
  cfg.lr = 0.02;
  cfg.seed = 1;
  cfg.embedding_dim = 16;
  cfg.hidden_dims = {64, 32};
  const auto result = train_metric(train_ds, clusters, cfg);
  std::printf("trained %d epochs, final mean loss %.4f\n", cfg.epochs,
              result.log.epoch_mean_loss.back());

  const auto emb_train = extract_embeddings(result.net, result.scaler, train_ds, false, 0);
  const auto emb_test = extract_embeddings(result.net, result.scaler, test_ds, false, 0);

  // detection transfer: boosted trees on the frozen embeddings
  const auto head = fit_gbt(emb_train, detection_targets(emb_train));
  std::vector<double> scores(emb_test.ids.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    scores[i] = head.score(emb_test.embeddings.row(i));
  }
  std::printf("detection AU-ROC: %.4f\n", auroc(scores, detection_targets(emb_test)));

  // family transfer: 1-NN over the malware rows
  std::vector<std::size_t> labeled;
  for (std::size_t i = 0; i < emb_test.ids.size(); ++i) {
    if (emb_test.families[i]) labeled.push_back(i);
  }
  EmbeddedDataset queries;
  queries.embeddings = Matrix(labeled.size(), emb_test.embeddings.cols());
  for (std::size_t r = 0; r < labeled.size(); ++r) {
    queries.ids.push_back(emb_test.ids[labeled[r]]);
    queries.labels.push_back(emb_test.labels[labeled[r]]);
    queries.families.push_back(emb_test.families[labeled[r]]);
    queries.tags.push_back(emb_test.tags[labeled[r]]);
    for (std::size_t c = 0; c < emb_test.embeddings.cols(); ++c) {
      queries.embeddings(r, c) = emb_test.embeddings(labeled[r], c);
    }
  }
  const auto families = knn_predict(emb_train, queries, 1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < families.size(); ++i) {
    hits += families[i] == *queries.families[i];
  }
  std::printf("family 1-NN accuracy: %.4f (%zu malware samples)\n",
              static_cast<double>(hits) / static_cast<double>(families.size()),
              families.size());
  return 0;
}
