#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "capembed/dataio.hpp"
#include "capembed/matrix.hpp"
#include "helpers.hpp"

using namespace capembed;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "capembed_tests";
  fs::create_directories(dir);
  return dir / name;
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p);
  for (const auto& l : lines) out << l << '\n';
}

Dataset tiny_dataset() {
  Dataset ds;
  ds.d = 2;
  ds.split = Split::kTrain;
  Sample a{"a", {0.0, 0.0}, Label::kGoodware, std::nullopt, {}, {}};
  Sample b{"b", {2.0, 2.0}, Label::kMalware, "family_00", {"worm"}, {"read files on disk"}};
  ds.samples = {a, b};
  return ds;
}

}  // namespace

TEST_CASE("load_dataset accepts valid newline-delimited records") {
  const auto p = temp_file("valid.ndjson");
  write_lines(p, {
      R"({"id":"s1","features":[1,2,3,4,5,6,7,8],"label":"goodware"})",
      R"({"id":"s2","features":[0,0,0,0,0,0,0,1],"label":"malware","family":"zeus","tags":["worm"],"capabilities":["send raw sockets"]})",
      R"({"id":"s3","features":[1,1,1,1,1,1,1,0],"label":"malware"})",
  });
  const auto ds = load_dataset(p, Split::kTrain);
  REQUIRE(ds.samples.size() == 3);
  CHECK(ds.d == 8);
  CHECK(ds.samples[1].family == "zeus");
  CHECK(ds.samples[1].tags.count("worm") == 1);
  CHECK(ds.samples[2].family == std::nullopt);
}

TEST_CASE("load_dataset reports inconsistent feature length with line number") {
  const auto p = temp_file("badlen.ndjson");
  write_lines(p, {
      R"({"id":"s1","features":[1,2,3,4,5,6,7,8],"label":"goodware"})",
      R"({"id":"s2","features":[1,2,3,4,5,6,7],"label":"goodware"})",
  });
  CHECK_THROWS_WITH(load_dataset(p, Split::kTrain),
                    "inconsistent feature length at line 2");
}

TEST_CASE("load_dataset rejects duplicates, malformed records and non-finite values") {
  const auto dup = temp_file("dup.ndjson");
  write_lines(dup, {
      R"({"id":"s1","features":[1],"label":"goodware"})",
      R"({"id":"s1","features":[2],"label":"malware"})",
  });
  CHECK_THROWS_AS(load_dataset(dup, Split::kTrain), DataError);

  const auto bad = temp_file("bad.ndjson");
  write_lines(bad, {"{not json"});
  CHECK_THROWS_WITH(load_dataset(bad, Split::kTrain),
                    Catch::Matchers::ContainsSubstring("line 1"));

  const auto inf = temp_file("inf.ndjson");
  write_lines(inf, {R"({"id":"s1","features":[1e999],"label":"goodware"})"});
  CHECK_THROWS_AS(load_dataset(inf, Split::kTrain), DataError);
}

TEST_CASE("empty file yields an empty dataset") {
  const auto p = temp_file("empty.ndjson");
  write_lines(p, {});
  const auto ds = load_dataset(p, Split::kTest);
  CHECK(ds.samples.empty());
}

TEST_CASE("dataset save/load round-trips field for field") {
  SyntheticConfig cfg;
  cfg.num_archetypes = 4;
  cfg.train_samples_per_archetype = 6;
  cfg.test_samples_per_archetype = 2;
  cfg.feature_dim = 5;
  auto [train, test] = generate_synthetic(cfg, 99);
  const auto p = temp_file("roundtrip.ndjson");
  save_dataset(train, p);
  const auto loaded = load_dataset(p, Split::kTrain);
  CHECK(loaded == train);
}

TEST_CASE("fit_scaler uses population statistics with a floor") {
  const auto ds = tiny_dataset();
  const auto sc = fit_scaler(ds);
  CHECK(sc.mean == std::vector<double>{1.0, 1.0});
  CHECK(sc.std == std::vector<double>{1.0, 1.0});

  Dataset constant;
  constant.d = 2;
  constant.samples = {Sample{"a", {3.0, 1.0}, Label::kGoodware, {}, {}, {}},
                      Sample{"b", {3.0, 2.0}, Label::kGoodware, {}, {}, {}}};
  const auto sc2 = fit_scaler(constant);
  CHECK(sc2.std[0] == kScalerStdFloor);  // constant column clamps
  CHECK(sc2.std[1] == 0.5);

  Dataset single;
  single.d = 2;
  single.samples = {Sample{"a", {4.0, -1.0}, Label::kGoodware, {}, {}, {}}};
  const auto sc3 = fit_scaler(single);
  CHECK(sc3.mean == std::vector<double>{4.0, -1.0});
  CHECK(sc3.std == std::vector<double>{kScalerStdFloor, kScalerStdFloor});

  CHECK_THROWS_AS(fit_scaler(Dataset{}), DataError);
}

TEST_CASE("transform standardizes and validates length") {
  StandardScaler sc{{1.0, 1.0}, {1.0, 1.0}};
  CHECK(transform(sc, std::vector<double>{1.0, 1.0}) == std::vector<double>{0.0, 0.0});
  CHECK(transform(sc, std::vector<double>{3.0, 0.0}) == std::vector<double>{2.0, -1.0});
  CHECK_THROWS_AS(transform(sc, std::vector<double>{1.0}), DataError);
}

TEST_CASE("transformed train split has near-zero mean per dimension") {
  SyntheticConfig cfg;
  cfg.num_archetypes = 4;
  cfg.train_samples_per_archetype = 30;
  cfg.feature_dim = 12;
  auto [train, test] = generate_synthetic(cfg, 5);
  const auto sc = fit_scaler(train);
  std::vector<double> mean(train.d, 0.0);
  for (const auto& s : train.samples) {
    const auto z = transform(sc, s.features);
    for (std::size_t j = 0; j < train.d; ++j) mean[j] += z[j];
  }
  for (std::size_t j = 0; j < train.d; ++j) {
    CHECK(std::fabs(mean[j] / static_cast<double>(train.samples.size())) < 1e-9);
  }
}

TEST_CASE("scaler file round-trips") {
  StandardScaler sc{{0.25, -3.5}, {1.0, 2.0}};
  const auto p = temp_file("scaler.json");
  save_scaler(sc, p);
  const auto back = load_scaler(p);
  CHECK(back.mean == sc.mean);
  CHECK(back.std == sc.std);
}

TEST_CASE("generator validates its configuration") {
  SyntheticConfig cfg;
  cfg.num_archetypes = 1;
  CHECK_THROWS_AS(generate_synthetic(cfg, 0), ConfigError);
  cfg.num_archetypes = 3;
  cfg.train_samples_per_archetype = 0;
  CHECK_THROWS_AS(generate_synthetic(cfg, 0), ConfigError);
}

TEST_CASE("generator is deterministic and honors flip probability zero") {
  SyntheticConfig cfg;
  cfg.num_archetypes = 6;
  cfg.train_samples_per_archetype = 10;
  cfg.test_samples_per_archetype = 4;
  cfg.capability_flip_prob = 0.0;
  auto [train_a, test_a] = generate_synthetic(cfg, 1234);
  auto [train_b, test_b] = generate_synthetic(cfg, 1234);
  CHECK(train_a == train_b);
  CHECK(test_a == test_b);

  // flip probability 0: every sample matches its archetype's set exactly
  for (int k = 0; k < cfg.num_archetypes; ++k) {
    const auto& first = train_a.samples[static_cast<std::size_t>(k) * 10].capabilities;
    for (int i = 0; i < 10; ++i) {
      CHECK(train_a.samples[static_cast<std::size_t>(k) * 10 + i].capabilities == first);
    }
  }

  auto [train_c, test_c] = generate_synthetic(cfg, 1235);
  CHECK(train_c != train_a);
}

TEST_CASE("raw-feature 1-NN recovers planted archetypes") {
  SyntheticConfig cfg;  // defaults: K=10, 100 train samples per archetype, noise 0.1
  auto [train, test] = generate_synthetic(cfg, 2024);

  // brute-force 1-NN oracle in raw feature space
  std::size_t hits = 0;
  for (const auto& q : test.samples) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_idx = 0;
    for (std::size_t i = 0; i < train.samples.size(); ++i) {
      const double d2 = squared_distance(train.samples[i].features, q.features);
      if (d2 < best) {
        best = d2;
        best_idx = i;
      }
    }
    if (synthetic_archetype_of(train.samples[best_idx].id) ==
        synthetic_archetype_of(q.id)) {
      ++hits;
    }
  }
  const double accuracy =
      static_cast<double>(hits) / static_cast<double>(test.samples.size());
  CHECK(accuracy > 0.9);
}
