#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "retfusion/training.hpp"

using namespace retfusion;
namespace fs = std::filesystem;

namespace {

fusion::Sample signal_sample(const std::string& id, int label, std::uint64_t seed) {
  fusion::Sample s;
  s.image_id = id;
  s.patient_id = "pat_" + id;
  s.image = Image(3, 12, 12);
  Rng rng = make_rng(seed);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (double& v : s.image.data) v = u(rng) + (label ? 0.8 : -0.8);
  s.demo.age_std = (label ? 1.0 : -1.0) + u(rng);
  s.demo.gender_code = static_cast<double>(seed % 2);
  s.label = label;
  s.diabetes = static_cast<int>(seed % 2);
  return s;
}

training::DatasetView signal_view(cohort::Subset subset, int n, std::uint64_t seed) {
  training::DatasetView v;
  v.subset = subset;
  for (int i = 0; i < n; ++i)
    v.samples.push_back(signal_sample(cohort::to_string(subset) + std::to_string(i), i % 2,
                                      seed + static_cast<std::uint64_t>(i)));
  return v;
}

fusion::FusionSpec tiny_spec() {
  fusion::FusionSpec spec;
  spec.strategy = fusion::Strategy::intermediate;
  spec.encoder.image_size = 12;
  return spec;
}

training::TrainConfig quick_cfg(int epochs) {
  training::TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 8;
  cfg.head_lr = 1e-2;
  cfg.backbone_lr = 1e-3;
  cfg.augment_train = false;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_CASE("bce loss matches the naive formula and is stable at extremes") {
  for (double z : {-3.0, -0.5, 0.0, 0.7, 4.0}) {
    for (int y : {0, 1}) {
      double p = fusion::sigmoid(z);
      double naive = -(y * std::log(p) + (1 - y) * std::log(1 - p));
      CHECK(training::bce_loss(z, y) == doctest::Approx(naive).epsilon(1e-12));
    }
  }
  CHECK(std::isfinite(training::bce_loss(1000.0, 0)));
  CHECK(std::isfinite(training::bce_loss(-1000.0, 1)));
  CHECK(training::bce_loss(1000.0, 1) == doctest::Approx(0.0));
}

TEST_CASE("bce gradient matches central finite differences over [-10, 10]") {
  for (double z = -10.0; z <= 10.0; z += 0.37) {
    for (int y : {0, 1}) {
      double h = 1e-6;
      double fd = (training::bce_loss(z + h, y) - training::bce_loss(z - h, y)) / (2 * h);
      double g = training::bce_grad(z, y);
      CHECK(g == doctest::Approx(fd).epsilon(1e-5));
    }
  }
}

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(training::cosine_lr(0, 100, 0.1, 0.001) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(training::cosine_lr(100, 100, 0.1, 0.001) == doctest::Approx(0.001).epsilon(1e-15));
  CHECK(training::cosine_lr(50, 100, 0.1, 0.0) == doctest::Approx(0.05).epsilon(1e-12));
  CHECK_THROWS(training::cosine_lr(-1, 100, 0.1, 0.0));
  CHECK_THROWS(training::cosine_lr(101, 100, 0.1, 0.0));
}

TEST_CASE("training refuses a test-tagged view") {
  fusion::NeuralModel model(tiny_spec(), 1);
  auto train_view = signal_view(cohort::Subset::test, 8, 10);
  auto val_view = signal_view(cohort::Subset::validation, 4, 20);
  CHECK_THROWS_AS(training::train(model, train_view, val_view, quick_cfg(1)), RuntimeFailure);
  auto val_as_test = signal_view(cohort::Subset::test, 4, 20);
  auto proper_train = signal_view(cohort::Subset::train, 8, 10);
  CHECK_THROWS_AS(training::train(model, proper_train, val_as_test, quick_cfg(1)), RuntimeFailure);
}

TEST_CASE("training learns a strong planted signal and selects the best epoch") {
  fusion::NeuralModel model(tiny_spec(), 2);
  auto train_view = signal_view(cohort::Subset::train, 24, 100);
  auto val_view = signal_view(cohort::Subset::validation, 12, 200);
  auto history = training::train(model, train_view, val_view, quick_cfg(6));
  REQUIRE(history.epochs.size() == 6);
  CHECK(model.trained());
  double best = -1;
  int best_epoch = 0;
  for (const auto& e : history.epochs)
    if (e.val_metric > best) {
      best = e.val_metric;
      best_epoch = e.epoch;
    }
  CHECK(history.best_metric == best);
  CHECK(history.best_epoch == best_epoch);  // ties resolve to the earliest
  CHECK(best >= 0.9);                       // separable by construction
  // model carries the best checkpoint: re-evaluating reproduces best_metric
  auto preds = model.predict_proba(val_view.samples);
  CHECK(evaluation::roc_auc(evaluation::canonical_order(preds)) ==
        doctest::Approx(history.best_metric).epsilon(1e-12));
}

TEST_CASE("training is deterministic in the seed") {
  auto train_view = signal_view(cohort::Subset::train, 16, 100);
  auto val_view = signal_view(cohort::Subset::validation, 8, 200);
  fusion::NeuralModel a(tiny_spec(), 3);
  fusion::NeuralModel b(tiny_spec(), 3);
  auto ha = training::train(a, train_view, val_view, quick_cfg(3));
  auto hb = training::train(b, train_view, val_view, quick_cfg(3));
  REQUIRE(ha.epochs.size() == hb.epochs.size());
  for (size_t i = 0; i < ha.epochs.size(); ++i) {
    CHECK(ha.epochs[i].train_loss == hb.epochs[i].train_loss);
    CHECK(ha.epochs[i].val_metric == hb.epochs[i].val_metric);
  }
  auto pa = a.predict_proba(val_view.samples);
  auto pb = b.predict_proba(val_view.samples);
  for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].probability == pb[i].probability);
}

TEST_CASE("checkpoint directory receives per-improvement checkpoints and an index") {
  fs::path dir = fs::temp_directory_path() / "train_ckpt";
  fs::remove_all(dir);
  fusion::NeuralModel model(tiny_spec(), 4);
  auto train_view = signal_view(cohort::Subset::train, 16, 100);
  auto val_view = signal_view(cohort::Subset::validation, 8, 200);
  auto history = training::train(model, train_view, val_view, quick_cfg(3), dir.string());
  CHECK(fs::exists(dir / "index.json"));
  CHECK(fs::exists(dir / ("epoch_" + std::to_string(history.best_epoch) + ".bin")));
}

TEST_CASE("history csv is written with one row per epoch") {
  fs::path path = fs::temp_directory_path() / "history_test.csv";
  training::TrainHistory h;
  h.epochs = {{1, 0.5, 0.7}, {2, 0.4, 0.8}};
  h.best_epoch = 2;
  h.best_metric = 0.8;
  training::write_history_csv(path.string(), h);
  std::ifstream in(path);
  std::string line;
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 3);  // header + 2 epochs
  fs::remove(path);
}

TEST_CASE("config validation") {
  training::TrainConfig cfg;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.check(), ValidationError);
  cfg = training::TrainConfig{};
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.check(), ValidationError);
  cfg = training::TrainConfig{};
  cfg.head_lr = -1;
  CHECK_THROWS_AS(cfg.check(), ValidationError);
}

TEST_CASE("sweep ranks cells by validation metric and tolerates failing cells") {
  // records with images on disk: reuse the synthetic generator
  fs::path dir = fs::temp_directory_path() / "sweep_data";
  fs::remove_all(dir);
  cohort::SyntheticConfig syn;
  syn.n_patients = 24;
  syn.image_size = 16;
  syn.seed = 3;
  auto recs = cohort::generate_synthetic_cohort(syn, dir.string());
  std::vector<cohort::PatientRecord> train_recs(recs.begin(), recs.begin() + 16);
  std::vector<cohort::PatientRecord> val_recs(recs.begin() + 16, recs.end());

  fusion::NormalizationStats stats;
  stats.preprocess.image_size = 16;
  auto [m, sd] = fusion::train_age_stats(train_recs);
  stats.age_mean = m;
  stats.age_std = sd;

  fusion::FusionSpec spec = tiny_spec();
  spec.encoder.image_size = 16;
  training::TrainConfig cfg = quick_cfg(1);
  training::SweepGrid grid;
  grid.head_lrs = {1e-2, 1e-3};
  grid.backbone_lrs = {1e-4};
  auto result = training::sweep(spec, grid, train_recs, val_recs, stats, cfg);
  REQUIRE(result.cells.size() == 2);
  CHECK(result.cells[0].val_metric >= result.cells[1].val_metric);
  CHECK(result.best.val_metric == result.cells[0].val_metric);

  fs::path csv = fs::temp_directory_path() / "sweep_test.csv";
  training::write_sweep_csv(csv.string(), result);
  CHECK(fs::exists(csv));
  fs::remove(csv);
}
