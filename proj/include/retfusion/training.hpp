#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "retfusion/cohort.hpp"
#include "retfusion/evaluation.hpp"
#include "retfusion/fusion.hpp"
#include "retfusion/preprocess.hpp"

namespace retfusion::training {

struct TrainConfig {
  int batch_size = 16;
  int epochs = 50;  // 25 validation runs, 50 final, 250 FCNN-only systems
  double head_lr = 1e-3;
  double backbone_lr = 1e-4;
  double lr_min = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  evaluation::Metric selection_metric = evaluation::Metric::auc;
  bool augment_train = true;
  bool augment_validation = false;
  cohort::AugmentConfig augment;

  void check() const;
};

// Numerically stable binary cross-entropy on a raw logit.
double bce_loss(double logit, int label);
// d loss / d logit = sigmoid(logit) - label.
double bce_grad(double logit, int label);

// lr_min + (lr_max - lr_min) * (1 + cos(pi t / T)) / 2.
double cosine_lr(long t, long T, double lr_max, double lr_min);

// Subset-tagged samples; the training loop refuses test-tagged views.
struct DatasetView {
  cohort::Subset subset = cohort::Subset::train;
  std::vector<fusion::Sample> samples;
};

struct EpochStats {
  int epoch = 0;  // 1-based
  double train_loss = 0;
  double val_metric = 0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  int best_epoch = 0;
  double best_metric = 0;
};

// Mini-batch training with per-iteration cosine decay and best-checkpoint
// selection on the validation metric (ties break to the earliest epoch).
// On return the model carries the best checkpoint's weights and is marked
// trained. When checkpoint_dir is non-empty, per-improvement checkpoints and
// a JSON index are written there.
TrainHistory train(fusion::NeuralModel& model, const DatasetView& train_view,
                   const DatasetView& val_view, const TrainConfig& cfg,
                   const std::string& checkpoint_dir = "");

void write_history_csv(const std::string& path, const TrainHistory& history);

struct SweepGrid {
  std::vector<double> head_lrs{1e-2, 5e-2, 1e-3, 5e-3};
  std::vector<double> backbone_lrs{1e-4, 5e-4, 1e-5, 5e-5, 1e-6, 5e-6};
  std::vector<int> feature_dims;  // optional, e.g. {8, 32, 128}
  std::vector<int> image_sizes;   // optional, e.g. {224, 512}
};

struct SweepCell {
  double head_lr = 0, backbone_lr = 0;
  int feature_dim = 0, image_size = 0;
  double val_metric = 0;
  int best_epoch = 0;
  bool failed = false;
  std::string error;
};

struct SweepResult {
  std::vector<SweepCell> cells;  // sorted descending by validation metric
  SweepCell best;
};

// One training run per grid cell; failures are recorded per cell, not fatal.
SweepResult sweep(const fusion::FusionSpec& spec, const SweepGrid& grid,
                  const std::vector<cohort::PatientRecord>& train_records,
                  const std::vector<cohort::PatientRecord>& val_records,
                  const fusion::NormalizationStats& base_stats, const TrainConfig& base_cfg);

void write_sweep_csv(const std::string& path, const SweepResult& result);

}  // namespace retfusion::training
