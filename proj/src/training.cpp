#include "retfusion/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace retfusion::training {

void TrainConfig::check() const {
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (!(head_lr > 0) || !(backbone_lr > 0)) throw ValidationError("learning rates must be > 0");
  if (lr_min < 0) throw ValidationError("lr_min must be >= 0");
}

double bce_loss(double logit, int label) {
  // max(z,0) - z*y + log(1 + exp(-|z|))
  return std::max(logit, 0.0) - logit * label + std::log1p(std::exp(-std::abs(logit)));
}

double bce_grad(double logit, int label) { return fusion::sigmoid(logit) - label; }

double cosine_lr(long t, long T, double lr_max, double lr_min) {
  if (T < 1) throw ValidationError("cosine schedule horizon must be >= 1");
  if (t < 0 || t > T) throw ValidationError("cosine schedule step out of range");
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(M_PI * static_cast<double>(t) / T));
}

namespace {

std::vector<nn::Matrix> snapshot(const std::vector<nn::Parameter*>& params) {
  std::vector<nn::Matrix> out;
  out.reserve(params.size());
  for (const auto* p : params) out.push_back(p->value);
  return out;
}

void restore(const std::vector<nn::Parameter*>& params, const std::vector<nn::Matrix>& snap) {
  for (size_t i = 0; i < params.size(); ++i) params[i]->value = snap[i];
}

double evaluate_metric(fusion::NeuralModel& model, const std::vector<fusion::Sample>& samples,
                       evaluation::Metric metric, int batch_size) {
  evaluation::PredictionSet preds;
  for (size_t start = 0; start < samples.size(); start += static_cast<size_t>(batch_size)) {
    size_t end = std::min(samples.size(), start + static_cast<size_t>(batch_size));
    std::vector<fusion::Sample> batch(samples.begin() + static_cast<long>(start),
                                      samples.begin() + static_cast<long>(end));
    nn::Matrix logits = model.forward(batch, false, nullptr);
    for (size_t i = 0; i < batch.size(); ++i)
      preds.push_back({batch[i].image_id, batch[i].patient_id,
                       fusion::sigmoid(logits(static_cast<Eigen::Index>(i), 0)), batch[i].label,
                       batch[i].diabetes});
  }
  return evaluation::metric_value(metric, evaluation::canonical_order(std::move(preds)), 0.5);
}

}  // namespace

TrainHistory train(fusion::NeuralModel& model, const DatasetView& train_view,
                   const DatasetView& val_view, const TrainConfig& cfg,
                   const std::string& checkpoint_dir) {
  cfg.check();
  if (train_view.subset == cohort::Subset::test || val_view.subset == cohort::Subset::test)
    throw RuntimeFailure("training must never read the test split");
  if (train_view.subset != cohort::Subset::train)
    throw ValidationError("train() expects a train-tagged view");
  if (train_view.samples.empty() || val_view.samples.empty())
    throw ValidationError("empty training or validation split");
  {
    std::set<std::string> train_patients;
    for (const auto& s : train_view.samples) train_patients.insert(s.patient_id);
    for (const auto& s : val_view.samples)
      if (train_patients.count(s.patient_id))
        throw ValidationError("patient appears in both train and validation: " + s.patient_id);
  }

  auto params = model.parameters();
  nn::AdamW opt(params, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay);

  const long n = static_cast<long>(train_view.samples.size());
  const long batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const long T = static_cast<long>(cfg.epochs) * batches_per_epoch;

  TrainHistory history;
  std::vector<nn::Matrix> best_weights = snapshot(params);
  double best_metric = -std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  json ckpt_index = json::array();
  if (!checkpoint_dir.empty()) fs::create_directories(checkpoint_dir);

  long t = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng epoch_rng = make_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::vector<size_t> order(train_view.samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), epoch_rng);

    double loss_sum = 0;
    long loss_count = 0;
    for (long start = 0; start < n; start += cfg.batch_size) {
      long end = std::min(n, start + cfg.batch_size);
      std::vector<fusion::Sample> batch;
      batch.reserve(static_cast<size_t>(end - start));
      for (long k = start; k < end; ++k) {
        const fusion::Sample& src = train_view.samples[order[static_cast<size_t>(k)]];
        if (cfg.augment_train) {
          fusion::Sample s = src;
          Rng arng = make_rng(derive_seed(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)),
                                          order[static_cast<size_t>(k)] + 7));
          s.image = cohort::augment_image(src.image, cfg.augment, arng);
          batch.push_back(std::move(s));
        } else {
          batch.push_back(src);
        }
      }

      opt.zero_grad();
      nn::Matrix logits = model.forward(batch, true, &epoch_rng);
      nn::Matrix dlogit(logits.rows(), 1);
      double batch_loss = 0;
      for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        int y = batch[static_cast<size_t>(i)].label;
        batch_loss += bce_loss(logits(i, 0), y);
        dlogit(i, 0) = bce_grad(logits(i, 0), y) / static_cast<double>(logits.rows());
      }
      batch_loss /= static_cast<double>(logits.rows());
      if (!std::isfinite(batch_loss))
        throw RuntimeFailure("non-finite training loss at epoch " + std::to_string(epoch) +
                             ", iteration " + std::to_string(t));
      model.backward(dlogit);
      double lr_h = cosine_lr(t, T, cfg.head_lr, cfg.lr_min);
      double lr_b = cosine_lr(t, T, cfg.backbone_lr, cfg.lr_min);
      opt.step(lr_b, lr_h);
      ++t;
      loss_sum += batch_loss;
      ++loss_count;
    }

    model.mark_trained();  // forward-only evaluation below
    std::vector<fusion::Sample> val = val_view.samples;
    if (cfg.augment_validation)
      for (size_t i = 0; i < val.size(); ++i) {
        Rng arng = make_rng(derive_seed(derive_seed(cfg.seed, 0xE0 + epoch), i));
        val[i].image = cohort::augment_image(val[i].image, cfg.augment, arng);
      }
    double metric = evaluate_metric(model, val, cfg.selection_metric, cfg.batch_size);
    history.epochs.push_back({epoch, loss_sum / std::max(1L, loss_count), metric});

    if (metric > best_metric) {
      best_metric = metric;
      best_epoch = epoch;
      best_weights = snapshot(params);
      if (!checkpoint_dir.empty()) {
        std::string path = (fs::path(checkpoint_dir) / ("epoch_" + std::to_string(epoch) + ".bin"))
                               .string();
        nn::save_parameters_file(path, params);
        ckpt_index.push_back({{"epoch", epoch}, {"val_metric", metric}, {"weights", path}});
      }
    }
  }

  restore(params, best_weights);
  history.best_epoch = best_epoch;
  history.best_metric = best_metric;
  if (!checkpoint_dir.empty()) {
    json idx{{"selection_metric", evaluation::to_string(cfg.selection_metric)},
             {"best_epoch", best_epoch},
             {"best_metric", best_metric},
             {"checkpoints", ckpt_index}};
    std::ofstream out(fs::path(checkpoint_dir) / "index.json");
    out << idx.dump(2) << '\n';
  }
  return history;
}

void write_history_csv(const std::string& path, const TrainHistory& history) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write history: " + path);
  out << "epoch,train_loss,val_metric\n";
  char buf[64];
  for (const auto& e : history.epochs) {
    std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g\n", e.epoch, e.train_loss, e.val_metric);
    out << buf;
  }
}

SweepResult sweep(const fusion::FusionSpec& spec, const SweepGrid& grid,
                  const std::vector<cohort::PatientRecord>& train_records,
                  const std::vector<cohort::PatientRecord>& val_records,
                  const fusion::NormalizationStats& base_stats, const TrainConfig& base_cfg) {
  if (grid.head_lrs.empty() || grid.backbone_lrs.empty())
    throw ValidationError("sweep grid must be non-empty");
  std::vector<int> dims = grid.feature_dims.empty()
                              ? std::vector<int>{spec.encoder.fundus_feature_dim}
                              : grid.feature_dims;
  std::vector<int> sizes = grid.image_sizes.empty()
                               ? std::vector<int>{base_stats.preprocess.image_size}
                               : grid.image_sizes;

  SweepResult result;
  std::map<int, std::pair<training::DatasetView, training::DatasetView>> views_by_size;
  for (int size : sizes) {
    fusion::NormalizationStats stats = base_stats;
    stats.preprocess.image_size = size;
    DatasetView tv{cohort::Subset::train, fusion::build_samples(train_records, stats)};
    DatasetView vv{cohort::Subset::validation, fusion::build_samples(val_records, stats)};
    views_by_size.emplace(size, std::make_pair(std::move(tv), std::move(vv)));
  }

  for (int size : sizes)
    for (int dim : dims)
      for (double hlr : grid.head_lrs)
        for (double blr : grid.backbone_lrs) {
          SweepCell cell;
          cell.head_lr = hlr;
          cell.backbone_lr = blr;
          cell.feature_dim = dim;
          cell.image_size = size;
          try {
            fusion::FusionSpec cell_spec = spec;
            cell_spec.encoder.fundus_feature_dim = dim;
            cell_spec.encoder.image_size = size;
            TrainConfig cfg = base_cfg;
            cfg.head_lr = hlr;
            cfg.backbone_lr = blr;
            fusion::NeuralModel model(cell_spec, cfg.seed);
            const auto& [tv, vv] = views_by_size.at(size);
            TrainHistory h = train(model, tv, vv, cfg);
            cell.val_metric = h.best_metric;
            cell.best_epoch = h.best_epoch;
          } catch (const std::exception& e) {
            cell.failed = true;
            cell.error = e.what();
            cell.val_metric = -1;
          }
          result.cells.push_back(std::move(cell));
        }

  std::stable_sort(result.cells.begin(), result.cells.end(),
                   [](const SweepCell& a, const SweepCell& b) { return a.val_metric > b.val_metric; });
  result.best = result.cells.front();
  if (result.best.failed) throw RuntimeFailure("every sweep cell failed: " + result.best.error);
  return result;
}

void write_sweep_csv(const std::string& path, const SweepResult& result) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write sweep report: " + path);
  out << "image_size,feature_dim,head_lr,backbone_lr,val_metric,best_epoch,failed,error\n";
  char buf[128];
  for (const auto& c : result.cells) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%g,%g,%.10g,%d,%d,", c.image_size, c.feature_dim,
                  c.head_lr, c.backbone_lr, c.val_metric, c.best_epoch, c.failed ? 1 : 0);
    out << buf << c.error << '\n';
  }
}

}  // namespace retfusion::training
