#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "retfusion/common.hpp"

namespace retfusion::evaluation {

struct PredictionRow {
  std::string image_id;
  std::string patient_id;
  double probability = 0;
  int label = 0;
  int diabetes = 0;
};

using PredictionSet = std::vector<PredictionRow>;

void validate(const PredictionSet& preds);
// Normative row order for resampling: ascending image_id.
PredictionSet canonical_order(PredictionSet preds);

PredictionSet read_predictions_csv(const std::string& path);
void write_predictions_csv(const std::string& path, const PredictionSet& preds);

enum class Metric { f1, auc, pr, accuracy, precision, recall, specificity };
std::string to_string(Metric m);
Metric metric_from_string(const std::string& s);
const std::vector<Metric>& all_metrics();

struct Confusion {
  long tp = 0, fp = 0, fn = 0, tn = 0;
};

Confusion confusion_counts(const PredictionSet& preds, double threshold);

// Threshold metrics with zero-denominator convention: undefined ratios are 0.
struct MetricReport {
  std::map<Metric, double> values;
  Confusion confusion;
};

MetricReport confusion_metrics(const PredictionSet& preds, double threshold);

// Mann-Whitney estimator, ties get half credit. Requires both classes.
double roc_auc(const PredictionSet& preds);
// Step-wise average precision, tie groups collapsed to one threshold.
double pr_auc(const PredictionSet& preds);

double metric_value(Metric m, const PredictionSet& preds, double threshold);

struct BootstrapConfig {
  long B = 10000;
  std::uint64_t seed = 0;
  double threshold = 0.5;
  int max_redraws = 1000;  // per-iteration retry bound for single-class draws
};

// Symmetric nearest-rank 95% interval indices into a sorted sample of size B.
std::pair<std::size_t, std::size_t> percentile_indices(std::size_t B);

struct MetricCI {
  double point = 0, lo = 0, hi = 0;
};

struct BootstrapResult {
  std::map<Metric, MetricCI> metrics;
  std::map<Metric, std::vector<double>> samples;  // per-iteration values
  long B = 0;
  std::uint64_t seed = 0;
  long degenerate_redraws = 0;
};

BootstrapResult bootstrap_ci(const PredictionSet& preds, const std::vector<Metric>& metrics,
                             const BootstrapConfig& cfg);

struct PairedDifferenceResult {
  Metric metric = Metric::f1;
  double mean_diff = 0;
  double lo = 0, hi = 0;
  bool significant = false;
  std::vector<double> samples;
  long degenerate_redraws = 0;
};

// Both models evaluated on identical resample index multisets; rows of a and
// b must carry identical ids and labels.
PairedDifferenceResult paired_difference(const PredictionSet& preds_a,
                                         const PredictionSet& preds_b, Metric metric,
                                         const BootstrapConfig& cfg);

struct SubgroupReport {
  struct Group {
    int flag = 0;
    long n_rows = 0;
    double pct = 0;
    BootstrapResult boot;
  };
  std::vector<Group> groups;  // ordered by flag
};

SubgroupReport subgroup_eval(const PredictionSet& preds, const std::vector<Metric>& metrics,
                             const BootstrapConfig& cfg);

enum class CurveKind { roc, pr };

struct CurvePoint {
  double x = 0, y = 0;  // ROC: (FPR, TPR); PR: (recall, precision)
};

std::vector<CurvePoint> roc_curve(const PredictionSet& preds);
std::vector<CurvePoint> pr_curve(const PredictionSet& preds);

struct CurveBand {
  CurveKind kind = CurveKind::roc;
  std::vector<CurvePoint> median, lo, hi;
  long median_run = 0, lo_run = 0, hi_run = 0;  // bootstrap iteration indices
  double median_area = 0, lo_area = 0, hi_area = 0;
};

CurveBand curve_band(const PredictionSet& preds, CurveKind kind, const BootstrapConfig& cfg);

}  // namespace retfusion::evaluation
