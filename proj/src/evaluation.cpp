#include "retfusion/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace retfusion::evaluation {

void validate(const PredictionSet& preds) {
  if (preds.empty()) throw ValidationError("prediction set is empty");
  std::set<std::string> ids;
  for (const auto& r : preds) {
    if (!(r.probability >= 0 && r.probability <= 1))
      throw ValidationError("probability out of [0,1] for image " + r.image_id);
    if (r.label != 0 && r.label != 1) throw ValidationError("label must be 0/1");
    if (!ids.insert(r.image_id).second)
      throw ValidationError("duplicate image_id in prediction set: " + r.image_id);
  }
}

PredictionSet canonical_order(PredictionSet preds) {
  std::sort(preds.begin(), preds.end(),
            [](const PredictionRow& a, const PredictionRow& b) { return a.image_id < b.image_id; });
  return preds;
}

PredictionSet read_predictions_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("cannot open predictions: " + path);
  std::string line;
  std::getline(in, line);
  PredictionSet preds;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::istringstream ss(line);
    PredictionRow r;
    std::string prob, label, dm;
    std::getline(ss, r.image_id, ',');
    std::getline(ss, r.patient_id, ',');
    std::getline(ss, prob, ',');
    std::getline(ss, label, ',');
    std::getline(ss, dm, ',');
    r.probability = std::stod(prob);
    r.label = std::stoi(label);
    r.diabetes = std::stoi(dm);
    preds.push_back(std::move(r));
  }
  validate(preds);
  return preds;
}

void write_predictions_csv(const std::string& path, const PredictionSet& preds) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write predictions: " + path);
  out << "image_id,patient_id,probability,label,diabetes\n";
  char buf[32];
  for (const auto& r : preds) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.probability);
    out << r.image_id << ',' << r.patient_id << ',' << buf << ',' << r.label << ','
        << r.diabetes << '\n';
  }
}

std::string to_string(Metric m) {
  switch (m) {
    case Metric::f1: return "f1";
    case Metric::auc: return "auc";
    case Metric::pr: return "pr";
    case Metric::accuracy: return "accuracy";
    case Metric::precision: return "precision";
    case Metric::recall: return "recall";
    case Metric::specificity: return "specificity";
  }
  return "?";
}

Metric metric_from_string(const std::string& s) {
  for (Metric m : all_metrics())
    if (to_string(m) == s) return m;
  throw ValidationError("unknown metric: " + s);
}

const std::vector<Metric>& all_metrics() {
  static const std::vector<Metric> ms = {Metric::f1,        Metric::auc,      Metric::pr,
                                         Metric::accuracy,  Metric::precision, Metric::recall,
                                         Metric::specificity};
  return ms;
}

Confusion confusion_counts(const PredictionSet& preds, double threshold) {
  Confusion c;
  for (const auto& r : preds) {
    bool pos = r.probability >= threshold;
    if (pos && r.label == 1) ++c.tp;
    else if (pos) ++c.fp;
    else if (r.label == 1) ++c.fn;
    else ++c.tn;
  }
  return c;
}

namespace {

double safe_div(double num, double den) { return den > 0 ? num / den : 0.0; }

}  // namespace

MetricReport confusion_metrics(const PredictionSet& preds, double threshold) {
  if (preds.empty()) throw ValidationError("confusion_metrics on empty set");
  if (!(threshold > 0 && threshold < 1)) throw ValidationError("threshold must lie in (0,1)");
  Confusion c = confusion_counts(preds, threshold);
  MetricReport rep;
  rep.confusion = c;
  double precision = safe_div(c.tp, c.tp + c.fp);
  double recall = safe_div(c.tp, c.tp + c.fn);
  rep.values[Metric::precision] = precision;
  rep.values[Metric::recall] = recall;
  rep.values[Metric::f1] = safe_div(2 * precision * recall, precision + recall);
  rep.values[Metric::accuracy] =
      static_cast<double>(c.tp + c.tn) / static_cast<double>(c.tp + c.fp + c.fn + c.tn);
  rep.values[Metric::specificity] = safe_div(c.tn, c.tn + c.fp);
  return rep;
}

double roc_auc(const PredictionSet& preds) {
  long n_pos = 0, n_neg = 0;
  for (const auto& r : preds) (r.label == 1 ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0)
    throw ValidationError("roc_auc undefined: prediction set has a single class");
  // midrank formula: AUC = (sum of positive ranks - n_pos(n_pos+1)/2) / (n_pos*n_neg)
  std::vector<size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&preds](size_t a, size_t b) { return preds[a].probability < preds[b].probability; });
  std::vector<double> rank(preds.size());
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() &&
           preds[order[j + 1]].probability == preds[order[i]].probability)
      ++j;
    double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double pos_rank_sum = 0;
  for (size_t k = 0; k < preds.size(); ++k)
    if (preds[k].label == 1) pos_rank_sum += rank[k];
  return (pos_rank_sum - static_cast<double>(n_pos) * (n_pos + 1) / 2.0) /
         (static_cast<double>(n_pos) * n_neg);
}

double pr_auc(const PredictionSet& preds) {
  long n_pos = 0;
  for (const auto& r : preds) n_pos += r.label;
  if (n_pos == 0) throw ValidationError("pr_auc undefined: no positive labels");
  std::vector<size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&preds](size_t a, size_t b) { return preds[a].probability > preds[b].probability; });
  double ap = 0;
  long tp = 0, seen = 0, prev_tp = 0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    long group_tp = 0;
    while (j < order.size() &&
           preds[order[j]].probability == preds[order[i]].probability) {
      group_tp += preds[order[j]].label;
      ++j;
    }
    tp += group_tp;
    seen += static_cast<long>(j - i);
    double precision = static_cast<double>(tp) / seen;
    double recall = static_cast<double>(tp) / n_pos;
    double prev_recall = static_cast<double>(prev_tp) / n_pos;
    ap += (recall - prev_recall) * precision;
    prev_tp = tp;
    i = j;
  }
  return ap;
}

double metric_value(Metric m, const PredictionSet& preds, double threshold) {
  switch (m) {
    case Metric::auc: return roc_auc(preds);
    case Metric::pr: return pr_auc(preds);
    default: return confusion_metrics(preds, threshold).values.at(m);
  }
}

std::pair<std::size_t, std::size_t> percentile_indices(std::size_t B) {
  if (B == 0) throw ValidationError("empty bootstrap sample");
  std::size_t lo = static_cast<std::size_t>(std::ceil(0.025 * static_cast<double>(B)));
  lo = lo > 0 ? lo - 1 : 0;
  return {lo, B - 1 - lo};
}

namespace {

// One with-replacement resample; when require_both is set, redraws
// single-class index draws so rank metrics stay defined. Returns the number
// of redraws taken.
long draw_resample(const PredictionSet& preds, Rng& rng, int max_redraws,
                   std::vector<size_t>& idx, bool require_both = true) {
  std::uniform_int_distribution<size_t> dist(0, preds.size() - 1);
  for (int attempt = 0; attempt <= max_redraws; ++attempt) {
    idx.clear();
    bool has_pos = false, has_neg = false;
    for (size_t k = 0; k < preds.size(); ++k) {
      size_t i = dist(rng);
      idx.push_back(i);
      (preds[i].label == 1 ? has_pos : has_neg) = true;
    }
    if (!require_both || (has_pos && has_neg)) return attempt;
  }
  throw RuntimeFailure("bootstrap resampling exhausted redraw budget on a degenerate set");
}

bool has_both_classes(const PredictionSet& preds) {
  bool has_pos = false, has_neg = false;
  for (const auto& r : preds) (r.label == 1 ? has_pos : has_neg) = true;
  return has_pos && has_neg;
}

PredictionSet gather(const PredictionSet& preds, const std::vector<size_t>& idx) {
  PredictionSet out;
  out.reserve(idx.size());
  for (size_t i : idx) out.push_back(preds[i]);
  return out;
}

MetricCI interval_from_samples(std::vector<double> samples, double point) {
  std::sort(samples.begin(), samples.end());
  auto [ilo, ihi] = percentile_indices(samples.size());
  return MetricCI{point, samples[ilo], samples[ihi]};
}

}  // namespace

BootstrapResult bootstrap_ci(const PredictionSet& raw, const std::vector<Metric>& metrics,
                             const BootstrapConfig& cfg) {
  validate(raw);
  if (cfg.B < 1) throw ValidationError("bootstrap B must be >= 1");
  PredictionSet preds = canonical_order(raw);
  BootstrapResult res;
  res.B = cfg.B;
  res.seed = cfg.seed;
  for (Metric m : metrics) {
    res.metrics[m].point = metric_value(m, preds, cfg.threshold);
    res.samples[m].reserve(cfg.B);
  }
  const bool both = has_both_classes(preds);
  std::vector<size_t> idx;
  for (long it = 0; it < cfg.B; ++it) {
    Rng rng = make_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(it)));
    res.degenerate_redraws += draw_resample(preds, rng, cfg.max_redraws, idx, both);
    PredictionSet sample = gather(preds, idx);
    for (Metric m : metrics) res.samples[m].push_back(metric_value(m, sample, cfg.threshold));
  }
  for (Metric m : metrics) {
    MetricCI ci = interval_from_samples(res.samples[m], res.metrics[m].point);
    res.metrics[m] = ci;
  }
  return res;
}

PairedDifferenceResult paired_difference(const PredictionSet& raw_a, const PredictionSet& raw_b,
                                         Metric metric, const BootstrapConfig& cfg) {
  validate(raw_a);
  validate(raw_b);
  if (raw_a.size() != raw_b.size())
    throw ValidationError("paired_difference requires equally sized prediction sets");
  PredictionSet a = canonical_order(raw_a);
  PredictionSet b = canonical_order(raw_b);
  for (size_t i = 0; i < a.size(); ++i)
    if (a[i].image_id != b[i].image_id || a[i].label != b[i].label)
      throw ValidationError("paired_difference row mismatch at " + a[i].image_id);

  PairedDifferenceResult res;
  res.metric = metric;
  res.samples.reserve(cfg.B);
  std::vector<size_t> idx;
  for (long it = 0; it < cfg.B; ++it) {
    Rng rng = make_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(it)));
    res.degenerate_redraws += draw_resample(a, rng, cfg.max_redraws, idx);
    double va = metric_value(metric, gather(a, idx), cfg.threshold);
    double vb = metric_value(metric, gather(b, idx), cfg.threshold);
    res.samples.push_back(va - vb);
  }
  res.mean_diff = std::accumulate(res.samples.begin(), res.samples.end(), 0.0) /
                  static_cast<double>(res.samples.size());
  std::vector<double> sorted = res.samples;
  std::sort(sorted.begin(), sorted.end());
  auto [ilo, ihi] = percentile_indices(sorted.size());
  res.lo = sorted[ilo];
  res.hi = sorted[ihi];
  res.significant = res.lo > 0 || res.hi < 0;
  return res;
}

SubgroupReport subgroup_eval(const PredictionSet& preds, const std::vector<Metric>& metrics,
                             const BootstrapConfig& cfg) {
  validate(preds);
  SubgroupReport rep;
  for (int flag : {0, 1}) {
    PredictionSet part;
    for (const auto& r : preds)
      if (r.diabetes == flag) part.push_back(r);
    if (part.empty()) continue;  // empty group reported absent
    SubgroupReport::Group g;
    g.flag = flag;
    g.n_rows = static_cast<long>(part.size());
    g.pct = 100.0 * static_cast<double>(part.size()) / static_cast<double>(preds.size());
    // Rank metrics are undefined on a single-class group; report only the
    // threshold metrics there instead of failing the whole evaluation.
    std::vector<Metric> usable = metrics;
    if (!has_both_classes(part)) {
      usable.erase(std::remove_if(usable.begin(), usable.end(),
                                  [](Metric m) { return m == Metric::auc || m == Metric::pr; }),
                   usable.end());
    }
    g.boot = bootstrap_ci(part, usable, cfg);
    rep.groups.push_back(std::move(g));
  }
  return rep;
}

std::vector<CurvePoint> roc_curve(const PredictionSet& preds) {
  long n_pos = 0, n_neg = 0;
  for (const auto& r : preds) (r.label == 1 ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0) throw ValidationError("roc_curve needs both classes");
  std::vector<size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&preds](size_t a, size_t b) { return preds[a].probability > preds[b].probability; });
  std::vector<CurvePoint> pts{{0, 0}};
  long tp = 0, fp = 0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j < order.size() && preds[order[j]].probability == preds[order[i]].probability) {
      (preds[order[j]].label == 1 ? tp : fp)++;
      ++j;
    }
    pts.push_back({static_cast<double>(fp) / n_neg, static_cast<double>(tp) / n_pos});
    i = j;
  }
  return pts;
}

std::vector<CurvePoint> pr_curve(const PredictionSet& preds) {
  long n_pos = 0;
  for (const auto& r : preds) n_pos += r.label;
  if (n_pos == 0) throw ValidationError("pr_curve needs at least one positive");
  std::vector<size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&preds](size_t a, size_t b) { return preds[a].probability > preds[b].probability; });
  std::vector<CurvePoint> pts{{0, 1}};
  long tp = 0, seen = 0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j < order.size() && preds[order[j]].probability == preds[order[i]].probability) {
      tp += preds[order[j]].label;
      ++j;
    }
    seen += static_cast<long>(j - i);
    pts.push_back({static_cast<double>(tp) / n_pos, static_cast<double>(tp) / seen});
    i = j;
  }
  return pts;
}

CurveBand curve_band(const PredictionSet& raw, CurveKind kind, const BootstrapConfig& cfg) {
  validate(raw);
  PredictionSet preds = canonical_order(raw);
  auto area = [kind, &cfg](const PredictionSet& p) {
    return kind == CurveKind::roc ? roc_auc(p) : pr_auc(p);
  };
  std::vector<double> areas(cfg.B);
  std::vector<size_t> idx;
  for (long it = 0; it < cfg.B; ++it) {
    Rng rng = make_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(it)));
    draw_resample(preds, rng, cfg.max_redraws, idx);
    areas[it] = area(gather(preds, idx));
  }
  std::vector<size_t> order(areas.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&areas](size_t a, size_t b) {
              if (areas[a] != areas[b]) return areas[a] < areas[b];
              return a < b;
            });
  auto [ilo, ihi] = percentile_indices(order.size());
  size_t imed = (order.size() - 1) / 2;  // lower median for even B

  CurveBand band;
  band.kind = kind;
  band.lo_run = static_cast<long>(order[ilo]);
  band.hi_run = static_cast<long>(order[ihi]);
  band.median_run = static_cast<long>(order[imed]);
  band.lo_area = areas[order[ilo]];
  band.hi_area = areas[order[ihi]];
  band.median_area = areas[order[imed]];

  auto run_curve = [&](long run) {
    Rng rng = make_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(run)));
    draw_resample(preds, rng, cfg.max_redraws, idx);
    PredictionSet sample = gather(preds, idx);
    return kind == CurveKind::roc ? roc_curve(sample) : pr_curve(sample);
  };
  band.lo = run_curve(band.lo_run);
  band.hi = run_curve(band.hi_run);
  band.median = run_curve(band.median_run);
  return band;
}

}  // namespace retfusion::evaluation
