// retfusion command-line driver: split / train / sweep / eval / compare /
// explain / report. Every command writes its outputs under --run-dir together
// with a run manifest sufficient to reproduce the run.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "retfusion/cohort.hpp"
#include "retfusion/evaluation.hpp"
#include "retfusion/explain.hpp"
#include "retfusion/fusion.hpp"
#include "retfusion/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace retfusion;

namespace {

constexpr const char* kVersion = "0.1.0";

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("missing file: " + path);
  try {
    return json::parse(in);
  } catch (const std::exception& e) {
    throw ValidationError("config parse error in " + path + ": " + e.what());
  }
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write: " + path);
  out << j.dump(2) << '\n';
}

void check_keys(const json& j, const std::string& section, const std::set<std::string>& allowed) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ValidationError("unknown config key '" + section + "." + it.key() + "'");
}

struct RunConfig {
  // data source
  bool synthetic = false;
  cohort::SyntheticConfig syn;
  std::string synthetic_dir;  // defaults to <run-dir>/synthetic
  std::string manifest;
  // split
  std::array<double, 3> ratios{0.6, 0.2, 0.2};
  std::uint64_t split_seed = 0;
  // model / preprocessing / training
  fusion::FusionSpec spec;
  cohort::PreprocessConfig preprocess;
  training::TrainConfig train;
  training::SweepGrid sweep;
  bool sweep_given = false;
  // evaluation
  evaluation::BootstrapConfig eval;
  // explain
  int explain_k = 4;
  std::uint64_t explain_seed = 0;

  json resolved;  // fully materialized snapshot
};

RunConfig parse_config(const std::string& path) {
  json j = load_json_file(path);
  check_keys(j, "", {"data", "split", "model", "preprocess", "augment", "train", "sweep",
                     "eval", "explain"});
  RunConfig cfg;

  if (!j.contains("data")) throw ValidationError("config missing 'data' section");
  const json& data = j["data"];
  check_keys(data, "data", {"manifest", "synthetic"});
  if (data.contains("synthetic")) {
    cfg.synthetic = true;
    const json& s = data["synthetic"];
    check_keys(s, "data.synthetic",
               {"n_patients", "image_signal", "age_signal", "htn_rate", "dm_given_htn",
                "dm_given_no_htn", "female_rate", "image_size", "min_images_per_patient",
                "max_images_per_patient", "seed", "out_dir"});
    cfg.syn.n_patients = s.value("n_patients", cfg.syn.n_patients);
    cfg.syn.image_signal = s.value("image_signal", cfg.syn.image_signal);
    cfg.syn.age_signal = s.value("age_signal", cfg.syn.age_signal);
    cfg.syn.htn_rate = s.value("htn_rate", cfg.syn.htn_rate);
    cfg.syn.dm_given_htn = s.value("dm_given_htn", cfg.syn.dm_given_htn);
    cfg.syn.dm_given_no_htn = s.value("dm_given_no_htn", cfg.syn.dm_given_no_htn);
    cfg.syn.female_rate = s.value("female_rate", cfg.syn.female_rate);
    cfg.syn.image_size = s.value("image_size", cfg.syn.image_size);
    cfg.syn.min_images_per_patient = s.value("min_images_per_patient", 1);
    cfg.syn.max_images_per_patient = s.value("max_images_per_patient", 2);
    cfg.syn.seed = s.value("seed", 0);
    cfg.synthetic_dir = s.value("out_dir", std::string());
  } else if (data.contains("manifest")) {
    cfg.manifest = data["manifest"];
  } else {
    throw ValidationError("config field data: needs either 'manifest' or 'synthetic'");
  }

  if (j.contains("split")) {
    const json& s = j["split"];
    check_keys(s, "split", {"ratios", "seed"});
    if (s.contains("ratios")) {
      if (!s["ratios"].is_array() || s["ratios"].size() != 3)
        throw ValidationError("config field split.ratios: must be three fractions");
      for (int i = 0; i < 3; ++i) cfg.ratios[static_cast<size_t>(i)] = s["ratios"][i];
      double sum = cfg.ratios[0] + cfg.ratios[1] + cfg.ratios[2];
      if (std::abs(sum - 1.0) > 1e-9)
        throw ValidationError("config field split.ratios: must sum to 1, got " +
                              std::to_string(sum));
    }
    cfg.split_seed = s.value("seed", 0);
  }

  if (j.contains("model")) {
    const json& m = j["model"];
    check_keys(m, "model",
               {"strategy", "head_kind", "encoder", "path", "fundus_model_dir",
                "demographic_model_dir", "intermediate_model_dir"});
    cfg.spec.strategy = fusion::strategy_from_string(m.value("strategy", "intermediate"));
    cfg.spec.head_kind = fusion::head_kind_from_string(m.value("head_kind", "fcnn"));
    cfg.spec.fundus_model_dir = m.value("fundus_model_dir", std::string());
    cfg.spec.demographic_model_dir = m.value("demographic_model_dir", std::string());
    cfg.spec.intermediate_model_dir = m.value("intermediate_model_dir", std::string());
    if (m.contains("encoder")) {
      const json& e = m["encoder"];
      check_keys(e, "model.encoder",
                 {"backbone", "image_size", "fundus_feature_dim", "head_learning_rate",
                  "backbone_learning_rate", "weights_path"});
      auto& ec = cfg.spec.encoder;
      ec.backbone = paths::backbone_from_string(e.value("backbone", "toy-conv"));
      ec.image_size = e.value("image_size", ec.image_size);
      ec.fundus_feature_dim = e.value("fundus_feature_dim", ec.fundus_feature_dim);
      ec.head_learning_rate = e.value("head_learning_rate", ec.head_learning_rate);
      ec.backbone_learning_rate = e.value("backbone_learning_rate", ec.backbone_learning_rate);
      ec.weights_path = e.value("weights_path", std::string());
    }
    if (m.contains("path")) {
      const json& p = m["path"];
      check_keys(p, "model.path",
                 {"demographic_layers", "demographic_standalone_layers",
                  "demographic_feature_dim", "fusion_layers", "hidden_width", "dropout_rate",
                  "leaky_slope"});
      auto& pc = cfg.spec.path;
      pc.demographic_layers = p.value("demographic_layers", pc.demographic_layers);
      pc.demographic_standalone_layers =
          p.value("demographic_standalone_layers", pc.demographic_standalone_layers);
      pc.demographic_feature_dim = p.value("demographic_feature_dim", pc.demographic_feature_dim);
      pc.fusion_layers = p.value("fusion_layers", pc.fusion_layers);
      pc.hidden_width = p.value("hidden_width", pc.hidden_width);
      pc.dropout_rate = p.value("dropout_rate", pc.dropout_rate);
      pc.leaky_slope = p.value("leaky_slope", pc.leaky_slope);
    }
  }

  if (j.contains("preprocess")) {
    const json& p = j["preprocess"];
    check_keys(p, "preprocess", {"image_size", "channel_mean", "channel_std"});
    cfg.preprocess.image_size = p.value("image_size", cfg.preprocess.image_size);
    for (const char* key : {"channel_mean", "channel_std"})
      if (p.contains(key) && (!p[key].is_array() || p[key].size() != 3))
        throw ValidationError(std::string("config field preprocess.") + key +
                              ": must be 3 floats");
    if (p.contains("channel_mean"))
      for (int i = 0; i < 3; ++i) cfg.preprocess.channel_mean[static_cast<size_t>(i)] = p["channel_mean"][i];
    if (p.contains("channel_std"))
      for (int i = 0; i < 3; ++i) cfg.preprocess.channel_std[static_cast<size_t>(i)] = p["channel_std"][i];
  } else {
    cfg.preprocess.image_size = cfg.spec.encoder.image_size;
  }

  if (j.contains("augment")) {
    const json& a = j["augment"];
    check_keys(a, "augment",
               {"max_rotation_degrees", "hflip_probability", "blur_kernel", "blur_probability"});
    auto& ac = cfg.train.augment;
    ac.max_rotation_degrees = a.value("max_rotation_degrees", ac.max_rotation_degrees);
    ac.hflip_probability = a.value("hflip_probability", ac.hflip_probability);
    ac.blur_kernel = a.value("blur_kernel", ac.blur_kernel);
    ac.blur_probability = a.value("blur_probability", ac.blur_probability);
    if (ac.blur_kernel < 1 || ac.blur_kernel % 2 == 0)
      throw ValidationError("config field augment.blur_kernel: must be odd and >= 1");
  }

  if (j.contains("train")) {
    const json& t = j["train"];
    check_keys(t, "train",
               {"batch_size", "epochs", "head_lr", "backbone_lr", "lr_min", "beta1", "beta2",
                "weight_decay", "seed", "selection_metric", "augment_train",
                "augment_validation"});
    auto& tc = cfg.train;
    tc.batch_size = t.value("batch_size", tc.batch_size);
    tc.epochs = t.value("epochs", tc.epochs);
    tc.head_lr = t.value("head_lr", cfg.spec.encoder.head_learning_rate);
    tc.backbone_lr = t.value("backbone_lr", cfg.spec.encoder.backbone_learning_rate);
    tc.lr_min = t.value("lr_min", tc.lr_min);
    tc.beta1 = t.value("beta1", tc.beta1);
    tc.beta2 = t.value("beta2", tc.beta2);
    tc.weight_decay = t.value("weight_decay", tc.weight_decay);
    tc.seed = t.value("seed", 0);
    tc.selection_metric =
        evaluation::metric_from_string(t.value("selection_metric", "auc"));
    tc.augment_train = t.value("augment_train", true);
    tc.augment_validation = t.value("augment_validation", false);
  } else {
    cfg.train.head_lr = cfg.spec.encoder.head_learning_rate;
    cfg.train.backbone_lr = cfg.spec.encoder.backbone_learning_rate;
  }

  if (j.contains("sweep")) {
    cfg.sweep_given = true;
    const json& s = j["sweep"];
    check_keys(s, "sweep", {"head_lrs", "backbone_lrs", "feature_dims", "image_sizes"});
    if (s.contains("head_lrs")) cfg.sweep.head_lrs = s["head_lrs"].get<std::vector<double>>();
    if (s.contains("backbone_lrs"))
      cfg.sweep.backbone_lrs = s["backbone_lrs"].get<std::vector<double>>();
    if (s.contains("feature_dims"))
      cfg.sweep.feature_dims = s["feature_dims"].get<std::vector<int>>();
    if (s.contains("image_sizes"))
      cfg.sweep.image_sizes = s["image_sizes"].get<std::vector<int>>();
    if (cfg.sweep.head_lrs.empty() || cfg.sweep.backbone_lrs.empty())
      throw ValidationError("config field sweep: learning-rate lists must be non-empty");
  }

  if (j.contains("eval")) {
    const json& e = j["eval"];
    check_keys(e, "eval", {"bootstrap_b", "seed", "threshold"});
    cfg.eval.B = e.value("bootstrap_b", 10000L);
    cfg.eval.seed = e.value("seed", 0);
    cfg.eval.threshold = e.value("threshold", 0.5);
    if (cfg.eval.B < 1) throw ValidationError("config field eval.bootstrap_b: must be >= 1");
    if (!(cfg.eval.threshold > 0 && cfg.eval.threshold < 1))
      throw ValidationError("config field eval.threshold: must lie in (0,1)");
  }

  if (j.contains("explain")) {
    const json& e = j["explain"];
    check_keys(e, "explain", {"k", "seed"});
    cfg.explain_k = e.value("k", 4);
    cfg.explain_seed = e.value("seed", 0);
  }

  // materialize the resolved snapshot, defaults included
  json r;
  if (cfg.synthetic)
    r["data"]["synthetic"] = {{"n_patients", cfg.syn.n_patients},
                              {"image_signal", cfg.syn.image_signal},
                              {"age_signal", cfg.syn.age_signal},
                              {"htn_rate", cfg.syn.htn_rate},
                              {"dm_given_htn", cfg.syn.dm_given_htn},
                              {"dm_given_no_htn", cfg.syn.dm_given_no_htn},
                              {"female_rate", cfg.syn.female_rate},
                              {"image_size", cfg.syn.image_size},
                              {"min_images_per_patient", cfg.syn.min_images_per_patient},
                              {"max_images_per_patient", cfg.syn.max_images_per_patient},
                              {"seed", cfg.syn.seed},
                              {"out_dir", cfg.synthetic_dir}};
  else
    r["data"]["manifest"] = cfg.manifest;
  r["split"] = {{"ratios", cfg.ratios}, {"seed", cfg.split_seed}};
  r["model"] = {{"strategy", fusion::to_string(cfg.spec.strategy)},
                {"head_kind", fusion::to_string(cfg.spec.head_kind)},
                {"encoder",
                 {{"backbone", paths::to_string(cfg.spec.encoder.backbone)},
                  {"image_size", cfg.spec.encoder.image_size},
                  {"fundus_feature_dim", cfg.spec.encoder.fundus_feature_dim},
                  {"head_learning_rate", cfg.spec.encoder.head_learning_rate},
                  {"backbone_learning_rate", cfg.spec.encoder.backbone_learning_rate},
                  {"weights_path", cfg.spec.encoder.weights_path}}},
                {"path",
                 {{"demographic_layers", cfg.spec.path.demographic_layers},
                  {"demographic_standalone_layers", cfg.spec.path.demographic_standalone_layers},
                  {"demographic_feature_dim", cfg.spec.path.demographic_feature_dim},
                  {"fusion_layers", cfg.spec.path.fusion_layers},
                  {"hidden_width", cfg.spec.path.hidden_width},
                  {"dropout_rate", cfg.spec.path.dropout_rate},
                  {"leaky_slope", cfg.spec.path.leaky_slope}}},
                {"fundus_model_dir", cfg.spec.fundus_model_dir},
                {"demographic_model_dir", cfg.spec.demographic_model_dir},
                {"intermediate_model_dir", cfg.spec.intermediate_model_dir}};
  r["preprocess"] = {{"image_size", cfg.preprocess.image_size},
                     {"channel_mean", cfg.preprocess.channel_mean},
                     {"channel_std", cfg.preprocess.channel_std}};
  r["augment"] = {{"max_rotation_degrees", cfg.train.augment.max_rotation_degrees},
                  {"hflip_probability", cfg.train.augment.hflip_probability},
                  {"blur_kernel", cfg.train.augment.blur_kernel},
                  {"blur_probability", cfg.train.augment.blur_probability}};
  r["train"] = {{"batch_size", cfg.train.batch_size},
                {"epochs", cfg.train.epochs},
                {"head_lr", cfg.train.head_lr},
                {"backbone_lr", cfg.train.backbone_lr},
                {"lr_min", cfg.train.lr_min},
                {"beta1", cfg.train.beta1},
                {"beta2", cfg.train.beta2},
                {"weight_decay", cfg.train.weight_decay},
                {"seed", cfg.train.seed},
                {"selection_metric", evaluation::to_string(cfg.train.selection_metric)},
                {"augment_train", cfg.train.augment_train},
                {"augment_validation", cfg.train.augment_validation}};
  if (cfg.sweep_given)
    r["sweep"] = {{"head_lrs", cfg.sweep.head_lrs},
                  {"backbone_lrs", cfg.sweep.backbone_lrs},
                  {"feature_dims", cfg.sweep.feature_dims},
                  {"image_sizes", cfg.sweep.image_sizes}};
  r["eval"] = {{"bootstrap_b", cfg.eval.B},
               {"seed", cfg.eval.seed},
               {"threshold", cfg.eval.threshold}};
  r["explain"] = {{"k", cfg.explain_k}, {"seed", cfg.explain_seed}};
  cfg.resolved = std::move(r);
  return cfg;
}

// ---------------------------------------------------------------------------
// Run context: output registration, access auditing, manifest emission.

struct RunContext {
  std::string run_dir;
  std::string command;
  RunConfig cfg;
  json outputs = json::array();
  json access_log = json::array();
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

  std::string out_path(const std::string& name) {
    std::string p = (fs::path(run_dir) / name).string();
    outputs.push_back(p);
    return p;
  }

  void log_access(cohort::Subset subset, const std::string& purpose, size_t n_patients,
                  size_t n_images) {
    if (purpose == "training" && subset == cohort::Subset::test)
      throw RuntimeFailure("audit violation: training phase attempted to read the test split");
    access_log.push_back({{"subset", cohort::to_string(subset)},
                          {"purpose", purpose},
                          {"patients", n_patients},
                          {"images", n_images}});
  }

  void write_manifest() {
    auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                  std::chrono::steady_clock::now() - t0)
                  .count();
    json m{{"command", command},
           {"version", kVersion},
           {"config", cfg.resolved},
           {"outputs", outputs},
           {"access_log", access_log},
           {"wall_clock_ms", ms}};
    write_json_file((fs::path(run_dir) / "run_manifest.json").string(), m);
  }
};

std::vector<cohort::PatientRecord> load_records(RunContext& ctx) {
  if (ctx.cfg.synthetic) {
    std::string dir = ctx.cfg.synthetic_dir.empty()
                          ? (fs::path(ctx.run_dir) / "synthetic").string()
                          : ctx.cfg.synthetic_dir;
    bool have = fs::exists(fs::path(dir) / "manifest.csv");
    if (have) return cohort::load_manifest((fs::path(dir) / "manifest.csv").string());
    return cohort::generate_synthetic_cohort(ctx.cfg.syn, dir);
  }
  return cohort::load_manifest(ctx.cfg.manifest);
}

size_t image_count(const std::vector<cohort::PatientRecord>& recs) {
  size_t n = 0;
  for (const auto& r : recs) n += r.images.size();
  return n;
}

json split_sidecar(const std::vector<cohort::PatientRecord>& records,
                   const cohort::SplitAssignment& split) {
  auto stats_for = [&](cohort::Subset s) {
    long n = 0, htn = 0, htn_dm = 0;
    for (const auto& r : records)
      if (split.subset_of.at(r.patient_id) == s) {
        ++n;
        if (r.hypertension) {
          ++htn;
          if (r.diabetes) ++htn_dm;
        }
      }
    json j{{"patients", n},
           {"htn_prevalence", n ? static_cast<double>(htn) / n : 0.0},
           {"htn_dm_fraction", htn ? static_cast<double>(htn_dm) / htn : 0.0}};
    return j;
  };
  long g_htn = 0, g_htn_dm = 0;
  for (const auto& r : records)
    if (r.hypertension) {
      ++g_htn;
      if (r.diabetes) ++g_htn_dm;
    }
  return json{{"seed", split.seed},
              {"ratios", split.ratios},
              {"global",
               {{"patients", records.size()},
                {"htn_prevalence", static_cast<double>(g_htn) / records.size()},
                {"htn_dm_fraction", g_htn ? static_cast<double>(g_htn_dm) / g_htn : 0.0}}},
              {"train", stats_for(cohort::Subset::train)},
              {"validation", stats_for(cohort::Subset::validation)},
              {"test", stats_for(cohort::Subset::test)},
              {"warnings", split.warnings}};
}

json summary_to_json(const cohort::CohortSummary& s) {
  static const char* htn_names[3] = {"htn_negative", "htn_positive", "all"};
  static const char* gender_names[3] = {"male", "female", "all"};
  json cells;
  for (int hi = 0; hi < 3; ++hi)
    for (int gi = 0; gi < 3; ++gi) {
      const auto& c = s.cell(hi, gi);
      json cj{{"n", c.n},
              {"diabetes_count", c.diabetes_count},
              {"diabetes_pct", c.diabetes_pct}};
      if (c.age_mean) cj["age_mean"] = *c.age_mean;
      if (c.age_std) cj["age_std"] = *c.age_std;
      if (c.age_ci) cj["age_ci"] = {c.age_ci->first, c.age_ci->second};
      cells[std::string(htn_names[hi]) + "." + gender_names[gi]] = cj;
    }
  return json{{"total", s.total}, {"cells", cells}};
}

// ---------------------------------------------------------------------------
// Shared data assembly

struct PreparedData {
  std::vector<cohort::PatientRecord> records;
  cohort::SplitAssignment split;
  fusion::NormalizationStats stats;
};

PreparedData prepare(RunContext& ctx) {
  PreparedData d;
  d.records = load_records(ctx);
  d.split = cohort::stratified_patient_split(d.records, ctx.cfg.ratios, ctx.cfg.split_seed);
  auto train_recs = cohort::subset_records(d.records, d.split, cohort::Subset::train);
  d.stats.preprocess = ctx.cfg.preprocess;
  auto [mean, sd] = fusion::train_age_stats(train_recs);
  d.stats.age_mean = mean;
  d.stats.age_std = sd;
  return d;
}

training::DatasetView make_view(RunContext& ctx, const PreparedData& d, cohort::Subset subset,
                                const fusion::NormalizationStats& stats,
                                const std::string& purpose) {
  auto recs = cohort::subset_records(d.records, d.split, subset);
  ctx.log_access(subset, purpose, recs.size(), image_count(recs));
  return {subset, fusion::build_samples(recs, stats)};
}

// ---------------------------------------------------------------------------
// Commands

int cmd_split(RunContext& ctx) {
  auto records = load_records(ctx);
  auto split = cohort::stratified_patient_split(records, ctx.cfg.ratios, ctx.cfg.split_seed);
  cohort::write_split_csv(ctx.out_path("split.csv"), split);
  write_json_file(ctx.out_path("split.json"), split_sidecar(records, split));
  auto summary = cohort::cohort_summary(records);
  write_json_file(ctx.out_path("cohort_summary.json"), summary_to_json(summary));
  {
    std::ofstream out(ctx.out_path("cohort_summary.txt"));
    out << cohort::summary_table(summary);
  }
  for (const auto& w : split.warnings) std::cerr << "warning: " << w << '\n';
  ctx.write_manifest();
  std::cout << "split written to " << ctx.run_dir << '\n';
  return 0;
}

int cmd_train(RunContext& ctx) {
  ctx.cfg.spec.check();
  ctx.cfg.train.check();
  PreparedData d = prepare(ctx);
  const fusion::FusionSpec& spec = ctx.cfg.spec;
  std::string model_dir = (fs::path(ctx.run_dir) / "model").string();

  if (spec.strategy == fusion::Strategy::late) {
    auto fundus = fusion::NeuralModel::load(spec.fundus_model_dir);
    auto tv = make_view(ctx, d, cohort::Subset::train, fundus->stats(), "training");
    fusion::LateModel model(std::move(fundus), spec.head_kind, spec.path);
    model.fit(tv.samples, ctx.cfg.train.seed);
    model.save(model_dir);
  } else if (spec.strategy == fusion::Strategy::voting) {
    auto inter = fusion::NeuralModel::load(spec.intermediate_model_dir);
    fusion::NormalizationStats stats = inter->stats();
    fusion::VotingModel model(fusion::NeuralModel::load(spec.fundus_model_dir),
                              fusion::NeuralModel::load(spec.demographic_model_dir),
                              std::move(inter), spec.head_kind, spec.path);
    if (spec.head_kind != fusion::HeadKind::soft_vote) {
      auto tv = make_view(ctx, d, cohort::Subset::train, stats, "training");
      model.fit(tv.samples, ctx.cfg.train.seed);
    }
    model.save(model_dir);
  } else {
    fusion::NeuralModel model(spec, ctx.cfg.train.seed);
    model.stats() = d.stats;
    auto tv = make_view(ctx, d, cohort::Subset::train, d.stats, "training");
    auto vv = make_view(ctx, d, cohort::Subset::validation, d.stats, "training");
    std::string ckpt_dir = (fs::path(ctx.run_dir) / "checkpoints").string();
    auto history = training::train(model, tv, vv, ctx.cfg.train, ckpt_dir);
    training::write_history_csv(ctx.out_path("history.csv"), history);
    model.save(model_dir);
    std::cout << "best epoch " << history.best_epoch << " ("
              << evaluation::to_string(ctx.cfg.train.selection_metric) << " = "
              << history.best_metric << ")\n";
  }
  ctx.outputs.push_back(model_dir);
  ctx.write_manifest();
  std::cout << "model saved to " << model_dir << '\n';
  return 0;
}

int cmd_sweep(RunContext& ctx) {
  ctx.cfg.spec.check();
  ctx.cfg.train.check();
  PreparedData d = prepare(ctx);
  auto train_recs = cohort::subset_records(d.records, d.split, cohort::Subset::train);
  auto val_recs = cohort::subset_records(d.records, d.split, cohort::Subset::validation);
  ctx.log_access(cohort::Subset::train, "training", train_recs.size(), image_count(train_recs));
  ctx.log_access(cohort::Subset::validation, "training", val_recs.size(), image_count(val_recs));
  training::TrainConfig cfg = ctx.cfg.train;
  auto result = training::sweep(ctx.cfg.spec, ctx.cfg.sweep, train_recs, val_recs, d.stats, cfg);
  training::write_sweep_csv(ctx.out_path("sweep.csv"), result);
  write_json_file(ctx.out_path("sweep.json"),
                  json{{"best",
                        {{"head_lr", result.best.head_lr},
                         {"backbone_lr", result.best.backbone_lr},
                         {"feature_dim", result.best.feature_dim},
                         {"image_size", result.best.image_size},
                         {"val_metric", result.best.val_metric}}}});
  ctx.write_manifest();
  std::cout << "best cell: head_lr=" << result.best.head_lr
            << " backbone_lr=" << result.best.backbone_lr << " metric=" << result.best.val_metric
            << '\n';
  return 0;
}

json bootstrap_to_json(const evaluation::BootstrapResult& b) {
  json metrics;
  for (const auto& [m, ci] : b.metrics)
    metrics[evaluation::to_string(m)] = {{"point", ci.point}, {"ci_lo", ci.lo}, {"ci_hi", ci.hi}};
  return json{{"metrics", metrics},
              {"B", b.B},
              {"seed", b.seed},
              {"degenerate_redraws", b.degenerate_redraws},
              {"bootstrap_unit",
               "individual images; images of one patient are correlated and this is "
               "not corrected"},
              {"pr_estimator", "step-wise average precision, no interpolation"}};
}

std::string render_metric_table(const std::string& title, const evaluation::BootstrapResult& b) {
  std::ostringstream out;
  out << title << '\n';
  char buf[96];
  for (const auto& [m, ci] : b.metrics) {
    std::snprintf(buf, sizeof(buf), "  %-12s %.3f [%.3f, %.3f]\n",
                  evaluation::to_string(m).c_str(), ci.point, ci.lo, ci.hi);
    out << buf;
  }
  return out.str();
}

void write_curve_csv(const std::string& path, const evaluation::CurveBand& band) {
  std::ofstream out(path);
  out << "series,x,y\n";
  char buf[96];
  auto dump = [&](const char* name, const std::vector<evaluation::CurvePoint>& pts) {
    for (const auto& p : pts) {
      std::snprintf(buf, sizeof(buf), "%s,%.10g,%.10g\n", name, p.x, p.y);
      out << buf;
    }
  };
  dump("median", band.median);
  dump("p2.5", band.lo);
  dump("p97.5", band.hi);
}

// Minimal static plot rendering: curves on a white canvas with axes.
void render_curve_plot(const std::string& path, const evaluation::CurveBand& band) {
  const int size = 420, margin = 30;
  Image canvas(3, size, size);
  std::fill(canvas.data.begin(), canvas.data.end(), 1.0);
  auto px = [&](double v) { return margin + static_cast<int>(v * (size - 2 * margin)); };
  auto set = [&](int x, int y, double r, double g, double b) {
    if (x >= 0 && x < size && y >= 0 && y < size) {
      canvas.at(0, y, x) = r;
      canvas.at(1, y, x) = g;
      canvas.at(2, y, x) = b;
    }
  };
  for (int i = margin; i <= size - margin; ++i) {
    set(i, size - margin, 0, 0, 0);
    set(margin, i, 0, 0, 0);
  }
  auto draw = [&](const std::vector<evaluation::CurvePoint>& pts, double r, double g, double b) {
    for (size_t k = 1; k < pts.size(); ++k) {
      double x0 = px(pts[k - 1].x), y0 = size - px(pts[k - 1].y);
      double x1 = px(pts[k].x), y1 = size - px(pts[k].y);
      int steps = static_cast<int>(std::max(std::abs(x1 - x0), std::abs(y1 - y0))) + 1;
      for (int s = 0; s <= steps; ++s) {
        double t = static_cast<double>(s) / steps;
        set(static_cast<int>(x0 + t * (x1 - x0)), static_cast<int>(y0 + t * (y1 - y0)), r, g, b);
      }
    }
  };
  draw(band.lo, 0.7, 0.7, 0.9);
  draw(band.hi, 0.7, 0.7, 0.9);
  draw(band.median, 0.1, 0.1, 0.6);
  write_ppm(path, canvas);
}

int cmd_eval(RunContext& ctx, const std::string& model_dir) {
  if (!fs::exists(fs::path(model_dir) / "model.json"))
    throw RuntimeFailure("missing prerequisite artifact: model at " + model_dir);
  fusion::AnyModel model = fusion::AnyModel::load(model_dir);
  PreparedData d = prepare(ctx);
  auto tv = make_view(ctx, d, cohort::Subset::test, model.stats(), "evaluation");
  auto preds = evaluation::canonical_order(model.predict_proba(tv.samples));
  evaluation::write_predictions_csv(ctx.out_path("predictions.csv"), preds);

  auto boot = evaluation::bootstrap_ci(preds, evaluation::all_metrics(), ctx.cfg.eval);
  write_json_file(ctx.out_path("metrics.json"), bootstrap_to_json(boot));
  {
    std::ofstream out(ctx.out_path("metrics_table.txt"));
    out << render_metric_table("Test-set metrics (point [95% CI])", boot);
  }
  {
    // per-iteration bootstrap values, box-whisker input
    std::ofstream out(ctx.out_path("bootstrap_samples.csv"));
    out << "iteration,f1,auc\n";
    char buf[80];
    for (size_t i = 0; i < boot.samples.at(evaluation::Metric::f1).size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.10g\n", i,
                    boot.samples.at(evaluation::Metric::f1)[i],
                    boot.samples.at(evaluation::Metric::auc)[i]);
      out << buf;
    }
  }

  auto sub = evaluation::subgroup_eval(preds, evaluation::all_metrics(), ctx.cfg.eval);
  json sj = json::array();
  std::ostringstream stxt;
  for (const auto& g : sub.groups) {
    sj.push_back({{"diabetes", g.flag},
                  {"images", g.n_rows},
                  {"pct", g.pct},
                  {"report", bootstrap_to_json(g.boot)}});
    char head[96];
    std::snprintf(head, sizeof(head), "diabetes=%d  %ld (%.0f%%) images", g.flag, g.n_rows,
                  g.pct);
    stxt << render_metric_table(head, g.boot);
  }
  write_json_file(ctx.out_path("subgroups.json"), json{{"group_field", "diabetes"}, {"groups", sj}});
  {
    std::ofstream out(ctx.out_path("subgroups_table.txt"));
    out << stxt.str();
  }

  auto roc_band = evaluation::curve_band(preds, evaluation::CurveKind::roc, ctx.cfg.eval);
  auto pr_band = evaluation::curve_band(preds, evaluation::CurveKind::pr, ctx.cfg.eval);
  write_curve_csv(ctx.out_path("roc_band.csv"), roc_band);
  write_curve_csv(ctx.out_path("pr_band.csv"), pr_band);
  render_curve_plot(ctx.out_path("roc_band.ppm"), roc_band);
  render_curve_plot(ctx.out_path("pr_band.ppm"), pr_band);

  ctx.write_manifest();
  std::cout << render_metric_table("Test-set metrics (point [95% CI])", boot);
  return 0;
}

int cmd_compare(RunContext& ctx, const std::string& dir_a, const std::string& dir_b) {
  for (const auto& dir : {dir_a, dir_b})
    if (!fs::exists(fs::path(dir) / "model.json"))
      throw RuntimeFailure("missing prerequisite artifact: model at " + dir);
  fusion::AnyModel a = fusion::AnyModel::load(dir_a);
  fusion::AnyModel b = fusion::AnyModel::load(dir_b);
  PreparedData d = prepare(ctx);
  auto tv = make_view(ctx, d, cohort::Subset::test, a.stats(), "evaluation");
  auto preds_a = a.predict_proba(tv.samples);
  auto preds_b = b.predict_proba(tv.samples);
  auto res = evaluation::paired_difference(preds_a, preds_b, evaluation::Metric::f1, ctx.cfg.eval);
  json j{{"metric", evaluation::to_string(res.metric)},
         {"model_a", dir_a},
         {"model_b", dir_b},
         {"mean_difference", res.mean_diff},
         {"ci_lo", res.lo},
         {"ci_hi", res.hi},
         {"significant", res.significant},
         {"B", ctx.cfg.eval.B},
         {"seed", ctx.cfg.eval.seed}};
  write_json_file(ctx.out_path("compare.json"), j);
  {
    std::ofstream out(ctx.out_path("compare_samples.csv"));
    out << "iteration,difference\n";
    char buf[48];
    for (size_t i = 0; i < res.samples.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%zu,%.10g\n", i, res.samples[i]);
      out << buf;
    }
  }
  char line[128];
  std::snprintf(line, sizeof(line), "F1 difference: %.3f [%.3f, %.3f] — %s\n", res.mean_diff,
                res.lo, res.hi, res.significant ? "significant" : "not significant");
  std::cout << line;
  ctx.write_manifest();
  return 0;
}

int cmd_explain(RunContext& ctx, const std::string& model_dir) {
  if (!fs::exists(fs::path(model_dir) / "model.json"))
    throw RuntimeFailure("missing prerequisite artifact: model at " + model_dir);
  fusion::AnyModel any = fusion::AnyModel::load(model_dir);
  fusion::NeuralModel* model = any.neural();
  if (!model)
    throw ValidationError("explain requires a neural system with a fundus path");
  PreparedData d = prepare(ctx);
  auto tv = make_view(ctx, d, cohort::Subset::test, model->stats(), "evaluation");

  std::vector<size_t> positives;
  for (size_t i = 0; i < tv.samples.size(); ++i)
    if (tv.samples[i].label == 1) positives.push_back(i);
  if (positives.empty()) throw RuntimeFailure("no positive-labeled test images to explain");
  Rng rng = make_rng(ctx.cfg.explain_seed);
  std::shuffle(positives.begin(), positives.end(), rng);
  size_t k = std::min(positives.size(), static_cast<size_t>(ctx.cfg.explain_k));

  // raw images for the overlay, re-read and geometry-matched
  for (size_t n = 0; n < k; ++n) {
    const fusion::Sample& s = tv.samples[positives[n]];
    auto map = explain::grad_cam(*model, s);
    explain::write_map_csv(ctx.out_path(s.image_id + "_saliency.csv"), map);
    std::string raw_path;
    for (const auto& rec : d.records)
      for (const auto& img : rec.images)
        if (img.image_id == s.image_id) raw_path = img.path;
    Image base = resize_bilinear(center_crop_square(read_ppm(raw_path)), map.height, map.width);
    write_ppm(ctx.out_path(s.image_id + "_overlay.ppm"), explain::overlay(base, map));
  }
  ctx.write_manifest();
  std::cout << "wrote " << k << " saliency maps to " << ctx.run_dir << '\n';
  return 0;
}

int cmd_report(RunContext& ctx) {
  std::ostringstream out;
  out << "Run report for " << ctx.run_dir << "\n\n";
  for (const char* name : {"metrics_table.txt", "subgroups_table.txt", "cohort_summary.txt"}) {
    fs::path p = fs::path(ctx.run_dir) / name;
    if (fs::exists(p)) {
      std::ifstream in(p);
      out << in.rdbuf() << '\n';
    }
  }
  fs::path cmp = fs::path(ctx.run_dir) / "compare.json";
  if (fs::exists(cmp)) {
    json j = load_json_file(cmp.string());
    out << "Paired difference (" << j["metric"].get<std::string>()
        << "): " << j["mean_difference"].get<double>() << " [" << j["ci_lo"].get<double>() << ", "
        << j["ci_hi"].get<double>() << "] "
        << (j["significant"].get<bool>() ? "significant" : "not significant") << '\n';
  }
  std::ofstream f(ctx.out_path("report.txt"));
  f << out.str();
  std::cout << out.str();
  ctx.write_manifest();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal fundus + demographics hypertension classification"};
  app.require_subcommand(1);

  std::string config_path, run_dir = "run", model_dir, model_a, model_b;
  std::uint64_t seed_override = 0;
  bool seed_given = false;
  int workers = 1;
  app.add_option("--workers", workers, "worker count (reference mode: 1)");

  auto add_common = [&](CLI::App* cmd, bool needs_config = true) {
    auto* opt = cmd->add_option("--config", config_path, "run configuration JSON");
    if (needs_config) opt->required();
    cmd->add_option("--run-dir", run_dir, "output directory");
    cmd->add_option("--seed", seed_override, "override every seed in the config")
        ->each([&](const std::string&) { seed_given = true; });
    cmd->add_option("--workers", workers, "worker count (reference mode: 1)");
  };

  auto* c_split = app.add_subcommand("split", "patient-level stratified split + cohort summary");
  add_common(c_split);
  auto* c_train = app.add_subcommand("train", "train or fit the configured system");
  add_common(c_train);
  auto* c_sweep = app.add_subcommand("sweep", "hyperparameter grid sweep");
  add_common(c_sweep);
  auto* c_eval = app.add_subcommand("eval", "bootstrap evaluation of a trained model");
  add_common(c_eval);
  c_eval->add_option("--model", model_dir, "trained model directory")->required();
  auto* c_compare = app.add_subcommand("compare", "paired bootstrap difference of two models");
  add_common(c_compare);
  c_compare->add_option("--model-a", model_a, "first model directory")->required();
  c_compare->add_option("--model-b", model_b, "second model directory")->required();
  auto* c_explain = app.add_subcommand("explain", "saliency maps for random positive test images");
  add_common(c_explain);
  c_explain->add_option("--model", model_dir, "trained model directory")->required();
  auto* c_report = app.add_subcommand("report", "bundle existing run artifacts into a report");
  add_common(c_report);

  CLI11_PARSE(app, argc, argv);

  try {
    RunContext ctx;
    ctx.run_dir = run_dir;
    fs::create_directories(run_dir);
    ctx.cfg = parse_config(config_path);
    if (seed_given) {
      ctx.cfg.split_seed = seed_override;
      ctx.cfg.train.seed = seed_override;
      ctx.cfg.eval.seed = seed_override;
      ctx.cfg.explain_seed = seed_override;
      ctx.cfg.syn.seed = seed_override;
      ctx.cfg.resolved["split"]["seed"] = seed_override;
      ctx.cfg.resolved["train"]["seed"] = seed_override;
      ctx.cfg.resolved["eval"]["seed"] = seed_override;
      ctx.cfg.resolved["explain"]["seed"] = seed_override;
      if (ctx.cfg.synthetic) ctx.cfg.resolved["data"]["synthetic"]["seed"] = seed_override;
    }

    if (c_split->parsed()) { ctx.command = "split"; return cmd_split(ctx); }
    if (c_train->parsed()) { ctx.command = "train"; return cmd_train(ctx); }
    if (c_sweep->parsed()) { ctx.command = "sweep"; return cmd_sweep(ctx); }
    if (c_eval->parsed()) { ctx.command = "eval"; return cmd_eval(ctx, model_dir); }
    if (c_compare->parsed()) { ctx.command = "compare"; return cmd_compare(ctx, model_a, model_b); }
    if (c_explain->parsed()) { ctx.command = "explain"; return cmd_explain(ctx, model_dir); }
    if (c_report->parsed()) { ctx.command = "report"; return cmd_report(ctx); }
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << '\n';
    return 2;
  }
}
