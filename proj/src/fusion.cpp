#include "retfusion/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace retfusion::fusion {

Strategy strategy_from_string(const std::string& s) {
  if (s == "intermediate") return Strategy::intermediate;
  if (s == "prediction") return Strategy::prediction;
  if (s == "late") return Strategy::late;
  if (s == "voting") return Strategy::voting;
  if (s == "unimodal_fundus") return Strategy::unimodal_fundus;
  if (s == "unimodal_demographic") return Strategy::unimodal_demographic;
  throw ValidationError("unknown fusion strategy: " + s);
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::intermediate: return "intermediate";
    case Strategy::prediction: return "prediction";
    case Strategy::late: return "late";
    case Strategy::voting: return "voting";
    case Strategy::unimodal_fundus: return "unimodal_fundus";
    case Strategy::unimodal_demographic: return "unimodal_demographic";
  }
  return "?";
}

HeadKind head_kind_from_string(const std::string& s) {
  if (s == "fcnn") return HeadKind::fcnn;
  if (s == "gradient_boosted_trees") return HeadKind::gradient_boosted_trees;
  if (s == "support_vector_machine") return HeadKind::support_vector_machine;
  if (s == "soft_vote") return HeadKind::soft_vote;
  throw ValidationError("unknown head kind: " + s);
}

std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::fcnn: return "fcnn";
    case HeadKind::gradient_boosted_trees: return "gradient_boosted_trees";
    case HeadKind::support_vector_machine: return "support_vector_machine";
    case HeadKind::soft_vote: return "soft_vote";
  }
  return "?";
}

void FusionSpec::check() const {
  if (head_kind == HeadKind::soft_vote && strategy != Strategy::voting)
    throw ValidationError("soft_vote head is only valid with the voting strategy");
  if (strategy == Strategy::late && fundus_model_dir.empty())
    throw ValidationError("late fusion requires a trained fundus model (fundus_model_dir)");
  if (strategy == Strategy::voting &&
      (fundus_model_dir.empty() || demographic_model_dir.empty() ||
       intermediate_model_dir.empty()))
    throw ValidationError(
        "voting fusion requires trained fundus, demographic and intermediate models");
}

namespace {

json encoder_to_json(const paths::EncoderConfig& e) {
  return json{{"backbone", paths::to_string(e.backbone)},
              {"image_size", e.image_size},
              {"fundus_feature_dim", e.fundus_feature_dim},
              {"head_learning_rate", e.head_learning_rate},
              {"backbone_learning_rate", e.backbone_learning_rate},
              {"weights_path", e.weights_path}};
}

paths::EncoderConfig encoder_from_json(const json& j) {
  paths::EncoderConfig e;
  e.backbone = paths::backbone_from_string(j.at("backbone"));
  e.image_size = j.at("image_size");
  e.fundus_feature_dim = j.at("fundus_feature_dim");
  e.head_learning_rate = j.at("head_learning_rate");
  e.backbone_learning_rate = j.at("backbone_learning_rate");
  e.weights_path = j.at("weights_path");
  return e;
}

json path_to_json(const paths::PathConfig& p) {
  return json{{"demographic_layers", p.demographic_layers},
              {"demographic_standalone_layers", p.demographic_standalone_layers},
              {"demographic_feature_dim", p.demographic_feature_dim},
              {"fusion_layers", p.fusion_layers},
              {"hidden_width", p.hidden_width},
              {"dropout_rate", p.dropout_rate},
              {"leaky_slope", p.leaky_slope}};
}

paths::PathConfig path_from_json(const json& j) {
  paths::PathConfig p;
  p.demographic_layers = j.at("demographic_layers");
  p.demographic_standalone_layers = j.at("demographic_standalone_layers");
  p.demographic_feature_dim = j.at("demographic_feature_dim");
  p.fusion_layers = j.at("fusion_layers");
  p.hidden_width = j.at("hidden_width");
  p.dropout_rate = j.at("dropout_rate");
  p.leaky_slope = j.at("leaky_slope");
  return p;
}

json spec_to_json(const FusionSpec& s) {
  return json{{"strategy", to_string(s.strategy)},
              {"head_kind", to_string(s.head_kind)},
              {"encoder", encoder_to_json(s.encoder)},
              {"path", path_to_json(s.path)},
              {"fundus_model_dir", s.fundus_model_dir},
              {"demographic_model_dir", s.demographic_model_dir},
              {"intermediate_model_dir", s.intermediate_model_dir}};
}

FusionSpec spec_from_json(const json& j) {
  FusionSpec s;
  s.strategy = strategy_from_string(j.at("strategy"));
  s.head_kind = head_kind_from_string(j.at("head_kind"));
  s.encoder = encoder_from_json(j.at("encoder"));
  s.path = path_from_json(j.at("path"));
  s.fundus_model_dir = j.at("fundus_model_dir");
  s.demographic_model_dir = j.at("demographic_model_dir");
  s.intermediate_model_dir = j.at("intermediate_model_dir");
  return s;
}

json stats_to_json(const NormalizationStats& st) {
  return json{{"image_size", st.preprocess.image_size},
              {"channel_mean", st.preprocess.channel_mean},
              {"channel_std", st.preprocess.channel_std},
              {"age_mean", st.age_mean},
              {"age_std", st.age_std}};
}

NormalizationStats stats_from_json(const json& j) {
  NormalizationStats st;
  st.preprocess.image_size = j.at("image_size");
  for (int i = 0; i < 3; ++i) {
    st.preprocess.channel_mean[i] = j.at("channel_mean")[i];
    st.preprocess.channel_std[i] = j.at("channel_std")[i];
  }
  st.age_mean = j.at("age_mean");
  st.age_std = j.at("age_std");
  return st;
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("missing file: " + path);
  return json::parse(in);
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write: " + path);
  out << j.dump(2) << '\n';
}

}  // namespace

std::pair<double, double> train_age_stats(const std::vector<cohort::PatientRecord>& train_records) {
  if (train_records.size() < 2)
    throw ValidationError("age standardization needs at least 2 training patients");
  double mean = 0;
  for (const auto& r : train_records) mean += r.age;
  mean /= static_cast<double>(train_records.size());
  double ss = 0;
  for (const auto& r : train_records) ss += (r.age - mean) * (r.age - mean);
  double sd = std::sqrt(ss / static_cast<double>(train_records.size() - 1));
  return {mean, sd};
}

std::vector<Sample> build_samples(const std::vector<cohort::PatientRecord>& records,
                                  const NormalizationStats& stats) {
  std::vector<Sample> out;
  for (const auto& rec : records) {
    double age_std = cohort::standardize_age(rec.age, stats.age_mean, stats.age_std);
    for (const auto& img : rec.images) {
      Sample s;
      s.image_id = img.image_id;
      s.patient_id = rec.patient_id;
      s.image = cohort::preprocess_image(read_ppm(img.path), stats.preprocess);
      s.demo = {age_std, cohort::gender_code(rec.gender)};
      s.label = rec.hypertension ? 1 : 0;
      s.diabetes = rec.diabetes ? 1 : 0;
      out.push_back(std::move(s));
    }
  }
  return out;
}

NeuralModel::NeuralModel(const FusionSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.check();
  Rng rng = make_rng(derive_seed(seed, 0xA55E17));
  switch (spec_.strategy) {
    case Strategy::intermediate: {
      fundus_ = std::make_unique<paths::FundusPath>(spec_.encoder, paths::PathMode::features,
                                                    spec_.path.leaky_slope, rng);
      demo_ = std::make_unique<paths::DemographicPath>(spec_.path, paths::PathMode::features, rng);
      fundus_cols_ = fundus_->out_dim();
      demo_cols_ = demo_->out_dim();
      fusion_ = std::make_unique<paths::FusionPath>(fundus_cols_ + demo_cols_, spec_.path, rng);
      break;
    }
    case Strategy::prediction: {
      fundus_ = std::make_unique<paths::FundusPath>(spec_.encoder, paths::PathMode::logit,
                                                    spec_.path.leaky_slope, rng);
      demo_ = std::make_unique<paths::DemographicPath>(spec_.path, paths::PathMode::logit, rng);
      fundus_cols_ = 1;
      demo_cols_ = 1;
      fusion_ = std::make_unique<paths::FusionPath>(2, spec_.path, rng);
      break;
    }
    case Strategy::unimodal_fundus:
      fundus_ = std::make_unique<paths::FundusPath>(spec_.encoder, paths::PathMode::logit,
                                                    spec_.path.leaky_slope, rng);
      break;
    case Strategy::unimodal_demographic:
      demo_ = std::make_unique<paths::DemographicPath>(spec_.path, paths::PathMode::logit, rng);
      break;
    default:
      throw ValidationError("strategy '" + to_string(spec_.strategy) +
                            "' is not a trainable neural system; assemble it via its wrapper");
  }
}

nn::Matrix NeuralModel::forward(const std::vector<Sample>& batch, bool training, Rng* rng) {
  if (batch.empty()) throw ValidationError("empty batch");
  std::vector<Image> images;
  std::vector<paths::DemographicInput> demos;
  demos.reserve(batch.size());
  for (const auto& s : batch) demos.push_back(s.demo);
  if (fundus_) {
    images.reserve(batch.size());
    for (const auto& s : batch) images.push_back(s.image);
  }
  switch (spec_.strategy) {
    case Strategy::intermediate:
    case Strategy::prediction: {
      nn::Matrix f = fundus_->forward(images, training, rng);
      nn::Matrix d = demo_->forward(demos, training, rng);
      nn::Matrix fused(f.rows(), f.cols() + d.cols());
      fused << f, d;
      return fusion_->forward(fused, training, rng);
    }
    case Strategy::unimodal_fundus:
      return fundus_->forward(images, training, rng);
    case Strategy::unimodal_demographic:
      return demo_->forward(demos, training, rng);
    default:
      throw RuntimeFailure("unreachable");
  }
}

void NeuralModel::backward(const nn::Matrix& grad_logit) {
  switch (spec_.strategy) {
    case Strategy::intermediate:
    case Strategy::prediction: {
      nn::Matrix dfused = fusion_->backward(grad_logit);
      fundus_->backward(dfused.leftCols(fundus_cols_));
      demo_->backward(dfused.rightCols(demo_cols_));
      break;
    }
    case Strategy::unimodal_fundus:
      fundus_->backward(grad_logit);
      break;
    case Strategy::unimodal_demographic:
      demo_->backward(grad_logit);
      break;
    default:
      throw RuntimeFailure("unreachable");
  }
}

void NeuralModel::backward_record_saliency(const nn::Matrix& grad_logit) {
  switch (spec_.strategy) {
    case Strategy::intermediate:
    case Strategy::prediction: {
      nn::Matrix dfused = fusion_->backward(grad_logit);
      fundus_->backward(dfused.leftCols(fundus_cols_), true);
      demo_->backward(dfused.rightCols(demo_cols_));
      break;
    }
    case Strategy::unimodal_fundus:
      fundus_->backward(grad_logit, true);
      break;
    default:
      throw ValidationError("saliency backward requires a fundus path");
  }
}

std::vector<nn::Parameter*> NeuralModel::parameters() {
  std::vector<nn::Parameter*> out;
  if (fundus_) fundus_->collect(out);
  if (demo_) demo_->collect(out);
  if (fusion_) fusion_->collect(out);
  return out;
}

std::vector<nn::Parameter*> NeuralModel::parameters_of(const std::string& block) {
  std::vector<nn::Parameter*> out;
  if (block == "fundus" && fundus_) fundus_->collect(out);
  else if (block == "demographic" && demo_) demo_->collect(out);
  else if (block == "fusion" && fusion_) fusion_->collect(out);
  return out;
}

evaluation::PredictionSet NeuralModel::predict_proba(const std::vector<Sample>& batch) {
  if (!trained_) throw RuntimeFailure("predict_proba on an untrained model");
  nn::Matrix logits = forward(batch, false, nullptr);
  evaluation::PredictionSet preds;
  preds.reserve(batch.size());
  for (size_t i = 0; i < batch.size(); ++i)
    preds.push_back({batch[i].image_id, batch[i].patient_id,
                     sigmoid(logits(static_cast<Eigen::Index>(i), 0)), batch[i].label,
                     batch[i].diabetes});
  return preds;
}

void NeuralModel::save(const std::string& dir) const {
  fs::create_directories(dir);
  json j{{"type", "neural"},
         {"spec", spec_to_json(spec_)},
         {"stats", stats_to_json(stats_)},
         {"trained", trained_}};
  write_json_file((fs::path(dir) / "model.json").string(), j);
  std::vector<nn::Parameter*> params;
  auto* self = const_cast<NeuralModel*>(this);
  params = self->parameters();
  nn::save_parameters_file((fs::path(dir) / "weights.bin").string(), params);
}

std::unique_ptr<NeuralModel> NeuralModel::load(const std::string& dir) {
  json j = load_json_file((fs::path(dir) / "model.json").string());
  if (j.at("type") != "neural")
    throw ValidationError("model at " + dir + " is not a neural system");
  FusionSpec spec = spec_from_json(j.at("spec"));
  // Avoid re-reading backbone weights; the checkpoint below restores them.
  FusionSpec init = spec;
  init.encoder.backbone = paths::Backbone::toy_conv;
  auto model = std::make_unique<NeuralModel>(init, 0);
  model->spec_ = spec;
  model->stats_ = stats_from_json(j.at("stats"));
  model->trained_ = j.at("trained");
  nn::load_parameters_file((fs::path(dir) / "weights.bin").string(), model->parameters());
  return model;
}

// ---------------------------------------------------------------------------
// Tabular heads

namespace {

void check_head_input(const nn::Matrix& x, int input_dim, const char* what) {
  if (x.cols() != input_dim)
    throw ValidationError(std::string(what) + ": expected width " + std::to_string(input_dim) +
                          ", got " + std::to_string(x.cols()));
}

// 4-layer FCNN head trained full-batch with the decoupled-decay optimizer.
class FcnnHead : public TabularHead {
 public:
  FcnnHead(int input_dim, const paths::PathConfig& cfg) : input_dim_(input_dim), cfg_(cfg) {}

  void fit(const nn::Matrix& x, const std::vector<int>& y, std::uint64_t seed) override {
    check_head_input(x, input_dim_, "fcnn head fit");
    Rng rng = make_rng(derive_seed(seed, 0xFC));
    build(rng);
    std::vector<nn::Parameter*> params;
    net_->collect(params);
    nn::AdamW opt(params);
    const int iters = 500;
    const double lr = 1e-2;
    for (int it = 0; it < iters; ++it) {
      opt.zero_grad();
      nn::Matrix z = net_->forward(x, true, &rng);
      nn::Matrix dz(z.rows(), 1);
      for (Eigen::Index i = 0; i < z.rows(); ++i)
        dz(i, 0) = (sigmoid(z(i, 0)) - y[static_cast<size_t>(i)]) / static_cast<double>(z.rows());
      net_->backward(dz);
      opt.step(lr, lr);
    }
    fitted_ = true;
  }

  std::vector<double> predict_proba(const nn::Matrix& x) const override {
    if (!fitted_) throw RuntimeFailure("predict before fit on fcnn head");
    check_head_input(x, input_dim_, "fcnn head predict");
    nn::Matrix z = const_cast<nn::Mlp&>(*net_).forward(x, false, nullptr);
    std::vector<double> p(static_cast<size_t>(z.rows()));
    for (Eigen::Index i = 0; i < z.rows(); ++i) p[static_cast<size_t>(i)] = sigmoid(z(i, 0));
    return p;
  }

  std::string kind() const override { return "fcnn"; }

  void save(const std::string& path) const override {
    std::vector<nn::Parameter*> params;
    const_cast<nn::Mlp&>(*net_).collect(params);
    nn::save_parameters_file(path, params);
  }

  void load_weights(const std::string& path) {
    Rng rng = make_rng(0);
    build(rng);
    std::vector<nn::Parameter*> params;
    net_->collect(params);
    nn::load_parameters_file(path, params);
    fitted_ = true;
  }

 private:
  void build(Rng& rng) {
    net_ = std::make_unique<nn::Mlp>();
    int in = input_dim_;
    for (int l = 0; l + 1 < cfg_.demographic_standalone_layers; ++l) {
      net_->add(std::make_unique<nn::Linear>(in, cfg_.hidden_width,
                                             "head.fc" + std::to_string(l + 1),
                                             nn::ParamGroup::head, rng));
      net_->add(std::make_unique<nn::LeakyReLU>(cfg_.leaky_slope));
      if (cfg_.dropout_rate > 0) net_->add(std::make_unique<nn::Dropout>(cfg_.dropout_rate));
      in = cfg_.hidden_width;
    }
    net_->add(std::make_unique<nn::Linear>(in, 1, "head.out", nn::ParamGroup::head, rng));
  }

  int input_dim_;
  paths::PathConfig cfg_;
  std::unique_ptr<nn::Mlp> net_;
};

// Boosted decision stumps on the logistic loss. Hyperparameters chosen by
// 3-fold cross-validated grid search.
class GbtHead : public TabularHead {
 public:
  explicit GbtHead(int input_dim) : input_dim_(input_dim) {}

  struct Stump {
    int feature = 0;
    double threshold = 0;
    double left = 0, right = 0;  // leaf values, x[f] < threshold goes left
  };

  void fit(const nn::Matrix& x, const std::vector<int>& y, std::uint64_t seed) override {
    check_head_input(x, input_dim_, "gbt head fit");
    const std::vector<int> rounds_grid{50, 150};
    const std::vector<double> lr_grid{0.1, 0.3};
    int best_rounds = rounds_grid.front();
    double best_lr = lr_grid.front(), best_score = -1;
    for (int rounds : rounds_grid)
      for (double lr : lr_grid) {
        double score = cv_score(x, y, rounds, lr, seed);
        if (score > best_score) {
          best_score = score;
          best_rounds = rounds;
          best_lr = lr;
        }
      }
    lr_ = best_lr;
    fit_full(x, y, best_rounds, best_lr);
    fitted_ = true;
  }

  std::vector<double> predict_proba(const nn::Matrix& x) const override {
    if (!fitted_) throw RuntimeFailure("predict before fit on gbt head");
    check_head_input(x, input_dim_, "gbt head predict");
    std::vector<double> p(static_cast<size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) p[static_cast<size_t>(i)] = sigmoid(score(x, i));
    return p;
  }

  std::string kind() const override { return "gradient_boosted_trees"; }

  void save(const std::string& path) const override {
    json j{{"kind", kind()}, {"base", base_}, {"lr", lr_}, {"stumps", json::array()}};
    for (const auto& s : stumps_)
      j["stumps"].push_back({{"feature", s.feature},
                             {"threshold", s.threshold},
                             {"left", s.left},
                             {"right", s.right}});
    write_json_file(path, j);
  }

  void load_state(const json& j) {
    base_ = j.at("base");
    lr_ = j.at("lr");
    stumps_.clear();
    for (const auto& sj : j.at("stumps"))
      stumps_.push_back({sj.at("feature"), sj.at("threshold"), sj.at("left"), sj.at("right")});
    fitted_ = true;
  }

 private:
  double score(const nn::Matrix& x, Eigen::Index i) const {
    double z = base_;
    for (const auto& s : stumps_)
      z += lr_ * (x(i, s.feature) < s.threshold ? s.left : s.right);
    return z;
  }

  void fit_full(const nn::Matrix& x, const std::vector<int>& y, int rounds, double lr) {
    lr_ = lr;
    stumps_.clear();
    auto n = x.rows();
    double pos = std::accumulate(y.begin(), y.end(), 0.0);
    double prior = std::clamp(pos / n, 1e-6, 1.0 - 1e-6);
    base_ = std::log(prior / (1 - prior));
    std::vector<double> z(static_cast<size_t>(n), base_);
    for (int r = 0; r < rounds; ++r) {
      // negative gradient of the logistic loss
      std::vector<double> g(static_cast<size_t>(n));
      for (Eigen::Index i = 0; i < n; ++i)
        g[static_cast<size_t>(i)] = y[static_cast<size_t>(i)] - sigmoid(z[static_cast<size_t>(i)]);
      Stump best;
      double best_err = std::numeric_limits<double>::infinity();
      for (int f = 0; f < input_dim_; ++f) {
        std::vector<double> vals(static_cast<size_t>(n));
        for (Eigen::Index i = 0; i < n; ++i) vals[static_cast<size_t>(i)] = x(i, f);
        std::vector<double> sorted = vals;
        std::sort(sorted.begin(), sorted.end());
        sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
        for (size_t t = 1; t < sorted.size(); ++t) {
          double thr = (sorted[t - 1] + sorted[t]) / 2;
          double sl = 0, sr = 0;
          long nl = 0, nr = 0;
          for (Eigen::Index i = 0; i < n; ++i) {
            if (vals[static_cast<size_t>(i)] < thr) {
              sl += g[static_cast<size_t>(i)];
              ++nl;
            } else {
              sr += g[static_cast<size_t>(i)];
              ++nr;
            }
          }
          double ml = nl ? sl / nl : 0, mr = nr ? sr / nr : 0;
          double err = 0;
          for (Eigen::Index i = 0; i < n; ++i) {
            double fit = vals[static_cast<size_t>(i)] < thr ? ml : mr;
            double d = g[static_cast<size_t>(i)] - fit;
            err += d * d;
          }
          if (err < best_err) {
            best_err = err;
            best = {f, thr, ml, mr};
          }
        }
      }
      stumps_.push_back(best);
      for (Eigen::Index i = 0; i < n; ++i)
        z[static_cast<size_t>(i)] +=
            lr * (x(i, best.feature) < best.threshold ? best.left : best.right);
    }
  }

  double cv_score(const nn::Matrix& x, const std::vector<int>& y, int rounds, double lr,
                  std::uint64_t seed) {
    const int folds = 3;
    auto n = x.rows();
    std::vector<Eigen::Index> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng = make_rng(derive_seed(seed, 0x617));
    std::shuffle(perm.begin(), perm.end(), rng);
    double correct = 0;
    for (int f = 0; f < folds; ++f) {
      std::vector<Eigen::Index> tr, te;
      for (size_t i = 0; i < perm.size(); ++i)
        (static_cast<int>(i % folds) == f ? te : tr).push_back(perm[i]);
      if (tr.empty() || te.empty()) continue;
      nn::Matrix xt(static_cast<Eigen::Index>(tr.size()), x.cols());
      std::vector<int> yt;
      for (size_t i = 0; i < tr.size(); ++i) {
        xt.row(static_cast<Eigen::Index>(i)) = x.row(tr[i]);
        yt.push_back(y[static_cast<size_t>(tr[i])]);
      }
      GbtHead tmp(input_dim_);
      tmp.fit_full(xt, yt, rounds, lr);
      for (Eigen::Index i : te) {
        double p = sigmoid(tmp.score(x, i));
        if ((p >= 0.5 ? 1 : 0) == y[static_cast<size_t>(i)]) correct += 1;
      }
    }
    return correct / static_cast<double>(n);
  }

  int input_dim_;
  double base_ = 0, lr_ = 0.1;
  std::vector<Stump> stumps_;
};

// Linear max-margin classifier (subgradient descent on the hinge loss) with
// sigmoid score-to-probability calibration.
class SvmHead : public TabularHead {
 public:
  explicit SvmHead(int input_dim) : input_dim_(input_dim) {}

  void fit(const nn::Matrix& x, const std::vector<int>& y, std::uint64_t seed) override {
    check_head_input(x, input_dim_, "svm head fit");
    const std::vector<double> c_grid{0.1, 1.0, 10.0};
    double best_c = c_grid.front(), best_score = -1;
    for (double c : c_grid) {
      double score = cv_score(x, y, c, seed);
      if (score > best_score) {
        best_score = score;
        best_c = c;
      }
    }
    c_ = best_c;
    fit_full(x, y, best_c, seed);
    calibrate(x, y);
    fitted_ = true;
  }

  std::vector<double> predict_proba(const nn::Matrix& x) const override {
    if (!fitted_) throw RuntimeFailure("predict before fit on svm head");
    check_head_input(x, input_dim_, "svm head predict");
    std::vector<double> p(static_cast<size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      p[static_cast<size_t>(i)] = sigmoid(platt_a_ * decision(x, i) + platt_b_);
    return p;
  }

  std::string kind() const override { return "support_vector_machine"; }

  void save(const std::string& path) const override {
    json j{{"kind", kind()},
           {"weights", std::vector<double>(w_.begin(), w_.end())},
           {"bias", b_},
           {"c", c_},
           {"platt_a", platt_a_},
           {"platt_b", platt_b_}};
    write_json_file(path, j);
  }

  void load_state(const json& j) {
    w_ = j.at("weights").get<std::vector<double>>();
    b_ = j.at("bias");
    c_ = j.at("c");
    platt_a_ = j.at("platt_a");
    platt_b_ = j.at("platt_b");
    fitted_ = true;
  }

 private:
  double decision(const nn::Matrix& x, Eigen::Index i) const {
    double z = b_;
    for (int f = 0; f < input_dim_; ++f) z += w_[static_cast<size_t>(f)] * x(i, f);
    return z;
  }

  void fit_full(const nn::Matrix& x, const std::vector<int>& y, double c, std::uint64_t seed) {
    w_.assign(static_cast<size_t>(input_dim_), 0.0);
    b_ = 0;
    auto n = x.rows();
    double lambda = 1.0 / (c * static_cast<double>(n));
    Rng rng = make_rng(derive_seed(seed, 0x5f));
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
    const long iters = 20000;
    for (long t = 1; t <= iters; ++t) {
      Eigen::Index i = pick(rng);
      double yi = y[static_cast<size_t>(i)] == 1 ? 1.0 : -1.0;
      double eta = 1.0 / (lambda * static_cast<double>(t));
      double margin = yi * decision(x, i);
      for (int f = 0; f < input_dim_; ++f) w_[static_cast<size_t>(f)] *= (1 - eta * lambda);
      if (margin < 1) {
        for (int f = 0; f < input_dim_; ++f) w_[static_cast<size_t>(f)] += eta * yi * x(i, f);
        b_ += eta * yi * 0.1;
      }
    }
  }

  void calibrate(const nn::Matrix& x, const std::vector<int>& y) {
    // logistic fit of p = sigmoid(a*z + b) on decision values
    platt_a_ = 1;
    platt_b_ = 0;
    auto n = x.rows();
    for (int it = 0; it < 2000; ++it) {
      double ga = 0, gb = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        double z = decision(x, i);
        double e = sigmoid(platt_a_ * z + platt_b_) - y[static_cast<size_t>(i)];
        ga += e * z;
        gb += e;
      }
      platt_a_ -= 0.1 * ga / n;
      platt_b_ -= 0.1 * gb / n;
    }
  }

  double cv_score(const nn::Matrix& x, const std::vector<int>& y, double c, std::uint64_t seed) {
    const int folds = 3;
    auto n = x.rows();
    std::vector<Eigen::Index> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng = make_rng(derive_seed(seed, 0x5e1));
    std::shuffle(perm.begin(), perm.end(), rng);
    double correct = 0;
    for (int f = 0; f < folds; ++f) {
      std::vector<Eigen::Index> tr, te;
      for (size_t i = 0; i < perm.size(); ++i)
        (static_cast<int>(i % folds) == f ? te : tr).push_back(perm[i]);
      if (tr.empty() || te.empty()) continue;
      nn::Matrix xt(static_cast<Eigen::Index>(tr.size()), x.cols());
      std::vector<int> yt;
      for (size_t i = 0; i < tr.size(); ++i) {
        xt.row(static_cast<Eigen::Index>(i)) = x.row(tr[i]);
        yt.push_back(y[static_cast<size_t>(tr[i])]);
      }
      SvmHead tmp(input_dim_);
      tmp.fit_full(xt, yt, c, seed);
      for (Eigen::Index i : te) {
        if ((tmp.decision(x, i) >= 0 ? 1 : 0) == y[static_cast<size_t>(i)]) correct += 1;
      }
    }
    return correct / static_cast<double>(n);
  }

  int input_dim_;
  std::vector<double> w_;
  double b_ = 0, c_ = 1, platt_a_ = 1, platt_b_ = 0;
};

}  // namespace

std::unique_ptr<TabularHead> make_tabular_head(HeadKind kind, int input_dim,
                                               const paths::PathConfig& cfg) {
  switch (kind) {
    case HeadKind::fcnn: return std::make_unique<FcnnHead>(input_dim, cfg);
    case HeadKind::gradient_boosted_trees: return std::make_unique<GbtHead>(input_dim);
    case HeadKind::support_vector_machine: return std::make_unique<SvmHead>(input_dim);
    case HeadKind::soft_vote:
      throw ValidationError("soft_vote is not a fitted head");
  }
  throw ValidationError("bad head kind");
}

std::unique_ptr<TabularHead> load_tabular_head(const std::string& path,
                                               const paths::PathConfig& cfg) {
  if (path.ends_with(".bin")) {
    auto head = std::make_unique<FcnnHead>(3, cfg);
    head->load_weights(path);
    return head;
  }
  json j = load_json_file(path);
  std::string kind = j.at("kind");
  if (kind == "gradient_boosted_trees") {
    auto head = std::make_unique<GbtHead>(3);
    head->load_state(j);
    return head;
  }
  if (kind == "support_vector_machine") {
    auto head = std::make_unique<SvmHead>(3);
    head->load_state(j);
    return head;
  }
  throw ValidationError("unknown head state at " + path);
}

// ---------------------------------------------------------------------------
// Late fusion

LateModel::LateModel(std::unique_ptr<NeuralModel> trained_fundus, HeadKind head_kind,
                     const paths::PathConfig& cfg)
    : fundus_(std::move(trained_fundus)), head_kind_(head_kind) {
  if (!fundus_ || !fundus_->trained())
    throw ValidationError("late fusion requires a trained fundus model");
  if (fundus_->spec().strategy != Strategy::unimodal_fundus)
    throw ValidationError("late fusion prerequisite must be a unimodal fundus model");
  if (head_kind == HeadKind::soft_vote)
    throw ValidationError("soft_vote head is only valid with the voting strategy");
  head_ = make_tabular_head(head_kind, 3, cfg);
}

nn::Matrix LateModel::features(const std::vector<Sample>& batch) {
  nn::Matrix logits = fundus_->forward(batch, false, nullptr);
  nn::Matrix x(logits.rows(), 3);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    x(i, 0) = logits(i, 0);
    x(i, 1) = batch[static_cast<size_t>(i)].demo.age_std;
    x(i, 2) = batch[static_cast<size_t>(i)].demo.gender_code;
  }
  return x;
}

void LateModel::fit(const std::vector<Sample>& train_data, std::uint64_t seed) {
  nn::Matrix x = features(train_data);
  std::vector<int> y;
  y.reserve(train_data.size());
  for (const auto& s : train_data) y.push_back(s.label);
  head_->fit(x, y, seed);
}

evaluation::PredictionSet LateModel::predict_proba(const std::vector<Sample>& batch) {
  if (!head_->fitted()) throw RuntimeFailure("late fusion head not fitted");
  std::vector<double> p = head_->predict_proba(features(batch));
  evaluation::PredictionSet preds;
  for (size_t i = 0; i < batch.size(); ++i)
    preds.push_back({batch[i].image_id, batch[i].patient_id, p[i], batch[i].label,
                     batch[i].diabetes});
  return preds;
}

void LateModel::save(const std::string& dir) const {
  fs::create_directories(dir);
  fundus_->save((fs::path(dir) / "fundus").string());
  std::string head_file = head_kind_ == HeadKind::fcnn ? "head.bin" : "head.json";
  head_->save((fs::path(dir) / head_file).string());
  json j{{"type", "late"},
         {"head_kind", to_string(head_kind_)},
         {"path", path_to_json(fundus_->spec().path)},
         {"head_file", head_file}};
  write_json_file((fs::path(dir) / "model.json").string(), j);
}

std::unique_ptr<LateModel> LateModel::load(const std::string& dir, const FusionSpec&) {
  json j = load_json_file((fs::path(dir) / "model.json").string());
  auto fundus = NeuralModel::load((fs::path(dir) / "fundus").string());
  paths::PathConfig cfg = path_from_json(j.at("path"));
  auto model = std::make_unique<LateModel>(std::move(fundus),
                                           head_kind_from_string(j.at("head_kind")), cfg);
  model->head_ = load_tabular_head((fs::path(dir) / j.at("head_file").get<std::string>()).string(),
                                   cfg);
  return model;
}

// ---------------------------------------------------------------------------
// Voting fusion

double soft_vote(double p_fundus, double p_demographic, double p_intermediate) {
  return (p_fundus + p_demographic + p_intermediate) / 3.0;
}

VotingModel::VotingModel(std::unique_ptr<NeuralModel> fundus,
                         std::unique_ptr<NeuralModel> demographic,
                         std::unique_ptr<NeuralModel> intermediate, HeadKind head_kind,
                         const paths::PathConfig& cfg)
    : fundus_(std::move(fundus)), demographic_(std::move(demographic)),
      intermediate_(std::move(intermediate)), head_kind_(head_kind) {
  if (!fundus_ || !fundus_->trained() || !demographic_ || !demographic_->trained() ||
      !intermediate_ || !intermediate_->trained())
    throw ValidationError("voting fusion requires three trained prerequisite models");
  if (head_kind != HeadKind::soft_vote) head_ = make_tabular_head(head_kind, 3, cfg);
}

nn::Matrix VotingModel::logit_triple(const std::vector<Sample>& batch) {
  nn::Matrix f = fundus_->forward(batch, false, nullptr);
  nn::Matrix d = demographic_->forward(batch, false, nullptr);
  nn::Matrix m = intermediate_->forward(batch, false, nullptr);
  nn::Matrix x(f.rows(), 3);
  x << f, d, m;
  return x;
}

void VotingModel::fit(const std::vector<Sample>& train_data, std::uint64_t seed) {
  if (head_kind_ == HeadKind::soft_vote) return;
  nn::Matrix x = logit_triple(train_data);
  std::vector<int> y;
  for (const auto& s : train_data) y.push_back(s.label);
  head_->fit(x, y, seed);
}

evaluation::PredictionSet VotingModel::predict_proba(const std::vector<Sample>& batch) {
  nn::Matrix x = logit_triple(batch);
  evaluation::PredictionSet preds;
  if (head_kind_ == HeadKind::soft_vote) {
    for (size_t i = 0; i < batch.size(); ++i) {
      auto ii = static_cast<Eigen::Index>(i);
      double p = soft_vote(sigmoid(x(ii, 0)), sigmoid(x(ii, 1)), sigmoid(x(ii, 2)));
      preds.push_back({batch[i].image_id, batch[i].patient_id, p, batch[i].label,
                       batch[i].diabetes});
    }
    return preds;
  }
  if (!head_->fitted()) throw RuntimeFailure("voting head not fitted");
  std::vector<double> p = head_->predict_proba(x);
  for (size_t i = 0; i < batch.size(); ++i)
    preds.push_back({batch[i].image_id, batch[i].patient_id, p[i], batch[i].label,
                     batch[i].diabetes});
  return preds;
}

void VotingModel::save(const std::string& dir) const {
  fs::create_directories(dir);
  fundus_->save((fs::path(dir) / "fundus").string());
  demographic_->save((fs::path(dir) / "demographic").string());
  intermediate_->save((fs::path(dir) / "intermediate").string());
  json j{{"type", "voting"},
         {"head_kind", to_string(head_kind_)},
         {"path", path_to_json(intermediate_->spec().path)}};
  if (head_) {
    std::string head_file = head_kind_ == HeadKind::fcnn ? "head.bin" : "head.json";
    head_->save((fs::path(dir) / head_file).string());
    j["head_file"] = head_file;
  }
  write_json_file((fs::path(dir) / "model.json").string(), j);
}

std::unique_ptr<VotingModel> VotingModel::load(const std::string& dir, const FusionSpec&) {
  json j = load_json_file((fs::path(dir) / "model.json").string());
  paths::PathConfig cfg = path_from_json(j.at("path"));
  HeadKind kind = head_kind_from_string(j.at("head_kind"));
  auto model = std::make_unique<VotingModel>(
      NeuralModel::load((fs::path(dir) / "fundus").string()),
      NeuralModel::load((fs::path(dir) / "demographic").string()),
      NeuralModel::load((fs::path(dir) / "intermediate").string()), kind, cfg);
  if (kind != HeadKind::soft_vote)
    model->head_ = load_tabular_head(
        (fs::path(dir) / j.at("head_file").get<std::string>()).string(), cfg);
  return model;
}

// ---------------------------------------------------------------------------

evaluation::PredictionSet AnyModel::predict_proba(const std::vector<Sample>& batch) {
  if (neural_) return neural_->predict_proba(batch);
  if (late_) return late_->predict_proba(batch);
  return voting_->predict_proba(batch);
}

const NormalizationStats& AnyModel::stats() const {
  if (neural_) return neural_->stats();
  if (late_) return const_cast<LateModel&>(*late_).fundus_model().stats();
  return const_cast<VotingModel&>(*voting_).stats_proxy();
}

AnyModel AnyModel::load(const std::string& dir) {
  json j = load_json_file((fs::path(dir) / "model.json").string());
  std::string type = j.at("type");
  FusionSpec dummy;
  if (type == "neural") return AnyModel(NeuralModel::load(dir));
  if (type == "late") return AnyModel(LateModel::load(dir, dummy));
  if (type == "voting") return AnyModel(VotingModel::load(dir, dummy));
  throw ValidationError("unknown model type '" + type + "' at " + dir);
}

}  // namespace retfusion::fusion
