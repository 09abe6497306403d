#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "retfusion/cohort.hpp"
#include "retfusion/evaluation.hpp"
#include "retfusion/nn.hpp"
#include "retfusion/paths.hpp"
#include "retfusion/preprocess.hpp"

namespace retfusion::fusion {

enum class Strategy { intermediate, prediction, late, voting, unimodal_fundus, unimodal_demographic };
enum class HeadKind { fcnn, gradient_boosted_trees, support_vector_machine, soft_vote };

Strategy strategy_from_string(const std::string& s);
std::string to_string(Strategy s);
HeadKind head_kind_from_string(const std::string& s);
std::string to_string(HeadKind k);

struct FusionSpec {
  Strategy strategy = Strategy::intermediate;
  HeadKind head_kind = HeadKind::fcnn;  // late / voting only
  paths::EncoderConfig encoder;
  paths::PathConfig path;
  // prerequisite trained-model directories
  std::string fundus_model_dir;        // late, voting
  std::string demographic_model_dir;   // voting
  std::string intermediate_model_dir;  // voting

  void check() const;
};

inline double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

// One image observation ready for a model: preprocessed pixels + demographics.
struct Sample {
  std::string image_id;
  std::string patient_id;
  Image image;
  paths::DemographicInput demo;
  int label = 0;
  int diabetes = 0;
};

// Training statistics every model carries for inference-time preprocessing.
struct NormalizationStats {
  cohort::PreprocessConfig preprocess;
  double age_mean = 0;
  double age_std = 1;
};

// Loads, preprocesses and age-standardizes every image observation of the
// given records.
std::vector<Sample> build_samples(const std::vector<cohort::PatientRecord>& records,
                                  const NormalizationStats& stats);

// Age mean/std computed on the training subset only.
std::pair<double, double> train_age_stats(const std::vector<cohort::PatientRecord>& train_records);

// The four trainable neural systems: intermediate, prediction and the two
// unimodal baselines. Late and voting systems wrap trained instances of
// these, see LateModel / VotingModel.
class NeuralModel {
 public:
  NeuralModel(const FusionSpec& spec, std::uint64_t seed);

  // Returns one logit per sample (batch x 1); caches intermediates when
  // training for the subsequent backward call.
  nn::Matrix forward(const std::vector<Sample>& batch, bool training, Rng* rng);
  void backward(const nn::Matrix& grad_logit);
  // backward variant that records encoder activation gradients for saliency
  void backward_record_saliency(const nn::Matrix& grad_logit);
  std::vector<nn::Parameter*> parameters();
  std::vector<nn::Parameter*> parameters_of(const std::string& block);  // fundus|demographic|fusion

  evaluation::PredictionSet predict_proba(const std::vector<Sample>& batch);

  const FusionSpec& spec() const { return spec_; }
  NormalizationStats& stats() { return stats_; }
  const NormalizationStats& stats() const { return stats_; }
  paths::FundusPath* fundus() { return fundus_ ? fundus_.get() : nullptr; }
  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }

  void save(const std::string& dir) const;
  static std::unique_ptr<NeuralModel> load(const std::string& dir);

 private:
  FusionSpec spec_;
  NormalizationStats stats_;
  std::unique_ptr<paths::FundusPath> fundus_;
  std::unique_ptr<paths::DemographicPath> demo_;
  std::unique_ptr<paths::FusionPath> fusion_;
  int fundus_cols_ = 0, demo_cols_ = 0;
  bool trained_ = false;
};

// Classifier head over a small fixed-width tabular input. Probabilities are
// calibrated into [0, 1].
class TabularHead {
 public:
  virtual ~TabularHead() = default;
  virtual void fit(const nn::Matrix& x, const std::vector<int>& y, std::uint64_t seed) = 0;
  virtual std::vector<double> predict_proba(const nn::Matrix& x) const = 0;
  virtual std::string kind() const = 0;
  virtual void save(const std::string& path) const = 0;
  bool fitted() const { return fitted_; }

 protected:
  bool fitted_ = false;
};

std::unique_ptr<TabularHead> make_tabular_head(HeadKind kind, int input_dim,
                                               const paths::PathConfig& cfg);
std::unique_ptr<TabularHead> load_tabular_head(const std::string& path,
                                               const paths::PathConfig& cfg);

// Frozen fundus logit + standardized age + gender code -> fitted head.
class LateModel {
 public:
  LateModel(std::unique_ptr<NeuralModel> trained_fundus, HeadKind head_kind,
            const paths::PathConfig& cfg);

  void fit(const std::vector<Sample>& train_data, std::uint64_t seed);
  evaluation::PredictionSet predict_proba(const std::vector<Sample>& batch);

  NeuralModel& fundus_model() { return *fundus_; }
  TabularHead& head() { return *head_; }

  void save(const std::string& dir) const;
  static std::unique_ptr<LateModel> load(const std::string& dir, const FusionSpec& spec);

 private:
  nn::Matrix features(const std::vector<Sample>& batch);
  std::unique_ptr<NeuralModel> fundus_;
  std::unique_ptr<TabularHead> head_;
  HeadKind head_kind_;
};

// Three trained systems voting: soft probability averaging or a fitted head
// on the concatenated logit triple.
class VotingModel {
 public:
  VotingModel(std::unique_ptr<NeuralModel> fundus, std::unique_ptr<NeuralModel> demographic,
              std::unique_ptr<NeuralModel> intermediate, HeadKind head_kind,
              const paths::PathConfig& cfg);

  void fit(const std::vector<Sample>& train_data, std::uint64_t seed);  // no-op for soft_vote
  evaluation::PredictionSet predict_proba(const std::vector<Sample>& batch);
  NormalizationStats& stats_proxy() { return intermediate_->stats(); }
  NeuralModel& fundus_model() { return *fundus_; }
  NeuralModel& demographic_model() { return *demographic_; }
  NeuralModel& intermediate_model() { return *intermediate_; }

  void save(const std::string& dir) const;
  static std::unique_ptr<VotingModel> load(const std::string& dir, const FusionSpec& spec);

 private:
  nn::Matrix logit_triple(const std::vector<Sample>& batch);
  std::unique_ptr<NeuralModel> fundus_, demographic_, intermediate_;
  std::unique_ptr<TabularHead> head_;  // null for soft_vote
  HeadKind head_kind_;
};

// Exact arithmetic mean of the three sigmoid probabilities.
double soft_vote(double p_fundus, double p_demographic, double p_intermediate);

// Uniform prediction surface over all six assembled systems.
class AnyModel {
 public:
  explicit AnyModel(std::unique_ptr<NeuralModel> m) : neural_(std::move(m)) {}
  explicit AnyModel(std::unique_ptr<LateModel> m) : late_(std::move(m)) {}
  explicit AnyModel(std::unique_ptr<VotingModel> m) : voting_(std::move(m)) {}

  evaluation::PredictionSet predict_proba(const std::vector<Sample>& batch);
  const NormalizationStats& stats() const;
  static AnyModel load(const std::string& dir);

  NeuralModel* neural() { return neural_.get(); }
  LateModel* late() { return late_.get(); }
  VotingModel* voting() { return voting_.get(); }

 private:
  std::unique_ptr<NeuralModel> neural_;
  std::unique_ptr<LateModel> late_;
  std::unique_ptr<VotingModel> voting_;
};

}  // namespace retfusion::fusion
