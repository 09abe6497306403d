#pragma once

#include <memory>
#include <string>
#include <vector>

#include "retfusion/common.hpp"
#include "retfusion/image.hpp"
#include "retfusion/nn.hpp"

namespace retfusion::paths {

enum class Backbone { pretrained_retinal_transformer, pretrained_generic, toy_conv };
enum class PathMode { features, logit };

Backbone backbone_from_string(const std::string& s);
std::string to_string(Backbone b);

struct EncoderConfig {
  Backbone backbone = Backbone::toy_conv;
  int image_size = 512;
  // 0 selects backbone-native features (no projection head).
  int fundus_feature_dim = 8;
  double head_learning_rate = 1e-3;
  double backbone_learning_rate = 1e-4;
  std::string weights_path;  // required for pretrained backbones
};

struct PathConfig {
  int demographic_layers = 2;           // joint-fusion variant
  int demographic_standalone_layers = 4;  // late-fusion / unimodal variant
  int demographic_feature_dim = 32;
  int fusion_layers = 4;
  int hidden_width = 64;
  double dropout_rate = 0.2;
  double leaky_slope = 0.01;
};

struct DemographicInput {
  double age_std = 0;
  double gender_code = 0;  // male 0, female 1
};

// Image encoder plus a trainable projection head sized by mode: features mode
// emits fundus_feature_dim values per image, logit mode a single score.
class FundusPath {
 public:
  FundusPath(const EncoderConfig& cfg, PathMode mode, double leaky_slope, Rng& rng);

  nn::Matrix forward(const std::vector<Image>& batch, bool training, Rng* rng);
  void backward(const nn::Matrix& grad_out, bool record_activation_grads = false);
  void collect(std::vector<nn::Parameter*>& out);

  int out_dim() const { return out_dim_; }
  PathMode mode() const { return mode_; }
  nn::ConvEncoder& encoder() { return encoder_; }

 private:
  nn::ConvEncoder encoder_;
  std::unique_ptr<nn::Linear> head_;  // absent in backbone-native mode
  PathMode mode_;
  int out_dim_;
};

// FCNN over (age_std, gender); 2-layer variant emits deep features, the
// standalone variant emits one logit.
class DemographicPath {
 public:
  DemographicPath(const PathConfig& cfg, PathMode mode, Rng& rng);

  nn::Matrix forward(const std::vector<DemographicInput>& batch, bool training, Rng* rng);
  nn::Matrix forward_matrix(const nn::Matrix& x, bool training, Rng* rng);
  nn::Matrix backward(const nn::Matrix& grad_out);
  void collect(std::vector<nn::Parameter*>& out);

  int out_dim() const { return out_dim_; }

 private:
  nn::Mlp net_;
  PathMode mode_;
  int out_dim_;
};

// FCNN mapping a fused feature vector to one logit.
class FusionPath {
 public:
  FusionPath(int input_dim, const PathConfig& cfg, Rng& rng);

  nn::Matrix forward(const nn::Matrix& fused, bool training, Rng* rng);
  nn::Matrix backward(const nn::Matrix& grad_out);
  void collect(std::vector<nn::Parameter*>& out);

  int input_dim() const { return input_dim_; }

 private:
  nn::Mlp net_;
  int input_dim_;
};

nn::Matrix demographic_batch_matrix(const std::vector<DemographicInput>& batch);

}  // namespace retfusion::paths
