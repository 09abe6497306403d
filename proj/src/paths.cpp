#include "retfusion/paths.hpp"

#include <cmath>

namespace retfusion::paths {

Backbone backbone_from_string(const std::string& s) {
  if (s == "pretrained-retinal-transformer") return Backbone::pretrained_retinal_transformer;
  if (s == "pretrained-generic") return Backbone::pretrained_generic;
  if (s == "toy-conv") return Backbone::toy_conv;
  throw ValidationError("unknown backbone: " + s);
}

std::string to_string(Backbone b) {
  switch (b) {
    case Backbone::pretrained_retinal_transformer: return "pretrained-retinal-transformer";
    case Backbone::pretrained_generic: return "pretrained-generic";
    case Backbone::toy_conv: return "toy-conv";
  }
  return "?";
}

FundusPath::FundusPath(const EncoderConfig& cfg, PathMode mode, double leaky_slope, Rng& rng)
    : encoder_(3, leaky_slope, rng), mode_(mode) {
  if (cfg.fundus_feature_dim < 0) throw ValidationError("fundus_feature_dim must be >= 0");
  if (mode == PathMode::logit) {
    out_dim_ = 1;
    head_ = std::make_unique<nn::Linear>(encoder_.embed_dim(), 1, "fundus.head",
                                         nn::ParamGroup::head, rng);
  } else if (cfg.fundus_feature_dim == 0) {
    out_dim_ = encoder_.embed_dim();  // backbone-native, no projection head
  } else {
    out_dim_ = cfg.fundus_feature_dim;
    head_ = std::make_unique<nn::Linear>(encoder_.embed_dim(), out_dim_, "fundus.head",
                                         nn::ParamGroup::head, rng);
  }
  if (cfg.backbone != Backbone::toy_conv) {
    if (cfg.weights_path.empty())
      throw ValidationError("backbone '" + to_string(cfg.backbone) +
                            "' requires a weights file (weights_path)");
    std::vector<nn::Parameter*> params;
    encoder_.collect(params);
    nn::load_parameters_file(cfg.weights_path, params);
  }
}

nn::Matrix FundusPath::forward(const std::vector<Image>& batch, bool training, Rng* rng) {
  nn::Matrix embed = encoder_.forward(batch, training);
  if (!head_) return embed;
  return head_->forward(embed, training, rng);
}

void FundusPath::backward(const nn::Matrix& grad_out, bool record_activation_grads) {
  nn::Matrix g = head_ ? head_->backward(grad_out) : grad_out;
  encoder_.backward(g, record_activation_grads);
}

void FundusPath::collect(std::vector<nn::Parameter*>& out) {
  encoder_.collect(out);
  if (head_) head_->collect(out);
}

namespace {

void add_hidden_block(nn::Mlp& net, int in, int width, const PathConfig& cfg,
                      const std::string& name, int idx, Rng& rng) {
  net.add(std::make_unique<nn::Linear>(in, width, name + std::to_string(idx),
                                       nn::ParamGroup::head, rng));
  net.add(std::make_unique<nn::LeakyReLU>(cfg.leaky_slope));
  if (cfg.dropout_rate > 0) net.add(std::make_unique<nn::Dropout>(cfg.dropout_rate));
}

}  // namespace

DemographicPath::DemographicPath(const PathConfig& cfg, PathMode mode, Rng& rng) : mode_(mode) {
  int layers = mode == PathMode::features ? cfg.demographic_layers
                                          : cfg.demographic_standalone_layers;
  if (layers < 1) throw ValidationError("demographic layer count must be >= 1");
  out_dim_ = mode == PathMode::features ? cfg.demographic_feature_dim : 1;
  if (out_dim_ < 1) throw ValidationError("demographic_feature_dim must be >= 1");
  int in = 2;
  for (int l = 0; l + 1 < layers; ++l) {
    add_hidden_block(net_, in, cfg.hidden_width, cfg, "demographic.fc", l + 1, rng);
    in = cfg.hidden_width;
  }
  net_.add(std::make_unique<nn::Linear>(in, out_dim_, "demographic.out", nn::ParamGroup::head,
                                        rng));
  if (mode == PathMode::features) net_.add(std::make_unique<nn::LeakyReLU>(cfg.leaky_slope));
}

nn::Matrix demographic_batch_matrix(const std::vector<DemographicInput>& batch) {
  nn::Matrix x(static_cast<Eigen::Index>(batch.size()), 2);
  for (size_t i = 0; i < batch.size(); ++i) {
    if (!std::isfinite(batch[i].age_std) || !std::isfinite(batch[i].gender_code))
      throw ValidationError("non-finite demographic input");
    x(static_cast<Eigen::Index>(i), 0) = batch[i].age_std;
    x(static_cast<Eigen::Index>(i), 1) = batch[i].gender_code;
  }
  return x;
}

nn::Matrix DemographicPath::forward(const std::vector<DemographicInput>& batch, bool training,
                                    Rng* rng) {
  return net_.forward(demographic_batch_matrix(batch), training, rng);
}

nn::Matrix DemographicPath::forward_matrix(const nn::Matrix& x, bool training, Rng* rng) {
  return net_.forward(x, training, rng);
}

nn::Matrix DemographicPath::backward(const nn::Matrix& grad_out) { return net_.backward(grad_out); }

void DemographicPath::collect(std::vector<nn::Parameter*>& out) { net_.collect(out); }

FusionPath::FusionPath(int input_dim, const PathConfig& cfg, Rng& rng) : input_dim_(input_dim) {
  if (input_dim < 1) throw ValidationError("fusion input width must be >= 1");
  if (cfg.fusion_layers < 1) throw ValidationError("fusion layer count must be >= 1");
  int in = input_dim;
  for (int l = 0; l + 1 < cfg.fusion_layers; ++l) {
    add_hidden_block(net_, in, cfg.hidden_width, cfg, "fusion.fc", l + 1, rng);
    in = cfg.hidden_width;
  }
  net_.add(std::make_unique<nn::Linear>(in, 1, "fusion.out", nn::ParamGroup::head, rng));
}

nn::Matrix FusionPath::forward(const nn::Matrix& fused, bool training, Rng* rng) {
  if (fused.cols() != input_dim_)
    throw ValidationError("fusion input width mismatch: expected " + std::to_string(input_dim_) +
                          ", got " + std::to_string(fused.cols()));
  return net_.forward(fused, training, rng);
}

nn::Matrix FusionPath::backward(const nn::Matrix& grad_out) { return net_.backward(grad_out); }

void FusionPath::collect(std::vector<nn::Parameter*>& out) { net_.collect(out); }

}  // namespace retfusion::paths
