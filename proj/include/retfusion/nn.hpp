#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "retfusion/common.hpp"
#include "retfusion/image.hpp"

namespace retfusion::nn {

using Matrix = Eigen::MatrixXd;  // rows = batch items

// Two learning-rate groups: pretrained backbone vs newly initialized layers.
enum class ParamGroup { backbone, head };

struct Parameter {
  std::string name;
  ParamGroup group = ParamGroup::head;
  bool decay = true;  // weight decay skips biases
  Matrix value;
  Matrix grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Module {
 public:
  virtual ~Module() = default;
  // rng may be null in evaluation mode.
  virtual Matrix forward(const Matrix& x, bool training, Rng* rng) = 0;
  virtual Matrix backward(const Matrix& grad_out) = 0;
  virtual void collect(std::vector<Parameter*>&) {}
};

class Linear : public Module {
 public:
  Linear(int in_dim, int out_dim, const std::string& name, ParamGroup group, Rng& rng);

  Matrix forward(const Matrix& x, bool training, Rng* rng) override;
  Matrix backward(const Matrix& grad_out) override;
  void collect(std::vector<Parameter*>& out) override;

  Parameter weight;  // (in, out)
  Parameter bias;    // (1, out)

 private:
  Matrix cached_input_;
};

class LeakyReLU : public Module {
 public:
  explicit LeakyReLU(double negative_slope = 0.01) : slope_(negative_slope) {}
  Matrix forward(const Matrix& x, bool training, Rng* rng) override;
  Matrix backward(const Matrix& grad_out) override;

 private:
  double slope_;
  Matrix cached_input_;
};

class Dropout : public Module {
 public:
  explicit Dropout(double rate) : rate_(rate) {}
  Matrix forward(const Matrix& x, bool training, Rng* rng) override;
  Matrix backward(const Matrix& grad_out) override;

 private:
  double rate_;
  Matrix mask_;
  bool active_ = false;
};

// Plain feed-forward stack.
class Mlp : public Module {
 public:
  void add(std::unique_ptr<Module> m) { layers_.push_back(std::move(m)); }
  Matrix forward(const Matrix& x, bool training, Rng* rng) override;
  Matrix backward(const Matrix& grad_out) override;
  void collect(std::vector<Parameter*>& out) override;

 private:
  std::vector<std::unique_ptr<Module>> layers_;
};

// Strided 2-d convolution over planar images, im2col + GEMM.
class ConvLayer {
 public:
  ConvLayer(int in_c, int out_c, int kernel, int stride, int pad,
            const std::string& name, ParamGroup group, Rng& rng);

  Image forward(const Image& in);
  // grad w.r.t. this layer's output -> grad w.r.t. its input; accumulates
  // parameter grads. `cached` indexes the forward call within the batch.
  Image backward(const Image& grad_out, int cached);
  void start_batch() { cols_.clear(); in_shapes_.clear(); }
  void collect(std::vector<Parameter*>& out);

  int out_channels() const { return out_c_; }
  int out_size(int in_size) const { return (in_size + 2 * pad_ - kernel_) / stride_ + 1; }

  Parameter weight;  // (in_c*k*k, out_c)
  Parameter bias;    // (1, out_c)

 private:
  int in_c_, out_c_, kernel_, stride_, pad_;
  std::vector<Matrix> cols_;  // cached im2col per batch item
  std::vector<std::pair<int, int>> in_shapes_;
};

// Three strided conv blocks with leaky activations, global average pool.
// Stands in for a pretrained image backbone at desk scale; also the
// architecture loaded from checkpoint files for "pretrained" configs.
class ConvEncoder {
 public:
  ConvEncoder(int in_channels, double negative_slope, Rng& rng);

  // Returns (batch, embed_dim) embeddings; caches intermediates for backward.
  Matrix forward(const std::vector<Image>& batch, bool training);
  // grad_embed: (batch, embed_dim). When record_activation_grads is set the
  // gradient at the last block's activations is stored for saliency use.
  void backward(const Matrix& grad_embed, bool record_activation_grads = false);

  int embed_dim() const { return embed_dim_; }
  void collect(std::vector<Parameter*>& out);

  // Last conv block activations / their gradients for one batch item.
  const Image& last_activation(int item) const { return acts_.back()[item]; }
  const Image& last_activation_grad(int item) const { return act_grads_[item]; }

 private:
  std::vector<ConvLayer> convs_;
  double slope_;
  int embed_dim_;
  std::vector<std::vector<Image>> acts_;  // per layer, post-activation, per item
  std::vector<Image> act_grads_;
};

// Decoupled-weight-decay adaptive optimizer. The decay multiplier is applied
// independently of the learning rate, so decay shrinks weights even at lr 0.
class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8, double weight_decay = 1e-4);

  void zero_grad();
  void step(double lr_backbone, double lr_head);

  const std::vector<Parameter*>& params() const { return params_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Matrix> m_, v_;
  double beta1_, beta2_, eps_, weight_decay_;
  long t_ = 0;
};

// Named-tensor binary checkpoint format.
void save_parameters(std::ostream& out, const std::vector<Parameter*>& params);
void load_parameters(std::istream& in, const std::vector<Parameter*>& params);
void save_parameters_file(const std::string& path, const std::vector<Parameter*>& params);
void load_parameters_file(const std::string& path, const std::vector<Parameter*>& params);

double l2_norm(const std::vector<Parameter*>& params);

}  // namespace retfusion::nn
