#include "retfusion/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace retfusion::nn {

namespace {

Matrix kaiming_uniform(int rows, int cols, int fan_in, Rng& rng) {
  double bound = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

}  // namespace

Linear::Linear(int in_dim, int out_dim, const std::string& name, ParamGroup group, Rng& rng) {
  weight.name = name + ".weight";
  weight.group = group;
  weight.value = kaiming_uniform(in_dim, out_dim, in_dim, rng);
  weight.zero_grad();
  bias.name = name + ".bias";
  bias.group = group;
  bias.decay = false;
  bias.value = Matrix::Zero(1, out_dim);
  bias.zero_grad();
}

Matrix Linear::forward(const Matrix& x, bool, Rng*) {
  cached_input_ = x;
  return (x * weight.value).rowwise() + bias.value.row(0);
}

Matrix Linear::backward(const Matrix& grad_out) {
  weight.grad += cached_input_.transpose() * grad_out;
  bias.grad += grad_out.colwise().sum();
  return grad_out * weight.value.transpose();
}

void Linear::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

Matrix LeakyReLU::forward(const Matrix& x, bool, Rng*) {
  cached_input_ = x;
  return x.unaryExpr([s = slope_](double v) { return v > 0 ? v : s * v; });
}

Matrix LeakyReLU::backward(const Matrix& grad_out) {
  return grad_out.array() *
         cached_input_.unaryExpr([s = slope_](double v) { return v > 0 ? 1.0 : s; }).array();
}

Matrix Dropout::forward(const Matrix& x, bool training, Rng* rng) {
  active_ = training && rate_ > 0.0 && rng != nullptr;
  if (!active_) return x;
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  mask_.resize(x.rows(), x.cols());
  double keep = 1.0 - rate_;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      mask_(i, j) = dist(*rng) < rate_ ? 0.0 : 1.0 / keep;
  return x.array() * mask_.array();
}

Matrix Dropout::backward(const Matrix& grad_out) {
  if (!active_) return grad_out;
  return grad_out.array() * mask_.array();
}

Matrix Mlp::forward(const Matrix& x, bool training, Rng* rng) {
  Matrix h = x;
  for (auto& l : layers_) h = l->forward(h, training, rng);
  return h;
}

Matrix Mlp::backward(const Matrix& grad_out) {
  Matrix g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

void Mlp::collect(std::vector<Parameter*>& out) {
  for (auto& l : layers_) l->collect(out);
}

ConvLayer::ConvLayer(int in_c, int out_c, int kernel, int stride, int pad,
                     const std::string& name, ParamGroup group, Rng& rng)
    : in_c_(in_c), out_c_(out_c), kernel_(kernel), stride_(stride), pad_(pad) {
  int fan_in = in_c * kernel * kernel;
  weight.name = name + ".weight";
  weight.group = group;
  weight.value = kaiming_uniform(fan_in, out_c, fan_in, rng);
  weight.zero_grad();
  bias.name = name + ".bias";
  bias.group = group;
  bias.decay = false;
  bias.value = Matrix::Zero(1, out_c);
  bias.zero_grad();
}

Image ConvLayer::forward(const Image& in) {
  int oh = out_size(in.height), ow = out_size(in.width);
  int patch = in_c_ * kernel_ * kernel_;
  Matrix cols(static_cast<Eigen::Index>(oh) * ow, patch);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      Eigen::Index row = static_cast<Eigen::Index>(oy) * ow + ox;
      int col = 0;
      for (int c = 0; c < in_c_; ++c)
        for (int ky = 0; ky < kernel_; ++ky)
          for (int kx = 0; kx < kernel_; ++kx, ++col) {
            int iy = oy * stride_ + ky - pad_;
            int ix = ox * stride_ + kx - pad_;
            cols(row, col) = (iy >= 0 && iy < in.height && ix >= 0 && ix < in.width)
                                 ? in.at(c, iy, ix)
                                 : 0.0;
          }
    }
  Matrix out_m = (cols * weight.value).rowwise() + bias.value.row(0);
  Image out(out_c_, oh, ow);
  for (int c = 0; c < out_c_; ++c)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        out.at(c, oy, ox) = out_m(static_cast<Eigen::Index>(oy) * ow + ox, c);
  cols_.push_back(std::move(cols));
  in_shapes_.emplace_back(in.height, in.width);
  return out;
}

Image ConvLayer::backward(const Image& grad_out, int cached) {
  const Matrix& cols = cols_[cached];
  auto [ih, iw] = in_shapes_[cached];
  int oh = grad_out.height, ow = grad_out.width;
  Matrix g(static_cast<Eigen::Index>(oh) * ow, out_c_);
  for (int c = 0; c < out_c_; ++c)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        g(static_cast<Eigen::Index>(oy) * ow + ox, c) = grad_out.at(c, oy, ox);
  weight.grad += cols.transpose() * g;
  bias.grad += g.colwise().sum();
  Matrix dcols = g * weight.value.transpose();  // (oh*ow, in_c*k*k)
  Image din(in_c_, ih, iw);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      Eigen::Index row = static_cast<Eigen::Index>(oy) * ow + ox;
      int col = 0;
      for (int c = 0; c < in_c_; ++c)
        for (int ky = 0; ky < kernel_; ++ky)
          for (int kx = 0; kx < kernel_; ++kx, ++col) {
            int iy = oy * stride_ + ky - pad_;
            int ix = ox * stride_ + kx - pad_;
            if (iy >= 0 && iy < ih && ix >= 0 && ix < iw) din.at(c, iy, ix) += dcols(row, col);
          }
    }
  return din;
}

void ConvLayer::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

ConvEncoder::ConvEncoder(int in_channels, double negative_slope, Rng& rng) : slope_(negative_slope) {
  convs_.emplace_back(in_channels, 8, 3, 2, 1, "backbone.conv1", ParamGroup::backbone, rng);
  convs_.emplace_back(8, 16, 3, 2, 1, "backbone.conv2", ParamGroup::backbone, rng);
  convs_.emplace_back(16, 32, 3, 2, 1, "backbone.conv3", ParamGroup::backbone, rng);
  embed_dim_ = 32;
}

Matrix ConvEncoder::forward(const std::vector<Image>& batch, bool) {
  acts_.assign(convs_.size(), {});
  act_grads_.clear();
  for (auto& c : convs_) c.start_batch();
  Matrix embed(static_cast<Eigen::Index>(batch.size()), embed_dim_);
  for (size_t i = 0; i < batch.size(); ++i) {
    Image h = batch[i];
    for (size_t l = 0; l < convs_.size(); ++l) {
      h = convs_[l].forward(h);
      for (double& v : h.data)
        if (v < 0) v *= slope_;
      acts_[l].push_back(h);
    }
    double inv = 1.0 / (static_cast<double>(h.height) * h.width);
    for (int c = 0; c < h.channels; ++c) {
      double s = 0;
      for (int y = 0; y < h.height; ++y)
        for (int x = 0; x < h.width; ++x) s += h.at(c, y, x);
      embed(static_cast<Eigen::Index>(i), c) = s * inv;
    }
  }
  return embed;
}

void ConvEncoder::backward(const Matrix& grad_embed, bool record_activation_grads) {
  size_t batch = acts_.back().size();
  if (record_activation_grads) act_grads_.resize(batch);
  for (size_t i = 0; i < batch; ++i) {
    const Image& last = acts_.back()[i];
    double inv = 1.0 / (static_cast<double>(last.height) * last.width);
    Image g(last.channels, last.height, last.width);
    for (int c = 0; c < last.channels; ++c)
      for (int y = 0; y < last.height; ++y)
        for (int x = 0; x < last.width; ++x)
          g.at(c, y, x) = grad_embed(static_cast<Eigen::Index>(i), c) * inv;
    if (record_activation_grads) act_grads_[i] = g;
    for (int l = static_cast<int>(convs_.size()) - 1; l >= 0; --l) {
      const Image& act = acts_[l][i];
      for (size_t k = 0; k < g.data.size(); ++k)
        if (act.data[k] < 0) g.data[k] *= slope_;  // act < 0 iff pre-activation < 0
      g = convs_[l].backward(g, static_cast<int>(i));
    }
  }
}

void ConvEncoder::collect(std::vector<Parameter*>& out) {
  for (auto& c : convs_) c.collect(out);
}

AdamW::AdamW(std::vector<Parameter*> params, double beta1, double beta2, double eps,
             double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  for (auto* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void AdamW::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

void AdamW::step(double lr_backbone, double lr_head) {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, t_);
  double bc2 = 1.0 - std::pow(beta2_, t_);
  for (size_t i = 0; i < params_.size(); ++i) {
    Parameter* p = params_[i];
    double lr = p->group == ParamGroup::backbone ? lr_backbone : lr_head;
    if (p->decay && weight_decay_ > 0) p->value *= (1.0 - weight_decay_);
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p->grad;
    v_[i] = beta2_ * v_[i].array() + (1.0 - beta2_) * p->grad.array().square();
    p->value.array() -=
        lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
  }
}

namespace {

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

constexpr std::uint64_t kMagic = 0x52464e4e43503031ULL;  // "RFNNCP01"

}  // namespace

void save_parameters(std::ostream& out, const std::vector<Parameter*>& params) {
  write_u64(out, kMagic);
  write_u64(out, params.size());
  for (const auto* p : params) {
    write_u64(out, p->name.size());
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    write_u64(out, static_cast<std::uint64_t>(p->value.rows()));
    write_u64(out, static_cast<std::uint64_t>(p->value.cols()));
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(sizeof(double) * p->value.size()));
  }
}

void load_parameters(std::istream& in, const std::vector<Parameter*>& params) {
  if (read_u64(in) != kMagic) throw ValidationError("bad checkpoint magic");
  std::uint64_t n = read_u64(in);
  if (n != params.size())
    throw ValidationError("checkpoint parameter count mismatch: file has " + std::to_string(n) +
                          ", model expects " + std::to_string(params.size()));
  for (auto* p : params) {
    std::uint64_t len = read_u64(in);
    std::string name(len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(len));
    auto rows = static_cast<Eigen::Index>(read_u64(in));
    auto cols = static_cast<Eigen::Index>(read_u64(in));
    if (name != p->name || rows != p->value.rows() || cols != p->value.cols())
      throw ValidationError("checkpoint shape mismatch for parameter " + p->name);
    in.read(reinterpret_cast<char*>(p->value.data()),
            static_cast<std::streamsize>(sizeof(double) * p->value.size()));
    if (!in) throw ValidationError("truncated checkpoint");
  }
}

void save_parameters_file(const std::string& path, const std::vector<Parameter*>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write checkpoint: " + path);
  save_parameters(out, params);
}

void load_parameters_file(const std::string& path, const std::vector<Parameter*>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeFailure("checkpoint file missing: " + path);
  load_parameters(in, params);
}

double l2_norm(const std::vector<Parameter*>& params) {
  double s = 0;
  for (const auto* p : params) s += p->value.squaredNorm();
  return std::sqrt(s);
}

}  // namespace retfusion::nn
