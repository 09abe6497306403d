#include "retfusion/explain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace retfusion::explain {

SaliencyMap grad_cam(fusion::NeuralModel& model, const fusion::Sample& sample) {
  if (!model.fundus())
    throw ValidationError("grad_cam requires a model with a spatial image encoder");
  std::vector<fusion::Sample> batch{sample};
  nn::Matrix logit = model.forward(batch, false, nullptr);
  nn::Matrix dlogit = nn::Matrix::Ones(logit.rows(), 1);  // positive-class direction
  // parameter grads are a side effect here; only activation grads are used
  for (auto* p : model.parameters()) p->zero_grad();
  model.backward_record_saliency(dlogit);

  const nn::ConvEncoder& enc = model.fundus()->encoder();
  const Image& act = enc.last_activation(0);
  const Image& grad = enc.last_activation_grad(0);

  // channel weights: spatial mean of the gradient
  Image cam(1, act.height, act.width);
  for (int c = 0; c < act.channels; ++c) {
    double w = 0;
    for (int y = 0; y < act.height; ++y)
      for (int x = 0; x < act.width; ++x) w += grad.at(c, y, x);
    w /= static_cast<double>(act.height) * act.width;
    for (int y = 0; y < act.height; ++y)
      for (int x = 0; x < act.width; ++x) cam.at(0, y, x) += w * act.at(c, y, x);
  }
  for (double& v : cam.data) v = std::max(0.0, v);

  Image up = resize_bilinear(cam, sample.image.height, sample.image.width);
  double hi = *std::max_element(up.data.begin(), up.data.end());
  if (hi > 0)
    for (double& v : up.data) v /= hi;

  SaliencyMap map;
  map.height = up.height;
  map.width = up.width;
  map.grid = std::move(up.data);
  map.target_layer = "backbone.conv3";
  map.image_id = sample.image_id;
  return map;
}

Image overlay(const Image& base, const SaliencyMap& map, double alpha) {
  if (base.height != map.height || base.width != map.width)
    throw ValidationError("overlay size mismatch");
  Image out(3, base.height, base.width);
  for (int y = 0; y < base.height; ++y)
    for (int x = 0; x < base.width; ++x) {
      double v = map.at(y, x);
      // blue -> red heat ramp
      double hr = std::clamp(1.5 * v - 0.25, 0.0, 1.0);
      double hg = std::clamp(1.0 - std::abs(2.0 * v - 1.0), 0.0, 1.0) * 0.8;
      double hb = std::clamp(1.25 - 1.5 * v, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) {
        double b = std::clamp(base.channels == 3 ? base.at(c, y, x) : base.at(0, y, x), 0.0, 1.0);
        double h = c == 0 ? hr : c == 1 ? hg : hb;
        out.at(c, y, x) = (1 - alpha) * b + alpha * h;
      }
    }
  return out;
}

void write_map_csv(const std::string& path, const SaliencyMap& map) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write saliency map: " + path);
  char buf[32];
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      std::snprintf(buf, sizeof(buf), "%.10g", map.at(y, x));
      out << buf << (x + 1 < map.width ? "," : "");
    }
    out << '\n';
  }
}

}  // namespace retfusion::explain
