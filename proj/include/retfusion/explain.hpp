#pragma once

#include <string>
#include <vector>

#include "retfusion/fusion.hpp"
#include "retfusion/image.hpp"

namespace retfusion::explain {

struct SaliencyMap {
  int height = 0, width = 0;
  std::vector<double> grid;  // row-major, values in [0, 1]
  std::string target_layer;
  std::string image_id;

  double at(int y, int x) const { return grid[static_cast<size_t>(y) * width + x]; }
};

// Gradient-weighted class-activation map over the fundus encoder's last
// spatial block, for the positive-class logit. The rectified weighted
// activation sum is upsampled to the input size and min-max normalized;
// an all-zero map stays all-zero.
SaliencyMap grad_cam(fusion::NeuralModel& model, const fusion::Sample& sample);

// Heat overlay blended onto a [0,1] RGB image.
Image overlay(const Image& base, const SaliencyMap& map, double alpha = 0.45);

void write_map_csv(const std::string& path, const SaliencyMap& map);

}  // namespace retfusion::explain
