#pragma once

#include <array>

#include "retfusion/common.hpp"
#include "retfusion/image.hpp"

namespace retfusion::cohort {

struct PreprocessConfig {
  int image_size = 512;
  // ImageNet channel statistics; overridable in config.
  std::array<double, 3> channel_mean{0.485, 0.456, 0.406};
  std::array<double, 3> channel_std{0.229, 0.224, 0.225};
};

// Center-crop to square, resize, min-max scale to [0, 1] (constant image maps
// to all zeros), then per-channel z-score.
Image preprocess_image(const Image& raw, const PreprocessConfig& cfg);

struct AugmentConfig {
  double max_rotation_degrees = 360.0;
  double hflip_probability = 0.5;
  int blur_kernel = 3;
  double blur_probability = 0.5;
};

// Rotation, then horizontal flip, then Gaussian blur, each driven by rng.
Image augment_image(const Image& img, const AugmentConfig& cfg, Rng& rng);

Image rotate_bilinear(const Image& img, double degrees);
Image hflip(const Image& img);
Image gaussian_blur(const Image& img, int kernel);

double standardize_age(double age, double train_mean, double train_std);

}  // namespace retfusion::cohort
