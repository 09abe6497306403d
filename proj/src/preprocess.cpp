#include "retfusion/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace retfusion::cohort {

Image preprocess_image(const Image& raw, const PreprocessConfig& cfg) {
  if (raw.channels != 3) throw ValidationError("preprocess_image expects 3 channels");
  if (raw.height < 1 || raw.width < 1) throw ValidationError("zero-area image");
  if (cfg.image_size < 1) throw ValidationError("image_size must be positive");
  for (double s : cfg.channel_std)
    if (!(s > 0)) throw ValidationError("channel_std must be positive");

  Image img = center_crop_square(raw);
  img = resize_bilinear(img, cfg.image_size, cfg.image_size);

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : img.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  double range = hi - lo;
  if (range > 0) {
    for (double& v : img.data) v = (v - lo) / range;
  } else {
    for (double& v : img.data) v = 0.0;
  }
  for (int c = 0; c < 3; ++c) {
    double m = cfg.channel_mean[c], s = cfg.channel_std[c];
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) img.at(c, y, x) = (img.at(c, y, x) - m) / s;
  }
  return img;
}

Image rotate_bilinear(const Image& img, double degrees) {
  double rad = degrees * M_PI / 180.0;
  double cs = std::cos(rad), sn = std::sin(rad);
  double cy = (img.height - 1) / 2.0, cx = (img.width - 1) / 2.0;
  Image out(img.channels, img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      // inverse map: output pixel pulled from rotated source location
      double sx = cs * (x - cx) + sn * (y - cy) + cx;
      double sy = -sn * (x - cx) + cs * (y - cy) + cy;
      int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      double wx = sx - x0, wy = sy - y0;
      for (int c = 0; c < img.channels; ++c) {
        auto sample = [&](int yy, int xx) {
          return (yy >= 0 && yy < img.height && xx >= 0 && xx < img.width) ? img.at(c, yy, xx)
                                                                           : 0.0;
        };
        double top = (1 - wx) * sample(y0, x0) + wx * sample(y0, x0 + 1);
        double bot = (1 - wx) * sample(y0 + 1, x0) + wx * sample(y0 + 1, x0 + 1);
        out.at(c, y, x) = (1 - wy) * top + wy * bot;
      }
    }
  return out;
}

Image hflip(const Image& img) {
  Image out(img.channels, img.height, img.width);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

Image gaussian_blur(const Image& img, int kernel) {
  if (kernel < 1 || kernel % 2 == 0) throw ValidationError("blur kernel must be odd and >= 1");
  if (kernel == 1) return img;
  int half = kernel / 2;
  // sigma convention: 0.3*((k-1)*0.5 - 1) + 0.8, sampled Gaussian, normalized
  double sigma = 0.3 * ((kernel - 1) * 0.5 - 1.0) + 0.8;
  std::vector<double> w(kernel);
  double sum = 0;
  for (int i = 0; i < kernel; ++i) {
    double d = i - half;
    w[i] = std::exp(-d * d / (2 * sigma * sigma));
    sum += w[i];
  }
  for (double& v : w) v /= sum;

  // separable passes with zero padding at the border
  Image tmp(img.channels, img.height, img.width);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double acc = 0;
        for (int k = -half; k <= half; ++k) {
          int xx = x + k;
          if (xx >= 0 && xx < img.width) acc += w[k + half] * img.at(c, y, xx);
        }
        tmp.at(c, y, x) = acc;
      }
  Image out(img.channels, img.height, img.width);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double acc = 0;
        for (int k = -half; k <= half; ++k) {
          int yy = y + k;
          if (yy >= 0 && yy < img.height) acc += w[k + half] * tmp.at(c, yy, x);
        }
        out.at(c, y, x) = acc;
      }
  return out;
}

Image augment_image(const Image& img, const AugmentConfig& cfg, Rng& rng) {
  if (img.height != img.width) throw ValidationError("augment_image expects a square image");
  if (cfg.blur_kernel < 1 || cfg.blur_kernel % 2 == 0)
    throw ValidationError("blur kernel must be odd and >= 1");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Image out = img;
  if (cfg.max_rotation_degrees > 0) {
    double angle = unif(rng) * cfg.max_rotation_degrees;
    out = rotate_bilinear(out, angle);
  }
  if (cfg.hflip_probability > 0 && unif(rng) < cfg.hflip_probability) out = hflip(out);
  if (cfg.blur_probability > 0 && unif(rng) < cfg.blur_probability)
    out = gaussian_blur(out, cfg.blur_kernel);
  return out;
}

double standardize_age(double age, double train_mean, double train_std) {
  if (!(train_std > 0)) throw ValidationError("degenerate training cohort: age std must be > 0");
  return (age - train_mean) / train_std;
}

}  // namespace retfusion::cohort
