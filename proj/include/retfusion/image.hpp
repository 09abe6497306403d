#pragma once

#include <string>
#include <vector>

namespace retfusion {

// Planar float image, channel-major: data[c * h * w + y * w + x].
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Image() = default;
  Image(int c, int h, int w) : channels(c), height(h), width(w), data(static_cast<size_t>(c) * h * w, 0.0) {}

  double& at(int c, int y, int x) { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
  size_t size() const { return data.size(); }
};

// Binary PPM (P6, maxval 255). Values clamped to [0, 1] on write and scaled
// to [0, 1] on read.
Image read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Image& img);

Image center_crop_square(const Image& img);
Image resize_bilinear(const Image& img, int out_h, int out_w);

}  // namespace retfusion
