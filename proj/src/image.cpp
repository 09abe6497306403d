#include "retfusion/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>

#include "retfusion/common.hpp"

namespace retfusion {

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeFailure("cannot open image file: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw ValidationError("unsupported image format (expected P6 ppm): " + path);
  auto skip_ws_comments = [&in]() {
    while (true) {
      int c = in.peek();
      if (c == '#') {
        std::string line;
        std::getline(in, line);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
  };
  int w = 0, h = 0, maxval = 0;
  skip_ws_comments();
  in >> w;
  skip_ws_comments();
  in >> h;
  skip_ws_comments();
  in >> maxval;
  in.get();  // single whitespace before raster
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
    throw ValidationError("bad ppm header in " + path);
  std::vector<std::uint8_t> raw(static_cast<size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw ValidationError("truncated ppm raster in " + path);
  Image img(3, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = raw[(static_cast<size_t>(y) * w + x) * 3 + c] / static_cast<double>(maxval);
  return img;
}

void write_ppm(const std::string& path, const Image& img) {
  if (img.channels != 3) throw ValidationError("write_ppm expects a 3-channel image");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write image file: " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<std::uint8_t> raw(static_cast<size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
        raw[(static_cast<size_t>(y) * img.width + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

Image center_crop_square(const Image& img) {
  int side = std::min(img.height, img.width);
  int y0 = (img.height - side) / 2;
  int x0 = (img.width - side) / 2;
  Image out(img.channels, side, side);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
  return out;
}

Image resize_bilinear(const Image& img, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw ValidationError("resize target must be positive");
  Image out(img.channels, out_h, out_w);
  double sy = static_cast<double>(img.height) / out_h;
  double sx = static_cast<double>(img.width) / out_w;
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < out_h; ++y) {
      double fy = (y + 0.5) * sy - 0.5;
      int y0 = static_cast<int>(std::floor(fy));
      double wy = fy - y0;
      int ya = std::clamp(y0, 0, img.height - 1);
      int yb = std::clamp(y0 + 1, 0, img.height - 1);
      for (int x = 0; x < out_w; ++x) {
        double fx = (x + 0.5) * sx - 0.5;
        int x0 = static_cast<int>(std::floor(fx));
        double wx = fx - x0;
        int xa = std::clamp(x0, 0, img.width - 1);
        int xb = std::clamp(x0 + 1, 0, img.width - 1);
        double top = (1 - wx) * img.at(c, ya, xa) + wx * img.at(c, ya, xb);
        double bot = (1 - wx) * img.at(c, yb, xa) + wx * img.at(c, yb, xb);
        out.at(c, y, x) = (1 - wy) * top + wy * bot;
      }
    }
  return out;
}

}  // namespace retfusion
