#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xdet/core/tensor.hpp"

namespace xdet {

// Interleaved 8-bit RGB raster.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> rgb;  // height*width*3

  bool empty() const { return rgb.empty(); }
  uint8_t& at(int y, int x, int c) { return rgb[static_cast<size_t>((y * width + x) * 3 + c)]; }
  uint8_t at(int y, int x, int c) const {
    return rgb[static_cast<size_t>((y * width + x) * 3 + c)];
  }
  static Image filled(int w, int h, uint8_t r, uint8_t g, uint8_t b);
};

// PNG (8-bit RGB, non-interlaced) and binary PPM. write_image dispatches on
// the file extension; read_image sniffs the magic bytes.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);
void write_image(const std::string& path, const Image& img);
Image read_image(const std::string& path);

Image resize_bilinear(const Image& src, int out_w, int out_h);

// (3,H,W) float tensor in [0,1].
template <typename T>
Tensor<T> image_to_tensor(const Image& img) {
  Tensor<T> t(Shape{3, img.height, img.width});
  T* p = t.data();
  const size_t hw = static_cast<size_t>(img.height) * static_cast<size_t>(img.width);
  for (size_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c)
      p[static_cast<size_t>(c) * hw + i] = static_cast<T>(img.rgb[i * 3 + static_cast<size_t>(c)]) / T(255);
  return t;
}

}  // namespace xdet
