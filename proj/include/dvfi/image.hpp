#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dvfi/numerics/tensor.hpp"

namespace dvfi {

/// 8-bit image, 1 (gray) or 3 (RGB) interleaved channels, row-major.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;

  Image() = default;
  Image(int w, int h, int c, std::uint8_t fill = 0);

  std::uint8_t& at(int x, int y, int c = 0) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  std::uint8_t at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool empty() const { return data.empty(); }
  bool same_geometry(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
  friend bool operator==(const Image&, const Image&) = default;
};

/// Throws ShapeError naming `op` unless both images share size and channel count.
void require_same_geometry(const Image& a, const Image& b, const char* op);

/// Binary PGM (P5) / PPM (P6), maxval 255.
Image read_pnm(const std::filesystem::path& path);
void write_pnm(const Image& image, const std::filesystem::path& path);

/// Luminance plane (rows = height). RGB uses Rec.601 weights.
Eigen::ArrayXXd luma(const Image& image);

/// Channel planes as doubles, resized with half-pixel-centre bilinear
/// interpolation (edge clamped).
std::vector<Eigen::ArrayXXd> resize_planes(const Image& image, int width, int height);

Image resize_bilinear(const Image& image, int width, int height);

/// [1, 3, size, size] tensor with values in [0,1]; gray is replicated.
template <typename S>
nn::Tensor<S> to_tensor(const Image& image, int size) {
  const auto planes = resize_planes(image, size, size);
  nn::Vec<S> v(3 * size * size);
  for (int c = 0; c < 3; ++c) {
    const auto& p = planes[planes.size() == 1 ? 0 : c];
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) v[(c * size + y) * size + x] = static_cast<S>(p(y, x) / 255.0);
  }
  return nn::Tensor<S>::from({1, 3, size, size}, std::move(v));
}

} // namespace dvfi
