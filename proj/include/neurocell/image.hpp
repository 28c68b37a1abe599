#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "neurocell/errors.hpp"
#include "neurocell/tensor.hpp"

namespace neurocell {

inline constexpr const char* kMCherry = "mCherry";
inline constexpr const char* kGCaMP = "GCaMP";

/// Channel-major float raster (C x H x W). Grayscale and probability maps
/// are single-channel images.
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
      : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

  bool empty() const { return pixels.empty(); }
  std::size_t plane_size() const { return height * width; }

  float& at(std::size_t c, std::size_t r, std::size_t col) { return pixels[(c * height + r) * width + col]; }
  float at(std::size_t c, std::size_t r, std::size_t col) const { return pixels[(c * height + r) * width + col]; }
  float& at(std::size_t r, std::size_t col) { return pixels[r * width + col]; }
  float at(std::size_t r, std::size_t col) const { return pixels[r * width + col]; }

  Image channel(std::size_t c) const {
    Image out(1, height, width);
    std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(c * plane_size()), plane_size(), out.pixels.begin());
    return out;
  }

  bool operator==(const Image&) const = default;
};

template <typename T>
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> cells;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, T fill = T{}) : height(h), width(w), cells(h * w, fill) {}

  T& at(std::size_t r, std::size_t c) { return cells[r * width + c]; }
  const T& at(std::size_t r, std::size_t c) const { return cells[r * width + c]; }

  bool operator==(const Grid&) const = default;
};

using BinaryMask = Grid<std::uint8_t>;
using LabelGrid = Grid<std::int32_t>;

/// Named single-channel planes sharing one geometry.
struct MultiChannelImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::map<std::string, Image> planes;

  void set(const std::string& name, Image plane) {
    if (plane.channels != 1) throw DimensionError("channel '" + name + "' must be single-plane");
    if (planes.empty()) {
      height = plane.height;
      width = plane.width;
    } else if (plane.height != height || plane.width != width) {
      throw DimensionError("channel '" + name + "' is " + std::to_string(plane.height) + "x" +
                           std::to_string(plane.width) + ", image is " + std::to_string(height) + "x" +
                           std::to_string(width));
    }
    planes[name] = std::move(plane);
  }

  bool has(const std::string& name) const { return planes.count(name) != 0; }

  const Image& plane(const std::string& name) const {
    auto it = planes.find(name);
    if (it == planes.end()) throw ContractError("image has no '" + name + "' channel");
    return it->second;
  }
};

template <typename T>
Tensor<T> to_tensor(const Image& img) {
  std::vector<T> values(img.pixels.begin(), img.pixels.end());
  return Tensor<T>({img.channels, img.height, img.width}, std::move(values));
}

template <typename T>
Image from_tensor(const Tensor<T>& t) {
  if (t.rank() != 3) throw DimensionError("from_tensor: expected CxHxW, got " + shape_str(t.shape()));
  Image img(t.dim(0), t.dim(1), t.dim(2));
  for (std::size_t i = 0; i < t.size(); ++i) img.pixels[i] = static_cast<float>(t[i]);
  return img;
}

}  // namespace neurocell
