#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "neurocell/cell_class.hpp"
#include "neurocell/errors.hpp"
#include "neurocell/image.hpp"
#include "neurocell/netgraph.hpp"
#include "neurocell/rng.hpp"

namespace neurocell {

// ---------------------------------------------------------------------------
// Border handling and sampling

/// Mirror index without repeating the edge pixel (... 2 1 | 0 1 2 ... n-1 | n-2 ...).
inline std::ptrdiff_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n <= 1) return 0;
  const std::ptrdiff_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

namespace detail {

inline float lerp_in_range(float a, float b, double t) {
  const float v = static_cast<float>(a + t * (static_cast<double>(b) - a));
  return std::clamp(v, std::min(a, b), std::max(a, b));
}

}  // namespace detail

/// Bilinear sample at fractional (y, x) of channel c with mirrored borders.
inline float sample_bilinear(const Image& img, std::size_t c, double y, double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  const double ty = y - fy, tx = x - fx;
  const auto h = static_cast<std::ptrdiff_t>(img.height), w = static_cast<std::ptrdiff_t>(img.width);
  const auto y0 = static_cast<std::size_t>(reflect_index(static_cast<std::ptrdiff_t>(fy), h));
  const auto y1 = static_cast<std::size_t>(reflect_index(static_cast<std::ptrdiff_t>(fy) + 1, h));
  const auto x0 = static_cast<std::size_t>(reflect_index(static_cast<std::ptrdiff_t>(fx), w));
  const auto x1 = static_cast<std::size_t>(reflect_index(static_cast<std::ptrdiff_t>(fx) + 1, w));
  const float top = detail::lerp_in_range(img.at(c, y0, x0), img.at(c, y0, x1), tx);
  const float bottom = detail::lerp_in_range(img.at(c, y1, x0), img.at(c, y1, x1), tx);
  return detail::lerp_in_range(top, bottom, ty);
}

/// Pads every channel by mirror reflection.
inline Image mirror_pad(const Image& img, std::size_t top, std::size_t left, std::size_t bottom, std::size_t right) {
  Image out(img.channels, img.height + top + bottom, img.width + left + right);
  const auto h = static_cast<std::ptrdiff_t>(img.height), w = static_cast<std::ptrdiff_t>(img.width);
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t r = 0; r < out.height; ++r) {
      const auto sr = static_cast<std::size_t>(reflect_index(static_cast<std::ptrdiff_t>(r) - static_cast<std::ptrdiff_t>(top), h));
      for (std::size_t col = 0; col < out.width; ++col) {
        const auto sc = static_cast<std::size_t>(
            reflect_index(static_cast<std::ptrdiff_t>(col) - static_cast<std::ptrdiff_t>(left), w));
        out.at(c, r, col) = img.at(c, sr, sc);
      }
    }
  }
  return out;
}

/// Rectangular window [row, row+h) x [col, col+w) of every channel.
inline Image crop(const Image& img, std::size_t row, std::size_t col, std::size_t h, std::size_t w) {
  if (row + h > img.height || col + w > img.width) throw DimensionError("crop window exceeds image");
  Image out(img.channels, h, w);
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t x = 0; x < w; ++x) out.at(c, r, x) = img.at(c, row + r, col + x);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Intensity

/// Linear-interpolated percentile (q in [0,1]) of a sorted sample.
inline double percentile_sorted(const std::vector<float>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (static_cast<double>(sorted[hi]) - sorted[lo]);
}

/// Clips to the 1st/99th percentiles and rescales to [0, 1]. A plane that is
/// constant after clipping maps to zeros.
inline Image normalize_channel(const Image& plane) {
  if (plane.empty()) throw DimensionError("normalize_channel: empty plane");
  std::vector<float> sorted = plane.pixels;
  std::sort(sorted.begin(), sorted.end());
  const double lo = percentile_sorted(sorted, 0.01);
  const double hi = percentile_sorted(sorted, 0.99);
  Image out(plane.channels, plane.height, plane.width);
  if (!(hi > lo)) return out;
  for (std::size_t i = 0; i < plane.pixels.size(); ++i) {
    const double v = std::clamp(static_cast<double>(plane.pixels[i]), lo, hi);
    out.pixels[i] = static_cast<float>((v - lo) / (hi - lo));
  }
  return out;
}

inline MultiChannelImage normalize_scene(const MultiChannelImage& img) {
  MultiChannelImage out;
  for (const auto& [name, plane] : img.planes) out.set(name, normalize_channel(plane));
  return out;
}

/// Pixel-wise mean of the normalized mCherry and GCaMP planes.
inline Image fuse_grayscale(const MultiChannelImage& img) {
  const Image& red = img.plane(kMCherry);
  const Image& green = img.plane(kGCaMP);
  Image out(1, img.height, img.width);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = 0.5f * (red.pixels[i] + green.pixels[i]);
  return out;
}

/// R = mCherry, G = GCaMP, B = (R + G) / 2.
inline Image compose_rgb(const MultiChannelImage& img) {
  const Image& red = img.plane(kMCherry);
  const Image& green = img.plane(kGCaMP);
  Image out(3, img.height, img.width);
  const std::size_t n = out.plane_size();
  for (std::size_t i = 0; i < n; ++i) {
    out.pixels[i] = red.pixels[i];
    out.pixels[n + i] = green.pixels[i];
    out.pixels[2 * n + i] = 0.5f * (red.pixels[i] + green.pixels[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Objects

/// Foreground iff p > tau (strict).
inline BinaryMask threshold_map(const Image& prob, double tau = 0.7) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("threshold tau must lie in [0, 1], got " + std::to_string(tau));
  if (prob.channels != 1) throw DimensionError("threshold_map: expected a single-channel map");
  BinaryMask out(prob.height, prob.width);
  for (std::size_t i = 0; i < prob.pixels.size(); ++i) out.cells[i] = prob.pixels[i] > tau ? 1 : 0;
  return out;
}

struct Component {
  std::int32_t label = 0;
  std::size_t pixel_count = 0;
  double centroid_row = 0.0;
  double centroid_col = 0.0;
  std::size_t min_row = 0, min_col = 0, max_row = 0, max_col = 0;
};

struct ComponentSet {
  LabelGrid labels;
  std::vector<Component> components;
  std::size_t count() const { return components.size(); }
};

namespace detail {

struct DisjointSets {
  std::vector<std::int32_t> parent;

  std::int32_t make() {
    parent.push_back(static_cast<std::int32_t>(parent.size()));
    return parent.back();
  }
  std::int32_t find(std::int32_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  }
  void unite(std::int32_t a, std::int32_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

inline ComponentSet summarize_labels(LabelGrid labels, std::size_t count) {
  ComponentSet out;
  out.components.resize(count);
  std::vector<double> sum_r(count, 0.0), sum_c(count, 0.0);
  for (std::size_t i = 0; i < count; ++i) out.components[i].label = static_cast<std::int32_t>(i + 1);
  for (std::size_t r = 0; r < labels.height; ++r) {
    for (std::size_t c = 0; c < labels.width; ++c) {
      const std::int32_t l = labels.at(r, c);
      if (l == 0) continue;
      Component& comp = out.components[static_cast<std::size_t>(l - 1)];
      if (comp.pixel_count == 0) {
        comp.min_row = comp.max_row = r;
        comp.min_col = comp.max_col = c;
      }
      ++comp.pixel_count;
      comp.min_row = std::min(comp.min_row, r);
      comp.max_row = std::max(comp.max_row, r);
      comp.min_col = std::min(comp.min_col, c);
      comp.max_col = std::max(comp.max_col, c);
      sum_r[static_cast<std::size_t>(l - 1)] += static_cast<double>(r);
      sum_c[static_cast<std::size_t>(l - 1)] += static_cast<double>(c);
    }
  }
  for (std::size_t i = 0; i < count; ++i) {
    const double n = static_cast<double>(out.components[i].pixel_count);
    out.components[i].centroid_row = sum_r[i] / n;
    out.components[i].centroid_col = sum_c[i] / n;
  }
  out.labels = std::move(labels);
  return out;
}

}  // namespace detail

/// Two-pass union-find labeling at 8-connectivity. Labels are 1..K in order
/// of each component's first pixel in a row-major scan.
inline ComponentSet connected_components(const BinaryMask& mask) {
  const std::size_t h = mask.height, w = mask.width;
  LabelGrid provisional(h, w, -1);
  detail::DisjointSets sets;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      if (!mask.at(r, c)) continue;
      std::int32_t label = -1;
      auto visit = [&](std::size_t rr, std::size_t cc) {
        const std::int32_t n = provisional.at(rr, cc);
        if (n < 0) return;
        if (label < 0) {
          label = n;
        } else {
          sets.unite(label, n);
        }
      };
      if (c > 0) visit(r, c - 1);
      if (r > 0) {
        if (c > 0) visit(r - 1, c - 1);
        visit(r - 1, c);
        if (c + 1 < w) visit(r - 1, c + 1);
      }
      provisional.at(r, c) = label < 0 ? sets.make() : label;
    }
  }
  LabelGrid labels(h, w, 0);
  std::vector<std::int32_t> final_label(sets.parent.size(), 0);
  std::int32_t next = 0;
  for (std::size_t i = 0; i < labels.cells.size(); ++i) {
    if (provisional.cells[i] < 0) continue;
    const std::int32_t root = sets.find(provisional.cells[i]);
    if (final_label[root] == 0) final_label[root] = ++next;
    labels.cells[i] = final_label[root];
  }
  return detail::summarize_labels(std::move(labels), static_cast<std::size_t>(next));
}

/// Drops components with fewer than `min_size` pixels and relabels the
/// survivors contiguously, preserving their order.
inline ComponentSet filter_components(const ComponentSet& set, std::size_t min_size = 9) {
  std::vector<std::int32_t> remap(set.count() + 1, 0);
  std::int32_t next = 0;
  for (const Component& c : set.components) {
    if (c.pixel_count >= min_size) remap[static_cast<std::size_t>(c.label)] = ++next;
  }
  LabelGrid labels = set.labels;
  for (std::int32_t& l : labels.cells) l = remap[static_cast<std::size_t>(l)];
  return detail::summarize_labels(std::move(labels), static_cast<std::size_t>(next));
}

// ---------------------------------------------------------------------------
// Patches

/// A fixed-size crop around a component centroid.
struct Patch {
  Image image;
  double row = 0.0;
  double col = 0.0;
  std::string source;
  std::optional<CellClass> label;
};

/// size x size crop of every channel centered on the centroid rounded half
/// away from zero; out-of-bounds pixels are mirrored about the border.
inline Image extract_patch(const Image& img, double row, double col, std::size_t size = 101) {
  if (size % 2 == 0) throw ConfigError("patch size must be odd, got " + std::to_string(size));
  if (img.empty()) throw DimensionError("extract_patch: empty image");
  const auto cr = static_cast<std::ptrdiff_t>(std::round(row));
  const auto cc = static_cast<std::ptrdiff_t>(std::round(col));
  const auto half = static_cast<std::ptrdiff_t>(size / 2);
  const auto h = static_cast<std::ptrdiff_t>(img.height), w = static_cast<std::ptrdiff_t>(img.width);
  Image out(img.channels, size, size);
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t r = 0; r < size; ++r) {
      const auto sr = static_cast<std::size_t>(reflect_index(cr - half + static_cast<std::ptrdiff_t>(r), h));
      for (std::size_t x = 0; x < size; ++x) {
        const auto sc = static_cast<std::size_t>(reflect_index(cc - half + static_cast<std::ptrdiff_t>(x), w));
        out.at(c, r, x) = img.at(c, sr, sc);
      }
    }
  }
  return out;
}

/// Bilinear resize of every channel to target x target on a corner-aligned
/// grid (output corners sample input corners). Same size is a plain copy.
inline Image resample_bilinear(const Image& img, std::size_t target = 299) {
  if (target < 1) throw ConfigError("resample target must be >= 1");
  if (img.height == target && img.width == target) return img;
  Image out(img.channels, target, target);
  auto coord = [target](std::size_t i, std::size_t n) {
    if (target == 1) return static_cast<double>(n - 1) / 2.0;
    return static_cast<double>(i) * static_cast<double>(n - 1) / static_cast<double>(target - 1);
  };
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t r = 0; r < target; ++r) {
      const double y = coord(r, img.height);
      for (std::size_t x = 0; x < target; ++x) out.at(c, r, x) = sample_bilinear(img, c, y, coord(x, img.width));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentSpec {
  double angle_min = -30.0;
  double angle_max = 30.0;
  double scale_min = 0.9;
  double scale_max = 1.1;
  std::size_t factor = 2;

  void validate() const {
    if (!(angle_min <= angle_max && angle_min > -180.0 && angle_max <= 180.0)) {
      throw ConfigError("augment angle range must lie within (-180, 180]");
    }
    if (!(scale_min > 0.0 && scale_min <= scale_max)) throw ConfigError("augment scale range must be positive");
    if (factor < 1) throw ConfigError("augment factor must be >= 1");
  }
};

/// Rotation by `angle_deg` and isotropic scaling about the image center,
/// sampled bilinearly with mirrored borders. Angle 0 and scale 1 return the
/// input unchanged.
inline Image affine_transform(const Image& img, double angle_deg, double scale) {
  if (angle_deg == 0.0 && scale == 1.0) return img;
  if (!(scale > 0.0)) throw ConfigError("affine scale must be positive");
  const double theta = angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta) / scale, sn = std::sin(theta) / scale;
  const double cy = (static_cast<double>(img.height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(img.width) - 1.0) / 2.0;
  Image out(img.channels, img.height, img.width);
  for (std::size_t r = 0; r < img.height; ++r) {
    const double dy = static_cast<double>(r) - cy;
    for (std::size_t c = 0; c < img.width; ++c) {
      const double dx = static_cast<double>(c) - cx;
      const double sy = cy + cs * dy + sn * dx;
      const double sx = cx - sn * dy + cs * dx;
      for (std::size_t ch = 0; ch < img.channels; ++ch) out.at(ch, r, c) = sample_bilinear(img, ch, sy, sx);
    }
  }
  return out;
}

inline Image augment_affine(const Image& img, const AugmentSpec& spec, Rng& rng) {
  spec.validate();
  const double angle = rng.uniform(spec.angle_min, spec.angle_max);
  const double scale = rng.uniform(spec.scale_min, spec.scale_max);
  return affine_transform(img, angle, scale);
}

/// Appends factor-1 augmented copies of every patch after the originals.
/// Copy j of patch i draws from root.derive(i).derive(j), so the result
/// does not depend on processing order.
inline std::vector<Patch> amplify(const std::vector<Patch>& patches, const AugmentSpec& spec, const Rng& root) {
  spec.validate();
  std::vector<Patch> out = patches;
  out.reserve(patches.size() * spec.factor);
  for (std::size_t j = 1; j < spec.factor; ++j) {
    for (std::size_t i = 0; i < patches.size(); ++i) {
      Rng rng = root.derive(i).derive(j);
      Patch p = patches[i];
      p.image = augment_affine(patches[i].image, spec, rng);
      out.push_back(std::move(p));
    }
  }
  return out;
}

struct ElasticSpec {
  std::size_t grid_spacing = 16;
  double sigma = 4.0;
  double alpha = 2.0;

  void validate() const {
    if (grid_spacing < 2) throw ConfigError("elastic grid_spacing must be >= 2");
    if (!(sigma > 0.0)) throw ConfigError("elastic sigma must be positive");
    if (!(alpha >= 0.0)) throw ConfigError("elastic alpha must be nonnegative");
  }
};

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (double& v : k) v /= total;
  return k;
}

/// Separable Gaussian blur of an h x w field with mirrored borders.
inline void gaussian_blur(std::vector<double>& field, std::size_t h, std::size_t w, double sigma) {
  const std::vector<double> k = gaussian_kernel(sigma);
  const auto radius = static_cast<std::ptrdiff_t>(k.size() / 2);
  std::vector<double> tmp(field.size());
  const auto hh = static_cast<std::ptrdiff_t>(h), ww = static_cast<std::ptrdiff_t>(w);
  for (std::ptrdiff_t r = 0; r < hh; ++r) {
    for (std::ptrdiff_t c = 0; c < ww; ++c) {
      double acc = 0.0;
      for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        acc += k[static_cast<std::size_t>(i + radius)] * field[static_cast<std::size_t>(r * ww + reflect_index(c + i, ww))];
      }
      tmp[static_cast<std::size_t>(r * ww + c)] = acc;
    }
  }
  for (std::ptrdiff_t r = 0; r < hh; ++r) {
    for (std::ptrdiff_t c = 0; c < ww; ++c) {
      double acc = 0.0;
      for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        acc += k[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(reflect_index(r + i, hh) * ww + c)];
      }
      field[static_cast<std::size_t>(r * ww + c)] = acc;
    }
  }
}

/// Standard-normal values on a coarse node grid, bilinearly interpolated to
/// full resolution.
inline std::vector<double> coarse_noise_field(std::size_t h, std::size_t w, std::size_t spacing, Rng& rng) {
  const std::size_t gh = (std::max<std::size_t>(h, 1) - 1) / spacing + 2;
  const std::size_t gw = (std::max<std::size_t>(w, 1) - 1) / spacing + 2;
  std::vector<double> nodes(gh * gw);
  for (double& v : nodes) v = rng.normal();
  std::vector<double> field(h * w);
  const double s = static_cast<double>(spacing);
  for (std::size_t r = 0; r < h; ++r) {
    const double gy = static_cast<double>(r) / s;
    const auto y0 = static_cast<std::size_t>(gy);
    const double ty = gy - static_cast<double>(y0);
    for (std::size_t c = 0; c < w; ++c) {
      const double gx = static_cast<double>(c) / s;
      const auto x0 = static_cast<std::size_t>(gx);
      const double tx = gx - static_cast<double>(x0);
      const double top = nodes[y0 * gw + x0] * (1 - tx) + nodes[y0 * gw + x0 + 1] * tx;
      const double bottom = nodes[(y0 + 1) * gw + x0] * (1 - tx) + nodes[(y0 + 1) * gw + x0 + 1] * tx;
      field[r * w + c] = top * (1 - ty) + bottom * ty;
    }
  }
  return field;
}

}  // namespace detail

/// Random smooth warp: one normal displacement per grid node and axis,
/// interpolated, Gaussian-smoothed, scaled by alpha, then applied by
/// bilinear sampling with mirrored borders. alpha = 0 returns the input.
inline Image elastic_deform(const Image& img, const ElasticSpec& spec, Rng& rng) {
  spec.validate();
  if (spec.alpha == 0.0) return img;
  std::vector<double> dy = detail::coarse_noise_field(img.height, img.width, spec.grid_spacing, rng);
  std::vector<double> dx = detail::coarse_noise_field(img.height, img.width, spec.grid_spacing, rng);
  detail::gaussian_blur(dy, img.height, img.width, spec.sigma);
  detail::gaussian_blur(dx, img.height, img.width, spec.sigma);
  // Smoothing unit white noise with a Gaussian of width sigma leaves a field
  // of std 1/(2*sqrt(pi)*sigma); scale to that so alpha keeps its usual
  // meaning regardless of how coarse the noise lattice is.
  const double gain = spec.alpha / (2.0 * std::sqrt(std::numbers::pi) * spec.sigma);
  Image out(img.channels, img.height, img.width);
  for (std::size_t r = 0; r < img.height; ++r) {
    for (std::size_t c = 0; c < img.width; ++c) {
      const std::size_t i = r * img.width + c;
      const double sy = static_cast<double>(r) + gain * dy[i];
      const double sx = static_cast<double>(c) + gain * dx[i];
      for (std::size_t ch = 0; ch < img.channels; ++ch) out.at(ch, r, c) = sample_bilinear(img, ch, sy, sx);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Overlap-tile inference

/// Overlap rounded up so that tile + 2*overlap stays a multiple of the
/// network's pooling factor.
template <typename T>
std::size_t effective_overlap(const NetworkSpec<T>& spec, std::size_t overlap) {
  const std::size_t step = std::max<std::size_t>(1, spec.spatial_multiple / 2);
  return (overlap + step - 1) / step * step;
}

/// Reference inference on the whole image: mirror-pad by the (effective)
/// overlap, pad the far edges up to the pooling multiple, run once, crop.
template <typename T>
Image whole_image_inference(const NetworkSpec<T>& spec, const Image& gray, std::size_t overlap) {
  const std::size_t ov = effective_overlap(spec, overlap);
  const std::size_t m = spec.spatial_multiple;
  const std::size_t extra_h = (m - (gray.height + 2 * ov) % m) % m;
  const std::size_t extra_w = (m - (gray.width + 2 * ov) % m) % m;
  const Image padded = mirror_pad(gray, ov, ov, ov + extra_h, ov + extra_w);
  const Image out = from_tensor(predict(spec, to_tensor<T>(padded)));
  return crop(out, ov, ov, gray.height, gray.width);
}

/// Overlap-tile inference: the image is mirrored outward by `overlap`,
/// split into tile x tile output blocks, and each block is predicted from a
/// (tile + 2*overlap)^2 input window. Equals whole_image_inference once the
/// overlap covers the network's receptive radius.
template <typename T>
Image tiled_inference(const NetworkSpec<T>& spec, const Image& gray, std::size_t tile, std::size_t overlap) {
  if (tile == 0 || tile % spec.spatial_multiple != 0) {
    throw ConfigError("tile " + std::to_string(tile) + " must be a positive multiple of " +
                      std::to_string(spec.spatial_multiple));
  }
  if (gray.height <= tile && gray.width <= tile) return whole_image_inference(spec, gray, overlap);
  const std::size_t radius = receptive_radius(spec);
  if (overlap < radius) {
    throw ConfigError("overlap " + std::to_string(overlap) + " is below the receptive-field radius; need overlap >= " +
                      std::to_string(radius));
  }
  const std::size_t ov = effective_overlap(spec, overlap);
  const std::size_t ny = (gray.height + tile - 1) / tile;
  const std::size_t nx = (gray.width + tile - 1) / tile;
  const Image padded = mirror_pad(gray, ov, ov, ov + ny * tile - gray.height, ov + nx * tile - gray.width);
  Image out;
  for (std::size_t ty = 0; ty < ny; ++ty) {
    for (std::size_t tx = 0; tx < nx; ++tx) {
      const Image window = crop(padded, ty * tile, tx * tile, tile + 2 * ov, tile + 2 * ov);
      const Image pred = from_tensor(predict(spec, to_tensor<T>(window)));
      if (out.empty()) out = Image(pred.channels, gray.height, gray.width);
      for (std::size_t c = 0; c < pred.channels; ++c) {
        for (std::size_t r = 0; r < tile && ty * tile + r < gray.height; ++r) {
          for (std::size_t x = 0; x < tile && tx * tile + x < gray.width; ++x) {
            out.at(c, ty * tile + r, tx * tile + x) = pred.at(c, ov + r, ov + x);
          }
        }
      }
    }
  }
  return out;
}

}  // namespace neurocell
