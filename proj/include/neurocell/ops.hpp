#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "neurocell/errors.hpp"
#include "neurocell/tape.hpp"
#include "neurocell/tensor.hpp"

namespace neurocell::ops {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

/// Batch/channel/spatial view of a CxHxW or BxCxHxW shape.
struct ImageGeometry {
  std::size_t batch = 1;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  bool batched = false;

  std::size_t plane() const { return height * width; }
  std::size_t sample() const { return channels * height * width; }

  Shape shape_with(std::size_t c, std::size_t h, std::size_t w) const {
    return batched ? Shape{batch, c, h, w} : Shape{c, h, w};
  }
};

inline ImageGeometry image_geometry(const Shape& shape, const std::string& op) {
  if (shape.size() == 3) return {1, shape[0], shape[1], shape[2], false};
  if (shape.size() == 4) return {shape[0], shape[1], shape[2], shape[3], true};
  throw DimensionError(op + ": expected a CxHxW or BxCxHxW input, got " + shape_str(shape));
}

namespace detail {

/// Unfolds one CxHxW sample into a (C*Kh*Kw) x (OH*OW) column matrix.
template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
            std::size_t out_h, std::size_t out_w, T* cols) {
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(height);
  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(width);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = x + c * height * width;
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = cols + ((c * kh + ki) * kw + kj) * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ki) -
                                    static_cast<std::ptrdiff_t>(pad);
          T* dst = row + oy * out_w;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + out_w, T(0));
            continue;
          }
          const T* src = plane + iy * w;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kj) -
                                      static_cast<std::ptrdiff_t>(pad);
            dst[ox] = (ix < 0 || ix >= w) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters-and-adds columns back into a CxHxW sample.
template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
            std::size_t out_h, std::size_t out_w, T* x) {
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(height);
  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(width);
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = x + c * height * width;
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = cols + ((c * kh + ki) * kw + kj) * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ki) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= h) continue;
          const T* src = row + oy * out_w;
          T* dst = plane + iy * w;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kj) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void add_channel_bias(T* out, const T* bias, std::size_t channels, std::size_t plane) {
  for (std::size_t c = 0; c < channels; ++c) {
    const T b = bias[c];
    T* p = out + c * plane;
    for (std::size_t i = 0; i < plane; ++i) p[i] += b;
  }
}

template <typename T>
void accumulate_channel_sums(const T* grad, T* bias_grad, std::size_t channels, std::size_t plane) {
  for (std::size_t c = 0; c < channels; ++c) {
    T acc = T(0);
    const T* p = grad + c * plane;
    for (std::size_t i = 0; i < plane; ++i) acc += p[i];
    bias_grad[c] += acc;
  }
}

inline void require_same_shape(const Shape& a, const Shape& b, const std::string& op) {
  if (a != b) {
    throw DimensionError(op + ": operand shapes differ, " + shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace detail

/// 2-D cross-correlation. weight is OxCxKhxKw, bias has O entries (may be
/// undefined for no bias). Output extent is (H + 2*padding - Kh)/stride + 1.
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, std::size_t stride = 1, std::size_t padding = 0) {
  const ImageGeometry g = image_geometry(input.shape(), "conv2d");
  if (weight.rank() != 4) {
    throw DimensionError("conv2d: weight must be OxCxKhxKw, got " + shape_str(weight.shape()));
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  const std::size_t out_c = weight.dim(0);
  const std::size_t kh = weight.dim(2);
  const std::size_t kw = weight.dim(3);
  if (weight.dim(1) != g.channels) {
    throw DimensionError("conv2d: input channel axis C=" + std::to_string(g.channels) +
                         " does not match weight axis 1 (" + std::to_string(weight.dim(1)) + ")");
  }
  if (g.height + 2 * padding < kh || g.width + 2 * padding < kw) {
    throw DimensionError("conv2d: padded spatial axes H,W=" + std::to_string(g.height + 2 * padding) +
                         "," + std::to_string(g.width + 2 * padding) + " smaller than kernel axes " +
                         std::to_string(kh) + "," + std::to_string(kw));
  }
  if (bias.defined() && bias.size() != out_c) {
    throw DimensionError("conv2d: bias axis has " + std::to_string(bias.size()) +
                         " entries, weight axis 0 has " + std::to_string(out_c));
  }
  const std::size_t out_h = (g.height + 2 * padding - kh) / stride + 1;
  const std::size_t out_w = (g.width + 2 * padding - kw) / stride + 1;
  const std::size_t patch = g.channels * kh * kw;
  const std::size_t positions = out_h * out_w;

  Tensor<T> out(g.shape_with(out_c, out_h, out_w));
  std::vector<T> cols(patch * positions);
  ConstMatrixMap<T> wmat(weight.data().data(), out_c, patch);
  for (std::size_t b = 0; b < g.batch; ++b) {
    detail::im2col(input.data().data() + b * g.sample(), g.channels, g.height, g.width, kh, kw,
                   stride, padding, out_h, out_w, cols.data());
    MatrixMap<T> omat(out.data().data() + b * out_c * positions, out_c, positions);
    omat.noalias() = wmat * ConstMatrixMap<T>(cols.data(), patch, positions);
    if (bias.defined()) {
      detail::add_channel_bias(omat.data(), bias.data().data(), out_c, positions);
    }
  }

  if (tape.should_record({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    tape.record("conv2d", {input, weight, bias}, out,
                [=]() mutable {
                  std::vector<T> buf(patch * positions);
                  const std::span<const T> gout = std::as_const(out).grad();
                  ConstMatrixMap<T> wm(weight.data().data(), out_c, patch);
                  for (std::size_t b = 0; b < g.batch; ++b) {
                    ConstMatrixMap<T> gmat(gout.data() + b * out_c * positions, out_c, positions);
                    if (bias.defined() && bias.requires_grad()) {
                      detail::accumulate_channel_sums(gmat.data(), bias.ensure_grad().data(), out_c,
                                                      positions);
                    }
                    if (weight.requires_grad()) {
                      detail::im2col(input.data().data() + b * g.sample(), g.channels, g.height,
                                     g.width, kh, kw, stride, padding, out_h, out_w, buf.data());
                      MatrixMap<T> gw(weight.ensure_grad().data(), out_c, patch);
                      gw.noalias() += gmat * ConstMatrixMap<T>(buf.data(), patch, positions).transpose();
                    }
                    if (input.requires_grad()) {
                      MatrixMap<T> gcols(buf.data(), patch, positions);
                      gcols.noalias() = wm.transpose() * gmat;
                      detail::col2im(buf.data(), g.channels, g.height, g.width, kh, kw, stride,
                                     padding, out_h, out_w, input.ensure_grad().data() + b * g.sample());
                    }
                  }
                });
  }
  return out;
}

/// Transposed convolution: the adjoint of conv2d (padding 0) with the same
/// kernel. weight is CinxCoutxKhxKw; output extent is (H-1)*stride + Kh.
template <typename T>
Tensor<T> conv_transpose2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight,
                           const Tensor<T>& bias, std::size_t stride = 1) {
  const ImageGeometry g = image_geometry(input.shape(), "conv_transpose2d");
  if (weight.rank() != 4) {
    throw DimensionError("conv_transpose2d: weight must be CinxCoutxKhxKw, got " +
                         shape_str(weight.shape()));
  }
  if (stride == 0) throw ConfigError("conv_transpose2d: stride must be positive");
  if (weight.dim(0) != g.channels) {
    throw DimensionError("conv_transpose2d: input channel axis C=" + std::to_string(g.channels) +
                         " does not match weight axis 0 (" + std::to_string(weight.dim(0)) + ")");
  }
  const std::size_t out_c = weight.dim(1);
  const std::size_t kh = weight.dim(2);
  const std::size_t kw = weight.dim(3);
  if (bias.defined() && bias.size() != out_c) {
    throw DimensionError("conv_transpose2d: bias axis has " + std::to_string(bias.size()) +
                         " entries, weight axis 1 has " + std::to_string(out_c));
  }
  const std::size_t out_h = (g.height - 1) * stride + kh;
  const std::size_t out_w = (g.width - 1) * stride + kw;
  const std::size_t patch = out_c * kh * kw;
  const std::size_t positions = g.plane();
  const std::size_t out_sample = out_c * out_h * out_w;

  Tensor<T> out(g.shape_with(out_c, out_h, out_w));
  std::vector<T> cols(patch * positions);
  ConstMatrixMap<T> wmat(weight.data().data(), g.channels, patch);
  for (std::size_t b = 0; b < g.batch; ++b) {
    MatrixMap<T> cmat(cols.data(), patch, positions);
    cmat.noalias() =
        wmat.transpose() * ConstMatrixMap<T>(input.data().data() + b * g.sample(), g.channels, positions);
    T* dst = out.data().data() + b * out_sample;
    detail::col2im(cols.data(), out_c, out_h, out_w, kh, kw, stride, 0, g.height, g.width, dst);
    if (bias.defined()) detail::add_channel_bias(dst, bias.data().data(), out_c, out_h * out_w);
  }

  if (tape.should_record({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    tape.record("conv_transpose2d", {input, weight, bias}, out, [=]() mutable {
      std::vector<T> buf(patch * positions);
      const std::span<const T> gout = std::as_const(out).grad();
      ConstMatrixMap<T> wm(weight.data().data(), g.channels, patch);
      for (std::size_t b = 0; b < g.batch; ++b) {
        const T* gsample = gout.data() + b * out_sample;
        if (bias.defined() && bias.requires_grad()) {
          detail::accumulate_channel_sums(gsample, bias.ensure_grad().data(), out_c, out_h * out_w);
        }
        if (!weight.requires_grad() && !input.requires_grad()) continue;
        detail::im2col(gsample, out_c, out_h, out_w, kh, kw, stride, 0, g.height, g.width, buf.data());
        ConstMatrixMap<T> gcols(buf.data(), patch, positions);
        if (weight.requires_grad()) {
          MatrixMap<T> gw(weight.ensure_grad().data(), g.channels, patch);
          gw.noalias() +=
              ConstMatrixMap<T>(input.data().data() + b * g.sample(), g.channels, positions) *
              gcols.transpose();
        }
        if (input.requires_grad()) {
          MatrixMap<T> gin(input.ensure_grad().data() + b * g.sample(), g.channels, positions);
          gin.noalias() += wm * gcols;
        }
      }
    });
  }
  return out;
}

/// Non-overlapping max pooling. Extents must be divisible by the window;
/// ties resolve to the first maximum in row-major order.
template <typename T>
Tensor<T> maxpool2d(Tape<T>& tape, const Tensor<T>& input, std::size_t window = 2) {
  const ImageGeometry g = image_geometry(input.shape(), "maxpool2d");
  if (window == 0) throw ConfigError("maxpool2d: window must be positive");
  if (g.height % window != 0 || g.width % window != 0) {
    throw DimensionError("maxpool2d: spatial axes H,W=" + std::to_string(g.height) + "," +
                         std::to_string(g.width) + " not divisible by window " + std::to_string(window));
  }
  const std::size_t oh = g.height / window;
  const std::size_t ow = g.width / window;
  Tensor<T> out(g.shape_with(g.channels, oh, ow));
  std::vector<std::size_t> argmax(out.size());
  const T* x = input.data().data();
  T* y = out.data().data();
  const std::size_t planes = g.batch * g.channels;
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t in_base = p * g.plane();
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = in_base + (oy * window) * g.width + ox * window;
        for (std::size_t dy = 0; dy < window; ++dy) {
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = in_base + (oy * window + dy) * g.width + ox * window + dx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = p * oh * ow + oy * ow + ox;
        y[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  if (tape.should_record({&input})) {
    out.set_requires_grad(true);
    tape.record("maxpool2d", {input}, out, [=]() mutable {
      const std::span<const T> gout = std::as_const(out).grad();
      std::span<T> gin = input.ensure_grad();
      for (std::size_t o = 0; o < gout.size(); ++o) gin[argmax[o]] += gout[o];
    });
  }
  return out;
}

/// 3x3 average pooling, stride 1, zero padding 1, divisor always 9.
template <typename T>
Tensor<T> avgpool3x3(Tape<T>& tape, const Tensor<T>& input) {
  const ImageGeometry g = image_geometry(input.shape(), "avgpool3x3");
  Tensor<T> out(input.shape());
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(g.height);
  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(g.width);
  const std::size_t planes = g.batch * g.channels;
  auto scatter = [h, w, planes, plane = g.plane()](const T* src, T* dst) {
    for (std::size_t p = 0; p < planes; ++p) {
      const T* s = src + p * plane;
      T* d = dst + p * plane;
      for (std::ptrdiff_t y = 0; y < h; ++y) {
        for (std::ptrdiff_t x = 0; x < w; ++x) {
          const T v = s[y * w + x] / T(9);
          for (std::ptrdiff_t yy = std::max<std::ptrdiff_t>(0, y - 1); yy <= std::min(h - 1, y + 1); ++yy) {
            for (std::ptrdiff_t xx = std::max<std::ptrdiff_t>(0, x - 1); xx <= std::min(w - 1, x + 1); ++xx) {
              d[yy * w + xx] += v;
            }
          }
        }
      }
    }
  };
  // The 3x3 box with zero padding is self-adjoint, so one scatter kernel
  // serves both directions.
  scatter(input.data().data(), out.data().data());
  if (tape.should_record({&input})) {
    out.set_requires_grad(true);
    tape.record("avgpool3x3", {input}, out, [=]() mutable {
      scatter(std::as_const(out).grad().data(), input.ensure_grad().data());
    });
  }
  return out;
}

/// Mean over the spatial axes: BxCxHxW -> BxC, CxHxW -> C.
template <typename T>
Tensor<T> global_avg_pool(Tape<T>& tape, const Tensor<T>& input) {
  const ImageGeometry g = image_geometry(input.shape(), "global_avg_pool");
  Tensor<T> out(g.batched ? Shape{g.batch, g.channels} : Shape{g.channels});
  const std::size_t planes = g.batch * g.channels;
  const T inv = T(1) / static_cast<T>(g.plane());
  for (std::size_t p = 0; p < planes; ++p) {
    T acc = T(0);
    const T* s = input.data().data() + p * g.plane();
    for (std::size_t i = 0; i < g.plane(); ++i) acc += s[i];
    out[p] = acc * inv;
  }
  if (tape.should_record({&input})) {
    out.set_requires_grad(true);
    tape.record("global_avg_pool", {input}, out, [=]() mutable {
      const std::span<const T> gout = std::as_const(out).grad();
      std::span<T> gin = input.ensure_grad();
      for (std::size_t p = 0; p < planes; ++p) {
        const T v = gout[p] * inv;
        for (std::size_t i = 0; i < g.plane(); ++i) gin[p * g.plane() + i] += v;
      }
    });
  }
  return out;
}

/// Fully connected layer: weight is MxN, input is N or BxN.
template <typename T>
Tensor<T> dense(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2) throw DimensionError("dense: weight must be MxN, got " + shape_str(weight.shape()));
  if (input.rank() != 1 && input.rank() != 2) {
    throw DimensionError("dense: input must be N or BxN, got " + shape_str(input.shape()));
  }
  const bool batched = input.rank() == 2;
  const std::size_t batch = batched ? input.dim(0) : 1;
  const std::size_t n = batched ? input.dim(1) : input.dim(0);
  const std::size_t m = weight.dim(0);
  if (weight.dim(1) != n) {
    throw DimensionError("dense: input feature axis N=" + std::to_string(n) +
                         " does not match weight axis 1 (" + std::to_string(weight.dim(1)) + ")");
  }
  if (bias.defined() && bias.size() != m) {
    throw DimensionError("dense: bias axis has " + std::to_string(bias.size()) +
                         " entries, weight axis 0 has " + std::to_string(m));
  }
  Tensor<T> out(batched ? Shape{batch, m} : Shape{m});
  ConstMatrixMap<T> x(input.data().data(), batch, n);
  ConstMatrixMap<T> w(weight.data().data(), m, n);
  MatrixMap<T> y(out.data().data(), batch, m);
  y.noalias() = x * w.transpose();
  if (bias.defined()) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j < m; ++j) y(b, j) += bias[j];
    }
  }
  if (tape.should_record({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    tape.record("dense", {input, weight, bias}, out, [=]() mutable {
      ConstMatrixMap<T> gy(std::as_const(out).grad().data(), batch, m);
      if (input.requires_grad()) {
        MatrixMap<T> gx(input.ensure_grad().data(), batch, n);
        gx.noalias() += gy * ConstMatrixMap<T>(weight.data().data(), m, n);
      }
      if (weight.requires_grad()) {
        MatrixMap<T> gw(weight.ensure_grad().data(), m, n);
        gw.noalias() += gy.transpose() * ConstMatrixMap<T>(input.data().data(), batch, n);
      }
      if (bias.defined() && bias.requires_grad()) {
        std::span<T> gb = bias.ensure_grad();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t j = 0; j < m; ++j) gb[j] += gy(b, j);
        }
      }
    });
  }
  return out;
}

enum class Activation { Relu, Sigmoid, Softmax };

inline const char* activation_name(Activation kind) {
  switch (kind) {
    case Activation::Relu: return "relu";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Softmax: return "softmax";
  }
  return "?";
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
  if (tape.should_record({&input})) {
    out.set_requires_grad(true);
    tape.record("relu", {input}, out, [=]() mutable {
      const std::span<const T> gout = std::as_const(out).grad();
      std::span<T> gin = input.ensure_grad();
      for (std::size_t i = 0; i < gin.size(); ++i) {
        if (input[i] > T(0)) gin[i] += gout[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-input[i]));
  if (tape.should_record({&input})) {
    out.set_requires_grad(true);
    tape.record("sigmoid", {input}, out, [=]() mutable {
      const std::span<const T> gout = std::as_const(out).grad();
      std::span<T> gin = input.ensure_grad();
      for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += gout[i] * out[i] * (T(1) - out[i]);
    });
  }
  return out;
}

/// Softmax over the final axis.
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& input) {
  if (input.rank() == 0 || input.size() == 0) throw DimensionError("softmax: empty input");
  const std::size_t cols = input.shape().back();
  const std::size_t rows = input.size() / cols;
  Tensor<T> out(input.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = input.data().data() + r * cols;
    T* y = out.data().data() + r * cols;
    const T peak = *std::max_element(x, x + cols);
    T total = T(0);
    for (std::size_t j = 0; j < cols; ++j) total += (y[j] = std::exp(x[j] - peak));
    for (std::size_t j = 0; j < cols; ++j) y[j] /= total;
  }
  if (tape.should_record({&input})) {
    out.set_requires_grad(true);
    tape.record("softmax", {input}, out, [=]() mutable {
      const std::span<const T> gout = std::as_const(out).grad();
      std::span<T> gin = input.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = T(0);
        for (std::size_t j = 0; j < cols; ++j) dot += gout[r * cols + j] * out[r * cols + j];
        for (std::size_t j = 0; j < cols; ++j) {
          gin[r * cols + j] += out[r * cols + j] * (gout[r * cols + j] - dot);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> activate(Tape<T>& tape, const Tensor<T>& input, Activation kind) {
  switch (kind) {
    case Activation::Relu: return relu(tape, input);
    case Activation::Sigmoid: return sigmoid(tape, input);
    case Activation::Softmax: return softmax(tape, input);
  }
  throw ContractError("unknown activation");
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  if (tape.should_record({&a, &b})) {
    out.set_requires_grad(true);
    tape.record("add", {a, b}, out, [=]() mutable {
      const std::span<const T> gout = std::as_const(out).grad();
      for (const Tensor<T>* operand : {&a, &b}) {
        if (!operand->requires_grad()) continue;
        std::span<T> g = operand->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  if (tape.should_record({&a, &b})) {
    out.set_requires_grad(true);
    tape.record("mul", {a, b}, out, [=]() mutable {
      const std::span<const T> gout = std::as_const(out).grad();
      if (a.requires_grad()) {
        std::span<T> g = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i] * b[i];
      }
      if (b.requires_grad()) {
        std::span<T> g = b.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i] * a[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& input) {
  T acc = T(0);
  for (T v : input.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (tape.should_record({&input})) {
    out.set_requires_grad(true);
    tape.record("sum", {input}, out, [=]() mutable {
      const T g = std::as_const(out).grad()[0];
      for (T& v : input.ensure_grad()) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& input) {
  if (input.size() == 0) throw DimensionError("mean: empty input");
  T acc = T(0);
  for (T v : input.data()) acc += v;
  const T inv = T(1) / static_cast<T>(input.size());
  Tensor<T> out = Tensor<T>::scalar(acc * inv);
  if (tape.should_record({&input})) {
    out.set_requires_grad(true);
    tape.record("mean", {input}, out, [=]() mutable {
      const T g = std::as_const(out).grad()[0] * inv;
      for (T& v : input.ensure_grad()) v += g;
    });
  }
  return out;
}

/// Concatenates CxHxW or BxCxHxW tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const ImageGeometry first = image_geometry(parts[0].shape(), "concat");
  std::size_t channels = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const ImageGeometry g = image_geometry(parts[i].shape(), "concat");
    if (g.batched != first.batched || g.batch != first.batch || g.height != first.height ||
        g.width != first.width) {
      throw DimensionError("concat: input " + std::to_string(i) + " shape " + shape_str(parts[i].shape()) +
                           " differs from " + shape_str(parts[0].shape()) + " outside the channel axis");
    }
    channels += g.channels;
  }
  Tensor<T> out(first.shape_with(channels, first.height, first.width));
  const std::size_t plane = first.plane();
  const std::size_t out_sample = channels * plane;
  std::size_t offset = 0;
  for (const Tensor<T>& part : parts) {
    const std::size_t sample = part.size() / first.batch;
    for (std::size_t b = 0; b < first.batch; ++b) {
      std::copy_n(part.data().data() + b * sample, sample, out.data().data() + b * out_sample + offset);
    }
    offset += sample;
  }
  bool record = false;
  for (const Tensor<T>& part : parts) record = record || part.requires_grad();
  if (tape.enabled() && record) {
    out.set_requires_grad(true);
    const std::size_t batch = first.batch;
    tape.record("concat", parts, out, [=, parts = parts]() mutable {
      const std::span<const T> gout = std::as_const(out).grad();
      std::size_t off = 0;
      for (Tensor<T>& part : parts) {
        const std::size_t sample = part.size() / batch;
        if (part.requires_grad()) {
          std::span<T> g = part.ensure_grad();
          for (std::size_t b = 0; b < batch; ++b) {
            const T* src = gout.data() + b * out_sample + off;
            for (std::size_t i = 0; i < sample; ++i) g[b * sample + i] += src[i];
          }
        }
        off += sample;
      }
    });
  }
  return out;
}

enum class Mode { Train, Eval };

/// Running statistics of a batch-normalization layer.
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T epsilon = T(1e-5);
  /// Frozen layers normalize with running statistics and never update them.
  bool frozen = false;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

/// Per-channel batch normalization over B*H*W. Train mode uses batch
/// statistics and updates the running estimate (unbiased variance); eval
/// mode, or a frozen state, uses the running estimate.
template <typename T>
Tensor<T> batchnorm2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& gamma,
                      const Tensor<T>& beta, BatchNormState<T>& state, Mode mode) {
  const ImageGeometry g = image_geometry(input.shape(), "batchnorm2d");
  const std::size_t c_count = g.channels;
  if (gamma.size() != c_count || beta.size() != c_count || state.running_mean.size() != c_count ||
      state.running_var.size() != c_count) {
    throw DimensionError("batchnorm2d: channel axis C=" + std::to_string(c_count) +
                         " does not match parameter extents");
  }
  const std::size_t count = g.batch * g.plane();
  const bool use_batch = mode == Mode::Train && !state.frozen;
  if (use_batch && count < 2) {
    throw DimensionError("batchnorm2d: degenerate batch, B*H*W=" + std::to_string(count) +
                         " < 2 in train mode");
  }
  std::vector<T> mean_c(c_count), inv_std(c_count);
  for (std::size_t c = 0; c < c_count; ++c) {
    if (use_batch) {
      T acc = T(0);
      for (std::size_t b = 0; b < g.batch; ++b) {
        const T* p = input.data().data() + b * g.sample() + c * g.plane();
        for (std::size_t i = 0; i < g.plane(); ++i) acc += p[i];
      }
      const T mu = acc / static_cast<T>(count);
      T sq = T(0);
      for (std::size_t b = 0; b < g.batch; ++b) {
        const T* p = input.data().data() + b * g.sample() + c * g.plane();
        for (std::size_t i = 0; i < g.plane(); ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      const T var = sq / static_cast<T>(count);
      mean_c[c] = mu;
      inv_std[c] = T(1) / std::sqrt(var + state.epsilon);
      const T unbiased = sq / static_cast<T>(count - 1);
      state.running_mean[c] = (T(1) - state.momentum) * state.running_mean[c] + state.momentum * mu;
      state.running_var[c] = (T(1) - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    } else {
      mean_c[c] = state.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(state.running_var[c] + state.epsilon);
    }
  }
  Tensor<T> out(input.shape());
  std::vector<T> xhat(input.size());
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t c = 0; c < c_count; ++c) {
      const std::size_t base = b * g.sample() + c * g.plane();
      for (std::size_t i = 0; i < g.plane(); ++i) {
        const T xh = (input[base + i] - mean_c[c]) * inv_std[c];
        xhat[base + i] = xh;
        out[base + i] = gamma[c] * xh + beta[c];
      }
    }
  }
  if (tape.should_record({&input, &gamma, &beta})) {
    out.set_requires_grad(true);
    tape.record("batchnorm2d", {input, gamma, beta}, out,
                [=, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
                  const std::span<const T> gout = std::as_const(out).grad();
                  for (std::size_t c = 0; c < c_count; ++c) {
                    T sum_dy = T(0), sum_dy_xhat = T(0);
                    for (std::size_t b = 0; b < g.batch; ++b) {
                      const std::size_t base = b * g.sample() + c * g.plane();
                      for (std::size_t i = 0; i < g.plane(); ++i) {
                        sum_dy += gout[base + i];
                        sum_dy_xhat += gout[base + i] * xhat[base + i];
                      }
                    }
                    if (gamma.requires_grad()) gamma.ensure_grad()[c] += sum_dy_xhat;
                    if (beta.requires_grad()) beta.ensure_grad()[c] += sum_dy;
                    if (!input.requires_grad()) continue;
                    std::span<T> gin = input.ensure_grad();
                    const T scale = gamma[c] * inv_std[c];
                    const T n = static_cast<T>(count);
                    for (std::size_t b = 0; b < g.batch; ++b) {
                      const std::size_t base = b * g.sample() + c * g.plane();
                      for (std::size_t i = 0; i < g.plane(); ++i) {
                        if (use_batch) {
                          gin[base + i] +=
                              scale * (gout[base + i] - sum_dy / n - xhat[base + i] * sum_dy_xhat / n);
                        } else {
                          gin[base + i] += scale * gout[base + i];
                        }
                      }
                    }
                  }
                });
  }
  return out;
}

enum class CrossEntropyForm { PixelwiseBinary, Categorical };

/// Lower clamp applied to every log argument.
inline constexpr double kLogClamp = 1e-12;

/// Cross-entropy loss, averaged to a scalar.
///
/// PixelwiseBinary: prediction and target share a shape; the loss is the
/// mean of -[t log p + (1-t) log(1-p)].
/// Categorical: prediction is K or BxK probabilities; target holds B class
/// indices; the loss is the mean of -log p[target].
template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& prediction, const Tensor<T>& target,
                        CrossEntropyForm form) {
  const T eps = static_cast<T>(kLogClamp);
  if (form == CrossEntropyForm::PixelwiseBinary) {
    detail::require_same_shape(prediction.shape(), target.shape(), "cross_entropy");
    const std::size_t n = prediction.size();
    if (n == 0) throw DimensionError("cross_entropy: empty prediction");
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) {
      const T p = prediction[i];
      const T t = target[i];
      acc -= t * std::log(std::max(p, eps)) + (T(1) - t) * std::log(std::max(T(1) - p, eps));
    }
    Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(n));
    if (tape.should_record({&prediction})) {
      out.set_requires_grad(true);
      tape.record("cross_entropy", {prediction, target}, out, [=]() mutable {
        const T g = std::as_const(out).grad()[0] / static_cast<T>(n);
        std::span<T> gp = prediction.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          const T p = prediction[i];
          const T t = target[i];
          T d = T(0);
          if (p > eps) d -= t / p;
          if (T(1) - p > eps) d += (T(1) - t) / (T(1) - p);
          gp[i] += g * d;
        }
      });
    }
    return out;
  }

  const bool batched = prediction.rank() == 2;
  if (!batched && prediction.rank() != 1) {
    throw DimensionError("cross_entropy: categorical prediction must be K or BxK, got " +
                         shape_str(prediction.shape()));
  }
  const std::size_t batch = batched ? prediction.dim(0) : 1;
  const std::size_t k = prediction.shape().back();
  if (target.size() != batch) {
    throw DimensionError("cross_entropy: " + std::to_string(batch) + " predictions but " +
                         std::to_string(target.size()) + " target indices");
  }
  std::vector<std::size_t> cls(batch);
  T acc = T(0);
  for (std::size_t b = 0; b < batch; ++b) {
    const T raw = target[b];
    if (raw < T(0) || raw >= static_cast<T>(k) || raw != std::floor(raw)) {
      throw DimensionError("cross_entropy: target index " + std::to_string(static_cast<double>(raw)) +
                           " outside class axis of extent " + std::to_string(k));
    }
    cls[b] = static_cast<std::size_t>(raw);
    acc -= std::log(std::max(prediction[b * k + cls[b]], eps));
  }
  Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(batch));
  if (tape.should_record({&prediction})) {
    out.set_requires_grad(true);
    tape.record("cross_entropy", {prediction, target}, out, [=]() mutable {
      const T g = std::as_const(out).grad()[0] / static_cast<T>(batch);
      std::span<T> gp = prediction.ensure_grad();
      for (std::size_t b = 0; b < batch; ++b) {
        const T p = prediction[b * k + cls[b]];
        if (p > eps) gp[b * k + cls[b]] -= g / p;
      }
    });
  }
  return out;
}

}  // namespace neurocell::ops
