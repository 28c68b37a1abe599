#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "neurocell/tensor.hpp"

namespace neurocell {

/// Central finite differences (f(x+h) - f(x-h)) / 2h of a scalar function,
/// one element at a time. The input is restored after each probe.
template <typename T>
Tensor<T> finite_difference_grad(const std::function<T(Tensor<T>&)>& f, Tensor<T>& input,
                                 T h = T(1e-5)) {
  Tensor<T> out(input.shape());
  std::span<T> x = input.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T saved = x[i];
    x[i] = saved + h;
    const T plus = f(input);
    x[i] = saved - h;
    const T minus = f(input);
    x[i] = saved;
    out[i] = (plus - minus) / (T(2) * h);
  }
  return out;
}

/// Same as finite_difference_grad but only at the listed element indices;
/// the result holds one derivative per index.
template <typename T>
std::vector<T> finite_difference_at(const std::function<T(Tensor<T>&)>& f, Tensor<T>& input,
                                    std::span<const std::size_t> indices, T h = T(1e-5)) {
  std::vector<T> out;
  out.reserve(indices.size());
  std::span<T> x = input.data();
  for (std::size_t i : indices) {
    const T saved = x[i];
    x[i] = saved + h;
    const T plus = f(input);
    x[i] = saved - h;
    const T minus = f(input);
    x[i] = saved;
    out.push_back((plus - minus) / (T(2) * h));
  }
  return out;
}

/// Normwise relative error max|a - n| / max(max|n|, max|a|, floor).
/// The floor keeps an all-zero reference from dividing by zero.
template <typename T>
double gradient_relative_error(std::span<const T> analytic, std::span<const T> numeric,
                               double floor = 1e-10) {
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(analytic[i]) - static_cast<double>(numeric[i])));
    scale = std::max({scale, std::abs(static_cast<double>(analytic[i])),
                      std::abs(static_cast<double>(numeric[i]))});
  }
  return diff / scale;
}

}  // namespace neurocell
