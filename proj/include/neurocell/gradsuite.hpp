#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "neurocell/gradcheck.hpp"
#include "neurocell/netgraph.hpp"
#include "neurocell/ops.hpp"
#include "neurocell/rng.hpp"
#include "neurocell/tape.hpp"

namespace neurocell {

inline Tensor<double> random_uniform_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Builds an output tensor from the given inputs on the given tape.
using OpUnderTest = std::function<Tensor<double>(Tape<double>&, std::vector<Tensor<double>>&)>;

/// Worst normwise relative error between backward() and central finite
/// differences over every input of `op`. The probed scalar is
/// sum(output * R) for a fixed random R, so ops whose plain sum is constant
/// (softmax) are still exercised.
inline double op_gradient_error(const OpUnderTest& op, std::vector<Tensor<double>> inputs, Rng& rng,
                                double h = 1e-5) {
  Tape<double> probe_tape = Tape<double>::no_grad();
  const Tensor<double> probe = op(probe_tape, inputs);
  const Tensor<double> weights = random_uniform_tensor(probe.shape(), rng);

  for (Tensor<double>& t : inputs) {
    t.set_requires_grad(true);
    t.clear_grad();
  }
  Tape<double> tape;
  Tensor<double> out = op(tape, inputs);
  tape.backward(ops::sum(tape, ops::mul(tape, out, weights)));

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::function<double(Tensor<double>&)> f = [&](Tensor<double>&) {
      Tape<double> t = Tape<double>::no_grad();
      const Tensor<double> y = op(t, inputs);
      double acc = 0.0;
      for (std::size_t j = 0; j < y.size(); ++j) acc += y[j] * weights[j];
      return acc;
    };
    const Tensor<double> numeric = finite_difference_grad<double>(f, inputs[i], h);
    std::vector<double> analytic(inputs[i].size(), 0.0);
    if (inputs[i].has_grad()) std::copy(inputs[i].grad().begin(), inputs[i].grad().end(), analytic.begin());
    worst = std::max(worst, gradient_relative_error<double>(analytic, numeric.data()));
  }
  return worst;
}

/// Scalar training objective of a network output.
using NetworkLoss = std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)>;

/// Normwise relative error of backward() against finite differences for
/// every parameter tensor of `spec` and for the input. With `samples` = 0
/// every coordinate is probed; otherwise that many random coordinates per
/// tensor. Batch-norm statistics are restored between probes.
inline double network_gradient_error(NetworkSpec<double> spec, Tensor<double> input, const NetworkLoss& loss,
                                     ops::Mode mode, Rng& rng, std::size_t samples = 0, double h = 1e-6) {
  set_freeze_point(spec, 0);
  const NetworkSpec<double> pristine = spec;
  auto restore_stats = [&] {
    for (std::size_t i = 0; i < spec.nodes.size(); ++i) spec.nodes[i].bn = pristine.nodes[i].bn;
  };

  std::vector<Tensor<double>> tensors = spec.parameters();
  tensors.push_back(input);
  for (Tensor<double>& t : tensors) {
    t.set_requires_grad(true);
    t.clear_grad();
  }
  {
    Tape<double> tape;
    tape.backward(loss(tape, forward_pass(spec, tape, input, mode)));
  }

  std::function<double(Tensor<double>&)> f = [&](Tensor<double>&) {
    restore_stats();
    Tape<double> t = Tape<double>::no_grad();
    return loss(t, forward_pass(spec, t, input, mode)).item();
  };

  std::vector<double> analytic, numeric;
  for (Tensor<double>& t : tensors) {
    std::vector<std::size_t> idx;
    if (samples == 0 || samples >= t.size()) {
      idx.resize(t.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    } else {
      for (std::size_t s = 0; s < samples; ++s) idx.push_back(static_cast<std::size_t>(rng.below(t.size())));
    }
    const std::vector<double> fd = finite_difference_at<double>(f, t, idx, h);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      analytic.push_back(t.has_grad() ? t.grad()[idx[j]] : 0.0);
      numeric.push_back(fd[j]);
    }
  }
  restore_stats();
  return gradient_relative_error<double>(analytic, numeric);
}

struct GradcheckResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::size_t seeds = 0;
  bool passed() const { return max_error <= tolerance; }
};

struct GradcheckOptions {
  std::size_t seeds = 20;
  std::uint64_t seed = 0;
  bool include_networks = true;
  /// Random coordinates probed per tensor for network checks after the
  /// first seed, which probes every coordinate.
  std::size_t network_samples = 6;
};

namespace detail {

inline std::vector<std::pair<std::string, std::function<double(Rng&, std::size_t)>>> op_checks() {
  using T = Tensor<double>;
  using V = std::vector<T>;
  std::vector<std::pair<std::string, std::function<double(Rng&, std::size_t)>>> out;
  auto rt = [](Shape s, Rng& r, double lo = -1.0, double hi = 1.0) {
    return random_uniform_tensor(std::move(s), r, lo, hi);
  };

  out.emplace_back("conv2d", [rt](Rng& r, std::size_t s) {
    const std::size_t stride = 1 + s % 2, pad = s % 3 == 0 ? 0 : 1;
    return op_gradient_error(
        [=](Tape<double>& t, V& in) { return ops::conv2d(t, in[0], in[1], in[2], stride, pad); },
        {rt({2, 8, 8}, r), rt({4, 2, 3, 3}, r), rt({4}, r)}, r);
  });
  out.emplace_back("conv_transpose2d", [rt](Rng& r, std::size_t s) {
    const std::size_t k = 2 + s % 2, stride = 1 + (s / 2) % 2;
    return op_gradient_error(
        [=](Tape<double>& t, V& in) { return ops::conv_transpose2d(t, in[0], in[1], in[2], stride); },
        {rt({2, 4, 4}, r), rt({2, 3, k, k}, r), rt({3}, r)}, r);
  });
  out.emplace_back("maxpool2d", [rt](Rng& r, std::size_t) {
    return op_gradient_error([](Tape<double>& t, V& in) { return ops::maxpool2d(t, in[0], 2); },
                             {rt({2, 4, 4}, r)}, r);
  });
  out.emplace_back("avgpool3x3", [rt](Rng& r, std::size_t) {
    return op_gradient_error([](Tape<double>& t, V& in) { return ops::avgpool3x3(t, in[0]); },
                             {rt({2, 5, 5}, r)}, r);
  });
  out.emplace_back("global_avg_pool", [rt](Rng& r, std::size_t) {
    return op_gradient_error([](Tape<double>& t, V& in) { return ops::global_avg_pool(t, in[0]); },
                             {rt({3, 4, 4}, r)}, r);
  });
  out.emplace_back("dense", [rt](Rng& r, std::size_t s) {
    const Shape x = s % 2 ? Shape{2, 5} : Shape{5};
    return op_gradient_error([](Tape<double>& t, V& in) { return ops::dense(t, in[0], in[1], in[2]); },
                             {rt(x, r), rt({3, 5}, r), rt({3}, r)}, r);
  });
  out.emplace_back("relu", [rt](Rng& r, std::size_t) {
    return op_gradient_error([](Tape<double>& t, V& in) { return ops::relu(t, in[0]); }, {rt({3, 7}, r)}, r);
  });
  out.emplace_back("sigmoid", [rt](Rng& r, std::size_t) {
    return op_gradient_error([](Tape<double>& t, V& in) { return ops::sigmoid(t, in[0]); }, {rt({3, 7}, r)}, r);
  });
  out.emplace_back("softmax", [rt](Rng& r, std::size_t) {
    return op_gradient_error([](Tape<double>& t, V& in) { return ops::softmax(t, in[0]); }, {rt({2, 5}, r)}, r);
  });
  out.emplace_back("add", [rt](Rng& r, std::size_t) {
    return op_gradient_error([](Tape<double>& t, V& in) { return ops::add(t, in[0], in[1]); },
                             {rt({2, 3, 3}, r), rt({2, 3, 3}, r)}, r);
  });
  out.emplace_back("mul", [rt](Rng& r, std::size_t) {
    return op_gradient_error([](Tape<double>& t, V& in) { return ops::mul(t, in[0], in[1]); },
                             {rt({2, 3, 3}, r), rt({2, 3, 3}, r)}, r);
  });
  out.emplace_back("sum", [rt](Rng& r, std::size_t) {
    return op_gradient_error([](Tape<double>& t, V& in) { return ops::sum(t, in[0]); }, {rt({4, 3}, r)}, r);
  });
  out.emplace_back("mean", [rt](Rng& r, std::size_t) {
    return op_gradient_error([](Tape<double>& t, V& in) { return ops::mean(t, in[0]); }, {rt({4, 3}, r)}, r);
  });
  out.emplace_back("concat_channels", [rt](Rng& r, std::size_t) {
    return op_gradient_error([](Tape<double>& t, V& in) { return ops::concat_channels(t, in); },
                             {rt({1, 3, 3}, r), rt({2, 3, 3}, r), rt({1, 3, 3}, r)}, r);
  });
  out.emplace_back("cross_entropy(sigmoid)", [rt](Rng& r, std::size_t) {
    Tensor<double> target({2, 4, 4});
    for (double& v : target.data()) v = r.uniform() < 0.5 ? 1.0 : 0.0;
    return op_gradient_error(
        [=](Tape<double>& t, V& in) {
          return ops::cross_entropy(t, ops::sigmoid(t, in[0]), target, ops::CrossEntropyForm::PixelwiseBinary);
        },
        {rt({2, 4, 4}, r, -3.0, 3.0)}, r);
  });
  out.emplace_back("cross_entropy(softmax)", [rt](Rng& r, std::size_t) {
    const Tensor<double> target({3}, {static_cast<double>(r.below(4)), static_cast<double>(r.below(4)),
                                      static_cast<double>(r.below(4))});
    return op_gradient_error(
        [=](Tape<double>& t, V& in) {
          return ops::cross_entropy(t, ops::softmax(t, in[0]), target, ops::CrossEntropyForm::Categorical);
        },
        {rt({3, 4}, r, -2.0, 2.0)}, r);
  });
  return out;
}

inline std::vector<std::pair<std::string, std::function<double(Rng&, std::size_t)>>> batchnorm_checks() {
  using V = std::vector<Tensor<double>>;
  std::vector<std::pair<std::string, std::function<double(Rng&, std::size_t)>>> out;
  out.emplace_back("batchnorm2d(train)", [](Rng& r, std::size_t) {
    return op_gradient_error(
        [](Tape<double>& t, V& in) {
          ops::BatchNormState<double> st(3);
          return ops::batchnorm2d(t, in[0], in[1], in[2], st, ops::Mode::Train);
        },
        {random_uniform_tensor({2, 3, 4, 4}, r), random_uniform_tensor({3}, r, 0.5, 1.5),
         random_uniform_tensor({3}, r)},
        r);
  });
  out.emplace_back("batchnorm2d(eval)", [](Rng& r, std::size_t) {
    ops::BatchNormState<double> state(3);
    for (double& v : state.running_mean) v = r.uniform(-0.5, 0.5);
    for (double& v : state.running_var) v = r.uniform(0.5, 2.0);
    return op_gradient_error(
        [state](Tape<double>& t, V& in) {
          ops::BatchNormState<double> st = state;
          return ops::batchnorm2d(t, in[0], in[1], in[2], st, ops::Mode::Eval);
        },
        {random_uniform_tensor({2, 3, 4, 4}, r), random_uniform_tensor({3}, r, 0.5, 1.5),
         random_uniform_tensor({3}, r)},
        r);
  });
  return out;
}

inline NetworkLoss pixel_loss(const Tensor<double>& target) {
  return [target](Tape<double>& t, const Tensor<double>& out) {
    return ops::cross_entropy(t, out, target, ops::CrossEntropyForm::PixelwiseBinary);
  };
}

inline NetworkLoss class_loss(std::size_t cls) {
  const Tensor<double> target = Tensor<double>::scalar(static_cast<double>(cls));
  return [target](Tape<double>& t, const Tensor<double>& out) {
    return ops::cross_entropy(t, out, target, ops::CrossEntropyForm::Categorical);
  };
}

inline std::vector<std::pair<std::string, std::function<double(Rng&, std::size_t, std::size_t)>>>
network_checks() {
  std::vector<std::pair<std::string, std::function<double(Rng&, std::size_t, std::size_t)>>> out;
  out.emplace_back("network:unet(depth 2, base 4)", [](Rng& r, std::size_t, std::size_t samples) {
    NetworkSpec<double> spec = build_unet<double>(2, 4, 1, 1, r);
    Tensor<double> target({1, 16, 16});
    for (double& v : target.data()) v = r.uniform() < 0.3 ? 1.0 : 0.0;
    return network_gradient_error(spec, random_uniform_tensor({1, 16, 16}, r, 0.0, 1.0), pixel_loss(target),
                                  ops::Mode::Train, r, samples);
  });
  out.emplace_back("network:residual([1,1], base 4)", [](Rng& r, std::size_t, std::size_t samples) {
    NetworkSpec<double> spec = build_residual_classifier<double>({1, 1}, 4, 3, r);
    return network_gradient_error(spec, random_uniform_tensor({3, 32, 32}, r, 0.0, 1.0), class_loss(r.below(3)),
                                  ops::Mode::Train, r, samples);
  });
  out.emplace_back("network:inception(2 blocks, base 4)", [](Rng& r, std::size_t, std::size_t samples) {
    NetworkSpec<double> spec = build_inception_classifier<double>(2, 4, 3, r);
    return network_gradient_error(spec, random_uniform_tensor({3, 32, 32}, r, 0.0, 1.0), class_loss(r.below(3)),
                                  ops::Mode::Train, r, samples);
  });
  return out;
}

}  // namespace detail

/// Finite-difference check of every engine operation and of the three
/// network families, each over `seeds` independent random draws.
/// Tolerance is 1e-4 for plain ops and 1e-3 through batch norm and networks.
inline std::vector<GradcheckResult> run_gradcheck_suite(
    const GradcheckOptions& options, const std::function<void(const GradcheckResult&)>& progress = {}) {
  std::vector<GradcheckResult> results;
  const Rng root(options.seed);
  auto finish = [&](GradcheckResult r) {
    if (progress) progress(r);
    results.push_back(std::move(r));
  };
  auto run_simple = [&](const auto& checks, double tol) {
    for (const auto& [name, check] : checks) {
      GradcheckResult r{name, 0.0, tol, options.seeds};
      for (std::size_t s = 0; s < options.seeds; ++s) {
        Rng rng = root.derive(name).derive(s);
        r.max_error = std::max(r.max_error, check(rng, s));
      }
      finish(std::move(r));
    }
  };
  run_simple(detail::op_checks(), 1e-4);
  run_simple(detail::batchnorm_checks(), 1e-3);
  if (options.include_networks) {
    for (const auto& [name, check] : detail::network_checks()) {
      GradcheckResult r{name, 0.0, 1e-3, options.seeds};
      for (std::size_t s = 0; s < options.seeds; ++s) {
        Rng rng = root.derive(name).derive(s);
        r.max_error = std::max(r.max_error, check(rng, s, s == 0 ? 0 : options.network_samples));
      }
      finish(std::move(r));
    }
  }
  return results;
}

}  // namespace neurocell
