#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "neurocell/errors.hpp"
#include "neurocell/ops.hpp"
#include "neurocell/rng.hpp"
#include "neurocell/tape.hpp"
#include "neurocell/tensor.hpp"

namespace neurocell {

enum class LayerKind : std::uint8_t {
  Input = 0,
  Conv = 1,
  ConvT = 2,
  Pool = 3,
  Dense = 4,
  Activation = 5,
  BatchNorm = 6,
  Concat = 7,
  Add = 8,
  Output = 9,
};

enum class PoolKind : std::uint8_t { Max2 = 0, Avg3 = 1, GlobalAvg = 2 };

enum class NetworkFamily : std::uint8_t { UNet = 0, Residual = 1, Inception = 2 };

inline const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Input: return "input";
    case LayerKind::Conv: return "conv";
    case LayerKind::ConvT: return "convT";
    case LayerKind::Pool: return "pool";
    case LayerKind::Dense: return "dense";
    case LayerKind::Activation: return "activation";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Concat: return "concat";
    case LayerKind::Add: return "add";
    case LayerKind::Output: return "output";
  }
  return "?";
}

inline const char* family_name(NetworkFamily family) {
  switch (family) {
    case NetworkFamily::UNet: return "unet";
    case NetworkFamily::Residual: return "residual";
    case NetworkFamily::Inception: return "inception";
  }
  return "?";
}

/// One node of a layer graph. Parameter tensors are owned by value: copying
/// a node deep-copies its weights.
template <typename T>
struct LayerNode {
  std::size_t index = 0;
  LayerKind kind = LayerKind::Input;
  std::vector<std::size_t> inputs;
  /// conv / convT / dense: {weight, bias}; batchnorm: {gamma, beta}.
  std::vector<Tensor<T>> params;
  bool trainable = true;
  std::string label;

  std::size_t stride = 1;
  std::size_t padding = 0;
  PoolKind pool = PoolKind::Max2;
  ops::Activation activation = ops::Activation::Relu;
  ops::BatchNormState<T> bn;
  /// Channel count of this node's output.
  std::size_t channels = 0;

  LayerNode() = default;
  LayerNode(LayerNode&&) noexcept = default;
  LayerNode& operator=(LayerNode&&) noexcept = default;
  LayerNode(const LayerNode& other)
      : index(other.index), kind(other.kind), inputs(other.inputs), trainable(other.trainable),
        label(other.label), stride(other.stride), padding(other.padding), pool(other.pool),
        activation(other.activation), bn(other.bn), channels(other.channels) {
    params.reserve(other.params.size());
    for (const Tensor<T>& p : other.params) params.push_back(p.clone());
  }
  LayerNode& operator=(const LayerNode& other) {
    if (this != &other) *this = LayerNode(other);
    return *this;
  }

  bool parameterized() const { return !params.empty(); }
};

/// Ordered layer graph with freeze-point semantics.
///
/// Nodes execute in index order; every input index precedes its consumer.
/// Parameterized nodes are trainable iff index >= min(freeze_point, head).
/// Freeze point L (the node count) therefore means "train the head only".
template <typename T>
class NetworkSpec {
 public:
  NetworkFamily family = NetworkFamily::UNet;
  std::vector<LayerNode<T>> nodes;
  std::size_t head_index = 0;
  std::size_t freeze_point = 0;
  std::size_t in_channels = 1;
  /// Input spatial extents must be multiples of this (2^depth for U-Net).
  std::size_t spatial_multiple = 1;
  /// U-Net depth; stage/block count for classifiers (informational).
  std::size_t depth = 0;

  std::size_t size() const { return nodes.size(); }
  const LayerNode<T>& head() const { return nodes.at(head_index); }
  LayerNode<T>& head() { return nodes.at(head_index); }
  std::size_t output_channels() const { return nodes.at(head_index).channels; }

  std::vector<std::size_t> nodes_of(LayerKind kind) const {
    std::vector<std::size_t> out;
    for (const LayerNode<T>& n : nodes) {
      if (n.kind == kind) out.push_back(n.index);
    }
    return out;
  }

  /// Block boundaries where re-training may start: add and concat nodes,
  /// 2x2 pooling boundaries, plus 0 (train everything) and L (head only).
  std::vector<std::size_t> legal_freeze_points() const {
    std::vector<std::size_t> out{0};
    for (const LayerNode<T>& n : nodes) {
      const bool boundary = n.kind == LayerKind::Add || n.kind == LayerKind::Concat ||
                            (n.kind == LayerKind::Pool && n.pool == PoolKind::Max2);
      if (boundary && n.index != 0) out.push_back(n.index);
    }
    out.push_back(nodes.size());
    return out;
  }

  std::size_t effective_freeze_index() const { return std::min(freeze_point, head_index); }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (const LayerNode<T>& n : nodes) out.insert(out.end(), n.params.begin(), n.params.end());
    return out;
  }

  std::vector<Tensor<T>> trainable_parameters() const {
    std::vector<Tensor<T>> out;
    for (const LayerNode<T>& n : nodes) {
      if (n.trainable) out.insert(out.end(), n.params.begin(), n.params.end());
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const Tensor<T>& p : parameters()) total += p.size();
    return total;
  }

  std::size_t trainable_parameter_count() const {
    std::size_t total = 0;
    for (const Tensor<T>& p : trainable_parameters()) total += p.size();
    return total;
  }
};

namespace detail {

/// Appends nodes with dense ascending indices and He-uniform initialization.
template <typename T>
class GraphBuilder {
 public:
  GraphBuilder(NetworkSpec<T>& spec, Rng& rng) : spec_(spec), rng_(rng) {}

  std::size_t input(std::size_t channels) {
    LayerNode<T> n;
    n.kind = LayerKind::Input;
    n.channels = channels;
    n.label = "input";
    return push(std::move(n));
  }

  std::size_t conv(std::size_t from, std::size_t out_c, std::size_t k, std::size_t stride,
                   std::size_t pad, std::string label) {
    const std::size_t in_c = channels(from);
    LayerNode<T> n;
    n.kind = LayerKind::Conv;
    n.inputs = {from};
    n.stride = stride;
    n.padding = pad;
    n.channels = out_c;
    n.label = std::move(label);
    n.params = {he_uniform({out_c, in_c, k, k}, in_c * k * k), Tensor<T>(Shape{out_c})};
    return push(std::move(n));
  }

  std::size_t conv_transpose(std::size_t from, std::size_t out_c, std::size_t k, std::size_t stride,
                             std::string label) {
    const std::size_t in_c = channels(from);
    LayerNode<T> n;
    n.kind = LayerKind::ConvT;
    n.inputs = {from};
    n.stride = stride;
    n.channels = out_c;
    n.label = std::move(label);
    // Each output pixel of a k=stride transposed conv sees in_c inputs.
    const std::size_t fan_in = std::max<std::size_t>(1, in_c * k * k / (stride * stride));
    n.params = {he_uniform({in_c, out_c, k, k}, fan_in), Tensor<T>(Shape{out_c})};
    return push(std::move(n));
  }

  std::size_t batchnorm(std::size_t from, std::string label) {
    const std::size_t c = channels(from);
    LayerNode<T> n;
    n.kind = LayerKind::BatchNorm;
    n.inputs = {from};
    n.channels = c;
    n.label = std::move(label);
    n.params = {Tensor<T>(Shape{c}, T(1)), Tensor<T>(Shape{c}, T(0))};
    n.bn = ops::BatchNormState<T>(c);
    return push(std::move(n));
  }

  std::size_t activation(std::size_t from, ops::Activation kind, std::string label) {
    LayerNode<T> n;
    n.kind = LayerKind::Activation;
    n.inputs = {from};
    n.activation = kind;
    n.channels = channels(from);
    n.label = std::move(label);
    return push(std::move(n));
  }

  std::size_t pool(std::size_t from, PoolKind kind, std::string label) {
    LayerNode<T> n;
    n.kind = LayerKind::Pool;
    n.inputs = {from};
    n.pool = kind;
    n.channels = channels(from);
    n.label = std::move(label);
    return push(std::move(n));
  }

  std::size_t concat(std::vector<std::size_t> from, std::string label) {
    LayerNode<T> n;
    n.kind = LayerKind::Concat;
    for (std::size_t f : from) n.channels += channels(f);
    n.inputs = std::move(from);
    n.label = std::move(label);
    return push(std::move(n));
  }

  std::size_t add(std::size_t a, std::size_t b, std::string label) {
    if (channels(a) != channels(b)) throw ContractError("add node operands differ in channels");
    LayerNode<T> n;
    n.kind = LayerKind::Add;
    n.inputs = {a, b};
    n.channels = channels(a);
    n.label = std::move(label);
    return push(std::move(n));
  }

  std::size_t dense(std::size_t from, std::size_t out_features, std::string label) {
    const std::size_t in_f = channels(from);
    LayerNode<T> n;
    n.kind = LayerKind::Dense;
    n.inputs = {from};
    n.channels = out_features;
    n.label = std::move(label);
    n.params = {he_uniform({out_features, in_f}, in_f), Tensor<T>(Shape{out_features})};
    return push(std::move(n));
  }

  std::size_t output(std::size_t from) {
    LayerNode<T> n;
    n.kind = LayerKind::Output;
    n.inputs = {from};
    n.channels = channels(from);
    n.label = "output";
    return push(std::move(n));
  }

  /// conv -> batchnorm -> relu
  std::size_t conv_bn_relu(std::size_t from, std::size_t out_c, std::size_t k, std::size_t stride,
                           const std::string& label) {
    const std::size_t c = conv(from, out_c, k, stride, k / 2, label + ".conv");
    const std::size_t b = batchnorm(c, label + ".bn");
    return activation(b, ops::Activation::Relu, label + ".relu");
  }

  Tensor<T> he_uniform(Shape shape, std::size_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor<T> t(std::move(shape));
    for (T& v : t.data()) v = static_cast<T>(rng_.uniform(-bound, bound));
    return t;
  }

 private:
  std::size_t channels(std::size_t idx) const { return spec_.nodes.at(idx).channels; }

  std::size_t push(LayerNode<T> node) {
    node.index = spec_.nodes.size();
    for (std::size_t in : node.inputs) {
      if (in >= node.index) throw ContractError("layer input must precede its consumer");
    }
    spec_.nodes.push_back(std::move(node));
    return spec_.nodes.back().index;
  }

  NetworkSpec<T>& spec_;
  Rng& rng_;
};

template <typename T>
void apply_trainable_flags(NetworkSpec<T>& spec) {
  const std::size_t k = spec.effective_freeze_index();
  for (LayerNode<T>& n : spec.nodes) {
    const bool train = n.index >= k;
    n.trainable = n.parameterized() ? train : false;
    for (Tensor<T>& p : n.params) {
      p.set_requires_grad(train);
      if (!train) p.clear_grad();
    }
    if (n.kind == LayerKind::BatchNorm) n.bn.frozen = !train;
  }
}

}  // namespace detail

/// Encoder-decoder segmenter with channel-concatenating skips and a sigmoid
/// head. Convolutions use same padding, so output extent equals input extent.
template <typename T>
NetworkSpec<T> build_unet(std::size_t depth, std::size_t base_channels, std::size_t in_channels,
                          std::size_t out_channels, Rng& rng) {
  if (depth < 1) throw ConfigError("build_unet: depth must be >= 1");
  if (base_channels < 1) throw ConfigError("build_unet: base_channels must be >= 1");
  if (in_channels < 1 || out_channels < 1) throw ConfigError("build_unet: channel counts must be >= 1");
  NetworkSpec<T> spec;
  spec.family = NetworkFamily::UNet;
  spec.in_channels = in_channels;
  spec.spatial_multiple = std::size_t{1} << depth;
  spec.depth = depth;
  detail::GraphBuilder<T> g(spec, rng);

  auto double_conv = [&](std::size_t from, std::size_t width, const std::string& label) {
    std::size_t x = g.conv(from, width, 3, 1, 1, label + ".conv1");
    x = g.activation(x, ops::Activation::Relu, label + ".relu1");
    x = g.conv(x, width, 3, 1, 1, label + ".conv2");
    return g.activation(x, ops::Activation::Relu, label + ".relu2");
  };

  std::size_t x = g.input(in_channels);
  std::vector<std::size_t> skips;
  for (std::size_t level = 0; level < depth; ++level) {
    const std::string label = "down" + std::to_string(level);
    x = double_conv(x, base_channels << level, label);
    skips.push_back(x);
    x = g.pool(x, PoolKind::Max2, label + ".pool");
  }
  x = double_conv(x, base_channels << depth, "bottleneck");
  for (std::size_t level = depth; level-- > 0;) {
    const std::string label = "up" + std::to_string(level);
    const std::size_t width = base_channels << level;
    x = g.conv_transpose(x, width, 2, 2, label + ".upconv");
    x = g.concat({skips[level], x}, label + ".concat");
    x = double_conv(x, width, label);
  }
  x = g.conv(x, out_channels, 1, 1, 0, "head");
  spec.head_index = x;
  x = g.activation(x, ops::Activation::Sigmoid, "head.sigmoid");
  g.output(x);
  detail::apply_trainable_flags(spec);
  return spec;
}

/// Residual classifier: strided stem, stages of two-conv residual blocks
/// joined by add nodes, global average pool, dense head, softmax.
template <typename T>
NetworkSpec<T> build_residual_classifier(const std::vector<std::size_t>& blocks_per_stage,
                                         std::size_t base_channels, std::size_t n_classes, Rng& rng,
                                         std::size_t in_channels = 3) {
  if (blocks_per_stage.empty()) throw ConfigError("build_residual_classifier: empty stage list");
  if (n_classes < 2) throw ConfigError("build_residual_classifier: n_classes must be >= 2");
  if (base_channels < 1) throw ConfigError("build_residual_classifier: base_channels must be >= 1");
  for (std::size_t b : blocks_per_stage) {
    if (b < 1) throw ConfigError("build_residual_classifier: every stage needs >= 1 block");
  }
  NetworkSpec<T> spec;
  spec.family = NetworkFamily::Residual;
  spec.in_channels = in_channels;
  spec.depth = blocks_per_stage.size();
  detail::GraphBuilder<T> g(spec, rng);

  std::size_t x = g.input(in_channels);
  x = g.conv_bn_relu(x, base_channels, 3, 2, "stem");
  x = g.pool(x, PoolKind::Max2, "stem.pool");
  std::size_t width_in = base_channels;
  for (std::size_t s = 0; s < blocks_per_stage.size(); ++s) {
    const std::size_t width = base_channels << s;
    for (std::size_t b = 0; b < blocks_per_stage[s]; ++b) {
      const std::string label = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      std::size_t shortcut = x;
      if (stride != 1 || width_in != width) {
        shortcut = g.conv(x, width, 1, stride, 0, label + ".proj");
        shortcut = g.batchnorm(shortcut, label + ".proj_bn");
      }
      std::size_t y = g.conv_bn_relu(x, width, 3, stride, label + ".a");
      y = g.conv(y, width, 3, 1, 1, label + ".b.conv");
      y = g.batchnorm(y, label + ".b.bn");
      x = g.add(y, shortcut, label + ".add");
      x = g.activation(x, ops::Activation::Relu, label + ".relu");
      width_in = width;
    }
  }
  x = g.pool(x, PoolKind::GlobalAvg, "gap");
  x = g.dense(x, n_classes, "fc");
  spec.head_index = x;
  x = g.activation(x, ops::Activation::Softmax, "softmax");
  g.output(x);
  detail::apply_trainable_flags(spec);
  return spec;
}

/// Output channel split of one mixed block: 1x1, 3x3, pooled-1x1 branches.
struct MixedBranchWidths {
  std::size_t one_by_one;
  std::size_t three_by_three;
  std::size_t pooled;
  std::size_t total() const { return one_by_one + three_by_three + pooled; }
};

inline MixedBranchWidths mixed_branch_widths(std::size_t block_channels) {
  const std::size_t quarter = std::max<std::size_t>(1, block_channels / 4);
  const std::size_t half = std::max<std::size_t>(1, block_channels / 2);
  return {quarter, half, block_channels - quarter - half};
}

/// Inception-style classifier: strided stem, mixed blocks whose parallel
/// branches meet at a concat node, global average pool, dense head, softmax.
template <typename T>
NetworkSpec<T> build_inception_classifier(std::size_t n_mixed_blocks, std::size_t base_channels,
                                          std::size_t n_classes, Rng& rng,
                                          std::size_t in_channels = 3) {
  if (n_mixed_blocks < 1) throw ConfigError("build_inception_classifier: n_mixed_blocks must be >= 1");
  if (n_classes < 2) throw ConfigError("build_inception_classifier: n_classes must be >= 2");
  if (base_channels < 1) throw ConfigError("build_inception_classifier: base_channels must be >= 1");
  NetworkSpec<T> spec;
  spec.family = NetworkFamily::Inception;
  spec.in_channels = in_channels;
  spec.depth = n_mixed_blocks;
  detail::GraphBuilder<T> g(spec, rng);

  const std::size_t block_channels = 4 * base_channels;
  const MixedBranchWidths widths = mixed_branch_widths(block_channels);
  if (widths.pooled < 1) throw ConfigError("build_inception_classifier: base_channels too small");

  std::size_t x = g.input(in_channels);
  x = g.conv_bn_relu(x, base_channels, 3, 2, "stem1");
  x = g.conv_bn_relu(x, 2 * base_channels, 3, 1, "stem2");
  x = g.pool(x, PoolKind::Max2, "stem.pool");
  for (std::size_t m = 0; m < n_mixed_blocks; ++m) {
    const std::string label = "mixed" + std::to_string(m + 1);
    const std::size_t b1 = g.conv_bn_relu(x, widths.one_by_one, 1, 1, label + ".b1x1");
    std::size_t b3 = g.conv_bn_relu(x, widths.one_by_one, 1, 1, label + ".b3x3_reduce");
    b3 = g.conv_bn_relu(b3, widths.three_by_three, 3, 1, label + ".b3x3");
    std::size_t bp = g.pool(x, PoolKind::Avg3, label + ".bpool.avg");
    bp = g.conv_bn_relu(bp, widths.pooled, 1, 1, label + ".bpool");
    x = g.concat({b1, b3, bp}, label + ".concat");
  }
  x = g.pool(x, PoolKind::GlobalAvg, "gap");
  x = g.dense(x, n_classes, "fc");
  spec.head_index = x;
  x = g.activation(x, ops::Activation::Softmax, "softmax");
  g.output(x);
  detail::apply_trainable_flags(spec);
  return spec;
}

/// Replaces the dense head with a freshly initialized n_classes-way layer.
/// Every other parameter is preserved bitwise.
template <typename T>
NetworkSpec<T> replace_head(const NetworkSpec<T>& spec, std::size_t n_classes, Rng& rng) {
  if (spec.head_index >= spec.nodes.size() || spec.nodes[spec.head_index].kind != LayerKind::Dense) {
    throw ContractError("replace_head: network has no dense head");
  }
  if (n_classes < 1) throw ConfigError("replace_head: n_classes must be >= 1");
  NetworkSpec<T> out = spec;
  LayerNode<T>& head = out.nodes[out.head_index];
  const std::size_t in_features = head.params[0].dim(1);
  NetworkSpec<T> scratch;
  detail::GraphBuilder<T> g(scratch, rng);
  head.params = {g.he_uniform({n_classes, in_features}, in_features), Tensor<T>(Shape{n_classes})};
  head.channels = n_classes;
  for (std::size_t i = out.head_index + 1; i < out.nodes.size(); ++i) out.nodes[i].channels = n_classes;
  detail::apply_trainable_flags(out);
  return out;
}

/// Sets the lowest re-trained layer. Parameterized nodes below k (and their
/// batch-norm running statistics) are frozen.
template <typename T>
void set_freeze_point(NetworkSpec<T>& spec, std::size_t k) {
  const std::vector<std::size_t> legal = spec.legal_freeze_points();
  if (std::find(legal.begin(), legal.end(), k) == legal.end()) {
    std::string list;
    for (std::size_t i = 0; i < legal.size(); ++i) list += (i ? ", " : "") + std::to_string(legal[i]);
    throw ConfigError("freeze point " + std::to_string(k) + " is not legal; legal points are {" + list + "}");
  }
  spec.freeze_point = k;
  detail::apply_trainable_flags(spec);
}

template <typename T>
NetworkSpec<T> with_freeze_point(NetworkSpec<T> spec, std::size_t k) {
  set_freeze_point(spec, k);
  return spec;
}

namespace detail {

template <typename T>
Tensor<T> run_node(LayerNode<T>& n, ops::BatchNormState<T>& bn, Tape<T>& tape,
                   const std::vector<Tensor<T>>& acts, ops::Mode mode) {
  const Tensor<T>& x = acts[n.inputs.empty() ? 0 : n.inputs[0]];
  switch (n.kind) {
    case LayerKind::Input:
    case LayerKind::Output:
      return x;
    case LayerKind::Conv:
      return ops::conv2d(tape, x, n.params[0], n.params[1], n.stride, n.padding);
    case LayerKind::ConvT:
      return ops::conv_transpose2d(tape, x, n.params[0], n.params[1], n.stride);
    case LayerKind::Pool:
      switch (n.pool) {
        case PoolKind::Max2: return ops::maxpool2d(tape, x, 2);
        case PoolKind::Avg3: return ops::avgpool3x3(tape, x);
        case PoolKind::GlobalAvg: return ops::global_avg_pool(tape, x);
      }
      break;
    case LayerKind::Dense:
      return ops::dense(tape, x, n.params[0], n.params[1]);
    case LayerKind::Activation:
      return ops::activate(tape, x, n.activation);
    case LayerKind::BatchNorm:
      return ops::batchnorm2d(tape, x, n.params[0], n.params[1], bn, mode);
    case LayerKind::Concat: {
      std::vector<Tensor<T>> parts;
      for (std::size_t i : n.inputs) parts.push_back(acts[i]);
      return ops::concat_channels(tape, parts);
    }
    case LayerKind::Add:
      if (acts[n.inputs[0]].shape() != acts[n.inputs[1]].shape()) {
        throw DimensionError("add operands " + shape_str(acts[n.inputs[0]].shape()) + " and " +
                             shape_str(acts[n.inputs[1]].shape()) + " differ");
      }
      return ops::add(tape, acts[n.inputs[0]], acts[n.inputs[1]]);
  }
  throw ContractError("unknown layer kind");
}

template <typename T>
void check_input(const NetworkSpec<T>& spec, const Tensor<T>& input) {
  const ops::ImageGeometry g = ops::image_geometry(input.shape(), "forward_pass");
  if (g.channels != spec.in_channels) {
    throw DimensionError("node 0 (input): channel axis C=" + std::to_string(g.channels) +
                         " but network expects " + std::to_string(spec.in_channels));
  }
  if (g.height % spec.spatial_multiple != 0 || g.width % spec.spatial_multiple != 0) {
    throw DimensionError("node 0 (input): spatial axes H,W=" + std::to_string(g.height) + "," +
                         std::to_string(g.width) + " must be multiples of " +
                         std::to_string(spec.spatial_multiple));
  }
}

template <typename T>
std::vector<Tensor<T>> execute(NetworkSpec<T>& spec, Tape<T>& tape, const Tensor<T>& input,
                               ops::Mode mode, std::vector<ops::BatchNormState<T>>* bn_override) {
  check_input(spec, input);
  std::vector<Tensor<T>> acts(spec.nodes.size());
  acts[0] = input;
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    LayerNode<T>& n = spec.nodes[i];
    ops::BatchNormState<T>& bn = bn_override ? (*bn_override)[i] : n.bn;
    try {
      acts[i] = run_node(n, bn, tape, acts, mode);
    } catch (const DimensionError& e) {
      throw DimensionError("node " + std::to_string(i) + " (" + layer_kind_name(n.kind) + " '" +
                           n.label + "'): " + e.what());
    }
  }
  return acts;
}

}  // namespace detail

/// Runs every node in index order and returns the output node's tensor.
/// Accepts CxHxW or BxCxHxW input; train mode updates batch-norm statistics
/// of trainable batch-norm nodes.
template <typename T>
Tensor<T> forward_pass(NetworkSpec<T>& spec, Tape<T>& tape, const Tensor<T>& input, ops::Mode mode) {
  return detail::execute<T>(spec, tape, input, mode, nullptr).back();
}

/// All node activations of one forward pass, indexed by node.
template <typename T>
std::vector<Tensor<T>> forward_activations(NetworkSpec<T>& spec, Tape<T>& tape,
                                           const Tensor<T>& input, ops::Mode mode) {
  return detail::execute<T>(spec, tape, input, mode, nullptr);
}

/// Eval-mode inference that leaves the network untouched; safe to call
/// concurrently on a shared spec.
template <typename T>
Tensor<T> predict(const NetworkSpec<T>& spec, const Tensor<T>& input) {
  std::vector<ops::BatchNormState<T>> bn;
  bn.reserve(spec.nodes.size());
  for (const LayerNode<T>& n : spec.nodes) bn.push_back(n.bn);
  Tape<T> tape = Tape<T>::no_grad();
  // execute() only mutates batch-norm state, which is redirected to copies.
  return detail::execute(const_cast<NetworkSpec<T>&>(spec), tape, input, ops::Mode::Eval, &bn).back();
}

/// Conservative dependency radius (in input pixels) of a fully convolutional
/// network: an output pixel is unaffected by inputs farther away than this.
template <typename T>
std::size_t receptive_radius(const NetworkSpec<T>& spec) {
  struct Extent {
    double scale = 1.0;
    double radius = 0.0;
  };
  std::vector<Extent> ext(spec.nodes.size());
  for (const LayerNode<T>& n : spec.nodes) {
    Extent e = n.inputs.empty() ? Extent{} : ext[n.inputs[0]];
    for (std::size_t in : n.inputs) e.radius = std::max(e.radius, ext[in].radius);
    switch (n.kind) {
      case LayerKind::Conv: {
        const double k = static_cast<double>(n.params[0].dim(2));
        const double centre = (k - 1.0) / 2.0;
        const double offset = std::abs(centre - static_cast<double>(n.padding));
        e.radius += (centre + offset) * e.scale;
        if (n.stride > 1) {
          e.radius += static_cast<double>(n.stride - 1) * e.scale;
          e.scale *= static_cast<double>(n.stride);
        }
        break;
      }
      case LayerKind::ConvT: {
        const double k = static_cast<double>(n.params[0].dim(2));
        const double s = static_cast<double>(n.stride);
        e.scale /= s;
        e.radius += (k + s) * e.scale;
        break;
      }
      case LayerKind::Pool:
        if (n.pool == PoolKind::Max2) {
          e.radius += e.scale;
          e.scale *= 2.0;
        } else if (n.pool == PoolKind::Avg3) {
          e.radius += e.scale;
        } else {
          throw ContractError("receptive_radius: global pooling is not fully convolutional");
        }
        break;
      case LayerKind::Dense:
        throw ContractError("receptive_radius: dense layers are not fully convolutional");
      default:
        break;
    }
    ext[n.index] = e;
  }
  return static_cast<std::size_t>(std::ceil(ext.back().radius));
}

}  // namespace neurocell
