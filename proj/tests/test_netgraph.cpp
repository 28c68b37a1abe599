#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "neurocell/gradsuite.hpp"
#include "neurocell/netgraph.hpp"
#include "neurocell/optim.hpp"
#include "test_support.hpp"

using namespace neurocell;
using neurocell::testing::random_tensor;

namespace {

std::vector<std::vector<double>> snapshot(const NetworkSpec<double>& spec, std::size_t below) {
  std::vector<std::vector<double>> out;
  for (const auto& n : spec.nodes) {
    if (n.index >= below) break;
    for (const auto& p : n.params) out.push_back(p.values());
    out.push_back(n.bn.running_mean);
    out.push_back(n.bn.running_var);
  }
  return out;
}

// A few SGD steps of categorical cross-entropy on random inputs.
void train_steps(NetworkSpec<double>& spec, int steps, Rng& rng) {
  Sgd<double> opt(0.05, 0.9);
  std::vector<Tensor<double>> params = spec.trainable_parameters();
  for (int s = 0; s < steps; ++s) {
    Tensor<double> x = random_tensor({2, 3, 16, 16}, rng, 0.0, 1.0);
    const Tensor<double> y({2}, {static_cast<double>(rng.below(3)), static_cast<double>(rng.below(3))});
    Tape<double> tape;
    tape.backward(ops::cross_entropy(tape, forward_pass(spec, tape, x, ops::Mode::Train), y,
                                     ops::CrossEntropyForm::Categorical));
    opt.step(params);
  }
}

void check_graph_invariants(const NetworkSpec<double>& spec) {
  std::size_t outputs = 0;
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    const auto& n = spec.nodes[i];
    EXPECT_EQ(n.index, i);
    for (std::size_t in : n.inputs) EXPECT_LT(in, i);
    if (n.kind == LayerKind::Add) {
      EXPECT_EQ(n.inputs.size(), 2u);
    }
    if (n.kind == LayerKind::Output) ++outputs;
  }
  EXPECT_EQ(outputs, 1u);
}

}  // namespace

TEST(UNet, Depth1OutputShapeAndRange) {
  Rng rng(1);
  auto spec = build_unet<double>(1, 4, 1, 1, rng);
  const Tensor<double> y = predict(spec, random_tensor({1, 16, 16}, rng, 0.0, 1.0));
  EXPECT_EQ(y.shape(), (Shape{1, 16, 16}));
  for (double v : y.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  check_graph_invariants(spec);
}

TEST(UNet, ContractingWidthsDouble) {
  Rng rng(2);
  auto spec = build_unet<double>(3, 8, 1, 1, rng);
  std::vector<std::size_t> widths;
  for (std::size_t p : spec.nodes_of(LayerKind::Pool)) widths.push_back(spec.nodes[p].channels);
  EXPECT_EQ(widths, (std::vector<std::size_t>{8, 16, 32}));
}

TEST(UNet, OutputShapeMatchesInputForMultiples) {
  Rng rng(3);
  auto spec = build_unet<double>(2, 2, 1, 1, rng);
  for (std::size_t h : {4u, 8u, 12u}) {
    for (std::size_t w : {4u, 16u}) {
      EXPECT_EQ(predict(spec, Tensor<double>({1, h, w}, 0.3)).shape(), (Shape{1, h, w}));
    }
  }
  EXPECT_THROW(predict(spec, Tensor<double>({1, 6, 8})), DimensionError);
}

TEST(UNet, SkipPathCarriesSignalWhenDeepestLevelZeroed) {
  Rng rng(4);
  auto spec = build_unet<double>(2, 4, 1, 1, rng);
  for (auto& n : spec.nodes) {
    if (n.label.rfind("bottleneck", 0) == 0) {
      for (auto& p : n.params) std::fill(p.values().begin(), p.values().end(), 0.0);
    }
  }
  const Tensor<double> x = random_tensor({1, 16, 16}, rng, 0.0, 1.0);
  const Tensor<double> y = predict(spec, x);
  const Tensor<double> y2 = predict(spec, random_tensor({1, 16, 16}, rng, 0.0, 1.0));
  double diff = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) diff = std::max(diff, std::abs(y[i] - y2[i]));
  // Bias of the head is zero, so an all-zero pre-activation would give 0.5 for every input.
  EXPECT_GT(diff, 1e-6);
}

TEST(UNet, ZeroInputGivesHalf) {
  Rng rng(5);
  auto spec = build_unet<double>(2, 4, 1, 1, rng);
  for (double v : predict(spec, Tensor<double>({1, 16, 16})).data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(UNet, RejectsBadConfig) {
  Rng rng(6);
  EXPECT_THROW(build_unet<double>(0, 4, 1, 1, rng), ConfigError);
  EXPECT_THROW(build_unet<double>(2, 0, 1, 1, rng), ConfigError);
}

TEST(Residual, ProbabilityVector) {
  Rng rng(7);
  auto spec = build_residual_classifier<double>({1, 1}, 4, 3, rng);
  const Tensor<double> y = predict(spec, random_tensor({3, 32, 32}, rng, 0.0, 1.0));
  ASSERT_EQ(y.shape(), (Shape{3}));
  EXPECT_NEAR(y[0] + y[1] + y[2], 1.0, 1e-6);
  for (double v : y.data()) EXPECT_GE(v, 0.0);
  check_graph_invariants(spec);
}

TEST(Residual, AddCountMatchesBlocks) {
  Rng rng(8);
  for (const std::vector<std::size_t>& blocks : {std::vector<std::size_t>{1, 1}, {2, 1, 3}, {1}}) {
    auto spec = build_residual_classifier<double>(blocks, 4, 3, rng);
    EXPECT_EQ(spec.nodes_of(LayerKind::Add).size(), std::accumulate(blocks.begin(), blocks.end(), 0u));
  }
}

TEST(Residual, ZeroBranchMakesBlockIdentity) {
  Rng rng(9);
  auto spec = build_residual_classifier<double>({2}, 4, 3, rng);
  for (auto& n : spec.nodes) {
    if (n.kind == LayerKind::Conv && n.label.find(".block") != std::string::npos) {
      for (auto& p : n.params) std::fill(p.values().begin(), p.values().end(), 0.0);
    }
  }
  Tape<double> tape = Tape<double>::no_grad();
  const auto acts = forward_activations(spec, tape, random_tensor({3, 16, 16}, rng, 0.0, 1.0), ops::Mode::Eval);
  for (std::size_t a : spec.nodes_of(LayerKind::Add)) {
    const auto& n = spec.nodes[a];
    // Eval-mode batch norm of a zero map with default statistics is zero.
    EXPECT_EQ(acts[a].values(), acts[n.inputs[1]].values());
  }
}

TEST(Residual, RejectsBadConfig) {
  Rng rng(10);
  EXPECT_THROW(build_residual_classifier<double>({}, 4, 3, rng), ConfigError);
  EXPECT_THROW(build_residual_classifier<double>({1}, 4, 1, rng), ConfigError);
}

TEST(Inception, ConcatCountAndProbabilities) {
  Rng rng(11);
  auto spec = build_inception_classifier<double>(2, 4, 3, rng);
  EXPECT_EQ(spec.nodes_of(LayerKind::Concat).size(), 2u);
  const Tensor<double> y = predict(spec, random_tensor({3, 32, 32}, rng, 0.0, 1.0));
  ASSERT_EQ(y.size(), 3u);
  EXPECT_NEAR(y[0] + y[1] + y[2], 1.0, 1e-6);
  check_graph_invariants(spec);
}

TEST(Inception, BranchWidthsSumToBlockWidth) {
  for (std::size_t c : {4u, 8u, 16u, 30u, 64u}) {
    const MixedBranchWidths w = mixed_branch_widths(c);
    EXPECT_EQ(w.total(), c);
  }
  Rng rng(12);
  auto spec = build_inception_classifier<double>(3, 4, 3, rng);
  for (std::size_t idx : spec.nodes_of(LayerKind::Concat)) {
    std::size_t sum = 0;
    for (std::size_t in : spec.nodes[idx].inputs) sum += spec.nodes[in].channels;
    EXPECT_EQ(sum, spec.nodes[idx].channels);
    EXPECT_EQ(spec.nodes[idx].channels, 16u);
  }
}

TEST(Inception, RejectsBadConfig) {
  Rng rng(13);
  EXPECT_THROW(build_inception_classifier<double>(0, 4, 3, rng), ConfigError);
}

TEST(ReplaceHead, PreservesBodyAndChangesWidth) {
  Rng rng(14);
  auto spec = build_residual_classifier<double>({1, 1}, 4, 10, rng);
  Rng head_rng(99);
  auto swapped = replace_head(spec, 3, head_rng);
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    if (i == spec.head_index) continue;
    for (std::size_t p = 0; p < spec.nodes[i].params.size(); ++p) {
      EXPECT_EQ(spec.nodes[i].params[p].values(), swapped.nodes[i].params[p].values());
    }
  }
  EXPECT_EQ(predict(swapped, random_tensor({3, 32, 32}, rng)).size(), 3u);
  Rng again(99);
  auto swapped2 = replace_head(spec, 3, again);
  EXPECT_EQ(swapped.head().params[0].values(), swapped2.head().params[0].values());
}

TEST(ReplaceHead, UNetHasNoDenseHead) {
  Rng rng(15);
  auto spec = build_unet<double>(1, 2, 1, 1, rng);
  EXPECT_THROW(replace_head(spec, 3, rng), ContractError);
}

TEST(FreezePoint, ZeroTrainsEverything) {
  Rng rng(16);
  auto spec = with_freeze_point(build_residual_classifier<double>({1, 1}, 4, 3, rng), 0);
  EXPECT_EQ(spec.trainable_parameter_count(), spec.parameter_count());
}

TEST(FreezePoint, LTrainsHeadOnly) {
  Rng rng(17);
  auto spec = build_inception_classifier<double>(2, 4, 3, rng);
  set_freeze_point(spec, spec.size());
  for (const auto& n : spec.nodes) {
    if (n.parameterized()) {
      EXPECT_EQ(n.trainable, n.index >= spec.head_index) << n.label;
    }
  }
  EXPECT_EQ(spec.trainable_parameter_count(), spec.head().params[0].size() + spec.head().params[1].size());
}

TEST(FreezePoint, IllegalPointListsLegalOnes) {
  Rng rng(18);
  auto spec = build_residual_classifier<double>({1, 1}, 4, 3, rng);
  try {
    set_freeze_point(spec, 1);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("legal points"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find(std::to_string(spec.size())), std::string::npos);
  }
}

TEST(FreezePoint, TrainableCountMonotone) {
  Rng rng(19);
  for (auto spec : {build_residual_classifier<double>({2, 2}, 4, 3, rng),
                    build_inception_classifier<double>(3, 4, 3, rng), build_unet<double>(3, 4, 1, 1, rng)}) {
    std::size_t previous = spec.parameter_count() + 1;
    for (std::size_t k : spec.legal_freeze_points()) {
      set_freeze_point(spec, k);
      EXPECT_LE(spec.trainable_parameter_count(), previous);
      previous = spec.trainable_parameter_count();
    }
  }
}

TEST(FreezePoint, ParametersBelowSecondAddUnchangedAfterTraining) {
  Rng rng(20);
  auto spec = build_residual_classifier<double>({1, 1}, 4, 3, rng);
  const std::size_t k = spec.nodes_of(LayerKind::Add).at(1);
  set_freeze_point(spec, k);
  const auto before = snapshot(spec, k);
  const auto head_before = spec.head().params[0].values();
  train_steps(spec, 100, rng);
  EXPECT_EQ(snapshot(spec, k), before);
  EXPECT_NE(spec.head().params[0].values(), head_before);
}

TEST(FreezePoint, InvarianceHoldsForEveryLegalPoint) {
  Rng rng(21);
  const auto base = build_inception_classifier<double>(2, 2, 3, rng);
  for (std::size_t k : base.legal_freeze_points()) {
    auto spec = with_freeze_point(base, k);
    const auto before = snapshot(spec, std::min(k, spec.head_index));
    train_steps(spec, 5, rng);
    EXPECT_EQ(snapshot(spec, std::min(k, spec.head_index)), before) << "k=" << k;
  }
}

TEST(ForwardPass, EvalIsPure) {
  Rng rng(22);
  auto spec = build_residual_classifier<double>({1, 1}, 4, 3, rng);
  const Tensor<double> x = random_tensor({3, 32, 32}, rng);
  Tape<double> t1 = Tape<double>::no_grad(), t2 = Tape<double>::no_grad();
  EXPECT_EQ(forward_pass(spec, t1, x, ops::Mode::Eval).values(), forward_pass(spec, t2, x, ops::Mode::Eval).values());
}

TEST(ForwardPass, TrainEvalDifferOnlyThroughBatchNorm) {
  Rng rng(23);
  auto unet = build_unet<double>(2, 4, 1, 1, rng);
  const Tensor<double> x = random_tensor({1, 16, 16}, rng);
  Tape<double> t1 = Tape<double>::no_grad(), t2 = Tape<double>::no_grad();
  EXPECT_EQ(forward_pass(unet, t1, x, ops::Mode::Train).values(), forward_pass(unet, t2, x, ops::Mode::Eval).values());

  auto res = build_residual_classifier<double>({1}, 4, 3, rng);
  const Tensor<double> x3 = random_tensor({3, 16, 16}, rng);
  EXPECT_NE(forward_pass(res, t1, x3, ops::Mode::Train).values(), forward_pass(res, t2, x3, ops::Mode::Eval).values());
}

TEST(ForwardPass, DimensionErrorNamesNode) {
  Rng rng(24);
  auto spec = build_residual_classifier<double>({1}, 4, 3, rng);
  try {
    predict(spec, Tensor<double>({2, 16, 16}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("node 0"), std::string::npos);
  }
}

TEST(ReceptiveRadius, BoundsActualDependency) {
  Rng rng(25);
  auto spec = build_unet<double>(1, 2, 1, 1, rng);
  const std::size_t r = receptive_radius(spec);
  Tensor<double> x = random_tensor({1, 32, 32}, rng);
  const Tensor<double> y = predict(spec, x);
  x[0] += 1.0;  // perturb pixel (0,0)
  const Tensor<double> y2 = predict(spec, x);
  for (std::size_t i = 0; i < 32; ++i) {
    for (std::size_t j = 0; j < 32; ++j) {
      if (i > r || j > r) {
        EXPECT_EQ(y[i * 32 + j], y2[i * 32 + j]) << i << "," << j;
      }
    }
  }
}

TEST(NetworkGradient, UNetAllParameters) {
  Rng rng(26);
  auto spec = build_unet<double>(2, 4, 1, 1, rng);
  Tensor<double> target({1, 16, 16});
  for (double& v : target.data()) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
  EXPECT_LE(network_gradient_error(spec, random_tensor({1, 16, 16}, rng, 0.0, 1.0), detail::pixel_loss(target),
                                   ops::Mode::Train, rng),
            1e-3);
}

TEST(NetworkGradient, ResidualAndInceptionAllParameters) {
  Rng rng(27);
  auto res = build_residual_classifier<double>({1, 1}, 4, 3, rng);
  EXPECT_LE(network_gradient_error(res, random_tensor({3, 32, 32}, rng, 0.0, 1.0), detail::class_loss(1),
                                   ops::Mode::Train, rng),
            1e-3);
  auto inc = build_inception_classifier<double>(2, 4, 3, rng);
  EXPECT_LE(network_gradient_error(inc, random_tensor({3, 32, 32}, rng, 0.0, 1.0), detail::class_loss(2),
                                   ops::Mode::Train, rng),
            1e-3);
}
