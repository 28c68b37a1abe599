#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "neurocell/cell_class.hpp"
#include "neurocell/errors.hpp"
#include "neurocell/image.hpp"
#include "neurocell/imaging.hpp"
#include "neurocell/metrics.hpp"
#include "neurocell/netgraph.hpp"
#include "neurocell/optim.hpp"
#include "neurocell/rng.hpp"

namespace neurocell {

// ---------------------------------------------------------------------------
// Segmentation

/// A grayscale scene and its label probability map (positives at p = 1).
struct SegSample {
  Image gray;
  Image target;
};

struct SegTrainOptions {
  std::size_t epochs = 10;
  std::size_t iters_per_epoch = 1000;
  std::size_t batch = 1;
  double lr = 0.01;
  double momentum = 0.9;
  bool elastic = true;
  ElasticSpec elastic_spec;
};

template <typename T>
struct SegTrainResult {
  NetworkSpec<T> spec;
  std::vector<double> loss_curve;  // mean pixel cross-entropy per epoch
};

namespace detail {

/// Warps image and target with one shared displacement field.
inline SegSample elastic_pair(const SegSample& s, const ElasticSpec& spec, Rng& rng) {
  Image both(2, s.gray.height, s.gray.width);
  const std::size_t n = both.plane_size();
  std::copy(s.gray.pixels.begin(), s.gray.pixels.end(), both.pixels.begin());
  std::copy(s.target.pixels.begin(), s.target.pixels.end(), both.pixels.begin() + static_cast<std::ptrdiff_t>(n));
  const Image warped = elastic_deform(both, spec, rng);
  return {warped.channel(0), warped.channel(1)};
}

template <typename T>
Tensor<T> stack_planes(const std::vector<const Image*>& images) {
  const Image& first = *images.front();
  const std::size_t per = first.pixels.size();
  std::vector<T> values(per * images.size());
  for (std::size_t b = 0; b < images.size(); ++b) {
    std::copy(images[b]->pixels.begin(), images[b]->pixels.end(), values.begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return Tensor<T>({images.size(), first.channels, first.height, first.width}, std::move(values));
}

}  // namespace detail

/// Each iteration draws `batch` scenes (optionally elastically warped), takes
/// the pixelwise cross-entropy against the target and steps SGD.
template <typename T>
SegTrainResult<T> train_segmentation(NetworkSpec<T> spec, const std::vector<SegSample>& scenes,
                                     const SegTrainOptions& opt, Rng& rng) {
  if (scenes.empty()) throw ConfigError("train_segmentation: no training scenes");
  if (opt.batch < 1) throw ConfigError("train_segmentation: batch must be >= 1");
  if (opt.elastic) opt.elastic_spec.validate();
  for (const SegSample& s : scenes) {
    if (s.gray.height != s.target.height || s.gray.width != s.target.width || s.gray.channels != 1 ||
        s.target.channels != 1) {
      throw DimensionError("train_segmentation: scene and target must be matching single-channel maps");
    }
    if (s.gray.height % spec.spatial_multiple != 0 || s.gray.width % spec.spatial_multiple != 0) {
      throw ConfigError("train_segmentation: scene " + std::to_string(s.gray.height) + "x" +
                        std::to_string(s.gray.width) + " is not divisible by " + std::to_string(spec.spatial_multiple));
    }
    if (opt.batch > 1 && (s.gray.height != scenes[0].gray.height || s.gray.width != scenes[0].gray.width)) {
      throw ConfigError("train_segmentation: batches need equally sized scenes");
    }
  }
  Sgd<T> sgd(opt.lr, opt.momentum);
  std::vector<Tensor<T>> params = spec.trainable_parameters();
  SegTrainResult<T> result;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    double total = 0.0;
    for (std::size_t it = 0; it < opt.iters_per_epoch; ++it) {
      std::vector<SegSample> drawn;
      for (std::size_t b = 0; b < opt.batch; ++b) {
        const SegSample& s = scenes[rng.below(scenes.size())];
        drawn.push_back(opt.elastic ? detail::elastic_pair(s, opt.elastic_spec, rng) : s);
      }
      std::vector<const Image*> xs, ys;
      for (const SegSample& s : drawn) {
        xs.push_back(&s.gray);
        ys.push_back(&s.target);
      }
      Tape<T> tape;
      const Tensor<T> pred = forward_pass(spec, tape, detail::stack_planes<T>(xs), ops::Mode::Train);
      const Tensor<T> loss =
          ops::cross_entropy(tape, pred, detail::stack_planes<T>(ys), ops::CrossEntropyForm::PixelwiseBinary);
      total += static_cast<double>(loss[0]);
      tape.backward(loss);
      if (!params.empty()) sgd.step(params);
    }
    result.loss_curve.push_back(opt.iters_per_epoch ? total / static_cast<double>(opt.iters_per_epoch) : 0.0);
  }
  result.spec = std::move(spec);
  return result;
}

// ---------------------------------------------------------------------------
// Classification

struct ClassifierOptions {
  std::size_t epochs = 11;
  std::size_t batch = 16;
  double lr = 0.01;
  double momentum = 0.9;
  /// lr is multiplied by lr_decay from epoch floor(decay_at * epochs) on.
  double decay_at = 0.75;
  double lr_decay = 0.1;
  /// Patches are resampled to this size before entering the network (0 keeps them).
  std::size_t input_size = 299;
  /// Training set is amplified with affine copies when augment.factor > 1.
  bool amplify = true;
  AugmentSpec augment;
};

/// Per-epoch validation results of one training run.
template <typename T>
struct ClassifierRun {
  NetworkSpec<T> spec;
  std::vector<double> train_loss;
  std::vector<double> val_accuracy;
  std::vector<ConfusionMatrix> val_confusion;
};

template <typename T>
Tensor<T> patch_batch(const std::vector<Patch>& patches, const std::vector<std::size_t>& idx, std::size_t begin,
                      std::size_t end) {
  std::vector<const Image*> images;
  for (std::size_t i = begin; i < end; ++i) images.push_back(&patches[idx[i]].image);
  return detail::stack_planes<T>(images);
}

/// Resamples every patch to `size` (no-op for 0 or matching sizes).
inline std::vector<Patch> prepare_patches(std::vector<Patch> patches, std::size_t size) {
  if (size == 0) return patches;
  for (Patch& p : patches) {
    if (p.image.height != size || p.image.width != size) p.image = resample_bilinear(p.image, size);
  }
  return patches;
}

template <typename T>
std::vector<CellClass> classify_patches(const NetworkSpec<T>& spec, const std::vector<Patch>& patches,
                                        std::size_t batch = 16, std::vector<std::array<double, 3>>* probs = nullptr) {
  std::vector<CellClass> out;
  std::vector<std::size_t> idx(patches.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t b = 0; b < patches.size(); b += batch) {
    const std::size_t e = std::min(patches.size(), b + batch);
    const Tensor<T> p = predict(spec, patch_batch<T>(patches, idx, b, e));
    const std::size_t k = p.shape().back();
    for (std::size_t i = 0; i < e - b; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c) {
        if (p[i * k + c] > p[i * k + best]) best = c;
      }
      out.push_back(cell_class_from(best));
      if (probs) {
        std::array<double, 3> row{};
        for (std::size_t c = 0; c < std::min<std::size_t>(k, 3); ++c) row[c] = static_cast<double>(p[i * k + c]);
        probs->push_back(row);
      }
    }
  }
  return out;
}

inline ConfusionMatrix confusion_of(const std::vector<Patch>& patches, const std::vector<CellClass>& preds) {
  ConfusionMatrix m;
  for (std::size_t i = 0; i < patches.size(); ++i) ++m.at(*patches[i].label, preds[i]);
  return m;
}

/// Categorical cross-entropy training of the layers at or above freeze
/// point k. Validation accuracy is recorded after every epoch.
template <typename T>
ClassifierRun<T> train_classifier(NetworkSpec<T> spec, const std::vector<Patch>& train,
                                  const std::vector<Patch>& validation, std::size_t freeze_point,
                                  const ClassifierOptions& opt, Rng& rng) {
  if (opt.batch < 1) throw ConfigError("train_classifier: batch must be >= 1");
  std::array<std::size_t, kNumCellClasses> present{};
  for (const Patch& p : train) {
    if (!p.label) throw ConfigError("train_classifier: training patch without a label");
    ++present[ordinal(*p.label)];
  }
  for (CellClass c : kAllCellClasses) {
    if (present[ordinal(c)] == 0) {
      throw ConfigError(std::string("train_classifier: class ") + cell_class_name(c) + " absent from training split");
    }
  }
  for (const Patch& p : validation) {
    if (!p.label) throw ConfigError("train_classifier: validation patch without a label");
  }
  ClassifierRun<T> run;
  if (opt.epochs == 0) {
    // Still reject an illegal freeze point, but return the network untouched.
    with_freeze_point(spec, freeze_point);
    run.spec = std::move(spec);
    return run;
  }
  set_freeze_point(spec, freeze_point);

  std::vector<Patch> train_set = train;
  if (opt.amplify && opt.augment.factor > 1) train_set = amplify(train_set, opt.augment, rng.derive("amplify"));
  train_set = prepare_patches(std::move(train_set), opt.input_size);
  const std::vector<Patch> val_set = prepare_patches(validation, opt.input_size);

  Sgd<T> sgd(opt.lr, opt.momentum);
  std::vector<Tensor<T>> params = spec.trainable_parameters();
  const auto decay_epoch = static_cast<std::size_t>(std::floor(opt.decay_at * static_cast<double>(opt.epochs)));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    sgd.set_learning_rate(epoch >= decay_epoch ? opt.lr * opt.lr_decay : opt.lr);
    rng.shuffle(order);
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t b = 0; b < order.size(); b += opt.batch) {
      const std::size_t e = std::min(order.size(), b + opt.batch);
      std::vector<T> labels;
      for (std::size_t i = b; i < e; ++i) labels.push_back(static_cast<T>(ordinal(*train_set[order[i]].label)));
      Tape<T> tape;
      const Tensor<T> probs = forward_pass(spec, tape, patch_batch<T>(train_set, order, b, e), ops::Mode::Train);
      const Tensor<T> loss =
          ops::cross_entropy(tape, probs, Tensor<T>({e - b}, std::move(labels)), ops::CrossEntropyForm::Categorical);
      total += static_cast<double>(loss[0]);
      ++steps;
      tape.backward(loss);
      if (!params.empty()) sgd.step(params);
    }
    run.train_loss.push_back(steps ? total / static_cast<double>(steps) : 0.0);
    if (!val_set.empty()) {
      const ConfusionMatrix m = confusion_of(val_set, classify_patches(spec, val_set, opt.batch));
      run.val_confusion.push_back(m);
      run.val_accuracy.push_back(100.0 * static_cast<double>(m.trace()) / static_cast<double>(m.total()));
    }
  }
  run.spec = std::move(spec);
  return run;
}

/// Freeze point from a name: "0" / "all" trains everything, "head" trains
/// only the dense head, "block:N" starts at the N-th block boundary
/// (1-based), and a bare number is taken as a node index.
template <typename T>
std::size_t resolve_freeze_point(const NetworkSpec<T>& spec, const std::string& name) {
  const std::vector<std::size_t> legal = spec.legal_freeze_points();
  if (name == "all" || name == "0") return 0;
  if (name == "head" || name == "L") return spec.size();
  if (name.rfind("block:", 0) == 0) {
    std::size_t n = 0;
    try {
      n = std::stoul(name.substr(6));
    } catch (const std::exception&) {
      throw ConfigError("freeze point '" + name + "': expected block:<number>");
    }
    // legal = {0, boundaries..., L}
    if (n < 1 || n + 1 >= legal.size()) {
      throw ConfigError("freeze point '" + name + "': network has " + std::to_string(legal.size() - 2) +
                        " block boundaries");
    }
    return legal[n];
  }
  std::size_t k = 0;
  try {
    std::size_t used = 0;
    k = std::stoul(name, &used);
    if (used != name.size()) throw std::invalid_argument(name);
  } catch (const std::exception&) {
    throw ConfigError("freeze point '" + name + "' is not 0, head, block:N or a node index");
  }
  if (std::find(legal.begin(), legal.end(), k) == legal.end()) with_freeze_point(spec, k);  // throws with the legal list
  return k;
}

// ---------------------------------------------------------------------------
// Cross-validation

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

struct KFoldSplit {
  std::vector<Fold> folds;
  std::vector<std::string> warnings;
};

/// Stratified split: each class is shuffled and dealt round-robin into k
/// folds, the dealing position carrying over from one class to the next.
inline KFoldSplit kfold_split(const std::vector<CellClass>& labels, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("kfold_split: k must be >= 2");
  if (k > labels.size()) {
    throw ConfigError("kfold_split: k = " + std::to_string(k) + " exceeds " + std::to_string(labels.size()) + " items");
  }
  Rng rng(derive_seed(seed, "kfold"));
  KFoldSplit out;
  std::vector<std::vector<std::size_t>> val(k);
  std::size_t next = 0;
  for (CellClass c : kAllCellClasses) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) members.push_back(i);
    }
    if (!members.empty() && members.size() < k) {
      out.warnings.push_back(std::string("class ") + cell_class_name(c) + " has " + std::to_string(members.size()) +
                             " items, fewer than k = " + std::to_string(k) + "; some folds lack it");
    }
    rng.shuffle(members);
    for (std::size_t i : members) {
      val[next].push_back(i);
      next = (next + 1) % k;
    }
  }
  std::vector<std::size_t> fold_of(labels.size());
  for (std::size_t f = 0; f < k; ++f) {
    for (std::size_t i : val[f]) fold_of[i] = f;
  }
  for (std::size_t f = 0; f < k; ++f) {
    Fold fold;
    fold.validation = val[f];
    std::sort(fold.validation.begin(), fold.validation.end());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (fold_of[i] != f) fold.train.push_back(i);
    }
    out.folds.push_back(std::move(fold));
  }
  return out;
}

/// What a fold trainer hands back: the validation curve and one confusion
/// matrix per epoch.
struct FoldOutcome {
  std::vector<double> curve;
  std::vector<ConfusionMatrix> confusion;
};

using FoldTrainer = std::function<FoldOutcome(std::size_t fold, const std::vector<Patch>& train,
                                              const std::vector<Patch>& validation, Rng& rng)>;

struct FoldReport {
  std::size_t fold = 0;
  std::vector<double> curve;
  double best_accuracy = 0.0;
  std::size_t best_epoch = 0;
  double saturation_accuracy = 0.0;
  ConfusionMatrix saturation_confusion;
};

struct CVSummary {
  std::string method;
  double mean_saturation = 0.0;
  double mean_best = 0.0;
  double std_best = 0.0;  // sample std (n-1) of best-epoch accuracies
  std::size_t saturation_epoch = 0;
  ConfusionMatrix confusion;  // summed over folds at the saturation epoch
  std::vector<FoldReport> folds;

  ReportRow row() const { return {method, mean_saturation, mean_best, std_best, saturation_epoch}; }
};

struct CVOptions {
  std::size_t k = 10;
  std::uint64_t seed = 0;
  double saturation_epsilon = 0.5;
};

/// Trains one fresh model per fold. The saturation epoch is read off the
/// fold-averaged curve; every fold contributes its accuracy and confusion
/// matrix at that epoch.
inline CVSummary run_cross_validation(const std::string& method, const std::vector<Patch>& patches,
                                      const CVOptions& opt, const FoldTrainer& trainer,
                                      std::vector<std::string>* warnings = nullptr) {
  std::vector<CellClass> labels;
  for (const Patch& p : patches) {
    if (!p.label) throw ConfigError("run_cross_validation: unlabeled patch from " + p.source);
    labels.push_back(*p.label);
  }
  const KFoldSplit split = kfold_split(labels, opt.k, opt.seed);
  if (warnings) warnings->insert(warnings->end(), split.warnings.begin(), split.warnings.end());

  CVSummary s;
  s.method = method;
  std::vector<std::vector<ConfusionMatrix>> confusions;
  for (std::size_t f = 0; f < split.folds.size(); ++f) {
    std::vector<Patch> train, val;
    for (std::size_t i : split.folds[f].train) train.push_back(patches[i]);
    for (std::size_t i : split.folds[f].validation) val.push_back(patches[i]);
    Rng fold_rng(derive_seed(opt.seed, f));
    FoldOutcome outcome = trainer(f, train, val, fold_rng);
    if (outcome.curve.empty() || outcome.curve.size() != outcome.confusion.size()) {
      throw ContractError("fold " + std::to_string(f) + ": trainer returned no per-epoch results");
    }
    if (f > 0 && outcome.curve.size() != s.folds.front().curve.size()) {
      throw ContractError("fold " + std::to_string(f) + ": epoch count differs from fold 0");
    }
    FoldReport r;
    r.fold = f;
    r.curve = std::move(outcome.curve);
    const auto best = std::max_element(r.curve.begin(), r.curve.end());
    r.best_accuracy = *best;
    r.best_epoch = static_cast<std::size_t>(best - r.curve.begin()) + 1;
    s.folds.push_back(std::move(r));
    confusions.push_back(std::move(outcome.confusion));
  }

  const std::size_t epochs = s.folds.front().curve.size();
  const auto n = static_cast<double>(s.folds.size());
  std::vector<double> mean_curve(epochs, 0.0);
  for (const FoldReport& r : s.folds) {
    for (std::size_t e = 0; e < epochs; ++e) mean_curve[e] += r.curve[e] / n;
  }
  s.saturation_epoch = saturation_epoch(mean_curve, opt.saturation_epsilon);
  for (std::size_t f = 0; f < s.folds.size(); ++f) {
    FoldReport& r = s.folds[f];
    r.saturation_accuracy = r.curve[s.saturation_epoch - 1];
    r.saturation_confusion = confusions[f][s.saturation_epoch - 1];
    s.confusion += r.saturation_confusion;
    s.mean_saturation += r.saturation_accuracy / n;
    s.mean_best += r.best_accuracy / n;
  }
  double ss = 0.0;
  for (const FoldReport& r : s.folds) ss += (r.best_accuracy - s.mean_best) * (r.best_accuracy - s.mean_best);
  s.std_best = s.folds.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  return s;
}

inline nlohmann::ordered_json confusion_json(const ConfusionMatrix& m) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& row : m.counts) rows.push_back(row);
  return rows;
}

inline nlohmann::ordered_json fold_report_json(const FoldReport& r) {
  nlohmann::ordered_json j;
  j["fold"] = r.fold;
  j["curve"] = r.curve;
  j["best_accuracy"] = r.best_accuracy;
  j["best_epoch"] = r.best_epoch;
  j["saturation_accuracy"] = r.saturation_accuracy;
  j["saturation_confusion"] = confusion_json(r.saturation_confusion);
  return j;
}

/// The stock fold trainer: fresh network per fold from `make`, trained with
/// train_classifier at `freeze_point`.
template <typename T>
FoldTrainer classifier_fold_trainer(std::function<NetworkSpec<T>(Rng&)> make,
                                    std::function<std::size_t(const NetworkSpec<T>&)> freeze_point,
                                    ClassifierOptions options) {
  return [=](std::size_t, const std::vector<Patch>& train, const std::vector<Patch>& val, Rng& rng) {
    Rng init = rng.derive("init");
    NetworkSpec<T> spec = make(init);
    const std::size_t k = freeze_point(spec);
    Rng train_rng = rng.derive("train");
    ClassifierRun<T> run = train_classifier(std::move(spec), train, val, k, options, train_rng);
    return FoldOutcome{std::move(run.val_accuracy), std::move(run.val_confusion)};
  };
}

}  // namespace neurocell
