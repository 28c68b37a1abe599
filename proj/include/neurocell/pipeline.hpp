#pragma once

#include <cstdio>
#include <filesystem>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "neurocell/cell_class.hpp"
#include "neurocell/errors.hpp"
#include "neurocell/gradsuite.hpp"
#include "neurocell/imaging.hpp"
#include "neurocell/io.hpp"
#include "neurocell/metrics.hpp"
#include "neurocell/netgraph.hpp"
#include "neurocell/rng.hpp"
#include "neurocell/synthdata.hpp"
#include "neurocell/trainer.hpp"
#include "neurocell/weights_io.hpp"

namespace neurocell::pipeline {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Configuration
//
// One flat JSON object. Every key can be overridden by `--key value`;
// precedence is flags > file > defaults.

inline json default_config() {
  json c;
  // paths
  c["data_dir"] = "data";
  c["model_dir"] = "models";
  c["output_dir"] = "out";
  c["report_dir"] = "reports";
  c["input_dir"] = "";  // scenes for segment/extract/classify/evaluate; default <data_dir>/test
  c["patches"] = "";    // manifest for train-cls; default <output_dir>/patches/manifest.tsv
  // synthetic data
  c["n_scenes"] = 64;
  c["n_test_scenes"] = 16;
  c["scene_size"] = 128;
  c["n_cells"] = 10;
  c["class_mix"] = json::array({0.45, 0.45, 0.10});
  c["radius_min"] = 4.0;
  c["radius_max"] = 7.0;
  c["noise_std"] = 0.03;
  // imaging
  c["tau"] = 0.7;
  c["patch_size"] = 101;
  c["target_size"] = 299;
  c["min_size"] = 9;
  c["angle_min"] = -30.0;
  c["angle_max"] = 30.0;
  c["scale_min"] = 0.9;
  c["scale_max"] = 1.1;
  c["amplify"] = 2;
  c["elastic"] = true;
  c["elastic_grid"] = 16;
  c["elastic_sigma"] = 4.0;
  c["elastic_alpha"] = 2.0;
  c["tile"] = 0;      // 0 = whole-image inference
  c["overlap"] = -1;  // -1 = receptive radius when tiling, 0 otherwise
  // networks
  c["seg_depth"] = 3;
  c["seg_base"] = 8;
  c["cls_family"] = "residual";
  c["cls_blocks"] = json::array({1, 1});
  c["cls_mixed"] = 2;
  c["cls_base"] = 8;
  c["freeze"] = "0";
  c["cls_init"] = "";  // optional pretrained classifier weights; the head is replaced
  // training
  c["seg_epochs"] = 10;
  c["seg_iters"] = 1000;
  c["seg_batch"] = 1;
  c["seg_lr"] = 0.01;
  c["cls_epochs"] = 11;
  c["cls_batch"] = 16;
  c["cls_lr"] = 0.01;
  c["momentum"] = 0.9;
  c["folds"] = 10;
  c["saturation_eps"] = 0.5;
  c["gradcheck_seeds"] = 20;
  c["seed"] = 0;
  c["deterministic"] = false;
  return c;
}

inline const std::map<std::string, std::string>& field_help() {
  static const std::map<std::string, std::string> help = {
      {"data_dir", "synthetic data root (train/, test/, patches/)"},
      {"model_dir", "where weight files are written and read"},
      {"output_dir", "probability maps, patches and cell tables"},
      {"report_dir", "cross-validation results and reports"},
      {"input_dir", "scene directory to process (default <data_dir>/test)"},
      {"patches", "patch manifest for train-cls (default <output_dir>/patches/manifest.tsv)"},
      {"n_scenes", "training scenes written by synth"},
      {"n_test_scenes", "held-out scenes written by synth"},
      {"scene_size", "synthetic scene height and width"},
      {"n_cells", "cells per synthetic scene"},
      {"class_mix", "Excitatory,Glial,Inhibitory probabilities"},
      {"radius_min", "smallest synthetic cell radius"},
      {"radius_max", "largest synthetic cell radius"},
      {"noise_std", "Gaussian background noise of synthetic scenes"},
      {"tau", "probability threshold for cell pixels"},
      {"patch_size", "odd patch edge length in pixels"},
      {"target_size", "classifier input size patches are resampled to"},
      {"min_size", "smallest component kept, in pixels"},
      {"angle_min", "affine augmentation: minimum rotation (degrees)"},
      {"angle_max", "affine augmentation: maximum rotation (degrees)"},
      {"scale_min", "affine augmentation: minimum scale"},
      {"scale_max", "affine augmentation: maximum scale"},
      {"amplify", "training set amplification factor (1 = off)"},
      {"elastic", "elastic deformation during segmentation training"},
      {"elastic_grid", "elastic deformation grid spacing"},
      {"elastic_sigma", "elastic deformation smoothing"},
      {"elastic_alpha", "elastic deformation strength"},
      {"tile", "overlap-tile size for segmentation (0 = whole image)"},
      {"overlap", "tile overlap (-1 = automatic)"},
      {"seg_depth", "U-Net depth"},
      {"seg_base", "U-Net channels at the first level"},
      {"cls_family", "classifier family: residual or inception"},
      {"cls_blocks", "residual blocks per stage"},
      {"cls_mixed", "inception mixed blocks"},
      {"cls_base", "classifier base channels"},
      {"freeze", "lowest re-trained layer: 0, head, block:N or a node index"},
      {"cls_init", "pretrained classifier weights to fine-tune"},
      {"seg_epochs", "segmentation epochs"},
      {"seg_iters", "segmentation iterations per epoch"},
      {"seg_batch", "scenes per segmentation iteration"},
      {"seg_lr", "segmentation learning rate"},
      {"cls_epochs", "classification epochs"},
      {"cls_batch", "classification mini-batch size"},
      {"cls_lr", "classification learning rate"},
      {"momentum", "SGD momentum"},
      {"folds", "cross-validation folds"},
      {"saturation_eps", "plateau tolerance for the saturation epoch (percentage points)"},
      {"gradcheck_seeds", "random seeds per gradient check"},
      {"seed", "root random seed"},
      {"deterministic", "single-threaded, bitwise reproducible execution"},
  };
  return help;
}

inline const char* type_name(const json& v) {
  if (v.is_boolean()) return "a boolean";
  if (v.is_number_integer()) return "an integer";
  if (v.is_number()) return "a number";
  if (v.is_string()) return "a string";
  if (v.is_array()) return "a list";
  return "a value";
}

/// Accepts `incoming` for `key` if it matches the default's type (integers
/// are accepted where numbers are expected).
inline json coerce(const std::string& key, const json& like, const json& incoming) {
  auto bad = [&] {
    return ConfigError("invalid config: field '" + key + "' must be " + type_name(like) + ", got " + incoming.dump());
  };
  if (like.is_boolean()) {
    if (!incoming.is_boolean()) throw bad();
  } else if (like.is_number_integer()) {
    if (incoming.is_number_integer()) return incoming;
    if (incoming.is_number_float() && std::floor(incoming.get<double>()) == incoming.get<double>()) {
      return static_cast<std::int64_t>(incoming.get<double>());
    }
    throw bad();
  } else if (like.is_number()) {
    if (!incoming.is_number()) throw bad();
    return incoming.get<double>();
  } else if (like.is_string()) {
    if (!incoming.is_string()) throw bad();
  } else if (like.is_array()) {
    if (!incoming.is_array()) throw bad();
    for (const json& item : incoming) {
      if (!item.is_number()) throw bad();
    }
  }
  return incoming;
}

/// Parses a command-line string as the type of the default value.
inline json parse_flag_value(const std::string& key, const json& like, const std::string& text) {
  auto bad = [&] {
    return ConfigError("invalid config: field '" + key + "' must be " + type_name(like) + ", got '" + text + "'");
  };
  try {
    if (like.is_boolean()) {
      if (text == "true" || text == "1" || text == "yes") return true;
      if (text == "false" || text == "0" || text == "no") return false;
      throw bad();
    }
    if (like.is_number_integer()) {
      std::size_t used = 0;
      const long long v = std::stoll(text, &used);
      if (used != text.size()) throw bad();
      return v;
    }
    if (like.is_number()) {
      std::size_t used = 0;
      const double v = std::stod(text, &used);
      if (used != text.size()) throw bad();
      return v;
    }
    if (like.is_array()) {
      json arr = json::array();
      std::stringstream ss(text);
      std::string item;
      while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        const double v = std::stod(item, &used);
        if (used != item.size()) throw bad();
        arr.push_back(like.empty() || like[0].is_number_integer() ? json(static_cast<std::int64_t>(v)) : json(v));
      }
      return arr;
    }
  } catch (const std::logic_error&) {
    throw bad();
  }
  return text;
}

inline void merge_into(json& config, const json& overrides, const std::string& origin) {
  if (!overrides.is_object()) throw ConfigError("invalid config: " + origin + " must be a JSON object");
  for (const auto& [key, value] : overrides.items()) {
    if (!config.contains(key)) throw ConfigError("invalid config: unknown field '" + key + "' in " + origin);
    config[key] = coerce(key, config[key], value);
  }
}

inline json load_config_file(const fs::path& path) {
  if (!fs::exists(path)) throw MissingInputError("missing input " + path.string());
  try {
    return json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("invalid config: " + path.string() + " is not valid JSON (" + e.what() + ")");
  }
}

/// Typed view of a validated configuration.
struct PipelineConfig {
  json raw;

  template <typename V>
  V get(const std::string& key) const {
    return raw.at(key).get<V>();
  }
  std::string str(const std::string& key) const { return get<std::string>(key); }
  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(get<std::int64_t>(key)); }
  double num(const std::string& key) const { return get<double>(key); }
  std::uint64_t seed() const { return static_cast<std::uint64_t>(get<std::int64_t>("seed")); }

  fs::path data_dir() const { return str("data_dir"); }
  fs::path model_dir() const { return str("model_dir"); }
  fs::path output_dir() const { return str("output_dir"); }
  fs::path report_dir() const { return str("report_dir"); }
  fs::path input_dir() const { return str("input_dir").empty() ? data_dir() / "test" : fs::path(str("input_dir")); }
  fs::path patch_manifest() const {
    return str("patches").empty() ? output_dir() / "patches" / "manifest.tsv" : fs::path(str("patches"));
  }
  fs::path probmap_dir() const { return output_dir() / "probmaps"; }

  /// Stable hash of every non-path setting.
  std::string hash() const {
    json h = raw;
    for (const char* k : {"data_dir", "model_dir", "output_dir", "report_dir", "input_dir", "patches", "cls_init"}) {
      h.erase(k);
    }
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_name(h.dump())));
    return buf;
  }
};

namespace detail {

inline void require(bool ok, const std::string& key, const json& value, const std::string& rule) {
  if (!ok) throw ConfigError("invalid config: field '" + key + "' = " + value.dump() + " (" + rule + ")");
}

}  // namespace detail

inline PipelineConfig validate(json raw) {
  using detail::require;
  auto positive = [&](const char* k) { require(raw[k].get<std::int64_t>() >= 1, k, raw[k], "must be >= 1"); };
  auto nonneg = [&](const char* k) { require(raw[k].get<double>() >= 0.0, k, raw[k], "must be >= 0"); };
  for (const char* k : {"n_scenes", "scene_size", "patch_size", "target_size", "amplify", "elastic_grid", "seg_depth",
                        "seg_base", "cls_mixed", "cls_base", "seg_batch", "cls_batch", "folds", "gradcheck_seeds"}) {
    positive(k);
  }
  for (const char* k : {"n_test_scenes", "n_cells", "min_size", "tile", "seg_epochs", "seg_iters", "cls_epochs", "seed"}) {
    require(raw[k].get<std::int64_t>() >= 0, k, raw[k], "must be >= 0");
  }
  for (const char* k : {"noise_std", "seg_lr", "cls_lr", "elastic_alpha", "saturation_eps"}) nonneg(k);
  require(raw["overlap"].get<std::int64_t>() >= -1, "overlap", raw["overlap"], "must be >= 0, or -1 for automatic");
  require(raw["tau"].get<double>() >= 0.0 && raw["tau"].get<double>() <= 1.0, "tau", raw["tau"], "must lie in [0, 1]");
  require(raw["patch_size"].get<std::int64_t>() % 2 == 1, "patch_size", raw["patch_size"], "must be odd");
  require(raw["folds"].get<std::int64_t>() >= 2, "folds", raw["folds"], "must be >= 2");
  require(raw["elastic_grid"].get<std::int64_t>() >= 2, "elastic_grid", raw["elastic_grid"], "must be >= 2");
  require(raw["elastic_sigma"].get<double>() > 0.0, "elastic_sigma", raw["elastic_sigma"], "must be > 0");
  require(raw["momentum"].get<double>() >= 0.0 && raw["momentum"].get<double>() < 1.0, "momentum", raw["momentum"],
          "must lie in [0, 1)");
  require(raw["angle_min"].get<double>() <= raw["angle_max"].get<double>(), "angle_min", raw["angle_min"],
          "must not exceed angle_max");
  require(raw["scale_min"].get<double>() > 0.0 && raw["scale_min"].get<double>() <= raw["scale_max"].get<double>(),
          "scale_min", raw["scale_min"], "must be > 0 and not exceed scale_max");
  require(raw["radius_min"].get<double>() >= 2.0 && raw["radius_min"].get<double>() <= raw["radius_max"].get<double>(),
          "radius_min", raw["radius_min"], "must be >= 2 and not exceed radius_max");
  const std::string family = raw["cls_family"].get<std::string>();
  require(family == "residual" || family == "inception", "cls_family", raw["cls_family"], "residual or inception");
  require(!raw["cls_blocks"].empty(), "cls_blocks", raw["cls_blocks"], "needs at least one stage");
  for (const json& b : raw["cls_blocks"]) {
    require(b.is_number_integer() && b.get<std::int64_t>() >= 1, "cls_blocks", raw["cls_blocks"],
            "every stage needs >= 1 block");
  }
  require(raw["class_mix"].size() == 3, "class_mix", raw["class_mix"], "needs three probabilities");
  double mix = 0.0;
  for (const json& p : raw["class_mix"]) {
    require(p.get<double>() >= 0.0, "class_mix", raw["class_mix"], "entries must be >= 0");
    mix += p.get<double>();
  }
  require(std::abs(mix - 1.0) < 1e-6, "class_mix", raw["class_mix"], "must sum to 1");
  const std::int64_t multiple = std::int64_t{1} << raw["seg_depth"].get<std::int64_t>();
  require(raw["scene_size"].get<std::int64_t>() % multiple == 0, "scene_size", raw["scene_size"],
          "must be a multiple of 2^seg_depth = " + std::to_string(multiple));
  require(raw["tile"].get<std::int64_t>() % multiple == 0, "tile", raw["tile"],
          "must be a multiple of 2^seg_depth = " + std::to_string(multiple));
  return PipelineConfig{std::move(raw)};
}

// ---------------------------------------------------------------------------
// Models

inline json segmenter_arch(const PipelineConfig& cfg) {
  return {{"family", "unet"}, {"depth", cfg.size("seg_depth")}, {"base", cfg.size("seg_base")}};
}

inline json classifier_arch(const PipelineConfig& cfg) {
  return {{"family", cfg.str("cls_family")},
          {"blocks", cfg.raw["cls_blocks"]},
          {"mixed", cfg.size("cls_mixed")},
          {"base", cfg.size("cls_base")}};
}

inline NetworkSpec<float> build_from_arch(const json& arch, Rng& rng) {
  try {
    const std::string family = arch.at("family").get<std::string>();
    if (family == "unet") {
      return build_unet<float>(arch.at("depth").get<std::size_t>(), arch.at("base").get<std::size_t>(), 1, 1, rng);
    }
    if (family == "residual") {
      return build_residual_classifier<float>(arch.at("blocks").get<std::vector<std::size_t>>(),
                                              arch.at("base").get<std::size_t>(), kNumCellClasses, rng);
    }
    if (family == "inception") {
      return build_inception_classifier<float>(arch.at("mixed").get<std::size_t>(), arch.at("base").get<std::size_t>(),
                                               kNumCellClasses, rng);
    }
    throw FormatError("unknown network family '" + family + "'");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed architecture record: ") + e.what());
  }
}

inline std::string method_name(const json& arch, std::size_t freeze_index) {
  std::string name = "U+";
  if (arch["family"] == "residual") {
    name += "Residual[";
    for (std::size_t i = 0; i < arch["blocks"].size(); ++i) {
      name += (i ? "-" : "") + std::to_string(arch["blocks"][i].get<std::size_t>());
    }
    name += "]";
  } else {
    name += "Inception[" + std::to_string(arch["mixed"].get<std::size_t>()) + "]";
  }
  return name + " (" + std::to_string(freeze_index) + ")";
}

inline void require_file(const fs::path& p) {
  if (!fs::exists(p)) throw MissingInputError("missing input " + p.string());
}

/// Writes `<stem>.ncw` plus `<stem>.json` describing the architecture.
inline void save_model(const fs::path& dir, const std::string& stem, const NetworkSpec<float>& spec, json record) {
  fs::create_directories(dir);
  save_weights(spec, dir / (stem + ".ncw"));
  write_text_file(dir / (stem + ".json"), record.dump(2) + "\n");
}

inline NetworkSpec<float> load_model(const fs::path& dir, const std::string& stem) {
  const fs::path weights = dir / (stem + ".ncw"), record = dir / (stem + ".json");
  require_file(weights);
  require_file(record);
  json meta;
  try {
    meta = json::parse(read_text_file(record));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(record.string() + ": " + e.what());
  }
  Rng scratch(0);
  NetworkSpec<float> spec = build_from_arch(meta.at("arch"), scratch);
  return load_weights(spec, weights);
}

// ---------------------------------------------------------------------------
// Stages

inline SceneSpec scene_spec(const PipelineConfig& cfg) {
  SceneSpec s;
  s.height = s.width = cfg.size("scene_size");
  s.n_cells = cfg.size("n_cells");
  for (std::size_t k = 0; k < 3; ++k) s.class_mix[k] = cfg.raw["class_mix"][k].get<double>();
  s.radius_min = cfg.num("radius_min");
  s.radius_max = cfg.num("radius_max");
  s.noise_std = cfg.num("noise_std");
  return s;
}

inline AugmentSpec augment_spec(const PipelineConfig& cfg) {
  AugmentSpec a;
  a.angle_min = cfg.num("angle_min");
  a.angle_max = cfg.num("angle_max");
  a.scale_min = cfg.num("scale_min");
  a.scale_max = cfg.num("scale_max");
  a.factor = cfg.size("amplify");
  return a;
}

inline ElasticSpec elastic_spec(const PipelineConfig& cfg) {
  ElasticSpec e;
  e.grid_spacing = cfg.size("elastic_grid");
  e.sigma = cfg.num("elastic_sigma");
  e.alpha = cfg.num("elastic_alpha");
  return e;
}

inline json run_stamp(const PipelineConfig& cfg) { return {{"seed", cfg.seed()}, {"config_hash", cfg.hash()}}; }

/// Training and held-out scenes, ground truth and a ground-truth patch set.
inline void run_synth(const PipelineConfig& cfg, std::ostream& out) {
  SceneSpec spec = scene_spec(cfg);
  std::vector<Patch> patches;
  for (const auto& [split, count] : {std::pair<std::string, std::size_t>{"train", cfg.size("n_scenes")},
                                     std::pair<std::string, std::size_t>{"test", cfg.size("n_test_scenes")}}) {
    spec.seed = derive_seed(cfg.seed(), "synth." + split);
    for (std::size_t i = 0; i < count; ++i) {
      const Scene scene = generate_scene(scene_spec_for(spec, i));
      // Split-prefixed names keep probability maps of different splits apart.
      const std::string name = split + "_" + scene_name(i);
      write_scene(cfg.data_dir() / split, name, scene);
      if (split == "train") {
        for (Patch& p : patches_from_truth(scene, name, cfg.size("patch_size"))) patches.push_back(std::move(p));
      }
    }
    out << "synth: wrote " << count << " " << split << " scenes to " << (cfg.data_dir() / split).string() << "\n";
  }
  write_patch_dataset(cfg.data_dir() / "patches", patches);
  out << "synth: wrote " << patches.size() << " ground-truth patches to " << (cfg.data_dir() / "patches").string()
      << "\n";
}

inline Image grayscale_of(const MultiChannelImage& raw) { return fuse_grayscale(normalize_scene(raw)); }

inline std::vector<std::string> require_scenes(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw MissingInputError("missing input " + dir.string());
  std::vector<std::string> scenes = list_scenes(dir);
  if (scenes.empty()) throw MissingInputError("missing input: no <scene>_mCherry.png / _GCaMP.png pairs in " + dir.string());
  return scenes;
}

inline void run_train_seg(const PipelineConfig& cfg, std::ostream& out) {
  const fs::path dir = cfg.data_dir() / "train";
  std::vector<SegSample> samples;
  for (const std::string& scene : require_scenes(dir)) {
    require_file(truth_path(dir, scene));
    samples.push_back({grayscale_of(read_scene_pair(dir, scene)), read_probability_map(truth_path(dir, scene))});
  }
  const json arch = segmenter_arch(cfg);
  Rng init(derive_seed(cfg.seed(), "train-seg.init"));
  NetworkSpec<float> spec = build_from_arch(arch, init);
  SegTrainOptions opt;
  opt.epochs = cfg.size("seg_epochs");
  opt.iters_per_epoch = cfg.size("seg_iters");
  opt.batch = cfg.size("seg_batch");
  opt.lr = cfg.num("seg_lr");
  opt.momentum = cfg.num("momentum");
  opt.elastic = cfg.get<bool>("elastic");
  opt.elastic_spec = elastic_spec(cfg);
  Rng rng(derive_seed(cfg.seed(), "train-seg"));
  const SegTrainResult<float> result = train_segmentation(spec, samples, opt, rng);
  for (std::size_t e = 0; e < result.loss_curve.size(); ++e) {
    out << "train-seg: epoch " << e + 1 << " loss " << fixed3(result.loss_curve[e]) << "\n";
  }
  json record = run_stamp(cfg);
  record["arch"] = arch;
  record["loss_curve"] = result.loss_curve;
  save_model(cfg.model_dir(), "segmenter", result.spec, record);
  out << "train-seg: saved " << (cfg.model_dir() / "segmenter.ncw").string() << "\n";
}

inline Image segment_gray(const PipelineConfig& cfg, const NetworkSpec<float>& seg, const Image& gray) {
  const std::size_t tile = cfg.size("tile");
  const std::int64_t overlap = cfg.get<std::int64_t>("overlap");
  if (tile == 0) return whole_image_inference(seg, gray, overlap < 0 ? 0 : static_cast<std::size_t>(overlap));
  const std::size_t ov = overlap < 0 ? receptive_radius(seg) : static_cast<std::size_t>(overlap);
  return tiled_inference(seg, gray, tile, ov);
}

inline fs::path probmap_path(const PipelineConfig& cfg, const std::string& scene) {
  return cfg.probmap_dir() / (scene + "_prob.png");
}

inline void run_segment(const PipelineConfig& cfg, std::ostream& out) {
  const fs::path dir = cfg.input_dir();
  const std::vector<std::string> scenes = require_scenes(dir);
  const NetworkSpec<float> seg = load_model(cfg.model_dir(), "segmenter");
  fs::create_directories(cfg.probmap_dir());
  for (const std::string& scene : scenes) {
    const Image prob = segment_gray(cfg, seg, grayscale_of(read_scene_pair(dir, scene)));
    json meta = run_stamp(cfg);
    meta["scene"] = scene;
    meta["kind"] = "probability";
    write_probability_map(probmap_path(cfg, scene), prob, meta);
  }
  out << "segment: wrote " << scenes.size() << " probability maps to " << cfg.probmap_dir().string() << "\n";
}

/// Ground-truth class of the cell whose disk (plus one pixel) holds the point.
inline std::optional<CellClass> truth_label(const std::vector<CellInstance>& cells, double row, double col) {
  for (const CellInstance& c : cells) {
    const double dr = row - static_cast<double>(c.row), dc = col - static_cast<double>(c.col);
    if (dr * dr + dc * dc <= (c.radius + 1.0) * (c.radius + 1.0)) return c.label;
  }
  return std::nullopt;
}

/// Components of a thresholded probability map, after the size filter.
inline ComponentSet cell_components(const PipelineConfig& cfg, const Image& prob) {
  return filter_components(connected_components(threshold_map(prob, cfg.num("tau"))), cfg.size("min_size"));
}

inline void run_extract(const PipelineConfig& cfg, std::ostream& out) {
  const fs::path dir = cfg.input_dir();
  std::vector<Patch> patches;
  std::size_t labeled = 0;
  for (const std::string& scene : require_scenes(dir)) {
    require_file(probmap_path(cfg, scene));
    const Image prob = read_probability_map(probmap_path(cfg, scene));
    const Image rgb = compose_rgb(normalize_scene(read_scene_pair(dir, scene)));
    std::vector<CellInstance> truth;
    const bool has_truth = fs::exists(sidecar_path(truth_path(dir, scene)));
    if (has_truth) truth = read_truth_cells(dir, scene);
    for (const Component& c : cell_components(cfg, prob).components) {
      Patch p;
      p.row = c.centroid_row;
      p.col = c.centroid_col;
      p.image = extract_patch(rgb, p.row, p.col, cfg.size("patch_size"));
      p.source = scene;
      if (has_truth) p.label = truth_label(truth, p.row, p.col);
      labeled += p.label.has_value();
      patches.push_back(std::move(p));
    }
  }
  const fs::path target = cfg.output_dir() / "patches";
  write_patch_dataset(target, patches);
  out << "extract: wrote " << patches.size() << " patches (" << labeled << " labeled) to "
      << (target / "manifest.tsv").string() << "\n";
}

inline std::vector<Patch> labeled_patches(const fs::path& manifest, std::ostream& out) {
  require_file(manifest);
  std::vector<Patch> all = read_patch_set(manifest);
  std::vector<Patch> kept;
  for (Patch& p : all) {
    if (p.label) kept.push_back(std::move(p));
  }
  if (kept.size() != all.size()) out << "train-cls: skipped " << all.size() - kept.size() << " unlabeled patches\n";
  if (kept.empty()) throw ConfigError("invalid config: field 'patches' lists no labeled patches (" + manifest.string() + ")");
  return kept;
}

inline ClassifierOptions classifier_options(const PipelineConfig& cfg) {
  ClassifierOptions o;
  o.epochs = cfg.size("cls_epochs");
  o.batch = cfg.size("cls_batch");
  o.lr = cfg.num("cls_lr");
  o.momentum = cfg.num("momentum");
  o.input_size = cfg.size("target_size");
  o.augment = augment_spec(cfg);
  o.amplify = o.augment.factor > 1;
  return o;
}

/// Fresh (or pretrained, head replaced) classifier for one run.
inline NetworkSpec<float> make_classifier(const PipelineConfig& cfg, Rng& rng) {
  NetworkSpec<float> spec = build_from_arch(classifier_arch(cfg), rng);
  if (!cfg.str("cls_init").empty()) {
    spec = load_weights(spec, [&] {
      const fs::path p = cfg.str("cls_init");
      require_file(p);
      return p;
    }());
    spec = replace_head(spec, kNumCellClasses, rng);
  }
  return spec;
}

inline std::string summary_slug(const json& arch, std::size_t freeze_index) {
  return arch["family"].get<std::string>() + "_k" + std::to_string(freeze_index);
}

/// Cross-validates the configured classifier, then trains the final model on
/// every labeled patch.
inline void run_train_cls(const PipelineConfig& cfg, std::ostream& out) {
  const std::vector<Patch> patches = labeled_patches(cfg.patch_manifest(), out);
  const json arch = classifier_arch(cfg);
  Rng probe(0);
  const std::size_t k = resolve_freeze_point(build_from_arch(arch, probe), cfg.str("freeze"));
  const ClassifierOptions opt = classifier_options(cfg);
  const std::string method = method_name(arch, k);

  FoldTrainer trainer = classifier_fold_trainer<float>([&](Rng& rng) { return make_classifier(cfg, rng); },
                                                       [k](const NetworkSpec<float>&) { return k; }, opt);
  CVOptions cv;
  cv.k = cfg.size("folds");
  cv.seed = derive_seed(cfg.seed(), "train-cls.cv");
  cv.saturation_epsilon = cfg.num("saturation_eps");
  std::vector<std::string> warnings;
  const CVSummary summary = run_cross_validation(method, patches, cv, trainer, &warnings);
  for (const std::string& w : warnings) out << "train-cls: warning: " << w << "\n";

  const fs::path cv_dir = cfg.report_dir() / "cv" / summary_slug(arch, k);
  fs::create_directories(cv_dir);
  for (const FoldReport& r : summary.folds) {
    char name[32];
    std::snprintf(name, sizeof name, "fold_%02zu.json", r.fold);
    write_text_file(cv_dir / name, fold_report_json(r).dump(2) + "\n");
  }
  json s = run_stamp(cfg);
  s["method"] = summary.method;
  s["freeze_point"] = k;
  s["mean_saturation"] = summary.mean_saturation;
  s["mean_best"] = summary.mean_best;
  s["std_best"] = summary.std_best;
  s["saturation_epoch"] = summary.saturation_epoch;
  s["confusion"] = confusion_json(summary.confusion);
  write_text_file(cv_dir / "summary.json", s.dump(2) + "\n");
  out << "train-cls: " << method << " mean best " << fixed3(summary.mean_best) << " +- " << fixed3(summary.std_best)
      << ", saturation epoch " << summary.saturation_epoch << "\n";

  Rng init(derive_seed(cfg.seed(), "train-cls.final.init"));
  NetworkSpec<float> spec = make_classifier(cfg, init);
  Rng rng(derive_seed(cfg.seed(), "train-cls.final"));
  const ClassifierRun<float> run = train_classifier(std::move(spec), patches, {}, k, opt, rng);
  json record = run_stamp(cfg);
  record["arch"] = arch;
  record["freeze_point"] = k;
  record["train_loss"] = run.train_loss;
  save_model(cfg.model_dir(), "classifier", run.spec, record);
  out << "train-cls: saved " << (cfg.model_dir() / "classifier.ncw").string() << "\n";
}

struct CellRecord {
  double row = 0.0;
  double col = 0.0;
  std::size_t size = 0;
  std::array<double, 3> probabilities{};
  CellClass label = CellClass::Excitatory;
};

/// Segment, extract and classify every cell of one scene.
inline std::vector<CellRecord> classify_cells(const PipelineConfig& cfg, const NetworkSpec<float>& seg,
                                              const NetworkSpec<float>& cls, const MultiChannelImage& raw) {
  const Image prob = segment_gray(cfg, seg, grayscale_of(raw));
  const Image rgb = compose_rgb(normalize_scene(raw));
  const ComponentSet comps = cell_components(cfg, prob);
  std::vector<Patch> patches;
  for (const Component& c : comps.components) {
    Patch p;
    p.image = extract_patch(rgb, c.centroid_row, c.centroid_col, cfg.size("patch_size"));
    patches.push_back(std::move(p));
  }
  patches = prepare_patches(std::move(patches), cfg.size("target_size"));
  std::vector<std::array<double, 3>> probs;
  const std::vector<CellClass> labels = classify_patches(cls, patches, cfg.size("cls_batch"), &probs);
  std::vector<CellRecord> out;
  for (std::size_t i = 0; i < comps.components.size(); ++i) {
    const Component& c = comps.components[i];
    out.push_back({c.centroid_row, c.centroid_col, c.pixel_count, probs[i], labels[i]});
  }
  return out;
}

inline void run_classify(const PipelineConfig& cfg, std::ostream& out) {
  const fs::path dir = cfg.input_dir();
  const std::vector<std::string> scenes = require_scenes(dir);
  const NetworkSpec<float> seg = load_model(cfg.model_dir(), "segmenter");
  const NetworkSpec<float> cls = load_model(cfg.model_dir(), "classifier");
  const fs::path cells_dir = cfg.output_dir() / "cells";
  fs::create_directories(cells_dir);
  std::size_t total = 0;
  for (const std::string& scene : scenes) {
    std::string table = "row\tcol\tsize\tp_Excitatory\tp_Glial\tp_Inhibitory\tclass\n";
    for (const CellRecord& r : classify_cells(cfg, seg, cls, read_scene_pair(dir, scene))) {
      table += format_fixed(r.row, 3) + "\t" + format_fixed(r.col, 3) + "\t" + std::to_string(r.size);
      for (double p : r.probabilities) table += "\t" + format_fixed(p, 6);
      table += std::string("\t") + cell_class_name(r.label) + "\n";
      ++total;
    }
    write_text_file(cells_dir / (scene + ".tsv"), table);
  }
  out << "classify: " << total << " cells in " << scenes.size() << " scenes, tables in " << cells_dir.string() << "\n";
}

/// Collects every cross-validation summary into accuracy and confusion
/// reports, plus segmentation agreement when maps and ground truth exist.
inline void run_evaluate(const PipelineConfig& cfg, std::ostream& out) {
  const fs::path cv_root = cfg.report_dir() / "cv";
  if (!fs::is_directory(cv_root)) throw MissingInputError("missing input " + cv_root.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(cv_root)) {
    if (fs::exists(e.path() / "summary.json")) dirs.push_back(e.path());
  }
  if (dirs.empty()) throw MissingInputError("missing input: no summary.json under " + cv_root.string());
  std::sort(dirs.begin(), dirs.end());

  const std::string stamp = "seed=" + std::to_string(cfg.seed()) + " config=" + cfg.hash();
  std::vector<ReportRow> rows;
  std::optional<ClassMetrics> best;
  std::string best_method;
  double best_score = -1.0;
  for (const fs::path& d : dirs) {
    json s;
    try {
      s = json::parse(read_text_file(d / "summary.json"));
      rows.push_back({s.at("method").get<std::string>(), s.at("mean_saturation").get<double>(),
                      s.at("mean_best").get<double>(), s.at("std_best").get<double>(),
                      s.at("saturation_epoch").get<std::size_t>()});
      ConfusionMatrix m;
      for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 3; ++c) m.counts[r][c] = s.at("confusion").at(r).at(c).get<std::size_t>();
      }
      if (rows.back().mean_best > best_score) {
        best_score = rows.back().mean_best;
        best = metrics_from_matrix(m);
        best_method = rows.back().method;
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError((d / "summary.json").string() + ": " + e.what());
    }
  }
  const fs::path rd = cfg.report_dir();
  write_text_file(rd / "accuracy_table.csv", "# " + stamp + "\n" + report_csv(rows));
  write_text_file(rd / "accuracy_table.txt", report_text(rows) + "\n" + stamp + "\n");
  std::string confusion = "Confusion matrix summed over validation folds at the saturation epoch: " + best_method + "\n" +
                   confusion_text(*best) + "\n" + stamp + "\n";
  write_text_file(rd / "confusion_table.txt", confusion);
  out << report_text(rows) << "\n" << confusion;

  // Segmentation agreement on scenes with both a map and ground truth.
  const fs::path dir = cfg.input_dir();
  if (fs::is_directory(dir) && fs::is_directory(cfg.probmap_dir())) {
    std::string csv = "# " + stamp + "\nscene,pixel_agreement\n";
    double sum = 0.0;
    std::size_t n = 0;
    for (const std::string& scene : list_scenes(dir)) {
      if (!fs::exists(probmap_path(cfg, scene)) || !fs::exists(truth_path(dir, scene))) continue;
      const double acc =
          segmentation_accuracy(read_probability_map(probmap_path(cfg, scene)), read_probability_map(truth_path(dir, scene)));
      csv += scene + "," + fixed3(acc) + "\n";
      sum += acc;
      ++n;
    }
    if (n > 0) {
      csv += "mean," + fixed3(sum / static_cast<double>(n)) + "\n";
      write_text_file(rd / "segmentation.csv", csv);
      out << "segmentation pixel agreement (tau 0.5): " << fixed3(sum / static_cast<double>(n)) << " over " << n
          << " scenes\n";
    }
  }
}

inline int run_gradcheck(const PipelineConfig& cfg, std::ostream& out) {
  GradcheckOptions opt;
  opt.seeds = cfg.size("gradcheck_seeds");
  opt.seed = cfg.seed();
  bool ok = true;
  run_gradcheck_suite(opt, [&](const GradcheckResult& r) {
    char line[160];
    std::snprintf(line, sizeof line, "%-44s max rel err %.3e  tol %.0e  %s\n", r.name.c_str(), r.max_error,
                  r.tolerance, r.passed() ? "ok" : "FAIL");
    out << line << std::flush;
    ok = ok && r.passed();
  });
  return ok ? 0 : 1;
}

}  // namespace neurocell::pipeline
