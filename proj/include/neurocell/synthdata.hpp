#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "neurocell/cell_class.hpp"
#include "neurocell/errors.hpp"
#include "neurocell/image.hpp"
#include "neurocell/imaging.hpp"
#include "neurocell/io.hpp"
#include "neurocell/rng.hpp"

namespace neurocell {

struct IntensityRange {
  double lo = 0.0;
  double hi = 0.0;
  double draw(Rng& rng) const { return hi > lo ? rng.uniform(lo, hi) : lo; }
};

struct SceneSpec {
  std::size_t height = 128;
  std::size_t width = 128;
  std::size_t n_cells = 10;
  std::array<double, 3> class_mix = {0.45, 0.45, 0.10};  // indexed by CellClass ordinal
  double radius_min = 4.0;
  double radius_max = 7.0;
  IntensityRange bright{0.7, 0.9};
  IntensityRange dim{0.05, 0.2};
  IntensityRange absent{0.0, 0.0};
  double noise_std = 0.03;
  // Extra clearance between disk rims so neighbours never touch at 8-connectivity.
  double min_gap = 2.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (height == 0 || width == 0) throw ConfigError("scene size must be positive");
    double total = 0.0;
    for (double p : class_mix) {
      if (!(p >= 0.0)) throw ConfigError("class mix entries must be non-negative");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-6) throw ConfigError("class mix must sum to 1, got " + std::to_string(total));
    if (!(radius_min >= 2.0) || !(radius_max >= radius_min)) {
      throw ConfigError("cell radius range must satisfy 2 <= min <= max");
    }
    if (!(noise_std >= 0.0)) throw ConfigError("noise std must be non-negative");
    for (const IntensityRange* r : {&bright, &dim, &absent}) {
      if (!(r->lo >= 0.0 && r->hi <= 1.0 && r->lo <= r->hi)) throw ConfigError("intensity ranges must lie in [0, 1]");
    }
    if (2.0 * (radius_max + 1.0) >= static_cast<double>(std::min(height, width))) {
      throw ConfigError("cells do not fit in a " + std::to_string(height) + "x" + std::to_string(width) + " scene");
    }
  }
};

struct CellInstance {
  std::int64_t row = 0;
  std::int64_t col = 0;
  double radius = 0.0;
  CellClass label = CellClass::Excitatory;
};

struct GroundTruth {
  std::vector<CellInstance> cells;
  Image probability;  // 1 inside a disk, 0 elsewhere
  LabelGrid labels;   // cell index + 1, 0 for background
};

struct Scene {
  MultiChannelImage channels;
  GroundTruth truth;
};

namespace detail {

inline CellClass draw_class(const std::array<double, 3>& mix, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t k = 0; k < kNumCellClasses; ++k) {
    acc += mix[k];
    if (u < acc && mix[k] > 0.0) return cell_class_from(k);
  }
  for (std::size_t k = kNumCellClasses; k-- > 0;) {
    if (mix[k] > 0.0) return cell_class_from(k);
  }
  return CellClass::Excitatory;
}

/// 1 inside r-1, cosine falloff to 0 at r+1.
inline double taper(double d, double r) {
  if (d <= r - 1.0) return 1.0;
  if (d >= r + 1.0) return 0.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * (d - (r - 1.0)) / 2.0));
}

inline bool in_disk(std::int64_t r, std::int64_t c, const CellInstance& cell) {
  const double dr = static_cast<double>(r - cell.row), dc = static_cast<double>(c - cell.col);
  return dr * dr + dc * dc <= cell.radius * cell.radius;
}

}  // namespace detail

/// Disjoint disks placed by rejection sampling, each rendered into both
/// channels at class-dependent levels:
///   Excitatory: mCherry bright, GCaMP bright
///   Glial:      mCherry bright, GCaMP dim
///   Inhibitory: mCherry absent, GCaMP bright
inline Scene generate_scene(const SceneSpec& spec) {
  spec.validate();
  const Rng root(spec.seed);
  Rng layout = root.derive("layout");
  Rng levels = root.derive("levels");
  Rng noise = root.derive("noise");

  Scene scene;
  std::vector<CellInstance>& cells = scene.truth.cells;
  const std::size_t max_attempts = 10 * spec.n_cells;
  std::size_t attempts = 0;
  while (cells.size() < spec.n_cells) {
    if (attempts++ >= max_attempts) {
      throw GenerationError("could not place " + std::to_string(spec.n_cells) + " disjoint cells in " +
                            std::to_string(max_attempts) + " attempts (placed " + std::to_string(cells.size()) +
                            "); use fewer cells or a smaller radius range");
    }
    CellInstance cell;
    cell.radius = layout.uniform(spec.radius_min, spec.radius_max);
    const auto margin = static_cast<std::int64_t>(std::ceil(cell.radius + 1.0));
    const auto span_r = static_cast<std::int64_t>(spec.height) - 2 * margin;
    const auto span_c = static_cast<std::int64_t>(spec.width) - 2 * margin;
    cell.row = margin + static_cast<std::int64_t>(layout.below(static_cast<std::uint64_t>(span_r)));
    cell.col = margin + static_cast<std::int64_t>(layout.below(static_cast<std::uint64_t>(span_c)));
    cell.label = detail::draw_class(spec.class_mix, layout);
    bool clear = true;
    for (const CellInstance& other : cells) {
      const double d = std::hypot(static_cast<double>(cell.row - other.row), static_cast<double>(cell.col - other.col));
      if (d < cell.radius + other.radius + spec.min_gap) {
        clear = false;
        break;
      }
    }
    if (clear) cells.push_back(cell);
  }

  Image red(1, spec.height, spec.width), green(1, spec.height, spec.width);
  scene.truth.probability = Image(1, spec.height, spec.width);
  scene.truth.labels = LabelGrid(spec.height, spec.width);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const CellInstance& cell = cells[i];
    double level_r = 0.0, level_g = 0.0;
    switch (cell.label) {
      case CellClass::Excitatory:
        level_r = spec.bright.draw(levels);
        level_g = spec.bright.draw(levels);
        break;
      case CellClass::Glial:
        level_r = spec.bright.draw(levels);
        level_g = spec.dim.draw(levels);
        break;
      case CellClass::Inhibitory:
        level_r = spec.absent.draw(levels);
        level_g = spec.bright.draw(levels);
        break;
    }
    const auto reach = static_cast<std::int64_t>(std::ceil(cell.radius + 1.0));
    for (std::int64_t r = cell.row - reach; r <= cell.row + reach; ++r) {
      for (std::int64_t c = cell.col - reach; c <= cell.col + reach; ++c) {
        if (r < 0 || c < 0 || r >= static_cast<std::int64_t>(spec.height) || c >= static_cast<std::int64_t>(spec.width)) {
          continue;
        }
        const auto ur = static_cast<std::size_t>(r), uc = static_cast<std::size_t>(c);
        const double w = detail::taper(std::hypot(static_cast<double>(r - cell.row), static_cast<double>(c - cell.col)),
                                       cell.radius);
        red.at(ur, uc) = std::max(red.at(ur, uc), static_cast<float>(level_r * w));
        green.at(ur, uc) = std::max(green.at(ur, uc), static_cast<float>(level_g * w));
        if (detail::in_disk(r, c, cell)) {
          scene.truth.probability.at(ur, uc) = 1.0f;
          scene.truth.labels.at(ur, uc) = static_cast<std::int32_t>(i + 1);
        }
      }
    }
  }
  for (Image* plane : {&red, &green}) {
    for (float& v : plane->pixels) {
      v = static_cast<float>(std::clamp(static_cast<double>(v) + spec.noise_std * noise.normal(), 0.0, 1.0));
    }
  }
  scene.channels.set(kMCherry, std::move(red));
  scene.channels.set(kGCaMP, std::move(green));
  return scene;
}

inline std::string scene_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu", index);
  return buf;
}

/// Scene i of a dataset is generated from seed derive(seed, i).
inline SceneSpec scene_spec_for(const SceneSpec& spec, std::size_t index) {
  SceneSpec s = spec;
  s.seed = derive_seed(spec.seed, index);
  return s;
}

/// Same preparation real scenes get before patching: per-channel percentile
/// normalization, then RGB composition.
inline std::vector<Patch> patches_from_truth(const Scene& scene, const std::string& source, std::size_t patch_size) {
  const Image rgb = compose_rgb(normalize_scene(scene.channels));
  std::vector<Patch> out;
  for (const CellInstance& cell : scene.truth.cells) {
    Patch p;
    p.row = static_cast<double>(cell.row);
    p.col = static_cast<double>(cell.col);
    p.image = extract_patch(rgb, p.row, p.col, patch_size);
    p.source = source;
    p.label = cell.label;
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<Patch> generate_patch_dataset(const SceneSpec& spec, std::size_t n_scenes,
                                                 std::size_t patch_size = 101) {
  spec.validate();
  std::vector<Patch> out;
  for (std::size_t i = 0; i < n_scenes; ++i) {
    std::vector<Patch> ps = patches_from_truth(generate_scene(scene_spec_for(spec, i)), scene_name(i), patch_size);
    for (Patch& p : ps) out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// On-disk datasets

inline nlohmann::ordered_json cells_json(const std::vector<CellInstance>& cells) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const CellInstance& c : cells) {
    arr.push_back({{"row", c.row}, {"col", c.col}, {"radius", c.radius}, {"label", cell_class_name(c.label)}});
  }
  return arr;
}

inline std::vector<CellInstance> cells_from_json(const nlohmann::ordered_json& arr) {
  std::vector<CellInstance> out;
  try {
    for (const auto& j : arr) {
      CellInstance c;
      c.row = j.at("row").get<std::int64_t>();
      c.col = j.at("col").get<std::int64_t>();
      c.radius = j.at("radius").get<double>();
      c.label = parse_cell_class(j.at("label").get<std::string>());
      out.push_back(c);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed cell list: ") + e.what());
  }
  return out;
}

inline fs::path truth_path(const fs::path& dir, const std::string& scene) { return dir / (scene + "_truth.png"); }

/// Writes `<scene>_mCherry.png`, `<scene>_GCaMP.png` (16-bit) and
/// `<scene>_truth.png` whose sidecar lists every cell.
inline void write_scene(const fs::path& dir, const std::string& name, const Scene& scene) {
  fs::create_directories(dir);
  for (const char* ch : {kMCherry, kGCaMP}) write_png_unit(channel_path(dir, name, ch), scene.channels.plane(ch));
  nlohmann::ordered_json meta;
  meta["kind"] = "ground_truth";
  meta["cells"] = cells_json(scene.truth.cells);
  write_probability_map(truth_path(dir, name), scene.truth.probability, meta);
}

inline std::vector<CellInstance> read_truth_cells(const fs::path& dir, const std::string& scene) {
  const fs::path side = sidecar_path(truth_path(dir, scene));
  if (!fs::exists(side)) throw MissingInputError("missing input " + side.string());
  nlohmann::ordered_json meta;
  try {
    meta = nlohmann::ordered_json::parse(read_text_file(side));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(side.string() + ": " + e.what());
  }
  if (!meta.contains("cells")) throw FormatError(side.string() + ": no cell list");
  return cells_from_json(meta["cells"]);
}

/// Patch images under `<dir>/patches/` plus `<dir>/manifest.tsv`.
inline void write_patch_dataset(const fs::path& dir, const std::vector<Patch>& patches) {
  fs::create_directories(dir / "patches");
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "patches/p%06zu", i);
    write_patch_images(dir / buf, patches[i].image);
    entries.push_back({buf, patches[i].source, patches[i].row, patches[i].col, patches[i].label});
  }
  write_manifest(dir / "manifest.tsv", entries);
}

}  // namespace neurocell
