#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "neurocell/cell_class.hpp"
#include "neurocell/errors.hpp"
#include "neurocell/image.hpp"
#include "neurocell/imaging.hpp"

namespace neurocell {

namespace fs = std::filesystem;

/// Grayscale PNG with its raw integer samples.
struct PngGray {
  Image raw;  // samples as integers stored in float
  int bit_depth = 8;
  double max_value() const { return bit_depth == 16 ? 65535.0 : 255.0; }
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct PngError {
  char message[256] = "unknown libpng error";
};

inline void png_on_error(png_structp png, png_const_charp msg) {
  auto* err = static_cast<PngError*>(png_get_error_ptr(png));
  std::snprintf(err->message, sizeof err->message, "%s", msg);
  png_longjmp(png, 1);
}
inline void png_on_warning(png_structp, png_const_charp) {}

// The libpng calls live in functions whose locals are trivially
// destructible, so the longjmp on error skips no destructors.

inline bool png_read_rows(std::FILE* file, png_structp png, png_infop info, std::vector<std::uint8_t>* buf,
                          png_uint_32* height, png_uint_32* width, int* depth) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_init_io(png, file);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE) {
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  if (png_get_bit_depth(png, info) == 16) png_set_swap(png);
  png_read_update_info(png, info);
  *depth = png_get_bit_depth(png, info);
  *height = png_get_image_height(png, info);
  *width = png_get_image_width(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buf->assign(rowbytes * *height, 0);
  for (png_uint_32 r = 0; r < *height; ++r) png_read_row(png, buf->data() + r * rowbytes, nullptr);
  png_read_end(png, nullptr);
  return true;
}

inline bool png_write_rows(std::FILE* file, png_structp png, png_infop info, const std::vector<std::uint8_t>* buf,
                           png_uint_32 height, png_uint_32 width, int depth) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_init_io(png, file);
  png_set_IHDR(png, info, width, height, depth, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (depth == 16) png_set_swap(png);
  const std::size_t rowbytes = static_cast<std::size_t>(width) * static_cast<std::size_t>(depth / 8);
  for (png_uint_32 r = 0; r < height; ++r) {
    png_write_row(png, const_cast<png_bytep>(buf->data() + r * rowbytes));
  }
  png_write_end(png, nullptr);
  return true;
}

}  // namespace detail

/// Reads an 8- or 16-bit PNG as grayscale. Colour inputs are reduced to
/// luminance and alpha is dropped.
inline PngGray read_png_gray(const fs::path& path) {
  detail::FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw Error("cannot open " + path.string());
  detail::PngError err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_on_error, detail::png_on_warning);
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> buf;
  png_uint_32 h = 0, w = 0;
  int depth = 8;
  const bool ok = detail::png_read_rows(file.get(), png, info, &buf, &h, &w, &depth);
  png_destroy_read_struct(&png, &info, nullptr);
  if (!ok) throw FormatError(path.string() + ": " + err.message);
  PngGray out;
  out.bit_depth = depth == 16 ? 16 : 8;
  out.raw = Image(1, h, w);
  for (std::size_t i = 0; i < out.raw.pixels.size(); ++i) {
    if (depth == 16) {
      std::uint16_t s;
      std::memcpy(&s, buf.data() + 2 * i, 2);
      out.raw.pixels[i] = s;
    } else {
      out.raw.pixels[i] = buf[i];
    }
  }
  return out;
}

/// Writes raw integer samples (rounded and clamped to the bit depth's range).
inline void write_png_gray(const fs::path& path, const Image& samples, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) throw ConfigError("png bit depth must be 8 or 16");
  if (samples.channels != 1) throw DimensionError("write_png_gray: expected one channel");
  const double top = bit_depth == 16 ? 65535.0 : 255.0;
  std::vector<std::uint8_t> buf(samples.pixels.size() * static_cast<std::size_t>(bit_depth / 8));
  for (std::size_t i = 0; i < samples.pixels.size(); ++i) {
    const double v = std::clamp(std::round(static_cast<double>(samples.pixels[i])), 0.0, top);
    if (bit_depth == 16) {
      const auto s = static_cast<std::uint16_t>(v);
      std::memcpy(buf.data() + 2 * i, &s, 2);
    } else {
      buf[i] = static_cast<std::uint8_t>(v);
    }
  }
  detail::FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw Error("cannot open " + path.string() + " for writing");
  detail::PngError err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_on_error, detail::png_on_warning);
  png_infop info = png_create_info_struct(png);
  const bool ok = detail::png_write_rows(file.get(), png, info, &buf, static_cast<png_uint_32>(samples.height),
                                         static_cast<png_uint_32>(samples.width), bit_depth);
  png_destroy_write_struct(&png, &info);
  if (!ok) throw FormatError(path.string() + ": " + err.message);
}

/// Reads a PNG and scales samples into [0, 1].
inline Image read_png_unit(const fs::path& path) {
  PngGray png = read_png_gray(path);
  const float inv = static_cast<float>(1.0 / png.max_value());
  for (float& v : png.raw.pixels) v *= inv;
  return png.raw;
}

/// Writes a [0, 1] plane at the given bit depth.
inline void write_png_unit(const fs::path& path, const Image& plane, int bit_depth = 16) {
  const double top = bit_depth == 16 ? 65535.0 : 255.0;
  Image scaled = plane;
  for (float& v : scaled.pixels) v = static_cast<float>(std::clamp(static_cast<double>(v), 0.0, 1.0) * top);
  write_png_gray(path, scaled, bit_depth);
}

inline fs::path sidecar_path(const fs::path& png) {
  fs::path p = png;
  p.replace_extension(".json");
  return p;
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Probability map as 16-bit PNG (p * 65535) plus a JSON sidecar.
inline void write_probability_map(const fs::path& path, const Image& prob, nlohmann::ordered_json meta = {}) {
  write_png_unit(path, prob, 16);
  nlohmann::ordered_json doc;
  doc["kind"] = "probability";
  doc["height"] = prob.height;
  doc["width"] = prob.width;
  doc["scale"] = 65535;
  for (auto& [k, v] : meta.items()) doc[k] = v;
  write_text_file(sidecar_path(path), doc.dump(2) + "\n");
}

inline Image read_probability_map(const fs::path& path) { return read_png_unit(path); }

inline fs::path channel_path(const fs::path& dir, const std::string& scene, const std::string& channel) {
  return dir / (scene + "_" + channel + ".png");
}

/// Loads `<scene>_mCherry.png` and `<scene>_GCaMP.png` as raw samples.
inline MultiChannelImage read_scene_pair(const fs::path& dir, const std::string& scene) {
  MultiChannelImage img;
  for (const char* ch : {kMCherry, kGCaMP}) {
    const fs::path p = channel_path(dir, scene, ch);
    if (!fs::exists(p)) throw MissingInputError("missing input " + p.string());
    img.set(ch, read_png_gray(p).raw);
  }
  return img;
}

/// Scene ids of every complete channel pair in a directory, sorted.
inline std::vector<std::string> list_scenes(const fs::path& dir) {
  std::vector<std::string> out;
  const std::string suffix = std::string("_") + kMCherry + ".png";
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      const std::string scene = name.substr(0, name.size() - suffix.size());
      if (fs::exists(channel_path(dir, scene, kGCaMP))) out.push_back(scene);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Patch directories

inline constexpr const char* kPatchChannelSuffix[3] = {"_R.png", "_G.png", "_B.png"};

/// Writes a 3-channel patch as three 16-bit PNGs `<stem>_R/_G/_B.png`.
inline void write_patch_images(const fs::path& stem, const Image& patch) {
  if (patch.channels != 3) throw DimensionError("patches must have 3 channels");
  for (std::size_t c = 0; c < 3; ++c) {
    write_png_unit(stem.string() + kPatchChannelSuffix[c], patch.channel(c), 16);
  }
}

inline Image read_patch_images(const fs::path& stem) {
  Image out;
  for (std::size_t c = 0; c < 3; ++c) {
    const fs::path p = stem.string() + kPatchChannelSuffix[c];
    if (!fs::exists(p)) throw MissingInputError("missing input " + p.string());
    const Image plane = read_png_unit(p);
    if (c == 0) out = Image(3, plane.height, plane.width);
    if (plane.height != out.height || plane.width != out.width) throw FormatError("patch planes differ in size: " + p.string());
    std::copy(plane.pixels.begin(), plane.pixels.end(), out.pixels.begin() + static_cast<std::ptrdiff_t>(c * out.plane_size()));
  }
  return out;
}

struct ManifestEntry {
  std::string path;  // patch stem, relative to the manifest's directory
  std::string scene;
  double row = 0.0;
  double col = 0.0;
  std::optional<CellClass> label;
};

inline constexpr const char* kManifestHeader = "path\tscene\trow\tcol\tlabel";

inline std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

inline void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  std::string text = std::string(kManifestHeader) + "\n";
  for (const ManifestEntry& e : entries) {
    text += e.path + "\t" + e.scene + "\t" + format_fixed(e.row, 3) + "\t" + format_fixed(e.col, 3) + "\t" +
            (e.label ? cell_class_name(*e.label) : "-") + "\n";
  }
  write_text_file(path, text);
}

inline std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw MissingInputError("missing input " + path.string());
  std::istringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) throw FormatError(path.string() + ": bad manifest header");
  std::vector<ManifestEntry> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream fields(line);
    for (std::string x; std::getline(fields, x, '\t');) f.push_back(x);
    if (f.size() != 5) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 5 fields");
    ManifestEntry e;
    e.path = f[0];
    e.scene = f[1];
    try {
      e.row = std::stod(f[2]);
      e.col = std::stod(f[3]);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad centroid");
    }
    if (f[4] != "-") e.label = parse_cell_class(f[4]);
    out.push_back(std::move(e));
  }
  return out;
}

/// Loads every patch listed in a manifest.
inline std::vector<Patch> read_patch_set(const fs::path& manifest) {
  std::vector<Patch> out;
  for (const ManifestEntry& e : read_manifest(manifest)) {
    Patch p;
    p.image = read_patch_images(manifest.parent_path() / e.path);
    p.row = e.row;
    p.col = e.col;
    p.source = e.scene;
    p.label = e.label;
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace neurocell
