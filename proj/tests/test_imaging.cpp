#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "neurocell/imaging.hpp"
#include "neurocell/io.hpp"
#include "oracles.hpp"

using namespace neurocell;

namespace {

Image plane_of(std::size_t h, std::size_t w, std::vector<float> v) {
  Image img(1, h, w);
  img.pixels = std::move(v);
  return img;
}

Image random_image(std::size_t c, std::size_t h, std::size_t w, Rng& rng) {
  Image img(c, h, w);
  for (float& v : img.pixels) v = static_cast<float>(rng.uniform());
  return img;
}

Image disk_image(std::size_t n, double radius) {
  Image img(1, n, n);
  const double centre = (static_cast<double>(n) - 1.0) / 2.0;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const double d = std::hypot(r - centre, c - centre);
      img.at(r, c) = static_cast<float>(std::clamp(radius + 0.5 - d, 0.0, 1.0));
    }
  }
  return img;
}

MultiChannelImage pair_of(const Image& red, const Image& green) {
  MultiChannelImage m;
  m.set(kMCherry, red);
  m.set(kGCaMP, green);
  return m;
}

double total(const Image& img) { return std::accumulate(img.pixels.begin(), img.pixels.end(), 0.0); }

}  // namespace

TEST(Normalize, ConstantPlaneGivesZeros) {
  const Image out = normalize_channel(Image(1, 4, 4, 7.0f));
  for (float v : out.pixels) EXPECT_EQ(v, 0.0f);
}

TEST(Normalize, RampPreservedWithinClipTolerance) {
  Image ramp(1, 1, 101);
  for (std::size_t i = 0; i < 101; ++i) ramp.pixels[i] = static_cast<float>(i) / 100.0f;
  const Image out = normalize_channel(ramp);
  for (std::size_t i = 0; i < 101; ++i) EXPECT_NEAR(out.pixels[i], ramp.pixels[i], 0.011);
}

TEST(Normalize, SpansUnitInterval) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Image img = random_image(1, 16, 16, rng);
    for (float& v : img.pixels) v = v * 5000.0f + 30.0f;
    img.pixels[3] = 1e6f;  // hot pixel
    const Image out = normalize_channel(img);
    EXPECT_EQ(*std::min_element(out.pixels.begin(), out.pixels.end()), 0.0f);
    EXPECT_EQ(*std::max_element(out.pixels.begin(), out.pixels.end()), 1.0f);
  }
}

TEST(Normalize, EmptyPlaneIsDimensionError) { EXPECT_THROW(normalize_channel(Image()), DimensionError); }

TEST(Fuse, Arithmetic) {
  const Image z(1, 2, 2);
  for (float v : fuse_grayscale(pair_of(z, z)).pixels) EXPECT_EQ(v, 0.0f);
  const Image out = fuse_grayscale(pair_of(Image(1, 1, 1, 1.0f), Image(1, 1, 1, 0.0f)));
  EXPECT_EQ(out.pixels[0], 0.5f);
  Rng rng(2);
  const Image g = fuse_grayscale(pair_of(random_image(1, 8, 8, rng), random_image(1, 8, 8, rng)));
  for (float v : g.pixels) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Fuse, MissingChannelIsContractError) {
  MultiChannelImage m;
  m.set(kMCherry, Image(1, 2, 2));
  EXPECT_THROW(fuse_grayscale(m), ContractError);
  EXPECT_THROW(compose_rgb(m), ContractError);
}

TEST(ComposeRgb, BlueIsMean) {
  const Image rgb = compose_rgb(pair_of(Image(1, 1, 1, 0.2f), Image(1, 1, 1, 0.6f)));
  EXPECT_FLOAT_EQ(rgb.at(0, 0, 0), 0.2f);
  EXPECT_FLOAT_EQ(rgb.at(1, 0, 0), 0.6f);
  EXPECT_NEAR(rgb.at(2, 0, 0), 0.4f, 1e-7);
  Rng rng(3);
  const Image r = random_image(1, 8, 8, rng), g = random_image(1, 8, 8, rng);
  const Image out = compose_rgb(pair_of(r, g));
  for (std::size_t i = 0; i < 64; ++i) {
    EXPECT_GE(out.pixels[128 + i], std::min(r.pixels[i], g.pixels[i]));
    EXPECT_LE(out.pixels[128 + i], std::max(r.pixels[i], g.pixels[i]));
  }
  for (float v : compose_rgb(pair_of(Image(1, 2, 2), Image(1, 2, 2))).pixels) EXPECT_EQ(v, 0.0f);
}

TEST(Threshold, StrictComparison) {
  const BinaryMask m = threshold_map(plane_of(2, 2, {0.69f, 0.70f, 0.71f, 1.0f}), 0.7);
  EXPECT_EQ(m.cells, (std::vector<std::uint8_t>{0, 0, 1, 1}));
}

TEST(Threshold, Boundaries) {
  const Image p = plane_of(1, 3, {0.1f, 0.5f, 1.0f});
  for (auto v : threshold_map(p, 1.0).cells) EXPECT_EQ(v, 0);
  for (auto v : threshold_map(p, 0.0).cells) EXPECT_EQ(v, 1);
  EXPECT_THROW(threshold_map(p, 1.5), ConfigError);
  EXPECT_THROW(threshold_map(p, -0.1), ConfigError);
}

TEST(Threshold, Monotone) {
  Rng rng(4);
  const Image p = random_image(1, 16, 16, rng);
  for (double t1 = 0.0; t1 <= 1.0; t1 += 0.1) {
    const BinaryMask a = threshold_map(p, t1), b = threshold_map(p, std::min(1.0, t1 + 0.05));
    for (std::size_t i = 0; i < a.cells.size(); ++i) EXPECT_LE(b.cells[i], a.cells[i]);
  }
}

TEST(Components, DiagonalTouchMerges) {
  BinaryMask m(2, 2);
  m.cells = {1, 0, 0, 1};
  const ComponentSet set = connected_components(m);
  EXPECT_EQ(set.count(), 1u);
  EXPECT_EQ(set.components[0].pixel_count, 2u);
  EXPECT_DOUBLE_EQ(set.components[0].centroid_row, 0.5);
}

TEST(Components, EmptyRaster) { EXPECT_EQ(connected_components(BinaryMask(5, 7)).count(), 0u); }

TEST(Components, MatchesFloodFillOnRandomRasters) {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    BinaryMask m(32, 32);
    const double density = rng.uniform(0.1, 0.7);
    for (auto& v : m.cells) v = rng.uniform() < density ? 1 : 0;
    const ComponentSet set = connected_components(m);
    std::size_t k = 0;
    const LabelGrid expect = oracle::flood_fill_labels(m, &k);
    ASSERT_TRUE(oracle::same_partition(set.labels, expect)) << "trial " << trial;
    ASSERT_EQ(set.labels, expect) << "trial " << trial;
    ASSERT_EQ(set.count(), k);
  }
}

TEST(Components, CentroidInsideBoundingBoxAndLabelsContiguous) {
  Rng rng(6);
  BinaryMask m(40, 40);
  for (auto& v : m.cells) v = rng.uniform() < 0.3 ? 1 : 0;
  const ComponentSet set = connected_components(m);
  std::vector<std::size_t> seen(set.count() + 1, 0);
  for (auto l : set.labels.cells) ++seen[static_cast<std::size_t>(l)];
  for (const Component& c : set.components) {
    EXPECT_GE(c.pixel_count, 1u);
    EXPECT_EQ(seen[static_cast<std::size_t>(c.label)], c.pixel_count);
    EXPECT_GE(c.centroid_row, static_cast<double>(c.min_row));
    EXPECT_LE(c.centroid_row, static_cast<double>(c.max_row));
    EXPECT_GE(c.centroid_col, static_cast<double>(c.min_col));
    EXPECT_LE(c.centroid_col, static_cast<double>(c.max_col));
  }
}

TEST(Components, MinSizeFilterRelabels) {
  BinaryMask m(6, 10);
  m.at(0, 0) = 1;  // singleton
  for (std::size_t r = 2; r < 5; ++r) {
    for (std::size_t c = 5; c < 8; ++c) m.at(r, c) = 1;  // 3x3 block
  }
  const ComponentSet kept = filter_components(connected_components(m), 9);
  ASSERT_EQ(kept.count(), 1u);
  EXPECT_EQ(kept.components[0].label, 1);
  EXPECT_EQ(kept.components[0].pixel_count, 9u);
  EXPECT_EQ(kept.labels.at(0, 0), 0);
  EXPECT_DOUBLE_EQ(kept.components[0].centroid_col, 6.0);
}

TEST(Patch, CenterNeighborhood) {
  Image img(1, 5, 5);
  std::iota(img.pixels.begin(), img.pixels.end(), 0.0f);
  const Image p = extract_patch(img, 2.0, 2.0, 3);
  EXPECT_EQ(p.pixels, (std::vector<float>{6, 7, 8, 11, 12, 13, 16, 17, 18}));
}

TEST(Patch, CornerMirrorsBorder) {
  Image img(1, 4, 4);
  std::iota(img.pixels.begin(), img.pixels.end(), 0.0f);
  // Row/col -1 mirror to row/col 1 (edge pixel not repeated).
  const Image p = extract_patch(img, 0.0, 0.0, 3);
  EXPECT_EQ(p.pixels, (std::vector<float>{5, 4, 5, 1, 0, 1, 5, 4, 5}));
}

TEST(Patch, RoundsHalfAwayFromZero) {
  Image img(1, 5, 5);
  std::iota(img.pixels.begin(), img.pixels.end(), 0.0f);
  EXPECT_EQ(extract_patch(img, 1.5, 1.5, 1).pixels[0], 12.0f);
  EXPECT_EQ(extract_patch(img, 1.49, 1.5, 1).pixels[0], 7.0f);
}

TEST(Patch, ShapeAlwaysSizeSquared) {
  Rng rng(7);
  const Image img = random_image(3, 20, 30, rng);
  for (int i = 0; i < 50; ++i) {
    const Image p = extract_patch(img, rng.uniform(-5, 25), rng.uniform(-5, 35), 11);
    EXPECT_EQ(p.channels, 3u);
    EXPECT_EQ(p.height, 11u);
    EXPECT_EQ(p.width, 11u);
  }
  EXPECT_THROW(extract_patch(img, 1, 1, 4), ConfigError);
}

TEST(Patch, CommutesWithChannelPermutation) {
  Rng rng(8);
  const Image img = random_image(3, 12, 12, rng);
  Image swapped = img;
  std::copy_n(img.pixels.begin(), 144, swapped.pixels.begin() + 288);
  std::copy_n(img.pixels.begin() + 288, 144, swapped.pixels.begin());
  const Image a = extract_patch(img, 3.2, 9.7, 7), b = extract_patch(swapped, 3.2, 9.7, 7);
  EXPECT_EQ(a.channel(0), b.channel(2));
  EXPECT_EQ(a.channel(1), b.channel(1));
  const Image ra = resample_bilinear(a, 13), rb = resample_bilinear(b, 13);
  EXPECT_EQ(ra.channel(0), rb.channel(2));
}

TEST(Resample, ConstantStaysConstant) {
  const Image img(3, 7, 7, 0.37f);
  for (std::size_t target : {1u, 5u, 29u}) {
    for (float v : resample_bilinear(img, target).pixels) EXPECT_FLOAT_EQ(v, 0.37f);
  }
}

TEST(Resample, SameSizeIsIdentity) {
  Rng rng(9);
  const Image img = random_image(3, 9, 9, rng);
  EXPECT_EQ(resample_bilinear(img, 9), img);
}

TEST(Resample, HandBilinearOracle) {
  const Image out = resample_bilinear(plane_of(2, 2, {0, 1, 0, 1}), 3);
  EXPECT_EQ(out.pixels, (std::vector<float>{0, 0.5f, 1, 0, 0.5f, 1, 0, 0.5f, 1}));
}

TEST(Affine, IdentityShortcut) {
  Rng rng(10);
  const Image img = random_image(3, 15, 15, rng);
  EXPECT_EQ(affine_transform(img, 0.0, 1.0), img);
  AugmentSpec spec;
  spec.angle_min = spec.angle_max = 0.0;
  spec.scale_min = spec.scale_max = 1.0;
  EXPECT_EQ(augment_affine(img, spec, rng), img);
}

TEST(Affine, DiskRotationInvariant) {
  const Image disk = disk_image(31, 8.0);
  const Image rotated = affine_transform(disk, 30.0, 1.0);
  double mad = 0.0;
  for (std::size_t i = 0; i < disk.pixels.size(); ++i) mad += std::abs(disk.pixels[i] - rotated.pixels[i]);
  EXPECT_LT(mad / static_cast<double>(disk.pixels.size()), 0.05);
}

TEST(Affine, PreservesShapeAndRange) {
  Rng rng(11);
  const Image img = random_image(3, 21, 21, rng);
  AugmentSpec spec;
  for (int i = 0; i < 20; ++i) {
    const Image out = augment_affine(img, spec, rng);
    EXPECT_EQ(out.height, 21u);
    for (float v : out.pixels) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Affine, AmplifyAppendsCopiesAndKeepsOriginals) {
  Rng rng(12);
  std::vector<Patch> patches(5);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    patches[i].image = random_image(3, 9, 9, rng);
    patches[i].label = CellClass::Glial;
  }
  const std::vector<Patch> out = amplify(patches, AugmentSpec{}, Rng(3));
  ASSERT_EQ(out.size(), 10u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(out[i].image, patches[i].image);
    EXPECT_NE(out[5 + i].image, patches[i].image);
    EXPECT_EQ(out[5 + i].label, CellClass::Glial);
  }
  // Keyed per patch index: the copy of patch 3 does not depend on the others.
  const std::vector<Patch> alone = amplify({patches.begin(), patches.begin() + 4}, AugmentSpec{}, Rng(3));
  EXPECT_EQ(alone[4 + 3].image, out[5 + 3].image);
}

TEST(Affine, RejectsBadSpec) {
  AugmentSpec spec;
  spec.scale_min = -1.0;
  Rng rng(1);
  EXPECT_THROW(augment_affine(Image(1, 3, 3), spec, rng), ConfigError);
}

TEST(Elastic, ZeroAlphaIsIdentity) {
  Rng rng(13);
  const Image img = random_image(1, 32, 32, rng);
  ElasticSpec spec;
  spec.alpha = 0.0;
  EXPECT_EQ(elastic_deform(img, spec, rng), img);
}

TEST(Elastic, ShapeRangeAndMass) {
  Rng rng(14);
  Image blob(1, 64, 64);
  for (std::size_t r = 0; r < 64; ++r) {
    for (std::size_t c = 0; c < 64; ++c) {
      blob.at(r, c) = static_cast<float>(std::exp(-((r - 31.5) * (r - 31.5) + (c - 31.5) * (c - 31.5)) / (2 * 36.0)));
    }
  }
  for (int trial = 0; trial < 10; ++trial) {
    const Image out = elastic_deform(blob, ElasticSpec{}, rng);
    EXPECT_EQ(out.height, 64u);
    EXPECT_EQ(out.width, 64u);
    EXPECT_NEAR(total(out) / total(blob), 1.0, 0.05);
    for (float v : out.pixels) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
    EXPECT_NE(out, blob);
  }
}

TEST(Elastic, Deterministic) {
  Rng a(15), b(15);
  Rng src(1);
  const Image img = random_image(1, 20, 20, src);
  EXPECT_EQ(elastic_deform(img, ElasticSpec{}, a), elastic_deform(img, ElasticSpec{}, b));
}

TEST(Tiling, MatchesWholeImage) {
  Rng rng(16);
  const auto spec = build_unet<float>(1, 4, 1, 1, rng);
  const Image img = random_image(1, 64, 64, rng);
  const std::size_t radius = receptive_radius(spec);
  const Image tiled = tiled_inference(spec, img, 32, radius);
  const Image whole = whole_image_inference(spec, img, radius);
  ASSERT_EQ(tiled.height, 64u);
  ASSERT_EQ(tiled.width, 64u);
  float worst = 0.0f;
  for (std::size_t i = 0; i < whole.pixels.size(); ++i) worst = std::max(worst, std::abs(tiled.pixels[i] - whole.pixels[i]));
  EXPECT_LE(worst, 1e-5f);
}

TEST(Tiling, RaggedImageDeeperNet) {
  Rng rng(17);
  const auto spec = build_unet<float>(2, 2, 1, 1, rng);
  const Image img = random_image(1, 50, 37, rng);
  const std::size_t radius = receptive_radius(spec);
  const Image tiled = tiled_inference(spec, img, 16, radius + 1);
  const Image whole = whole_image_inference(spec, img, radius + 1);
  float worst = 0.0f;
  for (std::size_t i = 0; i < whole.pixels.size(); ++i) worst = std::max(worst, std::abs(tiled.pixels[i] - whole.pixels[i]));
  EXPECT_LE(worst, 1e-5f);
}

TEST(Tiling, SingleTileEqualsDirectForward) {
  Rng rng(18);
  const auto spec = build_unet<float>(1, 4, 1, 1, rng);
  const Image img = random_image(1, 16, 16, rng);
  const Image direct = from_tensor(predict(spec, to_tensor<float>(img)));
  EXPECT_EQ(tiled_inference(spec, img, 32, 0), direct);
}

TEST(Tiling, OverlapBelowRadiusIsConfigError) {
  Rng rng(19);
  const auto spec = build_unet<float>(1, 4, 1, 1, rng);
  const Image img(1, 64, 64);
  try {
    tiled_inference(spec, img, 32, 1);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(std::to_string(receptive_radius(spec))), std::string::npos);
  }
  EXPECT_THROW(tiled_inference(spec, img, 31, 20), ConfigError);
}

TEST(Png, SixteenBitRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "neurocell_png16.png";
  Image raw(1, 3, 4);
  for (std::size_t i = 0; i < raw.pixels.size(); ++i) raw.pixels[i] = static_cast<float>(i * 5000);
  write_png_gray(path, raw, 16);
  const PngGray back = read_png_gray(path);
  EXPECT_EQ(back.bit_depth, 16);
  EXPECT_EQ(back.raw, raw);
  std::filesystem::remove(path);
}

TEST(Png, EightBitAndProbabilitySidecar) {
  const auto dir = std::filesystem::temp_directory_path() / "neurocell_png8";
  std::filesystem::create_directories(dir);
  Image raw(1, 2, 2);
  raw.pixels = {0, 17, 128, 255};
  write_png_gray(dir / "a.png", raw, 8);
  EXPECT_EQ(read_png_gray(dir / "a.png").raw, raw);
  const Image prob = plane_of(1, 3, {0.0f, 0.5f, 1.0f});
  write_probability_map(dir / "p.png", prob);
  const Image back = read_probability_map(dir / "p.png");
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(back.pixels[i], prob.pixels[i], 1.0 / 65535);
  EXPECT_TRUE(std::filesystem::exists(dir / "p.json"));
  std::filesystem::remove_all(dir);
}

TEST(Png, CorruptFileIsFormatError) {
  const auto path = std::filesystem::temp_directory_path() / "neurocell_bad.png";
  write_text_file(path, "not a png at all");
  EXPECT_THROW(read_png_gray(path), FormatError);
  std::filesystem::remove(path);
}

TEST(Manifest, RoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "neurocell_manifest.tsv";
  std::vector<ManifestEntry> entries = {{"p/0001", "scene_0", 12.5, 3.25, CellClass::Inhibitory},
                                        {"p/0002", "scene_1", 0.0, 99.0, std::nullopt}};
  write_manifest(path, entries);
  const auto back = read_manifest(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].path, "p/0001");
  EXPECT_EQ(back[0].label, CellClass::Inhibitory);
  EXPECT_DOUBLE_EQ(back[0].col, 3.25);
  EXPECT_FALSE(back[1].label.has_value());
  std::filesystem::remove(path);
}
