#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>

#include "terra/data.hpp"
#include "terra/image_io.hpp"
#include "terra/metrics.hpp"

using namespace terra;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir(const char* tag) {
  fs::path p = fs::temp_directory_path() / (std::string("terra_test_") + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}
}  // namespace

TEST_CASE("same (seed, index) twice gives bit-identical samples") {
  SceneSpec spec;
  spec.seed = 77;
  const Sample a = generate(spec, 3);
  const Sample b = generate(spec, 3);
  CHECK(a.gt_clean.labels == b.gt_clean.labels);
  CHECK(a.gt_noisy.labels == b.gt_noisy.labels);
  REQUIRE(a.image.size() == b.image.size());
  for (std::size_t i = 0; i < a.image.size(); ++i)
    CHECK(a.image.data()[i] == b.image.data()[i]);  // bit-exact
  const Sample c = generate(spec, 4);
  CHECK(a.gt_clean.labels != c.gt_clean.labels);
}

TEST_CASE("boundary_noise_px = 0 keeps gt_noisy == gt_clean bit-exactly") {
  SceneSpec spec;
  spec.boundary_noise_px = 0;
  const Sample s = generate(spec, 0);
  CHECK(s.gt_noisy.labels == s.gt_clean.labels);
}

TEST_CASE("single-class scene is uniform with an empty boundary band") {
  SceneSpec spec;
  spec.thin_structure_count = 0;
  spec.class_frequencies = {0, 1.0, 0, 0, 0, 0};
  const Sample s = generate(spec, 5);
  for (auto v : s.gt_clean.labels) CHECK(v == 1);
  const auto band = boundary_band(s.gt_clean, 2);
  for (auto v : band) CHECK(v == 0);
  CHECK(s.gt_noisy.labels == s.gt_clean.labels);  // no boundaries, no noise
}

TEST_CASE("noise is confined to boundary_noise_px of clean boundaries") {
  SceneSpec spec;
  spec.seed = 9;
  spec.boundary_noise_px = 2;
  for (int index = 0; index < 4; ++index) {
    const Sample s = generate(spec, index);
    const auto near = boundary_band(s.gt_clean, spec.boundary_noise_px);
    for (std::size_t i = 0; i < s.gt_clean.labels.size(); ++i)
      if (s.gt_noisy.labels[i] != s.gt_clean.labels[i]) CHECK(near[i] == 1);
  }
}

TEST_CASE("image values stay in [0,1] and the mask labels are valid") {
  SceneSpec spec;
  spec.seed = 123;
  const Sample s = generate(spec, 0);
  s.gt_clean.validate();
  s.gt_noisy.validate();
  for (std::size_t i = 0; i < s.image.size(); ++i) {
    CHECK(s.image.data()[i] >= 0.0);
    CHECK(s.image.data()[i] <= 1.0);
  }
}

TEST_CASE("invalid specs are rejected") {
  SceneSpec bad;
  bad.height = 50;  // not divisible by 32
  CHECK_THROWS_AS(generate(bad, 0), ShapeError);
  SceneSpec bad2;
  bad2.class_frequencies = {0.5, 0.5, 0.5, 0, 0, 0};
  CHECK_THROWS_AS(generate(bad2, 0), ShapeError);
}

TEST_CASE("class frequencies converge to the spec over 100 samples at 128x192") {
  SceneSpec spec;
  spec.seed = 2025;
  spec.height = 128;
  spec.width = 192;
  spec.thin_structure_count = 0;
  spec.class_frequencies = {0.10, 0.30, 0.15, 0.15, 0.15, 0.15};
  std::array<std::uint64_t, kNumClasses> counts{};
  std::uint64_t total = 0;
  for (int i = 0; i < 100; ++i) {
    const Sample s = generate(spec, i);
    for (auto v : s.gt_clean.labels) ++counts[v];
    total += s.gt_clean.labels.size();
  }
  for (int c = 0; c < kNumClasses; ++c) {
    const double freq = static_cast<double>(counts[static_cast<std::size_t>(c)]) /
                        static_cast<double>(total);
    CHECK(std::abs(freq - spec.class_frequencies[static_cast<std::size_t>(c)]) < 0.03);
  }
}

TEST_CASE("thin structures add obstacle pixels") {
  SceneSpec spec;
  spec.seed = 31;
  spec.thin_structure_count = 0;
  spec.class_frequencies = {0.5, 0.5, 0, 0, 0, 0};
  const Sample plain = generate(spec, 0);
  std::size_t obstacles = 0;
  for (auto v : plain.gt_clean.labels)
    if (v == static_cast<int>(TerrainGroup::kObstacles)) ++obstacles;
  CHECK(obstacles == 0);

  spec.thin_structure_count = 2;
  const Sample lined = generate(spec, 0);
  obstacles = 0;
  for (auto v : lined.gt_clean.labels)
    if (v == static_cast<int>(TerrainGroup::kObstacles)) ++obstacles;
  CHECK(obstacles > 0);
  // thin: well under 5% of the scene
  CHECK(obstacles < lined.gt_clean.labels.size() / 20);
}

TEST_CASE("ppm/pgm round-trip") {
  const fs::path dir = temp_dir("io");
  SceneSpec spec;
  const Sample s = generate(spec, 0);
  write_pgm((dir / "m.pgm").string(), s.gt_noisy);
  const LabelMask back = read_pgm((dir / "m.pgm").string());
  CHECK(back.labels == s.gt_noisy.labels);
  write_ppm((dir / "i.ppm").string(), s.image);
  const Tensor img = read_ppm((dir / "i.ppm").string());
  REQUIRE(img.shape() == s.image.shape());
  for (std::size_t i = 0; i < img.size(); ++i)
    CHECK(std::abs(img.data()[i] - s.image.data()[i]) <= 0.5 / 255.0 + 1e-12);
  fs::remove_all(dir);
}

TEST_CASE("dataset write -> load_dir reproduces masks exactly") {
  const fs::path dir = temp_dir("roundtrip");
  SceneSpec spec;
  spec.seed = 5;
  write_dataset(dir.string(), spec, 4);
  CHECK(fs::exists(dir / "manifest.json"));
  const auto samples =
      load_dir((dir / "images").string(), (dir / "masks").string(), RemapTable::identity());
  REQUIRE(samples.size() == 4);
  for (int i = 0; i < 4; ++i) {
    const Sample ref = generate(spec, i);
    CHECK(samples[static_cast<std::size_t>(i)].gt_clean.labels == ref.gt_noisy.labels);
    CHECK(samples[static_cast<std::size_t>(i)].gt_noisy.labels == ref.gt_noisy.labels);
  }
  fs::remove_all(dir);
}

TEST_CASE("load_dir edge cases: empty dir, missing mask") {
  const fs::path dir = temp_dir("loaddir");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  const auto empty =
      load_dir((dir / "images").string(), (dir / "masks").string(), RemapTable::identity());
  CHECK(empty.empty());

  SceneSpec spec;
  const Sample s = generate(spec, 0);
  write_ppm((dir / "images" / "a.ppm").string(), s.image);
  CHECK_THROWS_AS(
      load_dir((dir / "images").string(), (dir / "masks").string(), RemapTable::identity()),
      ArtifactError);
  write_pgm((dir / "masks" / "a.pgm").string(), s.gt_noisy);
  const auto one =
      load_dir((dir / "images").string(), (dir / "masks").string(), RemapTable::identity());
  REQUIRE(one.size() == 1);
  CHECK(one[0].gt_clean.labels == s.gt_noisy.labels);
  fs::remove_all(dir);
}
