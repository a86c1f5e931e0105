#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "terra/metrics.hpp"
#include "terra/random.hpp"
#include "terra/tensor.hpp"

namespace terra {

// Per-class procedural texture controls: lattice noise cell size in pixels
// and amplitude around the class base color.
struct TextureParams {
  double scale = 8.0;
  double amplitude = 0.10;
};

// Everything that determines a synthetic scene. A (spec, index) pair fully
// determines the sample, bit-for-bit, on every platform: generation uses
// only SplitMix64 draws and IEEE add/mul (no libm calls).
struct SceneSpec {
  std::uint64_t seed = 1;
  int height = 64;   // divisible by 32
  int width = 96;    // divisible by 32
  std::array<double, kNumClasses> class_frequencies = {1.0 / 6, 1.0 / 6, 1.0 / 6,
                                                       1.0 / 6, 1.0 / 6, 1.0 / 6};
  int thin_structure_count = 2;
  int boundary_noise_px = 2;
  std::array<TextureParams, kNumClasses> texture_scales{};

  void validate() const;
  std::uint64_t hash() const;
};

struct Sample {
  Tensor image;        // [3,H,W] in [0,1]
  LabelMask gt_clean;
  LabelMask gt_noisy;  // training target; differs from gt_clean only near boundaries
  std::uint64_t seed = 0;
  std::uint64_t spec_hash = 0;
  int index = 0;
  std::string name;
};

// Seeded Voronoi scene: per-cell class labels drawn from class_frequencies,
// per-class procedural texture, thin 1-2 px polylines labeled Obstacles,
// and boundary label noise confined to boundary_noise_px of clean edges.
Sample generate(const SceneSpec& spec, int index);

// Loads matched image/mask pairs (sorted by filename stem) and remaps masks
// to the 6-class hierarchy. Real labels are the (only) training labels, so
// gt_noisy == gt_clean here.
std::vector<Sample> load_dir(const std::string& images_path, const std::string& masks_path,
                             const RemapTable& remap);

// Writes count generated samples as PPM/PGM files plus a manifest.json
// listing (file, seed, index, spec hash). Noisy masks go to masks/ (the
// training target); clean masks to masks_clean/.
void write_dataset(const std::string& out_dir, const SceneSpec& spec, int count);

}  // namespace terra
