#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "terra/capr.hpp"
#include "terra/data.hpp"
#include "terra/decoder.hpp"
#include "terra/encoder.hpp"
#include "terra/losses.hpp"

namespace terra {

struct OptimizerConfig {
  std::string kind = "adamw";
  double lr = 3e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  void validate() const;
};

struct DataConfig {
  std::string kind = "synthetic";  // "synthetic" | "directory"
  int height = 64;
  int width = 96;
  int train_count = 8;
  int val_count = 2;
  std::array<double, kNumClasses> class_frequencies = {1.0 / 6, 1.0 / 6, 1.0 / 6,
                                                       1.0 / 6, 1.0 / 6, 1.0 / 6};
  int thin_structures = 2;
  int boundary_noise_px = 2;
  double texture_scale = 8.0;
  double texture_amplitude = 0.10;
  // directory mode
  std::string images;
  std::string masks;
  std::string remap;

  SceneSpec scene_spec(std::uint64_t seed) const;
  void validate() const;
};

struct MetricsConfig {
  int biou_band = 3;
  void validate() const;
};

// The single JSON document driving a run. Unknown keys are rejected.
struct RunConfig {
  std::uint64_t seed = 1;
  int epochs = 40;
  int batch_size = 1;
  int eval_every = 5;        // epochs between synthetic-val evaluations
  double target_miou = 0.0;  // early-stop targets on train-set clean-GT metrics
  double target_biou = 0.0;  // (0 disables early stopping)
  OptimizerConfig optimizer;
  EncoderConfig encoder;
  DecoderConfig decoder;
  CaprConfig capr;
  LossConfig losses;
  MetricsConfig metrics;
  DataConfig data;
  AblationFlags ablation;

  void validate() const;
  std::string to_json() const;                        // canonical (sorted keys)
  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::string& path);
  void save(const std::string& path) const;
  std::uint64_t hash() const;
};

}  // namespace terra
