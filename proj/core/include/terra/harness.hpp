#pragma once

#include <optional>
#include <string>
#include <vector>

#include "terra/capr.hpp"
#include "terra/config.hpp"
#include "terra/data.hpp"
#include "terra/decoder.hpp"
#include "terra/encoder.hpp"
#include "terra/losses.hpp"
#include "terra/metrics.hpp"

namespace terra {

// The assembled network. Components disabled by ablation flags have no
// parameters here at all.
struct TerraModel {
  RunConfig cfg;
  EncoderParams encoder;
  DecoderParams decoder;
  std::optional<CaprParams> capr;
  std::optional<BblParams> bbl;
  ParamStore params;
};

TerraModel build_model(const RunConfig& cfg);

struct ForwardOutput {
  DecodeResult dec;
  Tensor logits_up;     // upsampled base logits (pre-refinement)
  Tensor logits_final;  // after CAPR; same tensor as logits_up when CAPR is off
  std::uint64_t mlp_invocations = 0;
};

// Full forward at the sample resolution (out_h, out_w).
ForwardOutput forward_image(const TerraModel& m, const Tensor& image, int out_h, int out_w);

LabelMask argmax_mask(const Tensor& logits);

struct StepLosses {
  double total = 0.0, seg = 0.0, diag = 0.0, bbl = 0.0, lambda = 0.0;
};

// Assembles Eq.-7-style training loss on gt_noisy at progress t in [0,1].
Tensor training_loss(const TerraModel& m, const ForwardOutput& f, const LabelMask& gt_noisy,
                     double progress, StepLosses* parts = nullptr);

// Decoupled-weight-decay Adam over the parameter store; parameters without
// gradients still decay.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const OptimizerConfig& cfg, const ParamStore& store);
  void step(ParamStore& store);
  std::uint64_t steps() const { return t_; }

  // checkpoint access
  std::vector<std::vector<double>>& m_state() { return m_; }
  std::vector<std::vector<double>>& v_state() { return v_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainLogRow {
  int epoch = 0;
  double loss_total = 0.0, loss_seg = 0.0, loss_diag = 0.0, loss_bbl = 0.0, lambda_bbl = 0.0;
  bool has_val = false;
  double val_miou = 0.0, val_biou = 0.0;
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  int epochs_run = 0;
  bool reached_targets = false;
};

std::string train_log_csv(const std::vector<TrainLogRow>& log);

// Single-threaded training loop over (gt_noisy) samples; aborts on a
// non-finite loss naming the offending step. Early-stops once the clean-GT
// train metrics reach the configured targets (when targets are set).
TrainResult train(TerraModel& m, AdamW& opt, const std::vector<Sample>& train_data,
                  const std::vector<Sample>& val_data);

// Single-scale evaluation: forward (CAPR included when enabled), argmax,
// metrics at full sample resolution against gt_clean.
MetricReport evaluate(const TerraModel& m, const std::vector<Sample>& data,
                      std::vector<ReportRow>* rows = nullptr);

// The five incremental ablation variants, trained on identical seeds/data.
struct AblationRow {
  std::string variant;
  MetricReport report;
};
std::vector<AblationRow> ablate(const RunConfig& cfg);
std::string ablation_csv(const std::vector<AblationRow>& rows);

// Central finite differences of the full training loss against tape
// gradients, sampled per parameter group.
struct GradCheckGroup {
  std::string name;
  double max_rel_err = 0.0;
  int checked = 0;
};
struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double max_rel_err = 0.0;
  bool pass = false;
  double tolerance = 1e-4;
};
GradCheckReport gradcheck(const RunConfig& cfg, int samples_per_group = 4);
std::string gradcheck_text(const GradCheckReport& r);

// Checkpointing: parameters + optimizer state + config + epoch, bit-exact
// round trip.
void save_checkpoint(const std::string& path, const TerraModel& m, const AdamW& opt, int epoch);
struct LoadedCheckpoint {
  TerraModel model;
  AdamW opt;
  int epoch = 0;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

// Deterministic dataset materialization for a config (synthetic or directory).
std::vector<Sample> make_train_data(const RunConfig& cfg);
std::vector<Sample> make_val_data(const RunConfig& cfg);

}  // namespace terra
