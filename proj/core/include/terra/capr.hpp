#pragma once

#include <vector>

#include "terra/nn.hpp"
#include "terra/tensor.hpp"

namespace terra {

struct CaprConfig {
  // k < 0 means the default rule min(1024, 5% of pixels); any explicit k is
  // clamped to the pixel count.
  int k = -1;
  int iters = 1;
  int hidden = 64;
  void validate() const;
};

int capr_effective_k(const CaprConfig& cfg, int pixels);

// Residual 2-layer MLP over concat(local HR features, current logits). The
// output layer is zero-initialized so refinement starts as the identity.
struct CaprParams {
  CaprConfig cfg;
  Tensor w1, b1;  // [D_hr + Cc, hidden]
  Tensor w2, b2;  // [hidden, Cc]
};

CaprParams make_capr(const CaprConfig& cfg, int hr_channels, int num_classes,
                     std::uint64_t seed, ParamStore& store);

// The K lowest-margin pixels (raster tie-break), margins sorted ascending.
struct UncertaintySelection {
  std::vector<int> indices;     // raster indices on the upsampled grid
  std::vector<double> margins;  // non-decreasing, in [0,1]
};

// Counts semantic MLP evaluations (one per selected pixel per iteration).
struct CaprStats {
  std::uint64_t mlp_invocations = 0;
};

Tensor upsample_logits(const Tensor& logits, int out_h, int out_w);

// Per-pixel top-2 probability margin of softmaxed logits, in [0,1].
// Selection input only, so it carries no gradient.
Tensor margin_map(const Tensor& logits_up);

UncertaintySelection select_topk(const Tensor& margin, int k);

// Adds MLP(concat(f_hr_up[:,i], logits_up[:,i])) to the logits of selected
// pixels; everything else passes through bit-exactly.
Tensor refine(const Tensor& logits_up, const UncertaintySelection& sel, const Tensor& f_hr_up,
              const CaprParams& p, CaprStats* stats = nullptr);

// Full pass: margin -> top-k -> residual correction, iterated cfg.iters
// times with margins recomputed between iterations.
Tensor capr_apply(const CaprParams& p, const Tensor& logits_up, const Tensor& f_hr_up,
                  CaprStats* stats = nullptr);

}  // namespace terra
