#pragma once

#include <utility>
#include <vector>

#include "terra/metrics.hpp"
#include "terra/nn.hpp"
#include "terra/tensor.hpp"

namespace terra {

struct LossConfig {
  double lambda_diag = 0.1;
  double bbl_start = 0.01;
  double bbl_end = 0.1;
  double bbl_ramp = 0.5;  // fraction of training over which the weight ramps
  int r_band = 2;
  int r_ring = 1;
  void validate() const;
};

// Learnable affine on the cosine pair score: s_ij = w_s * cos(T_i, T_j) + b_s.
struct BblParams {
  Tensor w_s;  // init 10.0
  Tensor b_s;  // init 0.0
};

BblParams make_bbl(std::uint64_t seed, ParamStore& store);

// Boundary band on the bottleneck lattice plus the ring-pair set E.
// band[i] is set when the (2*r_band+1)^2 neighborhood of i holds at least
// two distinct non-ignore labels; pairs run from band pixels to their ring
// R(i) at Chebyshev distance exactly r_ring. Pairs touching an
// ignore-labeled pixel are excluded.
struct BoundaryBand {
  int h = 0, w = 0;
  std::vector<std::uint8_t> band;
  std::vector<std::pair<int, int>> pairs;  // raster indices (i, j)
};

BoundaryBand build_band(const LabelMask& gt_ds, int r_band, int r_ring);

// Majority-vote downsampling of GT to the lattice; ignore wins a cell only
// when it is the sole label present. Ties go to the smaller class id.
LabelMask downsample_majority(const LabelMask& gt, int factor);

// Mean cross-entropy over non-ignored pixels; 0 (with warning flag) when
// everything is ignored.
Tensor seg_loss(const Tensor& logits_up, const LabelMask& gt, bool* all_ignored = nullptr);

// Cross-entropy of the class-attention head against lattice-downsampled GT.
Tensor diag_loss(const Tensor& class_attn, const LabelMask& gt_ds, bool* all_ignored = nullptr);

// s_ij for one lattice pair; zero-vector cosine is defined as 0.
Tensor pair_score(const Tensor& tokens, int i, int j, const BblParams& p);

// Mean BCE-with-logits over E (Eq-style boundary-band consistency); 0 when
// E is empty.
Tensor bbl_loss(const Tensor& tokens, const BoundaryBand& band, const LabelMask& gt_ds,
                const BblParams& p);

// Warm-up schedule: start + (end - start) * min(t / ramp, 1).
double lambda_bbl(const LossConfig& cfg, double t);

// L = L_seg + lambda_diag * L_diag + lambda_bbl(t) * L_bbl.
Tensor total_loss(const Tensor& seg, const Tensor& diag, const Tensor& bbl,
                  const LossConfig& cfg, double t);

}  // namespace terra
