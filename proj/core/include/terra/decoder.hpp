#pragma once

#include <array>

#include "terra/encoder.hpp"
#include "terra/nn.hpp"

namespace terra {

struct DecoderConfig {
  int width = 128;  // decoder token width D
  int heads = 4;
  int num_classes = 6;
  void validate() const;
};

// Which architectural components exist. Disabled components have no
// parameters and record no ops, so they are structurally absent from the
// gradient tape.
struct AblationFlags {
  bool gltr = true;  // global self-attention + dilated local refinement
  bool rad = true;   // HR cross-attention + texture branch + three-way gate
  bool capr = true;  // uncertainty point refinement (handled in capr module)
  bool bbl = true;   // boundary-band loss (handled in losses module)
};

struct GateWeights {
  std::array<double, 3> w = {1.0, 0.0, 0.0};  // (T0, C, B)
};

struct MhcaParams {
  std::vector<Tensor> wq, wk, wv;  // per head
  Tensor wo;
};

struct DecoderParams {
  DecoderConfig cfg;
  AblationFlags flags;
  std::array<Tensor, 4> proj_w, proj_b;  // per-scale 1x1 projections to D
  Tensor fuse_w, fuse_b;                 // pointwise 4D -> D

  // gltr
  MhcaParams attn;              // global self-attention on the lattice
  std::array<Tensor, 3> phi_k;  // depthwise 3x3 kernels, dilations 1,2,3
  Tensor phi_mix_w, phi_mix_b;  // pointwise mix D -> D

  // rad
  Tensor hr_proj_w, hr_proj_b;            // f1 -> D
  MhcaParams cross;                       // queries from T2, keys/values from F_HR
  Tensor tex_w1, tex_b1, tex_w2, tex_b2;  // texture booster on f2
  std::array<Tensor, 3> gate_u;           // [D] each
  Tensor gate_beta;                       // [3]

  Tensor cls_w, cls_b;    // classifier head D -> num_classes
  Tensor diag_w, diag_b;  // class-attention head D -> num_classes
};

DecoderParams make_decoder(const DecoderConfig& cfg, const std::array<int, 4>& pyramid_channels,
                           const AblationFlags& flags, std::uint64_t seed, ParamStore& store);

struct DecodeResult {
  Tensor tokens;      // final lattice tokens (gate blend, or the active fallback)
  Tensor logits;      // [num_classes, H_f, W_f]
  Tensor class_attn;  // [num_classes, H_f, W_f], diagonal-supervision head
  GateWeights gate;
};

// The individual stages, exposed for direct testing. Lattices are
// [D, H_f, W_f]; the lattice grid equals f3's (stride 16).
Tensor fuse_bottleneck(const DecoderParams& p, const FeaturePyramid& pyr);    // T0
Tensor global_attend(const DecoderParams& p, const Tensor& t0);               // T1
Tensor local_refine(const DecoderParams& p, const Tensor& t1);                // T2
Tensor project_hr(const DecoderParams& p, const Tensor& f1);                  // F_HR
Tensor hr_cross_attend(const DecoderParams& p, const Tensor& t2, const Tensor& f_hr);  // C
Tensor texture_branch(const DecoderParams& p, const FeaturePyramid& pyr);     // B
std::pair<Tensor, GateWeights> gated_mix(const DecoderParams& p, const Tensor& t0,
                                         const Tensor& c, const Tensor& b);   // T-hat

DecodeResult decode(const DecoderParams& p, const FeaturePyramid& pyr);

}  // namespace terra
