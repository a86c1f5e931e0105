#pragma once

#include <array>
#include <vector>

#include "terra/nn.hpp"
#include "terra/tensor.hpp"

namespace terra {

struct EncoderConfig {
  int in_channels = 3;
  std::array<int, 4> stage_channels = {32, 64, 160, 256};
  std::array<int, 4> stage_depths = {2, 2, 2, 2};
  std::array<int, 4> heads_per_stage = {1, 2, 4, 8};
  int mlp_ratio = 4;

  void validate() const;
};

// Multi-scale encoder outputs at strides {4, 8, 16, 32}.
struct FeaturePyramid {
  Tensor f1, f2, f3, f4;
};

// One pre-norm transformer block: x += MHSA(LN(x)); x += MLP(LN(x)).
struct AttnBlockParams {
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  std::vector<Tensor> wq, wk, wv;  // per head, [C, d_h]
  Tensor wo;                       // [C, C]
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct EncoderParams {
  EncoderConfig cfg;
  Tensor embed_w, embed_b;               // 7x7 stride-4 patch embedding
  std::array<Tensor, 3> merge_w;         // 2x2 stride-2 patch merging, stages 2..4
  std::array<Tensor, 3> merge_b;
  std::array<std::vector<AttnBlockParams>, 4> blocks;
};

EncoderParams make_encoder(const EncoderConfig& cfg, std::uint64_t seed, ParamStore& store);

// 7x7 patches, stride 4, padding 3. Input dims must be divisible by 32.
Tensor patch_embed(const EncoderParams& p, const Tensor& image);

// 2x2 stride-2 convolution, halving the grid and widening channels.
Tensor patch_merge(const Tensor& x, const Tensor& w, const Tensor& b);

// Multi-head self-attention + MLP block stack on a flattened [C,H,W] grid.
Tensor run_blocks(const std::vector<AttnBlockParams>& blocks, int heads, const Tensor& grid);

FeaturePyramid encode(const EncoderParams& p, const Tensor& image);

}  // namespace terra
