#include "terra/encoder.hpp"

#include <cmath>

namespace terra {

void EncoderConfig::validate() const {
  require(in_channels >= 1, "encoder: in_channels must be positive");
  for (int i = 0; i < 4; ++i) {
    require(stage_channels[static_cast<std::size_t>(i)] > 0 &&
                stage_depths[static_cast<std::size_t>(i)] >= 0 &&
                heads_per_stage[static_cast<std::size_t>(i)] >= 1,
            "encoder: bad stage configuration at stage ", i + 1);
    require(stage_channels[static_cast<std::size_t>(i)] %
                    heads_per_stage[static_cast<std::size_t>(i)] ==
                0,
            "encoder: stage ", i + 1, " channels ", stage_channels[static_cast<std::size_t>(i)],
            " not divisible by ", heads_per_stage[static_cast<std::size_t>(i)], " heads");
    if (i > 0)
      require(stage_channels[static_cast<std::size_t>(i)] >
                  stage_channels[static_cast<std::size_t>(i - 1)],
              "encoder: stage channels must be strictly increasing");
  }
  require(mlp_ratio >= 1, "encoder: mlp_ratio must be >= 1");
}

namespace {

AttnBlockParams make_block(int channels, int heads, int mlp_ratio, std::uint64_t seed,
                           const std::string& prefix, ParamStore& store) {
  AttnBlockParams b;
  const int dh = channels / heads;
  b.ln1_g = store.add(prefix + ".ln1.gamma", Tensor::full({channels}, 1.0));
  b.ln1_b = store.add(prefix + ".ln1.beta", Tensor::zeros({channels}));
  b.ln2_g = store.add(prefix + ".ln2.gamma", Tensor::full({channels}, 1.0));
  b.ln2_b = store.add(prefix + ".ln2.beta", Tensor::zeros({channels}));
  for (int h = 0; h < heads; ++h) {
    const std::string hs = prefix + ".attn.h" + std::to_string(h);
    b.wq.push_back(store.add(hs + ".wq", glorot({channels, dh}, channels, dh, seed, hs + ".wq")));
    b.wk.push_back(store.add(hs + ".wk", glorot({channels, dh}, channels, dh, seed, hs + ".wk")));
    b.wv.push_back(store.add(hs + ".wv", glorot({channels, dh}, channels, dh, seed, hs + ".wv")));
  }
  b.wo = store.add(prefix + ".attn.wo",
                   glorot({channels, channels}, channels, channels, seed, prefix + ".attn.wo"));
  const int hidden = channels * mlp_ratio;
  b.mlp_w1 = store.add(prefix + ".mlp.w1",
                       glorot({channels, hidden}, channels, hidden, seed, prefix + ".mlp.w1"));
  b.mlp_b1 = store.add(prefix + ".mlp.b1", Tensor::zeros({hidden}));
  b.mlp_w2 = store.add(prefix + ".mlp.w2",
                       glorot({hidden, channels}, hidden, channels, seed, prefix + ".mlp.w2"));
  b.mlp_b2 = store.add(prefix + ".mlp.b2", Tensor::zeros({channels}));
  return b;
}

}  // namespace

EncoderParams make_encoder(const EncoderConfig& cfg, std::uint64_t seed, ParamStore& store) {
  cfg.validate();
  EncoderParams p;
  p.cfg = cfg;
  const int c1 = cfg.stage_channels[0];
  p.embed_w = store.add("encoder.embed.w",
                        glorot({c1, cfg.in_channels, 7, 7}, cfg.in_channels * 49, c1, seed,
                               "encoder.embed.w"));
  p.embed_b = store.add("encoder.embed.b", Tensor::zeros({c1}));
  for (int s = 1; s < 4; ++s) {
    const int ci = cfg.stage_channels[static_cast<std::size_t>(s - 1)];
    const int co = cfg.stage_channels[static_cast<std::size_t>(s)];
    const std::string name = "encoder.merge" + std::to_string(s + 1);
    p.merge_w[static_cast<std::size_t>(s - 1)] =
        store.add(name + ".w", glorot({co, ci, 2, 2}, ci * 4, co, seed, name + ".w"));
    p.merge_b[static_cast<std::size_t>(s - 1)] = store.add(name + ".b", Tensor::zeros({co}));
  }
  for (int s = 0; s < 4; ++s) {
    for (int d = 0; d < cfg.stage_depths[static_cast<std::size_t>(s)]; ++d) {
      const std::string prefix =
          "encoder.stage" + std::to_string(s + 1) + ".block" + std::to_string(d);
      p.blocks[static_cast<std::size_t>(s)].push_back(
          make_block(cfg.stage_channels[static_cast<std::size_t>(s)],
                     cfg.heads_per_stage[static_cast<std::size_t>(s)], cfg.mlp_ratio, seed,
                     prefix, store));
    }
  }
  return p;
}

Tensor patch_embed(const EncoderParams& p, const Tensor& image) {
  OpScope scope("patch_embed");
  require(image.ndim() == 3 && image.dim(0) == p.cfg.in_channels, "patch_embed expects [",
          p.cfg.in_channels, ",H,W], got ", shape_str(image.shape()));
  require(image.dim(1) % 32 == 0 && image.dim(2) % 32 == 0,
          "patch_embed: input dims must be divisible by 32, got ", image.dim(1), "x",
          image.dim(2));
  return conv2d(image, p.embed_w, p.embed_b, /*stride=*/4, /*pad=*/3);
}

Tensor patch_merge(const Tensor& x, const Tensor& w, const Tensor& b) {
  OpScope scope("patch_merge");
  require(x.dim(1) % 2 == 0 && x.dim(2) % 2 == 0,
          "patch_merge: spatial dims must be even, got ", x.dim(1), "x", x.dim(2));
  return conv2d(x, w, b, /*stride=*/2, /*pad=*/0);
}

namespace {

Tensor mhsa(const AttnBlockParams& b, const Tensor& tokens, int heads) {
  const int dh = tokens.dim(1) / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> head_out;
  head_out.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor q = scale(matmul(tokens, b.wq[static_cast<std::size_t>(h)]), inv_sqrt_dh);
    Tensor k = matmul(tokens, b.wk[static_cast<std::size_t>(h)]);
    Tensor v = matmul(tokens, b.wv[static_cast<std::size_t>(h)]);
    Tensor att = softmax(matmul(q, transpose(k)), 1);
    head_out.push_back(matmul(att, v));
  }
  Tensor z = heads == 1 ? head_out[0] : concat(head_out, 1);
  return matmul(z, b.wo);
}

Tensor block_forward(const AttnBlockParams& b, Tensor tokens, int heads) {
  tokens = add(tokens, mhsa(b, layer_norm(tokens, b.ln1_g, b.ln1_b), heads));
  Tensor m = layer_norm(tokens, b.ln2_g, b.ln2_b);
  m = linear(gelu(linear(m, b.mlp_w1, b.mlp_b1)), b.mlp_w2, b.mlp_b2);
  return add(tokens, m);
}

}  // namespace

Tensor run_blocks(const std::vector<AttnBlockParams>& blocks, int heads, const Tensor& grid) {
  if (blocks.empty()) return grid;
  const int c = grid.dim(0), h = grid.dim(1), w = grid.dim(2);
  Tensor tokens = transpose(reshape(grid, {c, h * w}));  // [N, C]
  for (const AttnBlockParams& b : blocks) tokens = block_forward(b, tokens, heads);
  return reshape(transpose(tokens), {c, h, w});
}

FeaturePyramid encode(const EncoderParams& p, const Tensor& image) {
  OpScope scope("encode");
  FeaturePyramid pyr;
  Tensor x = patch_embed(p, image);
  x = run_blocks(p.blocks[0], p.cfg.heads_per_stage[0], x);
  pyr.f1 = x;
  for (int s = 1; s < 4; ++s) {
    x = patch_merge(x, p.merge_w[static_cast<std::size_t>(s - 1)],
                    p.merge_b[static_cast<std::size_t>(s - 1)]);
    x = run_blocks(p.blocks[static_cast<std::size_t>(s)],
                   p.cfg.heads_per_stage[static_cast<std::size_t>(s)], x);
    if (s == 1) pyr.f2 = x;
    if (s == 2) pyr.f3 = x;
    if (s == 3) pyr.f4 = x;
  }
  return pyr;
}

}  // namespace terra
