#include "terra/decoder.hpp"

#include <cmath>

namespace terra {

void DecoderConfig::validate() const {
  require(width >= 1 && heads >= 1 && num_classes >= 2, "decoder: bad config");
  require(width % heads == 0, "decoder: width ", width, " not divisible by ", heads, " heads");
}

namespace {

MhcaParams make_attention(int dim, int heads, std::uint64_t seed, const std::string& prefix,
                          ParamStore& store) {
  MhcaParams a;
  const int dh = dim / heads;
  for (int h = 0; h < heads; ++h) {
    const std::string hs = prefix + ".h" + std::to_string(h);
    a.wq.push_back(store.add(hs + ".wq", glorot({dim, dh}, dim, dh, seed, hs + ".wq")));
    a.wk.push_back(store.add(hs + ".wk", glorot({dim, dh}, dim, dh, seed, hs + ".wk")));
    a.wv.push_back(store.add(hs + ".wv", glorot({dim, dh}, dim, dh, seed, hs + ".wv")));
  }
  a.wo = store.add(prefix + ".wo", glorot({dim, dim}, dim, dim, seed, prefix + ".wo"));
  return a;
}

Tensor lattice_to_tokens(const Tensor& lattice) {  // [D,H,W] -> [N,D]
  const int d = lattice.dim(0), h = lattice.dim(1), w = lattice.dim(2);
  return transpose(reshape(lattice, {d, h * w}));
}

Tensor tokens_to_lattice(const Tensor& tokens, int h, int w) {  // [N,D] -> [D,H,W]
  const int d = tokens.dim(1);
  return reshape(transpose(tokens), {d, h, w});
}

// softmax(QK^T/sqrt(dh))V per head, concatenated and output-projected (the
// 1/sqrt(dh) is folded into Q before the product).
Tensor attention(const MhcaParams& a, const Tensor& queries, const Tensor& keys_values) {
  const int heads = static_cast<int>(a.wq.size());
  const int dh = a.wq[0].dim(1);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> head_out;
  head_out.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor q = scale(matmul(queries, a.wq[static_cast<std::size_t>(h)]), inv_sqrt_dh);
    Tensor k = matmul(keys_values, a.wk[static_cast<std::size_t>(h)]);
    Tensor v = matmul(keys_values, a.wv[static_cast<std::size_t>(h)]);
    Tensor att = softmax(matmul(q, transpose(k)), 1);
    head_out.push_back(matmul(att, v));
  }
  Tensor z = heads == 1 ? head_out[0] : concat(head_out, 1);
  return matmul(z, a.wo);
}

}  // namespace

DecoderParams make_decoder(const DecoderConfig& cfg, const std::array<int, 4>& pyramid_channels,
                           const AblationFlags& flags, std::uint64_t seed, ParamStore& store) {
  cfg.validate();
  DecoderParams p;
  p.cfg = cfg;
  p.flags = flags;
  const int d = cfg.width;
  for (int i = 0; i < 4; ++i) {
    const int ci = pyramid_channels[static_cast<std::size_t>(i)];
    const std::string name = "decoder.proj" + std::to_string(i + 1);
    p.proj_w[static_cast<std::size_t>(i)] =
        store.add(name + ".w", glorot({d, ci}, ci, d, seed, name + ".w"));
    p.proj_b[static_cast<std::size_t>(i)] = store.add(name + ".b", Tensor::zeros({d}));
  }
  p.fuse_w = store.add("decoder.fuse.w", glorot({d, 4 * d}, 4 * d, d, seed, "decoder.fuse.w"));
  p.fuse_b = store.add("decoder.fuse.b", Tensor::zeros({d}));

  if (flags.gltr) {
    p.attn = make_attention(d, cfg.heads, seed, "decoder.attn", store);
    for (int k = 0; k < 3; ++k) {
      const std::string name = "decoder.phi.dw" + std::to_string(k + 1);
      // depthwise kernels: fan counts per channel
      p.phi_k[static_cast<std::size_t>(k)] = store.add(name, glorot({d, 3, 3}, 9, 9, seed, name));
    }
    p.phi_mix_w =
        store.add("decoder.phi.mix.w", glorot({d, d}, d, d, seed, "decoder.phi.mix.w"));
    p.phi_mix_b = store.add("decoder.phi.mix.b", Tensor::zeros({d}));
  }

  if (flags.rad) {
    const int c1 = pyramid_channels[0];
    p.hr_proj_w =
        store.add("decoder.hr_proj.w", glorot({d, c1}, c1, d, seed, "decoder.hr_proj.w"));
    p.hr_proj_b = store.add("decoder.hr_proj.b", Tensor::zeros({d}));
    p.cross = make_attention(d, cfg.heads, seed, "decoder.cross", store);
    const int c2 = pyramid_channels[1];
    p.tex_w1 =
        store.add("decoder.tex.w1", glorot({d, c2, 3, 3}, c2 * 9, d, seed, "decoder.tex.w1"));
    p.tex_b1 = store.add("decoder.tex.b1", Tensor::zeros({d}));
    p.tex_w2 = store.add("decoder.tex.w2", glorot({d, d, 3, 3}, d * 9, d, seed, "decoder.tex.w2"));
    p.tex_b2 = store.add("decoder.tex.b2", Tensor::zeros({d}));
    for (int k = 0; k < 3; ++k) {
      const std::string name = "decoder.gate.u" + std::to_string(k + 1);
      // zero-init gate energies start the blend at the uniform (1/3,1/3,1/3)
      p.gate_u[static_cast<std::size_t>(k)] = store.add(name, Tensor::zeros({d}));
    }
    p.gate_beta = store.add("decoder.gate.beta", Tensor::zeros({3}));
  }

  p.cls_w = store.add("decoder.cls.w",
                      glorot({cfg.num_classes, d}, d, cfg.num_classes, seed, "decoder.cls.w"));
  p.cls_b = store.add("decoder.cls.b", Tensor::zeros({cfg.num_classes}));
  p.diag_w = store.add("decoder.diag.w",
                       glorot({cfg.num_classes, d}, d, cfg.num_classes, seed, "decoder.diag.w"));
  p.diag_b = store.add("decoder.diag.b", Tensor::zeros({cfg.num_classes}));
  return p;
}

Tensor fuse_bottleneck(const DecoderParams& p, const FeaturePyramid& pyr) {
  OpScope scope("fuse_bottleneck");
  require(pyr.f1.defined() && pyr.f2.defined() && pyr.f3.defined() && pyr.f4.defined(),
          "fuse_bottleneck: incomplete pyramid");
  const int hf = pyr.f3.dim(1), wf = pyr.f3.dim(2);  // lattice = stride-16 grid
  require(pyr.f1.dim(1) == hf * 4 && pyr.f1.dim(2) == wf * 4 && pyr.f2.dim(1) == hf * 2 &&
              pyr.f2.dim(2) == wf * 2 && pyr.f4.dim(1) * 2 == hf && pyr.f4.dim(2) * 2 == wf,
          "fuse_bottleneck: pyramid shapes do not belong to one input image");
  const Tensor* feats[4] = {&pyr.f1, &pyr.f2, &pyr.f3, &pyr.f4};
  std::vector<Tensor> aligned;
  aligned.reserve(4);
  for (int i = 0; i < 4; ++i) {
    Tensor proj = pointwise_conv(*feats[i], p.proj_w[static_cast<std::size_t>(i)],
                                 p.proj_b[static_cast<std::size_t>(i)]);
    aligned.push_back(bilinear_resize(proj, hf, wf));
  }
  return relu(pointwise_conv(concat(aligned, 0), p.fuse_w, p.fuse_b));
}

Tensor global_attend(const DecoderParams& p, const Tensor& t0) {
  OpScope scope("global_attend");
  require(p.flags.gltr, "global_attend called with gltr disabled");
  const int h = t0.dim(1), w = t0.dim(2);
  Tensor tokens = lattice_to_tokens(t0);
  Tensor z = attention(p.attn, tokens, tokens);
  return add(t0, tokens_to_lattice(z, h, w));
}

Tensor local_refine(const DecoderParams& p, const Tensor& t1) {
  OpScope scope("local_refine");
  require(p.flags.gltr, "local_refine called with gltr disabled");
  Tensor branches = depthwise_conv2d(t1, p.phi_k[0], 1);
  branches = add(branches, depthwise_conv2d(t1, p.phi_k[1], 2));
  branches = add(branches, depthwise_conv2d(t1, p.phi_k[2], 3));
  Tensor phi = pointwise_conv(relu(branches), p.phi_mix_w, p.phi_mix_b);
  return add(t1, phi);
}

Tensor project_hr(const DecoderParams& p, const Tensor& f1) {
  OpScope scope("hr_project");
  require(p.flags.rad, "project_hr called with rad disabled");
  return pointwise_conv(f1, p.hr_proj_w, p.hr_proj_b);
}

Tensor hr_cross_attend(const DecoderParams& p, const Tensor& t2, const Tensor& f_hr) {
  OpScope scope("hr_cross_attend");
  require(p.flags.rad, "hr_cross_attend called with rad disabled");
  require(f_hr.dim(0) == p.cfg.width, "hr_cross_attend: F_HR must be projected to width ",
          p.cfg.width, ", got ", shape_str(f_hr.shape()));
  const int h = t2.dim(1), w = t2.dim(2);
  Tensor queries = lattice_to_tokens(t2);
  Tensor kv = lattice_to_tokens(f_hr);
  Tensor c = attention(p.cross, queries, kv);
  return tokens_to_lattice(c, h, w);
}

Tensor texture_branch(const DecoderParams& p, const FeaturePyramid& pyr) {
  OpScope scope("texture_branch");
  require(p.flags.rad, "texture_branch called with rad disabled");
  const int hf = pyr.f3.dim(1), wf = pyr.f3.dim(2);
  Tensor b = relu(conv2d(pyr.f2, p.tex_w1, p.tex_b1, 1, 1));
  b = relu(conv2d(b, p.tex_w2, p.tex_b2, 1, 1));
  return bilinear_resize(b, hf, wf);
}

std::pair<Tensor, GateWeights> gated_mix(const DecoderParams& p, const Tensor& t0,
                                         const Tensor& c, const Tensor& b) {
  OpScope scope("gated_mix");
  require(p.flags.rad, "gated_mix called with rad disabled");
  require(t0.shape() == c.shape() && t0.shape() == b.shape(),
          "gated_mix: branch shapes differ: ", shape_str(t0.shape()), " vs ",
          shape_str(c.shape()), " vs ", shape_str(b.shape()));
  const int d = t0.dim(0);
  // gate descriptor z reads the bottleneck path only
  Tensor z = reshape(spatial_mean(t0), {1, d});
  std::vector<Tensor> energies;
  energies.reserve(3);
  for (int k = 0; k < 3; ++k)
    energies.push_back(
        reshape(matmul(z, reshape(p.gate_u[static_cast<std::size_t>(k)], {d, 1})), {1}));
  Tensor e = add(concat(energies, 0), p.gate_beta);
  Tensor w = softmax(e, 0);
  Tensor mixed = add(add(scale_by(t0, slice(w, 0, 0, 1)), scale_by(c, slice(w, 0, 1, 1))),
                     scale_by(b, slice(w, 0, 2, 1)));
  GateWeights gw;
  gw.w = {w.data()[0], w.data()[1], w.data()[2]};
  return {mixed, gw};
}

DecodeResult decode(const DecoderParams& p, const FeaturePyramid& pyr) {
  OpScope scope("decode");
  Tensor t0 = fuse_bottleneck(p, pyr);
  Tensor t2 = t0;
  if (p.flags.gltr) t2 = local_refine(p, global_attend(p, t0));
  DecodeResult r;
  if (p.flags.rad) {
    Tensor f_hr = project_hr(p, pyr.f1);
    Tensor c = hr_cross_attend(p, t2, f_hr);
    Tensor b = texture_branch(p, pyr);
    auto [mixed, gate] = gated_mix(p, t0, c, b);
    r.tokens = mixed;
    r.gate = gate;
  } else {
    // without the resolution-aware decoder the gate is pinned to the
    // bottleneck branch
    r.tokens = t0;
    r.gate.w = {1.0, 0.0, 0.0};
  }
  {
    OpScope head_scope("classifier");
    r.logits = pointwise_conv(r.tokens, p.cls_w, p.cls_b);
  }
  {
    OpScope head_scope("diag_head");
    r.class_attn = pointwise_conv(r.tokens, p.diag_w, p.diag_b);
  }
  return r;
}

}  // namespace terra
