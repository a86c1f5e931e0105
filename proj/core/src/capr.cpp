#include "terra/capr.hpp"

#include <algorithm>
#include <cmath>

namespace terra {

void CaprConfig::validate() const {
  require(iters >= 1, "capr: iters must be >= 1");
  require(hidden >= 1, "capr: hidden width must be >= 1");
}

int capr_effective_k(const CaprConfig& cfg, int pixels) {
  if (cfg.k < 0) return std::min(1024, pixels / 20);  // default: min(1024, 5% of pixels)
  return std::min(cfg.k, pixels);
}

CaprParams make_capr(const CaprConfig& cfg, int hr_channels, int num_classes,
                     std::uint64_t seed, ParamStore& store) {
  cfg.validate();
  CaprParams p;
  p.cfg = cfg;
  const int in = hr_channels + num_classes;
  p.w1 = store.add("capr.w1", glorot({in, cfg.hidden}, in, cfg.hidden, seed, "capr.w1"));
  p.b1 = store.add("capr.b1", Tensor::zeros({cfg.hidden}));
  // zero output layer: refinement starts as the identity
  p.w2 = store.add("capr.w2", Tensor::zeros({cfg.hidden, num_classes}));
  p.b2 = store.add("capr.b2", Tensor::zeros({num_classes}));
  return p;
}

Tensor upsample_logits(const Tensor& logits, int out_h, int out_w) {
  OpScope scope("upsample_logits");
  return bilinear_resize(logits, out_h, out_w);
}

Tensor margin_map(const Tensor& logits_up) {
  require(logits_up.ndim() == 3, "margin_map expects [Cc,H,W], got ",
          shape_str(logits_up.shape()));
  const int cc = logits_up.dim(0);
  require(cc >= 2, "margin_map needs at least 2 classes, got ", cc);
  const int h = logits_up.dim(1), w = logits_up.dim(2);
  const std::size_t n = static_cast<std::size_t>(h) * w;
  const double* pl = logits_up.data();
  std::vector<double> m(n);
  std::vector<double> probs(static_cast<std::size_t>(cc));
  for (std::size_t i = 0; i < n; ++i) {
    double mx = pl[i];
    for (int c = 1; c < cc; ++c) mx = std::max(mx, pl[static_cast<std::size_t>(c) * n + i]);
    double denom = 0.0;
    for (int c = 0; c < cc; ++c) {
      probs[static_cast<std::size_t>(c)] = std::exp(pl[static_cast<std::size_t>(c) * n + i] - mx);
      denom += probs[static_cast<std::size_t>(c)];
    }
    double p1 = 0.0, p2 = 0.0;
    for (int c = 0; c < cc; ++c) {
      const double p = probs[static_cast<std::size_t>(c)] / denom;
      if (p > p1) {
        p2 = p1;
        p1 = p;
      } else if (p > p2) {
        p2 = p;
      }
    }
    m[i] = p1 - p2;
  }
  return Tensor::from_data({h, w}, std::move(m));
}

UncertaintySelection select_topk(const Tensor& margin, int k) {
  require(margin.ndim() == 2, "select_topk expects a [H,W] margin map");
  require(k >= 0, "select_topk: k must be >= 0");
  UncertaintySelection sel;
  if (k == 0) return sel;
  const std::size_t n = margin.size();
  sel.indices = topk_smallest_indices(margin.data(), n, static_cast<std::size_t>(k));
  sel.margins.reserve(sel.indices.size());
  for (int i : sel.indices) sel.margins.push_back(margin.data()[i]);
  return sel;
}

Tensor refine(const Tensor& logits_up, const UncertaintySelection& sel, const Tensor& f_hr_up,
              const CaprParams& p, CaprStats* stats) {
  OpScope scope("capr_refine");
  require(logits_up.ndim() == 3 && f_hr_up.ndim() == 3, "refine expects [C,H,W] tensors");
  require(logits_up.dim(1) == f_hr_up.dim(1) && logits_up.dim(2) == f_hr_up.dim(2),
          "refine: HR features ", shape_str(f_hr_up.shape()), " do not cover the logit grid ",
          shape_str(logits_up.shape()));
  if (sel.indices.empty()) return logits_up;  // empty selection: bit-exact passthrough
  const int cc = logits_up.dim(0);
  const int h = logits_up.dim(1), w = logits_up.dim(2);
  const int n = h * w;
  for (int i : sel.indices)
    require(i >= 0 && i < n, "refine: selection index ", i, " outside the ", h, "x", w, " grid");

  Tensor logit_cols = gather_cols(reshape(logits_up, {cc, n}), sel.indices);
  Tensor feat_cols = gather_cols(reshape(f_hr_up, {f_hr_up.dim(0), n}), sel.indices);
  Tensor mlp_in = transpose(concat({feat_cols, logit_cols}, 0));  // [K, D_hr+Cc]
  Tensor hiddenv = relu(linear(mlp_in, p.w1, p.b1));
  Tensor residual = transpose(linear(hiddenv, p.w2, p.b2));  // [Cc, K]
  if (stats != nullptr) stats->mlp_invocations += sel.indices.size();
  Tensor out = scatter_add_cols(reshape(logits_up, {cc, n}), sel.indices, residual);
  return reshape(out, {cc, h, w});
}

Tensor capr_apply(const CaprParams& p, const Tensor& logits_up, const Tensor& f_hr_up,
                  CaprStats* stats) {
  const int pixels = logits_up.dim(1) * logits_up.dim(2);
  const int k = capr_effective_k(p.cfg, pixels);
  Tensor cur = logits_up;
  for (int it = 0; it < p.cfg.iters; ++it) {
    const UncertaintySelection sel = select_topk(margin_map(cur), k);
    cur = refine(cur, sel, f_hr_up, p, stats);
  }
  return cur;
}

}  // namespace terra
