#include "terra/losses.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace terra {

void LossConfig::validate() const {
  require(lambda_diag >= 0.0, "losses: lambda_diag must be >= 0");
  require(bbl_end >= bbl_start, "losses: bbl schedule must be non-decreasing, got [",
          bbl_start, ",", bbl_end, "]");
  require(bbl_ramp >= 0.0 && bbl_ramp <= 1.0, "losses: bbl_ramp must lie in [0,1]");
  require(r_band >= 1 && r_ring >= 1, "losses: r_band and r_ring must be >= 1");
}

BblParams make_bbl(std::uint64_t seed, ParamStore& store) {
  (void)seed;  // fixed analytic init
  BblParams p;
  p.w_s = store.add("bbl.w_s", Tensor::scalar(10.0));
  p.b_s = store.add("bbl.b_s", Tensor::scalar(0.0));
  return p;
}

LabelMask downsample_majority(const LabelMask& gt, int factor) {
  require(factor >= 1 && gt.h % factor == 0 && gt.w % factor == 0,
          "downsample_majority: mask ", gt.h, "x", gt.w, " not divisible by ", factor);
  const int hf = gt.h / factor, wf = gt.w / factor;
  LabelMask out = make_mask(hf, wf);
  out.ignore_value = gt.ignore_value;
  out.class_count = gt.class_count;
  std::array<int, 256> votes{};
  for (int cy = 0; cy < hf; ++cy)
    for (int cx = 0; cx < wf; ++cx) {
      votes.fill(0);
      bool any_valid = false;
      for (int y = cy * factor; y < (cy + 1) * factor; ++y)
        for (int x = cx * factor; x < (cx + 1) * factor; ++x) {
          const std::uint8_t v = gt.at(y, x);
          ++votes[v];
          if (v != gt.ignore_value) any_valid = true;
        }
      if (!any_valid) {  // ignore wins only when it is the sole label
        out.at(cy, cx) = static_cast<std::uint8_t>(gt.ignore_value);
        continue;
      }
      int best = -1, best_count = -1;
      for (int c = 0; c < 256; ++c) {
        if (c == gt.ignore_value) continue;
        if (votes[static_cast<std::size_t>(c)] > best_count) {  // ties keep the smaller id
          best_count = votes[static_cast<std::size_t>(c)];
          best = c;
        }
      }
      out.at(cy, cx) = static_cast<std::uint8_t>(best);
    }
  return out;
}

namespace {
std::vector<int> mask_labels(const LabelMask& m) {
  std::vector<int> v(m.labels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = m.labels[i];
  return v;
}
}  // namespace

Tensor seg_loss(const Tensor& logits_up, const LabelMask& gt, bool* all_ignored) {
  OpScope scope("seg_loss");
  require(logits_up.ndim() == 3 && logits_up.dim(1) == gt.h && logits_up.dim(2) == gt.w,
          "seg_loss: logits ", shape_str(logits_up.shape()), " vs mask ", gt.h, "x", gt.w);
  return cross_entropy_masked(logits_up, mask_labels(gt), gt.ignore_value, all_ignored);
}

Tensor diag_loss(const Tensor& class_attn, const LabelMask& gt_ds, bool* all_ignored) {
  OpScope scope("diag_loss");
  require(class_attn.ndim() == 3 && class_attn.dim(1) == gt_ds.h && class_attn.dim(2) == gt_ds.w,
          "diag_loss: class attention ", shape_str(class_attn.shape()), " vs lattice GT ",
          gt_ds.h, "x", gt_ds.w);
  return cross_entropy_masked(class_attn, mask_labels(gt_ds), gt_ds.ignore_value, all_ignored);
}

BoundaryBand build_band(const LabelMask& gt_ds, int r_band, int r_ring) {
  require(r_band >= 1 && r_ring >= 1, "build_band: radii must be >= 1");
  BoundaryBand bb;
  bb.h = gt_ds.h;
  bb.w = gt_ds.w;
  bb.band.assign(gt_ds.labels.size(), 0);
  const int h = gt_ds.h, w = gt_ds.w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int first = -1;
      bool mixed = false;
      for (int yy = std::max(0, y - r_band); yy <= std::min(h - 1, y + r_band) && !mixed; ++yy)
        for (int xx = std::max(0, x - r_band); xx <= std::min(w - 1, x + r_band); ++xx) {
          const std::uint8_t v = gt_ds.at(yy, xx);
          if (v == gt_ds.ignore_value) continue;
          if (first < 0) {
            first = v;
          } else if (v != first) {
            mixed = true;
            break;
          }
        }
      if (mixed) bb.band[static_cast<std::size_t>(y) * w + x] = 1;
    }
  // ring pairs at Chebyshev distance exactly r_ring; ignore-labeled
  // endpoints are excluded
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!bb.band[static_cast<std::size_t>(y) * w + x]) continue;
      if (gt_ds.at(y, x) == gt_ds.ignore_value) continue;
      for (int dy = -r_ring; dy <= r_ring; ++dy)
        for (int dx = -r_ring; dx <= r_ring; ++dx) {
          if (std::max(std::abs(dy), std::abs(dx)) != r_ring) continue;
          const int jy = y + dy, jx = x + dx;
          if (jy < 0 || jy >= h || jx < 0 || jx >= w) continue;
          if (gt_ds.at(jy, jx) == gt_ds.ignore_value) continue;
          bb.pairs.emplace_back(y * w + x, jy * w + jx);
        }
    }
  return bb;
}

namespace {
Tensor affine_scores(const Tensor& cosines, const BblParams& p) {
  const int n = cosines.dim(0);
  return add(mul(cosines, broadcast_scalar(p.w_s, n)), broadcast_scalar(p.b_s, n));
}
}  // namespace

Tensor pair_score(const Tensor& tokens, int i, int j, const BblParams& p) {
  OpScope scope("pair_score");
  require(tokens.ndim() == 3, "pair_score expects a [D,H,W] lattice");
  const int d = tokens.dim(0);
  const int n = tokens.dim(1) * tokens.dim(2);
  Tensor mat = transpose(reshape(tokens, {d, n}));
  Tensor c = cosine_pairs(mat, {{i, j}});
  return affine_scores(c, p);
}

Tensor bbl_loss(const Tensor& tokens, const BoundaryBand& band, const LabelMask& gt_ds,
                const BblParams& p) {
  OpScope scope("bbl_loss");
  require(tokens.ndim() == 3 && tokens.dim(1) == band.h && tokens.dim(2) == band.w,
          "bbl_loss: tokens ", shape_str(tokens.shape()), " vs band ", band.h, "x", band.w);
  require(gt_ds.h == band.h && gt_ds.w == band.w, "bbl_loss: band built from different GT");
  if (band.pairs.empty()) return Tensor::scalar(0.0);
  const int d = tokens.dim(0);
  const int n = band.h * band.w;
  Tensor mat = transpose(reshape(tokens, {d, n}));
  Tensor cos = cosine_pairs(mat, band.pairs);
  Tensor scores = affine_scores(cos, p);
  std::vector<double> targets;
  targets.reserve(band.pairs.size());
  for (const auto& [i, j] : band.pairs)
    targets.push_back(gt_ds.labels[static_cast<std::size_t>(i)] ==
                              gt_ds.labels[static_cast<std::size_t>(j)]
                          ? 1.0
                          : 0.0);
  return bce_with_logits_mean(scores, targets);
}

double lambda_bbl(const LossConfig& cfg, double t) {
  require(t >= 0.0 && t <= 1.0, "lambda_bbl: progress must lie in [0,1], got ", t);
  const double u = cfg.bbl_ramp <= 0.0 ? 1.0 : std::min(t / cfg.bbl_ramp, 1.0);
  return cfg.bbl_start + (cfg.bbl_end - cfg.bbl_start) * u;
}

Tensor total_loss(const Tensor& seg, const Tensor& diag, const Tensor& bbl,
                  const LossConfig& cfg, double t) {
  OpScope scope("total_loss");
  Tensor out = add(seg, scale(diag, cfg.lambda_diag));
  if (bbl.defined()) out = add(out, scale(bbl, lambda_bbl(cfg, t)));
  return out;
}

}  // namespace terra
