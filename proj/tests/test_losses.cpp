#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "terra/losses.hpp"

using namespace terra;

namespace {

BblParams test_bbl(ParamStore& store) { return make_bbl(1, store); }

// hand softmax cross-entropy for one pixel
double hand_ce(const std::vector<double>& logits, int label) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double denom = 0.0;
  for (double v : logits) denom += std::exp(v - mx);
  return mx + std::log(denom) - logits[static_cast<std::size_t>(label)];
}

}  // namespace

TEST_CASE("seg_loss analytic cases") {
  // perfect one-hot logits at the GT classes
  LabelMask gt = make_mask(2, 2);
  gt.labels = {0, 1, 2, 5};
  std::vector<double> data(6 * 4, -50.0);
  for (int i = 0; i < 4; ++i) data[static_cast<std::size_t>(gt.labels[static_cast<std::size_t>(i)]) * 4 + static_cast<std::size_t>(i)] = 50.0;
  Tensor perfect = Tensor::from_data({6, 2, 2}, data);
  CHECK(seg_loss(perfect, gt).value() < 1e-10);

  // uniform logits over 6 classes: loss = ln 6
  Tensor uniform = Tensor::zeros({6, 2, 2});
  CHECK(seg_loss(uniform, gt).value() == doctest::Approx(std::log(6.0)).epsilon(1e-12));

  // 2x2 mixed case against per-pixel hand arithmetic
  SplitMix64 rng(5);
  Tensor logits = Tensor::from_data({6, 2, 2}, oracle::random_vec(24, rng));
  double expect = 0.0;
  for (int i = 0; i < 4; ++i) {
    std::vector<double> col(6);
    for (int c = 0; c < 6; ++c) col[static_cast<std::size_t>(c)] = logits.data()[static_cast<std::size_t>(c) * 4 + static_cast<std::size_t>(i)];
    expect += hand_ce(col, gt.labels[static_cast<std::size_t>(i)]);
  }
  expect /= 4.0;
  CHECK(seg_loss(logits, gt).value() == doctest::Approx(expect).epsilon(1e-12));

  // all pixels ignored: loss defined as 0 with a warning flag
  LabelMask ignored = make_mask(2, 2, kIgnoreValue);
  bool warn = false;
  CHECK(seg_loss(logits, ignored, &warn).value() == 0.0);
  CHECK(warn);
}

TEST_CASE("diag_loss mirrors seg_loss on the lattice") {
  LabelMask gt_ds = make_mask(2, 2);
  gt_ds.labels = {3, 3, 0, 1};
  std::vector<double> data(6 * 4, -50.0);
  for (int i = 0; i < 4; ++i)
    data[static_cast<std::size_t>(gt_ds.labels[static_cast<std::size_t>(i)]) * 4 + static_cast<std::size_t>(i)] = 50.0;
  CHECK(diag_loss(Tensor::from_data({6, 2, 2}, data), gt_ds).value() < 1e-10);
  CHECK(diag_loss(Tensor::zeros({6, 2, 2}), gt_ds).value() ==
        doctest::Approx(std::log(6.0)).epsilon(1e-12));

  SplitMix64 rng(7);
  Tensor attn = Tensor::from_data({6, 2, 2}, oracle::random_vec(24, rng));
  double expect = 0.0;
  for (int i = 0; i < 4; ++i) {
    std::vector<double> col(6);
    for (int c = 0; c < 6; ++c)
      col[static_cast<std::size_t>(c)] = attn.data()[static_cast<std::size_t>(c) * 4 + static_cast<std::size_t>(i)];
    expect += hand_ce(col, gt_ds.labels[static_cast<std::size_t>(i)]);
  }
  CHECK(diag_loss(attn, gt_ds).value() == doctest::Approx(expect / 4.0).epsilon(1e-12));
}

TEST_CASE("downsample_majority: majority vote, ignore only wins alone, ties to smaller id") {
  LabelMask gt = make_mask(4, 4);
  // top-left cell: 3 votes for 2, 1 for 0 -> 2
  gt.at(0, 0) = 2; gt.at(0, 1) = 2; gt.at(1, 0) = 2; gt.at(1, 1) = 0;
  // top-right cell: 2-2 tie between 1 and 3 -> smaller id 1
  gt.at(0, 2) = 3; gt.at(0, 3) = 1; gt.at(1, 2) = 1; gt.at(1, 3) = 3;
  // bottom-left: all ignore -> ignore
  gt.at(2, 0) = kIgnoreValue; gt.at(2, 1) = kIgnoreValue;
  gt.at(3, 0) = kIgnoreValue; gt.at(3, 1) = kIgnoreValue;
  // bottom-right: 3 ignore + one label 4 -> 4 (ignore wins only when alone)
  gt.at(2, 2) = kIgnoreValue; gt.at(2, 3) = kIgnoreValue;
  gt.at(3, 2) = kIgnoreValue; gt.at(3, 3) = 4;

  const LabelMask ds = downsample_majority(gt, 2);
  CHECK(ds.h == 2);
  CHECK(ds.w == 2);
  CHECK(ds.at(0, 0) == 2);
  CHECK(ds.at(0, 1) == 1);
  CHECK(ds.at(1, 0) == kIgnoreValue);
  CHECK(ds.at(1, 1) == 4);

  CHECK_THROWS_AS(downsample_majority(gt, 3), ShapeError);
}

TEST_CASE("build_band: uniform mask, left/right split, ignore exclusion") {
  LabelMask uni = make_mask(4, 4, 2);
  BoundaryBand none = build_band(uni, 1, 1);
  for (auto v : none.band) CHECK(v == 0);
  CHECK(none.pairs.empty());

  // 4x4 split into two classes left/right: the radius-1 window sees both
  // classes exactly in the two center columns
  LabelMask split = make_mask(4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) split.at(y, x) = x < 2 ? 0 : 1;
  BoundaryBand bb = build_band(split, 1, 1);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      CHECK(static_cast<int>(bb.band[static_cast<std::size_t>(y) * 4 + x]) ==
            ((x == 1 || x == 2) ? 1 : 0));
  CHECK(!bb.pairs.empty());
  // every pair starts in the band, ends on the lattice, no duplicates
  std::set<std::pair<int, int>> seen;
  for (const auto& pr : bb.pairs) {
    CHECK(bb.band[static_cast<std::size_t>(pr.first)] == 1);
    CHECK(pr.second >= 0);
    CHECK(pr.second < 16);
    CHECK(seen.insert(pr).second);  // unique
  }

  // an ignore stripe produces no pairs crossing into it
  LabelMask strip = split;
  for (int y = 0; y < 4; ++y) strip.at(y, 2) = kIgnoreValue;
  BoundaryBand bi = build_band(strip, 1, 1);
  for (const auto& pr : bi.pairs) {
    CHECK(strip.labels[static_cast<std::size_t>(pr.first)] != kIgnoreValue);
    CHECK(strip.labels[static_cast<std::size_t>(pr.second)] != kIgnoreValue);
  }
}

TEST_CASE("pair_score: identical, orthogonal, random tokens") {
  ParamStore store;
  BblParams p = test_bbl(store);
  CHECK(p.w_s.value() == 10.0);
  CHECK(p.b_s.value() == 0.0);

  // two identical non-zero tokens: cos = 1, s = w_s + b_s
  Tensor tokens = Tensor::from_data({2, 1, 2}, {1.0, 1.0, 2.0, 2.0});  // both tokens (1,2)
  CHECK(pair_score(tokens, 0, 1, p).value() == doctest::Approx(10.0).epsilon(1e-12));

  // orthogonal tokens: s = b_s
  Tensor ortho = Tensor::from_data({2, 1, 2}, {1.0, 0.0, 0.0, 1.0});
  CHECK(pair_score(ortho, 0, 1, p).value() == doctest::Approx(0.0).epsilon(1e-12));

  // zero vector: cosine defined as 0
  Tensor zero = Tensor::from_data({2, 1, 2}, {0.0, 1.0, 0.0, 2.0});
  CHECK(pair_score(zero, 0, 1, p).value() == doctest::Approx(0.0).epsilon(1e-12));

  // random tokens against a dot/norm hand computation
  SplitMix64 rng(11);
  Tensor rnd = Tensor::from_data({3, 2, 2}, oracle::random_vec(12, rng));
  double u[3], v[3];
  for (int d = 0; d < 3; ++d) {
    u[d] = rnd.data()[static_cast<std::size_t>(d) * 4 + 1];
    v[d] = rnd.data()[static_cast<std::size_t>(d) * 4 + 3];
  }
  double uu = 0, vv = 0, uv = 0;
  for (int d = 0; d < 3; ++d) {
    uu += u[d] * u[d];
    vv += v[d] * v[d];
    uv += u[d] * v[d];
  }
  const double expect = 10.0 * uv / std::sqrt(uu * vv);
  CHECK(pair_score(rnd, 1, 3, p).value() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("bbl_loss analytic points") {
  ParamStore store;
  BblParams p = test_bbl(store);

  // empty pair set: loss is exactly 0
  LabelMask gt = make_mask(2, 2, 1);
  BoundaryBand empty = build_band(gt, 1, 1);
  SplitMix64 rng(13);
  Tensor tokens = Tensor::from_data({3, 2, 2}, oracle::random_vec(12, rng));
  CHECK(bbl_loss(tokens, empty, gt, p).value() == 0.0);

  // single pair with s = 0 and t = 1 gives ln 2: orthogonal tokens with
  // equal labels, b_s = 0
  BoundaryBand one;
  one.h = 1;
  one.w = 2;
  one.band = {1, 1};
  one.pairs = {{0, 1}};
  LabelMask same = make_mask(1, 2, 4);
  Tensor ortho = Tensor::from_data({2, 1, 2}, {1.0, 0.0, 0.0, 1.0});
  CHECK(bbl_loss(ortho, one, same, p).value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // 3-pair hand case: mean of per-pair bce-with-logits
  BoundaryBand three;
  three.h = 1;
  three.w = 3;
  three.band = {1, 1, 1};
  three.pairs = {{0, 1}, {1, 2}, {2, 0}};
  LabelMask labs = make_mask(1, 3);
  labs.labels = {0, 0, 2};
  Tensor toks = Tensor::from_data({2, 1, 3}, oracle::random_vec(6, rng));
  double expect = 0.0;
  for (const auto& [i, j] : three.pairs) {
    double u0 = toks.data()[static_cast<std::size_t>(i)], u1 = toks.data()[3 + static_cast<std::size_t>(i)];
    double v0 = toks.data()[static_cast<std::size_t>(j)], v1 = toks.data()[3 + static_cast<std::size_t>(j)];
    const double cos = (u0 * v0 + u1 * v1) /
                       (std::sqrt(u0 * u0 + u1 * u1) * std::sqrt(v0 * v0 + v1 * v1));
    const double s = 10.0 * cos;
    const double t = labs.labels[static_cast<std::size_t>(i)] == labs.labels[static_cast<std::size_t>(j)] ? 1.0 : 0.0;
    expect += std::max(s, 0.0) - s * t + std::log1p(std::exp(-std::abs(s)));
  }
  expect /= 3.0;
  CHECK(bbl_loss(toks, three, labs, p).value() == doctest::Approx(expect).epsilon(1e-12));

  // any pair set with finite scores has strictly positive loss
  CHECK(bbl_loss(toks, three, labs, p).value() > 0.0);
}

TEST_CASE("bbl_loss gradients match finite differences") {
  ParamStore store;
  BblParams p = test_bbl(store);
  SplitMix64 rng(17);
  LabelMask gt = make_mask(2, 2);
  gt.labels = {0, 0, 1, 1};
  BoundaryBand bb = build_band(gt, 1, 1);
  REQUIRE(!bb.pairs.empty());
  Tensor tokens = Tensor::from_data({3, 2, 2}, oracle::random_vec(12, rng), true);
  auto fwd = [&] { return bbl_loss(tokens, bb, gt, p); };
  CHECK(oracle::gradcheck(fwd, {tokens, p.w_s, p.b_s}) < 1e-4);
}

TEST_CASE("lambda schedule endpoints and monotonicity") {
  LossConfig cfg;  // start 0.01, end 0.1, ramp 0.5
  CHECK(lambda_bbl(cfg, 0.0) == doctest::Approx(0.01).epsilon(1e-15));
  CHECK(lambda_bbl(cfg, 0.5) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(lambda_bbl(cfg, 0.75) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(lambda_bbl(cfg, 1.0) == doctest::Approx(0.1).epsilon(1e-15));
  double prev = -1.0;
  for (double t = 0.0; t <= 1.0; t += 0.05) {
    const double l = lambda_bbl(cfg, t);
    CHECK(l >= prev);
    prev = l;
  }
  LossConfig bad;
  bad.bbl_start = 0.2;
  bad.bbl_end = 0.1;
  CHECK_THROWS_AS(bad.validate(), ShapeError);
}

TEST_CASE("total_loss weighted sum") {
  LossConfig cfg;
  Tensor seg = Tensor::scalar(1.0);
  Tensor diag = Tensor::scalar(2.0);
  Tensor bbl = Tensor::scalar(3.0);
  CHECK(total_loss(seg, diag, bbl, cfg, 1.0).value() == doctest::Approx(1.5).epsilon(1e-12));
  // undefined bbl (component off) leaves only seg + lambda_diag * diag
  CHECK(total_loss(seg, diag, Tensor(), cfg, 1.0).value() ==
        doctest::Approx(1.2).epsilon(1e-12));
}

TEST_CASE("ignored pixels contribute zero gradient to all three losses") {
  ParamStore store;
  BblParams p = test_bbl(store);
  SplitMix64 rng(23);
  LabelMask gt = make_mask(2, 4);
  gt.labels = {0, kIgnoreValue, 1, 1, 2, 2, kIgnoreValue, 3};
  LabelMask gt_ds = gt;  // pretend it is already at lattice resolution

  Tensor logits = Tensor::from_data({6, 2, 4}, oracle::random_vec(48, rng));
  Tensor attn = Tensor::from_data({6, 2, 4}, oracle::random_vec(48, rng));
  Tensor tokens = Tensor::from_data({3, 2, 4}, oracle::random_vec(24, rng));
  const BoundaryBand bb = build_band(gt_ds, 1, 1);
  LossConfig cfg;
  const double base_seg = seg_loss(logits, gt).value();
  const double base_diag = diag_loss(attn, gt_ds).value();
  const double base_bbl = bbl_loss(tokens, bb, gt_ds, p).value();

  // perturb logits and attention at every ignored pixel
  Tensor logits2 = Tensor::from_data({6, 2, 4}, logits.vec());
  Tensor attn2 = Tensor::from_data({6, 2, 4}, attn.vec());
  for (int c = 0; c < 6; ++c)
    for (int i = 0; i < 8; ++i)
      if (gt.labels[static_cast<std::size_t>(i)] == kIgnoreValue) {
        logits2.data()[static_cast<std::size_t>(c) * 8 + static_cast<std::size_t>(i)] += 17.0;
        attn2.data()[static_cast<std::size_t>(c) * 8 + static_cast<std::size_t>(i)] -= 4.0;
      }
  CHECK(seg_loss(logits2, gt).value() == base_seg);
  CHECK(diag_loss(attn2, gt_ds).value() == base_diag);
  CHECK(bbl_loss(tokens, bb, gt_ds, p).value() == base_bbl);  // reads no logits at all
}
