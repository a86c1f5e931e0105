#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "terra/encoder.hpp"

using namespace terra;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.stage_channels = {4, 8, 12, 16};
  cfg.stage_depths = {1, 1, 1, 1};
  cfg.heads_per_stage = {1, 2, 4, 8};
  cfg.mlp_ratio = 2;
  return cfg;
}

Tensor random_image(int h, int w, SplitMix64& rng) {
  return Tensor::from_data({3, h, w}, oracle::random_vec(3 * static_cast<std::size_t>(h) * w, rng, 0.0, 1.0));
}

}  // namespace

TEST_CASE("patch_embed: stride-4 tokenization of a 32x32 image is 8x8") {
  ParamStore store;
  EncoderParams p = make_encoder(tiny_config(), 1, store);
  SplitMix64 rng(3);
  Tensor out = patch_embed(p, random_image(32, 32, rng));
  CHECK(out.shape() == Shape{4, 8, 8});
}

TEST_CASE("patch_embed: zero image and zero bias give zero output") {
  ParamStore store;
  EncoderParams p = make_encoder(tiny_config(), 1, store);
  Tensor out = patch_embed(p, Tensor::zeros({3, 32, 32}));
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.data()[i] == 0.0);
}

TEST_CASE("patch_embed: impulse input matches the direct convolution oracle") {
  ParamStore store;
  EncoderParams p = make_encoder(tiny_config(), 7, store);
  Tensor img = Tensor::zeros({3, 32, 32});
  img.data()[1 * 32 * 32 + 13 * 32 + 17] = 1.0;  // single impulse in channel 1
  Tensor out = patch_embed(p, img);
  auto ref = oracle::conv2d(img.vec(), 3, 32, 32, p.embed_w.vec(), 4, 7, 7, p.embed_b.vec(),
                            /*stride=*/4, /*pad=*/3);
  REQUIRE(out.size() == ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(out.data()[i] == doctest::Approx(ref[i]).epsilon(1e-14));
}

TEST_CASE("patch_embed: indivisible input dims name the required multiple") {
  ParamStore store;
  EncoderParams p = make_encoder(tiny_config(), 1, store);
  try {
    patch_embed(p, Tensor::zeros({3, 48, 40}));  // 40 not divisible by 32? 48 neither
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("32") != std::string::npos);
  }
}

TEST_CASE("patch_merge: channel widening and halving, constant preservation, oracle") {
  SplitMix64 rng(11);
  // 64x8x8 -> 160x4x4 with the stage-3 channel pair from the defaults
  Tensor x = Tensor::from_data({64, 8, 8}, oracle::random_vec(64 * 64, rng));
  Tensor w = Tensor::from_data({160, 64, 2, 2}, oracle::random_vec(160 * 64 * 4, rng));
  Tensor b = Tensor::zeros({160});
  Tensor out = patch_merge(x, w, b);
  CHECK(out.shape() == Shape{160, 4, 4});

  // averaging-initialized kernel maps a constant field to the same constant
  Tensor c = Tensor::full({2, 4, 4}, 3.25);
  std::vector<double> avg(2 * 2 * 2 * 2, 0.0);
  for (int oc = 0; oc < 2; ++oc)
    for (int k = 0; k < 4; ++k) avg[static_cast<std::size_t>(oc) * 8 + static_cast<std::size_t>(oc) * 4 + k] = 0.25;
  Tensor wavg = Tensor::from_data({2, 2, 2, 2}, avg);
  Tensor cout = patch_merge(c, wavg, Tensor::zeros({2}));
  for (std::size_t i = 0; i < cout.size(); ++i) CHECK(cout.data()[i] == doctest::Approx(3.25).epsilon(1e-14));

  // random 4x4 case against the stride-2 loop oracle
  Tensor x2 = Tensor::from_data({3, 4, 4}, oracle::random_vec(48, rng));
  Tensor w2 = Tensor::from_data({5, 3, 2, 2}, oracle::random_vec(60, rng));
  Tensor b2 = Tensor::from_data({5}, oracle::random_vec(5, rng));
  Tensor o2 = patch_merge(x2, w2, b2);
  auto ref = oracle::conv2d(x2.vec(), 3, 4, 4, w2.vec(), 5, 2, 2, b2.vec(), 2, 0);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(o2.data()[i] - ref[i]) < 1e-13);

  CHECK_THROWS_AS(patch_merge(Tensor::zeros({2, 5, 4}), wavg, Tensor::zeros({2})), ShapeError);
}

TEST_CASE("encode: stride table shapes for 3x64x96") {
  ParamStore store;
  EncoderConfig cfg;  // paper-default channels {32,64,160,256}
  EncoderParams p = make_encoder(cfg, 5, store);
  SplitMix64 rng(21);
  FeaturePyramid pyr = encode(p, random_image(64, 96, rng));
  CHECK(pyr.f1.shape() == Shape{32, 16, 24});
  CHECK(pyr.f2.shape() == Shape{64, 8, 12});
  CHECK(pyr.f3.shape() == Shape{160, 4, 6});
  CHECK(pyr.f4.shape() == Shape{256, 2, 3});
}

TEST_CASE("encode: shape law holds across valid input sizes") {
  ParamStore store;
  EncoderParams p = make_encoder(tiny_config(), 5, store);
  SplitMix64 rng(23);
  for (auto [h, w] : {std::pair{32, 32}, std::pair{64, 32}, std::pair{96, 64}}) {
    FeaturePyramid pyr = encode(p, random_image(h, w, rng));
    CHECK(pyr.f1.shape() == Shape{4, h / 4, w / 4});
    CHECK(pyr.f2.shape() == Shape{8, h / 8, w / 8});
    CHECK(pyr.f3.shape() == Shape{12, h / 16, w / 16});
    CHECK(pyr.f4.shape() == Shape{16, h / 32, w / 32});
  }
}

TEST_CASE("encode: depth-0 stages reduce to the pure embed/merge chain") {
  EncoderConfig cfg = tiny_config();
  cfg.stage_depths = {0, 0, 0, 0};
  ParamStore store;
  EncoderParams p = make_encoder(cfg, 9, store);
  SplitMix64 rng(31);
  Tensor img = random_image(32, 64, rng);
  FeaturePyramid pyr = encode(p, img);

  Tensor chain = patch_embed(p, img);
  for (std::size_t i = 0; i < chain.size(); ++i) CHECK(pyr.f1.data()[i] == chain.data()[i]);
  chain = patch_merge(chain, p.merge_w[0], p.merge_b[0]);
  for (std::size_t i = 0; i < chain.size(); ++i) CHECK(pyr.f2.data()[i] == chain.data()[i]);
}

TEST_CASE("encode: zeroing residual output projections gives the embed/merge chain") {
  ParamStore store;
  EncoderParams p = make_encoder(tiny_config(), 13, store);
  for (auto& stage : p.blocks)
    for (auto& blk : stage) {
      std::fill(blk.wo.vec().begin(), blk.wo.vec().end(), 0.0);
      std::fill(blk.mlp_w2.vec().begin(), blk.mlp_w2.vec().end(), 0.0);
    }
  SplitMix64 rng(37);
  Tensor img = random_image(32, 32, rng);
  FeaturePyramid pyr = encode(p, img);

  EncoderConfig plain_cfg = tiny_config();
  plain_cfg.stage_depths = {0, 0, 0, 0};
  ParamStore store2;
  EncoderParams plain = make_encoder(plain_cfg, 13, store2);  // same seed: same embed/merge weights
  FeaturePyramid ref = encode(plain, img);
  for (std::size_t i = 0; i < ref.f4.size(); ++i) CHECK(pyr.f4.data()[i] == ref.f4.data()[i]);
  for (std::size_t i = 0; i < ref.f1.size(); ++i) CHECK(pyr.f1.data()[i] == ref.f1.data()[i]);
}

TEST_CASE("encode: gradient of sum(f4) w.r.t. the image matches finite differences") {
  ParamStore store;
  EncoderParams p = make_encoder(tiny_config(), 17, store);
  SplitMix64 rng(41);
  Tensor img = random_image(32, 32, rng);
  img.set_requires_grad(true);
  auto fwd = [&] { return sum_all(encode(p, img).f4); };
  CHECK(oracle::gradcheck_sample(fwd, {img}, 24, rng) < 1e-4);
}
