#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "oracles.hpp"
#include "terra/harness.hpp"

using namespace terra;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_cfg(std::uint64_t seed = 7) {
  RunConfig c;
  c.seed = seed;
  c.epochs = 2;
  c.eval_every = 1;
  c.encoder.stage_channels = {4, 8, 12, 16};
  c.encoder.stage_depths = {1, 1, 1, 1};
  c.encoder.heads_per_stage = {1, 2, 4, 8};
  c.encoder.mlp_ratio = 2;
  c.decoder.width = 8;
  c.decoder.heads = 2;
  c.capr.hidden = 8;
  c.data.height = 32;
  c.data.width = 32;
  c.data.train_count = 2;
  c.data.val_count = 1;
  return c;
}

bool params_equal(const ParamStore& a, const ParamStore& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.items()[i].first != b.items()[i].first) return false;
    if (a.items()[i].second.vec() != b.items()[i].second.vec()) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("config json round trip, strict keys, hashing") {
  RunConfig c = tiny_cfg();
  const std::string text = c.to_json();
  RunConfig back = RunConfig::from_json(text);
  CHECK(back.to_json() == text);
  CHECK(back.hash() == c.hash());

  CHECK_THROWS_AS(RunConfig::from_json("{\"seeed\": 2}"), ArtifactError);
  CHECK_THROWS_AS(RunConfig::from_json("{\"capr\": {\"kk\": 2}}"), ArtifactError);
  CHECK_THROWS_AS(RunConfig::from_json("not json"), ArtifactError);
  // defaults apply for absent keys
  RunConfig d = RunConfig::from_json("{}");
  CHECK(d.decoder.width == 128);
  CHECK(d.optimizer.lr == doctest::Approx(3e-4));
  CHECK(d.optimizer.weight_decay == doctest::Approx(1e-4));
}

TEST_CASE("model forward shapes and determinism") {
  const RunConfig cfg = tiny_cfg();
  TerraModel m1 = build_model(cfg);
  TerraModel m2 = build_model(cfg);
  CHECK(params_equal(m1.params, m2.params));

  const Sample s = generate(cfg.data.scene_spec(cfg.seed), 0);
  const ForwardOutput f1 = forward_image(m1, s.image, 32, 32);
  const ForwardOutput f2 = forward_image(m2, s.image, 32, 32);
  CHECK(f1.dec.logits.shape() == Shape{6, 2, 2});
  CHECK(f1.logits_up.shape() == Shape{6, 32, 32});
  for (std::size_t i = 0; i < f1.logits_final.size(); ++i)
    CHECK(f1.logits_final.data()[i] == f2.logits_final.data()[i]);
}

TEST_CASE("epochs = 0 leaves the checkpoint at initialization") {
  RunConfig cfg = tiny_cfg();
  cfg.epochs = 0;
  TerraModel m = build_model(cfg);
  TerraModel init = build_model(cfg);
  AdamW opt(cfg.optimizer, m.params);
  const auto data = make_train_data(cfg);
  train(m, opt, data, {});
  CHECK(params_equal(m.params, init.params));
}

TEST_CASE("fixed seed and config give bit-identical training twice") {
  const RunConfig cfg = tiny_cfg();
  TerraModel a = build_model(cfg);
  TerraModel b = build_model(cfg);
  AdamW oa(cfg.optimizer, a.params);
  AdamW ob(cfg.optimizer, b.params);
  const auto data = make_train_data(cfg);
  const auto val = make_val_data(cfg);
  const TrainResult ra = train(a, oa, data, val);
  const TrainResult rb = train(b, ob, data, val);
  CHECK(train_log_csv(ra.log) == train_log_csv(rb.log));
  CHECK(params_equal(a.params, b.params));
}

TEST_CASE("one small step on one sample strictly decreases the loss") {
  RunConfig cfg = tiny_cfg(11);
  cfg.optimizer.lr = 1e-4;
  cfg.optimizer.weight_decay = 0.0;
  cfg.data.train_count = 1;
  TerraModel m = build_model(cfg);
  AdamW opt(cfg.optimizer, m.params);
  const auto data = make_train_data(cfg);
  const Sample& s = data[0];

  auto loss_now = [&] {
    const ForwardOutput f = forward_image(m, s.image, s.gt_noisy.h, s.gt_noisy.w);
    return training_loss(m, f, s.gt_noisy, 0.0).value();
  };
  const double before = loss_now();
  {
    GradTape tape;
    TapeScope scope(tape);
    const ForwardOutput f = forward_image(m, s.image, s.gt_noisy.h, s.gt_noisy.w);
    Tensor loss = training_loss(m, f, s.gt_noisy, 0.0);
    tape.backward(loss);
  }
  opt.step(m.params);
  m.params.zero_grads();
  CHECK(loss_now() < before);
}

TEST_CASE("training aborts on a non-finite loss naming the step") {
  RunConfig cfg = tiny_cfg(13);
  cfg.epochs = 1;
  TerraModel m = build_model(cfg);
  // poison one weight so the forward overflows; keep finite checks off so
  // the loss-level guard is the one that fires
  Tensor* w = m.params.find("decoder.cls.w");
  REQUIRE(w != nullptr);
  w->data()[0] = 1e306;
  set_finite_checks(false);
  AdamW opt(cfg.optimizer, m.params);
  const auto data = make_train_data(cfg);
  try {
    train(m, opt, data, {});
    set_finite_checks(true);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    set_finite_checks(true);
    const std::string msg = e.what();
    CHECK(msg.find("epoch 0") != std::string::npos);
    CHECK(msg.find("step") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip is bit-exact") {
  const RunConfig cfg = tiny_cfg(17);
  TerraModel m = build_model(cfg);
  AdamW opt(cfg.optimizer, m.params);
  const auto data = make_train_data(cfg);
  const auto val = make_val_data(cfg);
  train(m, opt, data, val);

  const Sample& s = data[0];
  const ForwardOutput before = forward_image(m, s.image, 32, 32);
  const MetricReport rep_before = evaluate(m, data, nullptr);

  const fs::path path = fs::temp_directory_path() / "terra_ckpt_test.bin";
  save_checkpoint(path.string(), m, opt, 2);
  LoadedCheckpoint loaded = load_checkpoint(path.string());
  CHECK(loaded.epoch == 2);
  CHECK(params_equal(m.params, loaded.model.params));
  CHECK(loaded.opt.steps() == opt.steps());

  const ForwardOutput after = forward_image(loaded.model, s.image, 32, 32);
  for (std::size_t i = 0; i < before.logits_final.size(); ++i)
    CHECK(before.logits_final.data()[i] == after.logits_final.data()[i]);

  const MetricReport rep_after = evaluate(loaded.model, data, nullptr);
  CHECK(rep_before.miou == rep_after.miou);
  CHECK(rep_before.aacc == rep_after.aacc);
  CHECK(rep_before.biou == rep_after.biou);
  fs::remove(path);
}

TEST_CASE("evaluate is deterministic and respects class counts") {
  const RunConfig cfg = tiny_cfg(19);
  TerraModel m = build_model(cfg);
  const auto data = make_train_data(cfg);
  std::vector<ReportRow> rows1, rows2;
  const MetricReport r1 = evaluate(m, data, &rows1);
  const MetricReport r2 = evaluate(m, data, &rows2);
  CHECK(r1.miou == r2.miou);
  CHECK(r1.biou == r2.biou);
  REQUIRE(rows1.size() == data.size());
  CHECK(report_csv(rows1, r1) == report_csv(rows2, r2));
}

TEST_CASE("capr-off evaluation equals base-logit argmax bit-exactly") {
  RunConfig cfg = tiny_cfg(23);
  cfg.ablation.capr = false;
  TerraModel m = build_model(cfg);
  const Sample s = generate(cfg.data.scene_spec(cfg.seed), 0);
  const ForwardOutput f = forward_image(m, s.image, 32, 32);
  CHECK(f.logits_final.node().get() == f.logits_up.node().get());
  const LabelMask a = argmax_mask(f.logits_final);
  const LabelMask b = argmax_mask(f.logits_up);
  CHECK(a.labels == b.labels);
  CHECK(f.mlp_invocations == 0);
}

TEST_CASE("disabled components are structurally absent from the tape") {
  const Sample s = generate(tiny_cfg().data.scene_spec(7), 0);

  auto scopes_for = [&](AblationFlags flags) {
    RunConfig cfg = tiny_cfg();
    cfg.ablation = flags;
    TerraModel m = build_model(cfg);
    GradTape tape;
    std::map<std::string, std::size_t> seen;
    {
      TapeScope scope(tape);
      const ForwardOutput f = forward_image(m, s.image, 32, 32);
      Tensor loss = training_loss(m, f, s.gt_noisy, 0.5);
      (void)loss;
      seen = tape.scope_census();
    }
    std::set<std::string> out;
    for (const auto& [name, count] : seen) out.insert(name);
    return out;
  };

  auto contains_part = [](const std::set<std::string>& scopes, const char* part) {
    for (const auto& s2 : scopes)
      if (s2.find(part) != std::string::npos) return true;
    return false;
  };

  const auto baseline = scopes_for({false, false, false, false});
  CHECK(!contains_part(baseline, "global_attend"));
  CHECK(!contains_part(baseline, "local_refine"));
  CHECK(!contains_part(baseline, "hr_cross_attend"));
  CHECK(!contains_part(baseline, "texture_branch"));
  CHECK(!contains_part(baseline, "gated_mix"));
  CHECK(!contains_part(baseline, "capr"));
  CHECK(!contains_part(baseline, "bbl"));
  CHECK(contains_part(baseline, "fuse_bottleneck"));
  CHECK(contains_part(baseline, "seg_loss"));
  CHECK(contains_part(baseline, "diag_loss"));

  const auto gltr = scopes_for({true, false, false, false});
  CHECK(contains_part(gltr, "global_attend"));
  CHECK(contains_part(gltr, "local_refine"));
  CHECK(!contains_part(gltr, "hr_cross_attend"));

  const auto rad = scopes_for({true, true, false, false});
  CHECK(contains_part(rad, "hr_cross_attend"));
  CHECK(contains_part(rad, "texture_branch"));
  CHECK(contains_part(rad, "gated_mix"));
  CHECK(!contains_part(rad, "capr"));

  const auto capr = scopes_for({true, true, true, false});
  CHECK(contains_part(capr, "capr_refine"));
  CHECK(!contains_part(capr, "bbl"));

  const auto full = scopes_for({true, true, true, true});
  CHECK(contains_part(full, "bbl_loss"));
}

TEST_CASE("enabling capr adds only capr ops to the tape census") {
  const Sample s = generate(tiny_cfg().data.scene_spec(7), 0);
  auto census_for = [&](bool capr_on) {
    RunConfig cfg = tiny_cfg();
    cfg.ablation.capr = capr_on;
    TerraModel m = build_model(cfg);
    GradTape tape;
    std::map<std::string, std::size_t> census;
    std::uint64_t invocations = 0;
    {
      TapeScope scope(tape);
      const ForwardOutput f = forward_image(m, s.image, 32, 32);
      Tensor loss = training_loss(m, f, s.gt_noisy, 0.5);
      (void)loss;
      census = tape.scope_census();
      invocations = f.mlp_invocations;
    }
    return std::pair{census, invocations};
  };
  const auto [off, inv_off] = census_for(false);
  const auto [on, inv_on] = census_for(true);
  CHECK(inv_off == 0);
  CHECK(inv_on == static_cast<std::uint64_t>(capr_effective_k(tiny_cfg().capr, 32 * 32)));
  for (const auto& [scope, count] : on) {
    const auto it = off.find(scope);
    if (it == off.end()) {
      CHECK(scope.find("capr") != std::string::npos);  // new scopes are capr-only
    } else {
      CHECK(it->second == count);  // shared scopes unchanged
    }
  }
}

TEST_CASE("gradcheck passes on a tiny full model and catches corruption") {
  RunConfig cfg = tiny_cfg(29);
  const GradCheckReport report = gradcheck(cfg, 3);
  INFO(gradcheck_text(report));
  CHECK(report.pass);
  CHECK(report.max_rel_err < 1e-4);
  CHECK(!report.groups.empty());

  // negative control: a corrupted gradient must exceed the tolerance
  const double fake_analytic = 1.0, fake_fd = 1.1;
  const double rel = std::abs(fake_analytic - fake_fd) /
                     std::max({std::abs(fake_analytic), std::abs(fake_fd), 1.0});
  CHECK(rel > report.tolerance);
}

TEST_CASE("gradcheck passes trivially with every toggle off") {
  RunConfig cfg = tiny_cfg(31);
  cfg.ablation = {false, false, false, false};
  const GradCheckReport report = gradcheck(cfg, 3);
  CHECK(report.pass);
}

TEST_CASE("ablate runs the five variants and reports csv") {
  RunConfig cfg = tiny_cfg(37);
  cfg.epochs = 1;
  cfg.data.train_count = 1;
  cfg.data.val_count = 0;
  const auto rows = ablate(cfg);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].variant == "baseline");
  CHECK(rows[4].variant == "+bbl");
  const std::string csv = ablation_csv(rows);
  CHECK(csv.find("variant,miou,biou,aacc") == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
}
