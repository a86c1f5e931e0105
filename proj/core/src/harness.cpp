#include "terra/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace terra {

TerraModel build_model(const RunConfig& cfg) {
  cfg.validate();
  TerraModel m;
  m.cfg = cfg;
  m.encoder = make_encoder(cfg.encoder, cfg.seed, m.params);
  m.decoder = make_decoder(cfg.decoder, cfg.encoder.stage_channels, cfg.ablation, cfg.seed,
                           m.params);
  if (cfg.ablation.capr)
    m.capr = make_capr(cfg.capr, cfg.encoder.stage_channels[0], cfg.decoder.num_classes,
                       cfg.seed, m.params);
  if (cfg.ablation.bbl) m.bbl = make_bbl(cfg.seed, m.params);
  return m;
}

ForwardOutput forward_image(const TerraModel& m, const Tensor& image, int out_h, int out_w) {
  ForwardOutput out;
  const FeaturePyramid pyr = encode(m.encoder, image);
  out.dec = decode(m.decoder, pyr);
  out.logits_up = upsample_logits(out.dec.logits, out_h, out_w);
  if (m.capr.has_value()) {
    Tensor f_hr_up;
    {
      OpScope scope("capr_hr_upsample");
      f_hr_up = bilinear_resize(pyr.f1, out_h, out_w);
    }
    CaprStats stats;
    out.logits_final = capr_apply(*m.capr, out.logits_up, f_hr_up, &stats);
    out.mlp_invocations = stats.mlp_invocations;
  } else {
    out.logits_final = out.logits_up;
  }
  return out;
}

LabelMask argmax_mask(const Tensor& logits) {
  require(logits.ndim() == 3, "argmax_mask expects [Cc,H,W]");
  const int cc = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  const std::size_t n = static_cast<std::size_t>(h) * w;
  LabelMask mask = make_mask(h, w);
  const double* pl = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    double best_v = pl[i];
    for (int c = 1; c < cc; ++c) {
      const double v = pl[static_cast<std::size_t>(c) * n + i];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    mask.labels[i] = static_cast<std::uint8_t>(best);
  }
  return mask;
}

Tensor training_loss(const TerraModel& m, const ForwardOutput& f, const LabelMask& gt_noisy,
                     double progress, StepLosses* parts) {
  const LabelMask gt_ds = downsample_majority(gt_noisy, 16);
  Tensor seg = seg_loss(f.logits_final, gt_noisy);
  Tensor diag = diag_loss(f.dec.class_attn, gt_ds);
  Tensor bbl;  // undefined when the component is off
  double bbl_value = 0.0;
  if (m.bbl.has_value()) {
    const BoundaryBand band = build_band(gt_ds, m.cfg.losses.r_band, m.cfg.losses.r_ring);
    bbl = bbl_loss(f.dec.tokens, band, gt_ds, *m.bbl);
    bbl_value = bbl.value();
  }
  Tensor total = total_loss(seg, diag, bbl, m.cfg.losses, progress);
  if (parts != nullptr) {
    parts->seg = seg.value();
    parts->diag = diag.value();
    parts->bbl = bbl_value;
    parts->lambda = lambda_bbl(m.cfg.losses, progress);
    parts->total = total.value();
  }
  return total;
}

// ---- optimizer ---------------------------------------------------------

AdamW::AdamW(const OptimizerConfig& cfg, const ParamStore& store) : cfg_(cfg) {
  cfg.validate();
  m_.reserve(store.size());
  v_.reserve(store.size());
  for (const auto& [name, t] : store.items()) {
    m_.emplace_back(t.size(), 0.0);
    v_.emplace_back(t.size(), 0.0);
  }
}

void AdamW::step(ParamStore& store) {
  require(m_.size() == store.size(), "optimizer state does not match parameter store");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < store.size(); ++p) {
    Tensor& t = store.items()[p].second;
    double* x = t.data();
    std::vector<double>& mp = m_[p];
    std::vector<double>& vp = v_[p];
    const bool has_grad = t.has_grad();
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double g = has_grad ? t.grad()[i] : 0.0;
      mp[i] = cfg_.beta1 * mp[i] + (1.0 - cfg_.beta1) * g;
      vp[i] = cfg_.beta2 * vp[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = mp[i] / bc1;
      const double vhat = vp[i] / bc2;
      x[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * x[i]);
    }
  }
}

// ---- data --------------------------------------------------------------

std::vector<Sample> make_train_data(const RunConfig& cfg) {
  if (cfg.data.kind == "directory") {
    const RemapTable table = RemapTable::load(cfg.data.remap);
    return load_dir(cfg.data.images, cfg.data.masks, table);
  }
  const SceneSpec spec = cfg.data.scene_spec(cfg.seed);
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(cfg.data.train_count));
  for (int i = 0; i < cfg.data.train_count; ++i) out.push_back(generate(spec, i));
  return out;
}

std::vector<Sample> make_val_data(const RunConfig& cfg) {
  if (cfg.data.kind == "directory") return {};
  const SceneSpec spec = cfg.data.scene_spec(cfg.seed);
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(cfg.data.val_count));
  // val indices continue after the train block
  for (int i = 0; i < cfg.data.val_count; ++i)
    out.push_back(generate(spec, cfg.data.train_count + i));
  return out;
}

// ---- training ----------------------------------------------------------

std::string train_log_csv(const std::vector<TrainLogRow>& log) {
  std::ostringstream os;
  os << "epoch,loss_total,loss_seg,loss_diag,loss_bbl,lambda_bbl,val_miou,val_biou\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  for (const TrainLogRow& r : log) {
    os << r.epoch << "," << num(r.loss_total) << "," << num(r.loss_seg) << ","
       << num(r.loss_diag) << "," << num(r.loss_bbl) << "," << num(r.lambda_bbl) << ",";
    if (r.has_val)
      os << num(r.val_miou) << "," << num(r.val_biou);
    else
      os << ",";
    os << "\n";
  }
  return os.str();
}

TrainResult train(TerraModel& m, AdamW& opt, const std::vector<Sample>& train_data,
                  const std::vector<Sample>& val_data) {
  require(!train_data.empty() || m.cfg.epochs == 0, "train: no training data");
  TrainResult result;
  const int epochs = m.cfg.epochs;
  const int batch = m.cfg.batch_size;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const double progress = epochs > 1 ? static_cast<double>(epoch) / (epochs - 1) : 1.0;
    TrainLogRow row;
    row.epoch = epoch;
    row.lambda_bbl = lambda_bbl(m.cfg.losses, progress);
    double total_sum = 0.0, seg_sum = 0.0, diag_sum = 0.0, bbl_sum = 0.0;
    std::size_t step_in_epoch = 0;
    for (std::size_t start = 0; start < train_data.size();
         start += static_cast<std::size_t>(batch), ++step_in_epoch) {
      const std::size_t stop = std::min(train_data.size(), start + static_cast<std::size_t>(batch));
      GradTape tape;
      Tensor batch_loss;
      StepLosses parts;
      // per-op finite scans are skipped in the hot loop; the per-step loss
      // check below still catches divergence
      const bool checks_were_on = finite_checks_enabled();
      set_finite_checks(false);
      {
        TapeScope scope(tape);
        std::vector<Tensor> losses;
        for (std::size_t i = start; i < stop; ++i) {
          const Sample& s = train_data[i];
          ForwardOutput f = forward_image(m, s.image, s.gt_noisy.h, s.gt_noisy.w);
          StepLosses one;
          losses.push_back(training_loss(m, f, s.gt_noisy, progress, &one));
          parts.seg += one.seg;
          parts.diag += one.diag;
          parts.bbl += one.bbl;
        }
        batch_loss = losses.size() == 1 ? losses[0] : mean_all(concat(losses, 0));
      }
      const double denom = static_cast<double>(stop - start);
      parts.seg /= denom;
      parts.diag /= denom;
      parts.bbl /= denom;
      const double loss_value = batch_loss.value();
      if (!std::isfinite(loss_value)) {
        set_finite_checks(checks_were_on);
        throw NumericError(cat("non-finite training loss at epoch ", epoch, ", step ",
                               step_in_epoch, " (samples ", start, "..", stop - 1, ")"));
      }
      tape.backward(batch_loss);
      set_finite_checks(checks_were_on);
      opt.step(m.params);
      m.params.zero_grads();
      total_sum += loss_value;
      seg_sum += parts.seg;
      diag_sum += parts.diag;
      bbl_sum += parts.bbl;
    }
    const double steps = std::max<std::size_t>(1, step_in_epoch) * 1.0;
    row.loss_total = total_sum / steps;
    row.loss_seg = seg_sum / steps;
    row.loss_diag = diag_sum / steps;
    row.loss_bbl = bbl_sum / steps;

    const bool has_targets = m.cfg.target_miou > 0.0 || m.cfg.target_biou > 0.0;
    const bool eval_now = (epoch + 1) % m.cfg.eval_every == 0 || epoch + 1 == epochs;
    if (eval_now && (!val_data.empty() || has_targets)) {
      const std::vector<Sample>& probe = val_data.empty() ? train_data : val_data;
      const MetricReport rep = evaluate(m, probe, nullptr);
      row.has_val = true;
      row.val_miou = rep.miou;
      row.val_biou = rep.biou;
      if (has_targets) {
        // early-stop targets are defined on the training set
        const MetricReport train_rep =
            val_data.empty() ? rep : evaluate(m, train_data, nullptr);
        if (train_rep.miou >= m.cfg.target_miou && train_rep.biou >= m.cfg.target_biou) {
          result.reached_targets = true;
          result.log.push_back(row);
          result.epochs_run = epoch + 1;
          return result;
        }
      }
    }
    result.log.push_back(row);
    result.epochs_run = epoch + 1;
  }
  return result;
}

MetricReport evaluate(const TerraModel& m, const std::vector<Sample>& data,
                      std::vector<ReportRow>* rows) {
  require(!data.empty(), "evaluate: empty dataset");
  std::vector<LabelMask> preds;
  preds.reserve(data.size());
  for (const Sample& s : data) {
    require(m.cfg.decoder.num_classes == s.gt_clean.class_count,
            "evaluate: model has ", m.cfg.decoder.num_classes, " classes but data has ",
            s.gt_clean.class_count);
    const ForwardOutput f = forward_image(m, s.image, s.gt_clean.h, s.gt_clean.w);
    preds.push_back(argmax_mask(f.logits_final));
  }
  std::vector<const LabelMask*> pp, gg;
  for (std::size_t i = 0; i < data.size(); ++i) {
    pp.push_back(&preds[i]);
    gg.push_back(&data[i].gt_clean);
  }
  const MetricReport agg = evaluate_set(pp, gg, m.cfg.metrics.biou_band);
  if (rows != nullptr) {
    rows->clear();
    for (std::size_t i = 0; i < data.size(); ++i)
      rows->push_back(
          {data[i].name, evaluate_pair(preds[i], data[i].gt_clean, m.cfg.metrics.biou_band)});
  }
  return agg;
}

// ---- ablation ----------------------------------------------------------

std::vector<AblationRow> ablate(const RunConfig& cfg) {
  const AblationFlags variants[5] = {
      {false, false, false, false},  // baseline
      {true, false, false, false},   // + gltr
      {true, true, false, false},    // + rad
      {true, true, true, false},     // + capr
      {true, true, true, true},      // + bbl
  };
  const char* names[5] = {"baseline", "+gltr", "+rad", "+capr", "+bbl"};
  std::vector<AblationRow> rows;
  for (int v = 0; v < 5; ++v) {
    RunConfig variant = cfg;
    variant.ablation = variants[v];
    TerraModel model = build_model(variant);
    AdamW opt(variant.optimizer, model.params);
    const std::vector<Sample> train_data = make_train_data(variant);
    const std::vector<Sample> val_data = make_val_data(variant);
    train(model, opt, train_data, val_data);
    rows.push_back({names[v], evaluate(model, train_data, nullptr)});
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "variant,miou,biou,aacc\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (const AblationRow& r : rows)
    os << r.variant << "," << num(r.report.miou) << "," << num(r.report.biou) << ","
       << num(r.report.aacc) << "\n";
  return os.str();
}

// ---- gradcheck ---------------------------------------------------------

GradCheckReport gradcheck(const RunConfig& cfg, int samples_per_group) {
  GradCheckReport report;
  TerraModel model = build_model(cfg);
  // break the zero-init identities so every path carries signal
  for (auto& [name, t] : model.params.items()) {
    SplitMix64 rng = param_rng(cfg.seed ^ 0xBADC0DEULL, name);
    bool all_zero = true;
    for (std::size_t i = 0; i < t.size(); ++i)
      if (t.data()[i] != 0.0) all_zero = false;
    if (all_zero)
      for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-0.05, 0.05);
  }
  const Sample sample = generate(cfg.data.scene_spec(cfg.seed), 0);
  const double progress = 0.75;

  auto loss_value = [&]() {
    const ForwardOutput f =
        forward_image(model, sample.image, sample.gt_noisy.h, sample.gt_noisy.w);
    return training_loss(model, f, sample.gt_noisy, progress);
  };

  // analytic gradients
  std::vector<std::vector<double>> analytic;
  {
    GradTape tape;
    TapeScope scope(tape);
    Tensor loss = loss_value();
    tape.backward(loss);
    for (const auto& [name, t] : model.params.items())
      analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.size(), 0.0));
    model.params.zero_grads();
  }

  const double eps = 1e-5;
  for (std::size_t p = 0; p < model.params.size(); ++p) {
    auto& [name, t] = model.params.items()[p];
    GradCheckGroup group;
    group.name = name;
    SplitMix64 pick(SplitMix64::mix(cfg.seed, fnv1a(name.data(), name.size())));
    const int checks = std::min<std::size_t>(static_cast<std::size_t>(samples_per_group), t.size());
    for (int c = 0; c < checks; ++c) {
      const std::size_t i = static_cast<std::size_t>(pick.next_below(t.size()));
      const double saved = t.data()[i];
      t.data()[i] = saved + eps;
      const double lp = loss_value().value();
      t.data()[i] = saved - eps;
      const double lm = loss_value().value();
      t.data()[i] = saved;
      const double fd = (lp - lm) / (2.0 * eps);
      const double a = analytic[p][i];
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1.0});
      group.max_rel_err = std::max(group.max_rel_err, rel);
      ++group.checked;
    }
    report.max_rel_err = std::max(report.max_rel_err, group.max_rel_err);
    report.groups.push_back(group);
  }
  report.pass = report.max_rel_err < report.tolerance;
  return report;
}

std::string gradcheck_text(const GradCheckReport& r) {
  std::ostringstream os;
  os << "group,checked,max_rel_err\n";
  char buf[64];
  for (const GradCheckGroup& g : r.groups) {
    std::snprintf(buf, sizeof buf, "%.3e", g.max_rel_err);
    os << g.name << "," << g.checked << "," << buf << "\n";
  }
  std::snprintf(buf, sizeof buf, "%.3e", r.max_rel_err);
  os << "overall," << buf << "," << (r.pass ? "PASS" : "FAIL") << "\n";
  return os.str();
}

}  // namespace terra
