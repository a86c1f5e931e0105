// Command-line driver: train / eval / ablate / gradcheck / synth-data.
// Exit code 0 on success; failures print a machine-readable JSON object to
// stderr and exit nonzero.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "terra/harness.hpp"
#include "terra/image_io.hpp"

namespace fs = std::filesystem;
using namespace terra;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir = "out";
  std::int64_t seed = -1;
  int capr_k = -2;  // -2: keep config; -1: auto rule; >=0 literal
  int capr_iters = 0;
  bool capr_off = false, bbl_off = false, gltr_off = false, rad_off = false;
  int biou_band = 0;
  int epochs = -1;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool needs_config) {
  auto* cfg = cmd->add_option("--config", o.config_path, "run configuration JSON");
  if (needs_config) cfg->required();
  cmd->add_option("--out", o.out_dir, "output directory");
  cmd->add_option("--seed", o.seed, "override config seed");
  cmd->add_option("--capr-k", o.capr_k, "point-refinement budget K (-1 = auto rule)");
  cmd->add_option("--capr-iters", o.capr_iters, "refinement iterations");
  cmd->add_flag("--capr-off", o.capr_off, "disable point refinement");
  cmd->add_flag("--bbl-off", o.bbl_off, "disable the boundary-band loss");
  cmd->add_flag("--gltr-off", o.gltr_off, "disable global-local token refinement");
  cmd->add_flag("--rad-off", o.rad_off, "disable HR cross-attention, texture branch and gate");
  cmd->add_option("--biou-band", o.biou_band, "boundary-IoU band radius in pixels");
  cmd->add_option("--epochs", o.epochs, "override training epochs");
}

RunConfig resolve_config(const CommonOpts& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : RunConfig::load(o.config_path);
  if (o.seed >= 0) cfg.seed = static_cast<std::uint64_t>(o.seed);
  if (o.capr_k != -2) cfg.capr.k = o.capr_k;
  if (o.capr_iters > 0) cfg.capr.iters = o.capr_iters;
  if (o.capr_off) cfg.ablation.capr = false;
  if (o.bbl_off) cfg.ablation.bbl = false;
  if (o.gltr_off) cfg.ablation.gltr = false;
  if (o.rad_off) cfg.ablation.rad = false;
  if (o.biou_band > 0) cfg.metrics.biou_band = o.biou_band;
  if (o.epochs >= 0) cfg.epochs = o.epochs;
  cfg.validate();
  return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ArtifactError(cat("cannot write '", path.string(), "'"));
  out << text;
}

int cmd_train(const CommonOpts& o) {
  const RunConfig cfg = resolve_config(o);
  fs::create_directories(o.out_dir);
  cfg.save((fs::path(o.out_dir) / "config.json").string());

  TerraModel model = build_model(cfg);
  AdamW opt(cfg.optimizer, model.params);
  const auto train_data = make_train_data(cfg);
  const auto val_data = make_val_data(cfg);
  const TrainResult result = train(model, opt, train_data, val_data);

  write_file(fs::path(o.out_dir) / "train_log.csv", train_log_csv(result.log));
  save_checkpoint((fs::path(o.out_dir) / "checkpoint.bin").string(), model, opt,
                  result.epochs_run);
  std::vector<ReportRow> rows;
  const MetricReport report = evaluate(model, train_data, &rows);
  write_file(fs::path(o.out_dir) / "train_report.csv", report_csv(rows, report));

  std::cout << "trained " << result.epochs_run << " epochs ("
            << (result.reached_targets ? "early-stopped on targets" : "full schedule")
            << ")\n"
            << "train miou " << report.miou << "  biou " << report.biou << "  aacc "
            << report.aacc << "\n"
            << "outputs in " << o.out_dir << "\n";
  return 0;
}

int cmd_eval(const CommonOpts& o, const std::string& checkpoint, const std::string& images,
             const std::string& masks, const std::string& remap) {
  LoadedCheckpoint loaded = load_checkpoint(checkpoint);
  if (o.biou_band > 0) loaded.model.cfg.metrics.biou_band = o.biou_band;
  std::vector<Sample> data;
  if (!images.empty()) {
    require(!masks.empty() && !remap.empty(), "eval on a directory needs --masks and --remap");
    data = load_dir(images, masks, RemapTable::load(remap));
  } else {
    data = make_train_data(loaded.model.cfg);
  }
  std::vector<ReportRow> rows;
  const MetricReport report = evaluate(loaded.model, data, &rows);
  fs::create_directories(o.out_dir);
  write_file(fs::path(o.out_dir) / "eval_report.csv", report_csv(rows, report));
  std::cout << "miou " << report.miou << "  aacc " << report.aacc << "  biou " << report.biou
            << "\nreport in " << o.out_dir << "/eval_report.csv\n";
  return 0;
}

int cmd_ablate(const CommonOpts& o) {
  const RunConfig cfg = resolve_config(o);
  const auto rows = ablate(cfg);
  fs::create_directories(o.out_dir);
  write_file(fs::path(o.out_dir) / "ablation.csv", ablation_csv(rows));
  std::cout << ablation_csv(rows) << "written to " << o.out_dir << "/ablation.csv\n";
  return 0;
}

int cmd_gradcheck(const CommonOpts& o, int samples) {
  RunConfig cfg;
  if (o.config_path.empty()) {
    // built-in tiny model: 64x96 input, 4x6 bottleneck lattice
    cfg.encoder.stage_depths = {1, 1, 1, 1};
    cfg.decoder.width = 32;
    cfg.data.height = 64;
    cfg.data.width = 96;
  } else {
    cfg = resolve_config(o);
  }
  const GradCheckReport report = gradcheck(cfg, samples);
  std::cout << gradcheck_text(report);
  if (!report.pass) {
    nlohmann::json err;
    err["error"] = "gradient check failed";
    std::vector<std::string> failing;
    for (const auto& g : report.groups)
      if (g.max_rel_err >= report.tolerance) failing.push_back(g.name);
    err["groups"] = failing;
    err["type"] = "GradCheckFailure";
    std::cerr << err.dump() << "\n";
    return 3;
  }
  return 0;
}

int cmd_synth_data(const CommonOpts& o, int count) {
  const RunConfig cfg = resolve_config(o);
  const SceneSpec spec = cfg.data.scene_spec(cfg.seed);
  write_dataset(o.out_dir, spec, count > 0 ? count : cfg.data.train_count);
  std::cout << "wrote " << (count > 0 ? count : cfg.data.train_count) << " samples to "
            << o.out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TERRA resolution-aware token decoder"};
  app.require_subcommand(1);

  CommonOpts train_o, eval_o, ablate_o, grad_o, synth_o;
  std::string eval_checkpoint, eval_images, eval_masks, eval_remap;
  int grad_samples = 4;
  int synth_count = 0;

  CLI::App* train_cmd = app.add_subcommand("train", "train a model from a config");
  add_common(train_cmd, train_o, true);

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd, eval_o, false);
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--images", eval_images, "image directory (overrides config data)");
  eval_cmd->add_option("--masks", eval_masks, "mask directory");
  eval_cmd->add_option("--remap", eval_remap, "remap table for the masks");

  CLI::App* ablate_cmd = app.add_subcommand("ablate", "run the five incremental variants");
  add_common(ablate_cmd, ablate_o, true);

  CLI::App* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  add_common(grad_cmd, grad_o, false);
  grad_cmd->add_option("--samples", grad_samples, "elements checked per parameter group");

  CLI::App* synth_cmd = app.add_subcommand("synth-data", "write a synthetic dataset");
  add_common(synth_cmd, synth_o, false);
  synth_cmd->add_option("--count", synth_count, "number of samples");

  try {
    app.parse(argc, argv);
    if (train_cmd->parsed()) return cmd_train(train_o);
    if (eval_cmd->parsed())
      return cmd_eval(eval_o, eval_checkpoint, eval_images, eval_masks, eval_remap);
    if (ablate_cmd->parsed()) return cmd_ablate(ablate_o);
    if (grad_cmd->parsed()) return cmd_gradcheck(grad_o, grad_samples);
    if (synth_cmd->parsed()) return cmd_synth_data(synth_o, synth_count);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    nlohmann::json err;
    err["error"] = e.what();
    err["type"] = "UsageError";
    std::cerr << err.dump() << "\n";
    return 2;
  } catch (const std::exception& e) {
    nlohmann::json err;
    err["error"] = e.what();
    err["type"] = "RuntimeError";
    std::cerr << err.dump() << "\n";
    return 1;
  }
  return 0;
}
