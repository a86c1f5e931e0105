#include "terra/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

namespace terra {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ArtifactError(cat("config: '", where, "' must be a JSON object"));
  for (const auto& [key, value] : j.items())
    if (allowed.find(key) == allowed.end())
      throw ArtifactError(cat("config: unknown key '", where, ".", key, "'"));
}

template <typename T>
void get_to(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

template <typename T, std::size_t N>
void get_array(const json& j, const char* key, std::array<T, N>& out, const std::string& where) {
  if (!j.contains(key)) return;
  const json& a = j.at(key);
  if (!a.is_array() || a.size() != N)
    throw ArtifactError(cat("config: '", where, ".", key, "' must be an array of ", N));
  for (std::size_t i = 0; i < N; ++i) a[i].get_to(out[i]);
}

}  // namespace

void OptimizerConfig::validate() const {
  require(kind == "adamw", "optimizer: unsupported kind '", kind, "'");
  require(lr > 0.0 && weight_decay >= 0.0 && eps > 0.0, "optimizer: bad settings");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "optimizer: bad betas");
}

void DataConfig::validate() const {
  require(kind == "synthetic" || kind == "directory", "data: unsupported kind '", kind, "'");
  if (kind == "synthetic") {
    scene_spec(1).validate();
    require(train_count >= 1 && val_count >= 0, "data: bad sample counts");
  } else {
    require(!images.empty() && !masks.empty() && !remap.empty(),
            "data: directory mode needs images, masks and remap paths");
  }
}

SceneSpec DataConfig::scene_spec(std::uint64_t seed) const {
  SceneSpec s;
  s.seed = seed;
  s.height = height;
  s.width = width;
  s.class_frequencies = class_frequencies;
  s.thin_structure_count = thin_structures;
  s.boundary_noise_px = boundary_noise_px;
  for (auto& t : s.texture_scales) {
    t.scale = texture_scale;
    t.amplitude = texture_amplitude;
  }
  return s;
}

void MetricsConfig::validate() const {
  require(biou_band >= 1, "metrics: biou_band must be >= 1");
}

void RunConfig::validate() const {
  require(epochs >= 0 && batch_size >= 1 && eval_every >= 1, "config: bad run settings");
  require(target_miou >= 0.0 && target_miou <= 1.0 && target_biou >= 0.0 && target_biou <= 1.0,
          "config: early-stop targets must lie in [0,1]");
  optimizer.validate();
  encoder.validate();
  decoder.validate();
  capr.validate();
  losses.validate();
  metrics.validate();
  data.validate();
}

std::string RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["eval_every"] = eval_every;
  j["target_miou"] = target_miou;
  j["target_biou"] = target_biou;
  j["optimizer"] = {{"kind", optimizer.kind},
                    {"lr", optimizer.lr},
                    {"weight_decay", optimizer.weight_decay},
                    {"beta1", optimizer.beta1},
                    {"beta2", optimizer.beta2},
                    {"eps", optimizer.eps}};
  j["encoder"] = {{"stage_channels", encoder.stage_channels},
                  {"stage_depths", encoder.stage_depths},
                  {"heads_per_stage", encoder.heads_per_stage},
                  {"mlp_ratio", encoder.mlp_ratio}};
  j["decoder"] = {{"width", decoder.width},
                  {"heads", decoder.heads},
                  {"num_classes", decoder.num_classes}};
  j["capr"] = {{"k", capr.k}, {"iters", capr.iters}, {"hidden", capr.hidden}};
  j["losses"] = {{"lambda_diag", losses.lambda_diag}, {"bbl_start", losses.bbl_start},
                 {"bbl_end", losses.bbl_end},         {"bbl_ramp", losses.bbl_ramp},
                 {"r_band", losses.r_band},           {"r_ring", losses.r_ring}};
  j["metrics"] = {{"biou_band", metrics.biou_band}};
  j["ablation"] = {{"gltr", ablation.gltr},
                   {"rad", ablation.rad},
                   {"capr", ablation.capr},
                   {"bbl", ablation.bbl}};
  j["data"] = {{"kind", data.kind},
               {"height", data.height},
               {"width", data.width},
               {"train_count", data.train_count},
               {"val_count", data.val_count},
               {"class_frequencies", data.class_frequencies},
               {"thin_structures", data.thin_structures},
               {"boundary_noise_px", data.boundary_noise_px},
               {"texture_scale", data.texture_scale},
               {"texture_amplitude", data.texture_amplitude},
               {"images", data.images},
               {"masks", data.masks},
               {"remap", data.remap}};
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ArtifactError(cat("config: invalid JSON: ", e.what()));
  }
  check_keys(j, "config",
             {"seed", "epochs", "batch_size", "eval_every", "target_miou", "target_biou",
              "optimizer", "encoder", "decoder", "capr", "losses", "metrics", "ablation",
              "data"});
  RunConfig c;
  get_to(j, "seed", c.seed);
  get_to(j, "epochs", c.epochs);
  get_to(j, "batch_size", c.batch_size);
  get_to(j, "eval_every", c.eval_every);
  get_to(j, "target_miou", c.target_miou);
  get_to(j, "target_biou", c.target_biou);
  if (j.contains("optimizer")) {
    const json& o = j["optimizer"];
    check_keys(o, "optimizer", {"kind", "lr", "weight_decay", "beta1", "beta2", "eps"});
    get_to(o, "kind", c.optimizer.kind);
    get_to(o, "lr", c.optimizer.lr);
    get_to(o, "weight_decay", c.optimizer.weight_decay);
    get_to(o, "beta1", c.optimizer.beta1);
    get_to(o, "beta2", c.optimizer.beta2);
    get_to(o, "eps", c.optimizer.eps);
  }
  if (j.contains("encoder")) {
    const json& e = j["encoder"];
    check_keys(e, "encoder", {"stage_channels", "stage_depths", "heads_per_stage", "mlp_ratio"});
    get_array(e, "stage_channels", c.encoder.stage_channels, "encoder");
    get_array(e, "stage_depths", c.encoder.stage_depths, "encoder");
    get_array(e, "heads_per_stage", c.encoder.heads_per_stage, "encoder");
    get_to(e, "mlp_ratio", c.encoder.mlp_ratio);
  }
  if (j.contains("decoder")) {
    const json& d = j["decoder"];
    check_keys(d, "decoder", {"width", "heads", "num_classes"});
    get_to(d, "width", c.decoder.width);
    get_to(d, "heads", c.decoder.heads);
    get_to(d, "num_classes", c.decoder.num_classes);
  }
  if (j.contains("capr")) {
    const json& p = j["capr"];
    check_keys(p, "capr", {"k", "iters", "hidden"});
    get_to(p, "k", c.capr.k);
    get_to(p, "iters", c.capr.iters);
    get_to(p, "hidden", c.capr.hidden);
  }
  if (j.contains("losses")) {
    const json& l = j["losses"];
    check_keys(l, "losses",
               {"lambda_diag", "bbl_start", "bbl_end", "bbl_ramp", "r_band", "r_ring"});
    get_to(l, "lambda_diag", c.losses.lambda_diag);
    get_to(l, "bbl_start", c.losses.bbl_start);
    get_to(l, "bbl_end", c.losses.bbl_end);
    get_to(l, "bbl_ramp", c.losses.bbl_ramp);
    get_to(l, "r_band", c.losses.r_band);
    get_to(l, "r_ring", c.losses.r_ring);
  }
  if (j.contains("metrics")) {
    const json& m = j["metrics"];
    check_keys(m, "metrics", {"biou_band"});
    get_to(m, "biou_band", c.metrics.biou_band);
  }
  if (j.contains("ablation")) {
    const json& a = j["ablation"];
    check_keys(a, "ablation", {"gltr", "rad", "capr", "bbl"});
    get_to(a, "gltr", c.ablation.gltr);
    get_to(a, "rad", c.ablation.rad);
    get_to(a, "capr", c.ablation.capr);
    get_to(a, "bbl", c.ablation.bbl);
  }
  if (j.contains("data")) {
    const json& d = j["data"];
    check_keys(d, "data",
               {"kind", "height", "width", "train_count", "val_count", "class_frequencies",
                "thin_structures", "boundary_noise_px", "texture_scale", "texture_amplitude",
                "images", "masks", "remap"});
    get_to(d, "kind", c.data.kind);
    get_to(d, "height", c.data.height);
    get_to(d, "width", c.data.width);
    get_to(d, "train_count", c.data.train_count);
    get_to(d, "val_count", c.data.val_count);
    get_array(d, "class_frequencies", c.data.class_frequencies, "data");
    get_to(d, "thin_structures", c.data.thin_structures);
    get_to(d, "boundary_noise_px", c.data.boundary_noise_px);
    get_to(d, "texture_scale", c.data.texture_scale);
    get_to(d, "texture_amplitude", c.data.texture_amplitude);
    get_to(d, "images", c.data.images);
    get_to(d, "masks", c.data.masks);
    get_to(d, "remap", c.data.remap);
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError(cat("cannot open config '", path, "'"));
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json(text);
}

void RunConfig::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ArtifactError(cat("cannot write config '", path, "'"));
  out << to_json() << "\n";
}

std::uint64_t RunConfig::hash() const {
  const std::string s = to_json();
  return fnv1a(s.data(), s.size());
}

}  // namespace terra
