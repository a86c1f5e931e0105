#include <cstring>
#include <fstream>

#include "terra/harness.hpp"

// Binary checkpoint: parameters, optimizer state, config and epoch. Doubles
// are written raw (little-endian hosts only, which this project targets), so
// a save/load round trip is bit-exact.

namespace terra {

namespace {

constexpr char kMagic[8] = {'T', 'E', 'R', 'R', 'A', 'C', 'K', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void put_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void put_string(std::ostream& os, const std::string& s) {
  put_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
void put_doubles(std::ostream& os, const std::vector<double>& v) {
  put_u64(os, v.size());
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
std::string get_string(std::istream& is) {
  const std::uint64_t n = get_u64(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}
std::vector<double> get_doubles(std::istream& is) {
  const std::uint64_t n = get_u64(is);
  std::vector<double> v(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const TerraModel& m, const AdamW& opt, int epoch) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ArtifactError(cat("cannot open checkpoint '", path, "' for writing"));
  os.write(kMagic, sizeof kMagic);
  put_string(os, m.cfg.to_json());
  put_u64(os, m.cfg.hash());
  put_u32(os, static_cast<std::uint32_t>(epoch));
  put_u32(os, static_cast<std::uint32_t>(m.params.size()));
  for (const auto& [name, t] : m.params.items()) {
    put_string(os, name);
    put_u32(os, static_cast<std::uint32_t>(t.ndim()));
    for (int d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
    put_doubles(os, t.vec());
  }
  AdamW& state = const_cast<AdamW&>(opt);
  put_u64(os, opt.steps());
  for (std::size_t p = 0; p < m.params.size(); ++p) put_doubles(os, state.m_state()[p]);
  for (std::size_t p = 0; p < m.params.size(); ++p) put_doubles(os, state.v_state()[p]);
  if (!os) throw ArtifactError(cat("failed writing checkpoint '", path, "'"));
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArtifactError(cat("cannot open checkpoint '", path, "'"));
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw ArtifactError(cat("'", path, "' is not a checkpoint file"));
  const std::string config_json = get_string(is);
  const std::uint64_t stored_hash = get_u64(is);
  const int epoch = static_cast<int>(get_u32(is));

  LoadedCheckpoint out;
  out.epoch = epoch;
  const RunConfig cfg = RunConfig::from_json(config_json);
  if (cfg.hash() != stored_hash)
    throw ArtifactError(cat("checkpoint '", path, "' config hash mismatch"));
  out.model = build_model(cfg);

  const std::uint32_t count = get_u32(is);
  if (count != out.model.params.size())
    throw ArtifactError(cat("checkpoint '", path, "' has ", count, " parameters, model wants ",
                            out.model.params.size()));
  for (std::uint32_t p = 0; p < count; ++p) {
    const std::string name = get_string(is);
    auto& [expect_name, tensor] = out.model.params.items()[p];
    if (name != expect_name)
      throw ArtifactError(cat("checkpoint parameter order mismatch: got '", name,
                              "', expected '", expect_name, "'"));
    const std::uint32_t nd = get_u32(is);
    Shape shape(nd);
    for (std::uint32_t d = 0; d < nd; ++d) shape[d] = static_cast<int>(get_u32(is));
    if (shape != tensor.shape())
      throw ArtifactError(cat("checkpoint parameter '", name, "' has shape ", shape_str(shape),
                              ", model wants ", shape_str(tensor.shape())));
    std::vector<double> data = get_doubles(is);
    if (data.size() != tensor.size())
      throw ArtifactError(cat("checkpoint parameter '", name, "' is truncated"));
    std::copy(data.begin(), data.end(), tensor.data());
  }
  out.opt = AdamW(cfg.optimizer, out.model.params);
  out.opt.set_steps(get_u64(is));
  for (std::size_t p = 0; p < out.model.params.size(); ++p)
    out.opt.m_state()[p] = get_doubles(is);
  for (std::size_t p = 0; p < out.model.params.size(); ++p)
    out.opt.v_state()[p] = get_doubles(is);
  if (!is) throw ArtifactError(cat("checkpoint '", path, "' is truncated"));
  return out;
}

}  // namespace terra
