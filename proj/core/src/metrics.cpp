#include "terra/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace terra {

const std::array<std::string, kNumClasses>& group_names() {
  static const std::array<std::string, kNumClasses> names = {
      "smooth", "rough", "bumpy", "forbidden", "obstacles", "background"};
  return names;
}

namespace {
std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}
}  // namespace

int group_id_from_name(const std::string& name) {
  const std::string n = lower(name);
  const auto& names = group_names();
  for (int i = 0; i < kNumClasses; ++i)
    if (names[static_cast<std::size_t>(i)] == n) return i;
  throw ArtifactError(cat("unknown terrain group name '", name, "'"));
}

void LabelMask::validate() const {
  require(h > 0 && w > 0 && labels.size() == static_cast<std::size_t>(h) * w,
          "label mask dims ", h, "x", w, " do not match buffer of ", labels.size());
  for (std::uint8_t v : labels)
    if (v != ignore_value)
      require(v < class_count, "label ", static_cast<int>(v), " out of range for ",
              class_count, " classes");
}

LabelMask make_mask(int h, int w, std::uint8_t fill) {
  LabelMask m;
  m.h = h;
  m.w = w;
  m.labels.assign(static_cast<std::size_t>(h) * w, fill);
  return m;
}

// ---- remap -----------------------------------------------------------------

RemapTable RemapTable::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError(cat("cannot open remap table '", path, "'"));
  RemapTable t;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string name;
    const auto hash = line.find('#');
    if (hash != std::string::npos) {
      std::istringstream ns(line.substr(hash + 1));
      ns >> name;  // first comment token is the fine label name
      line = line.substr(0, hash);
    }
    std::istringstream is(line);
    int fine_id, group_id;
    if (!(is >> fine_id)) continue;  // blank or comment-only line
    if (!(is >> group_id))
      throw ArtifactError(cat(path, ":", lineno, ": expected '<fine_id> <group_id>'"));
    if (group_id < 0 || group_id >= kNumClasses)
      throw ArtifactError(cat(path, ":", lineno, ": group id ", group_id, " out of range"));
    for (const auto& [id, g] : t.ids_)
      if (id == fine_id)
        throw ArtifactError(cat(path, ":", lineno, ": duplicate fine id ", fine_id));
    t.ids_.emplace_back(fine_id, group_id);
    if (!name.empty()) t.names_.emplace_back(lower(name), group_id);
  }
  if (t.ids_.empty()) throw ArtifactError(cat("remap table '", path, "' has no entries"));
  return t;
}

RemapTable RemapTable::identity() {
  RemapTable t;
  for (int i = 0; i < kNumClasses; ++i) {
    t.ids_.emplace_back(i, i);
    t.names_.emplace_back(group_names()[static_cast<std::size_t>(i)], i);
  }
  return t;
}

bool RemapTable::has_id(int fine_id) const {
  for (const auto& [id, g] : ids_)
    if (id == fine_id) return true;
  return false;
}

int RemapTable::group_of_id(int fine_id) const {
  for (const auto& [id, g] : ids_)
    if (id == fine_id) return g;
  throw ArtifactError(cat("remap table has no entry for fine label id ", fine_id));
}

int RemapTable::group_of_name(const std::string& name) const {
  const std::string n = lower(name);
  for (const auto& [nm, g] : names_)
    if (nm == n) return g;
  throw ArtifactError(cat("remap table has no entry for fine label name '", name, "'"));
}

LabelMask RemapTable::remap(const LabelMask& fine) const {
  // dense lookup over the 8-bit id space; unknown ids fail loudly
  std::array<int, 256> lut;
  lut.fill(-1);
  for (const auto& [id, g] : ids_)
    if (id >= 0 && id < 256) lut[static_cast<std::size_t>(id)] = g;
  LabelMask out = make_mask(fine.h, fine.w);
  for (std::size_t i = 0; i < fine.labels.size(); ++i) {
    const int g = lut[fine.labels[i]];
    if (g < 0)
      throw ArtifactError(cat("remap: unknown fine label id ", static_cast<int>(fine.labels[i])));
    out.labels[i] = static_cast<std::uint8_t>(g);
  }
  return out;
}

// ---- confusion / iou --------------------------------------------------------

Confusion confusion(const LabelMask& pred, const LabelMask& gt,
                    const std::vector<std::uint8_t>* keep) {
  require(pred.h == gt.h && pred.w == gt.w, "confusion: mask shapes differ, ", pred.h, "x",
          pred.w, " vs ", gt.h, "x", gt.w);
  if (keep != nullptr)
    require(keep->size() == gt.labels.size(), "confusion: keep mask size mismatch");
  Confusion m{};
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    if (gt.labels[i] == gt.ignore_value) continue;
    if (keep != nullptr && (*keep)[i] == 0) continue;
    const int a = gt.labels[i];
    const int b = pred.labels[i];
    require(a < kNumClasses && b < kNumClasses, "confusion: label out of 6-class range");
    ++m[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
  }
  return m;
}

std::pair<double, double> miou_aacc(const Confusion& m, bool* empty,
                                    std::array<double, kNumClasses>* per_class,
                                    std::array<bool, kNumClasses>* present) {
  std::uint64_t total = 0, trace = 0;
  std::array<std::uint64_t, kNumClasses> row{}, col{};
  for (int a = 0; a < kNumClasses; ++a)
    for (int b = 0; b < kNumClasses; ++b) {
      const std::uint64_t v = m[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
      total += v;
      row[static_cast<std::size_t>(a)] += v;
      col[static_cast<std::size_t>(b)] += v;
      if (a == b) trace += v;
    }
  if (empty != nullptr) *empty = (total == 0);
  if (total == 0) {
    if (per_class != nullptr) per_class->fill(0.0);
    if (present != nullptr) present->fill(false);
    return {0.0, 0.0};
  }
  double iou_sum = 0.0;
  int iou_n = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    const std::uint64_t uni =
        row[static_cast<std::size_t>(c)] + col[static_cast<std::size_t>(c)] -
        m[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)];
    const bool here = row[static_cast<std::size_t>(c)] + col[static_cast<std::size_t>(c)] > 0;
    const double iou =
        here ? static_cast<double>(m[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)]) /
                   static_cast<double>(uni)
             : 0.0;
    if (here) {
      iou_sum += iou;
      ++iou_n;
    }
    if (per_class != nullptr) (*per_class)[static_cast<std::size_t>(c)] = iou;
    if (present != nullptr) (*present)[static_cast<std::size_t>(c)] = here;
  }
  return {iou_n > 0 ? iou_sum / iou_n : 0.0,
          static_cast<double>(trace) / static_cast<double>(total)};
}

std::vector<std::uint8_t> boundary_band(const LabelMask& gt, int b_px) {
  require(b_px >= 1, "boundary_band: radius must be >= 1, got ", b_px);
  const int h = gt.h, w = gt.w;
  std::vector<std::uint8_t> boundary(gt.labels.size(), 0);
  auto lab = [&](int y, int x) { return gt.at(y, x); };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::uint8_t v = lab(y, x);
      if (v == gt.ignore_value) continue;
      const bool edge =
          (y > 0 && lab(y - 1, x) != gt.ignore_value && lab(y - 1, x) != v) ||
          (y + 1 < h && lab(y + 1, x) != gt.ignore_value && lab(y + 1, x) != v) ||
          (x > 0 && lab(y, x - 1) != gt.ignore_value && lab(y, x - 1) != v) ||
          (x + 1 < w && lab(y, x + 1) != gt.ignore_value && lab(y, x + 1) != v);
      if (edge) boundary[static_cast<std::size_t>(y) * w + x] = 1;
    }
  // Chebyshev dilation by b_px
  std::vector<std::uint8_t> band(gt.labels.size(), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!boundary[static_cast<std::size_t>(y) * w + x]) continue;
      const int y0 = std::max(0, y - b_px), y1 = std::min(h - 1, y + b_px);
      const int x0 = std::max(0, x - b_px), x1 = std::min(w - 1, x + b_px);
      for (int yy = y0; yy <= y1; ++yy)
        for (int xx = x0; xx <= x1; ++xx) band[static_cast<std::size_t>(yy) * w + xx] = 1;
    }
  return band;
}

double biou(const LabelMask& pred, const LabelMask& gt, int b_px, bool* empty_band) {
  const std::vector<std::uint8_t> band = boundary_band(gt, b_px);
  const bool empty = std::find(band.begin(), band.end(), std::uint8_t{1}) == band.end();
  if (empty_band != nullptr) *empty_band = empty;
  if (empty) return 1.0;  // no boundaries to get wrong
  const Confusion m = confusion(pred, gt, &band);
  return miou_aacc(m).first;
}

MetricReport evaluate_pair(const LabelMask& pred, const LabelMask& gt, int b_px) {
  MetricReport r;
  r.band_radius = b_px;
  const Confusion m = confusion(pred, gt);
  auto [mi, aa] = miou_aacc(m, &r.empty_matrix, &r.per_class_iou, &r.class_present);
  r.miou = mi;
  r.aacc = aa;
  r.biou = biou(pred, gt, b_px, &r.empty_band);
  for (std::size_t i = 0; i < gt.labels.size(); ++i)
    if (gt.labels[i] == gt.ignore_value) ++r.pixels_ignored;
  r.pixels_evaluated = gt.labels.size() - r.pixels_ignored;
  return r;
}

MetricReport evaluate_set(const std::vector<const LabelMask*>& preds,
                          const std::vector<const LabelMask*>& gts, int b_px) {
  require(preds.size() == gts.size() && !preds.empty(),
          "evaluate_set: need equally many predictions and ground truths");
  MetricReport r;
  r.band_radius = b_px;
  Confusion sum{};
  Confusion band_sum{};
  bool any_band = false;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const Confusion m = confusion(*preds[i], *gts[i]);
    for (int a = 0; a < kNumClasses; ++a)
      for (int b = 0; b < kNumClasses; ++b)
        sum[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] +=
            m[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
    const std::vector<std::uint8_t> band = boundary_band(*gts[i], b_px);
    if (std::find(band.begin(), band.end(), std::uint8_t{1}) != band.end()) {
      any_band = true;
      const Confusion bm = confusion(*preds[i], *gts[i], &band);
      for (int a = 0; a < kNumClasses; ++a)
        for (int b = 0; b < kNumClasses; ++b)
          band_sum[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] +=
              bm[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
    }
    for (std::size_t p = 0; p < gts[i]->labels.size(); ++p)
      if (gts[i]->labels[p] == gts[i]->ignore_value) ++r.pixels_ignored;
    r.pixels_evaluated += gts[i]->labels.size();
  }
  r.pixels_evaluated -= r.pixels_ignored;
  auto [mi, aa] = miou_aacc(sum, &r.empty_matrix, &r.per_class_iou, &r.class_present);
  r.miou = mi;
  r.aacc = aa;
  r.empty_band = !any_band;
  r.biou = any_band ? miou_aacc(band_sum).first : 1.0;
  return r;
}

std::string report_csv(const std::vector<ReportRow>& rows, const MetricReport& aggregate) {
  std::ostringstream os;
  os << "image,iou_smooth,iou_rough,iou_bumpy,iou_forbidden,iou_obstacles,iou_background,"
        "miou,aacc,biou\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  auto emit = [&](const std::string& name, const MetricReport& r) {
    os << name;
    for (int c = 0; c < kNumClasses; ++c)
      os << "," << num(r.per_class_iou[static_cast<std::size_t>(c)]);
    os << "," << num(r.miou) << "," << num(r.aacc) << "," << num(r.biou) << "\n";
  };
  for (const auto& row : rows) emit(row.image, row.report);
  emit("aggregate", aggregate);
  return os.str();
}

}  // namespace terra
