#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "terra/common.hpp"

namespace terra {

inline constexpr int kNumClasses = 6;
inline constexpr int kIgnoreValue = 255;

// The six terrain groups, in id order.
enum class TerrainGroup : int {
  kSmooth = 0,
  kRough = 1,
  kBumpy = 2,
  kForbidden = 3,
  kObstacles = 4,
  kBackground = 5,
};

const std::array<std::string, kNumClasses>& group_names();
int group_id_from_name(const std::string& name);  // case-insensitive

// Integer class-index image. ignore_value marks pixels excluded from losses
// (they still evaluate after remapping to Background for real data).
struct LabelMask {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> labels;  // row-major, h*w entries
  int ignore_value = kIgnoreValue;
  int class_count = kNumClasses;

  std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * w + x]; }
  std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * w + x]; }
  std::size_t size() const { return labels.size(); }
  void validate() const;  // every non-ignore label < class_count
};

LabelMask make_mask(int h, int w, std::uint8_t fill = 0);

// Fine-grained dataset labels -> 6 terrain groups. Loaded from a plain-text
// file with lines "<fine_id> <group_id>  # <fine_name>"; the name comment
// feeds the name-based lookup. The table must be total for the masks it is
// applied to: unknown ids fail loudly.
class RemapTable {
 public:
  static RemapTable load(const std::string& path);
  static RemapTable identity();  // 6-class ids map to themselves

  int group_of_id(int fine_id) const;          // throws ArtifactError on unknown id
  int group_of_name(const std::string&) const; // throws ArtifactError on unknown name
  bool has_id(int fine_id) const;
  std::size_t entry_count() const { return ids_.size(); }

  LabelMask remap(const LabelMask& fine) const;

 private:
  std::vector<std::pair<int, int>> ids_;                  // (fine_id, group)
  std::vector<std::pair<std::string, int>> names_;        // (fine_name, group)
};

struct MetricReport {
  std::array<double, kNumClasses> per_class_iou{};  // NaN-free; absent classes get 0 and are
  std::array<bool, kNumClasses> class_present{};    // excluded from the mean via class_present
  double miou = 0.0;
  double aacc = 0.0;
  double biou = 0.0;
  std::uint64_t pixels_evaluated = 0;
  std::uint64_t pixels_ignored = 0;
  int band_radius = 0;
  bool empty_matrix = false;  // no valid pixels at all
  bool empty_band = false;    // no GT boundaries; biou defined as 1.0
};

using Confusion = std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses>;

// M[gt][pred] over pixels where gt != ignore. Optional keep mask restricts
// counting to pixels where keep[i] != 0.
Confusion confusion(const LabelMask& pred, const LabelMask& gt,
                    const std::vector<std::uint8_t>* keep = nullptr);

// IoU_c = M[c][c] / (row_c + col_c - M[c][c]); the mean skips classes with
// empty row+col; aAcc = trace / total. Empty matrix -> (0,0) with flag.
std::pair<double, double> miou_aacc(const Confusion& m, bool* empty = nullptr,
                                    std::array<double, kNumClasses>* per_class = nullptr,
                                    std::array<bool, kNumClasses>* present = nullptr);

// Pixels with a 4-neighbor of a different non-ignore label, dilated by
// Chebyshev radius b_px.
std::vector<std::uint8_t> boundary_band(const LabelMask& gt, int b_px);

// Mean IoU restricted to the GT boundary band; empty band -> 1.0 with flag.
double biou(const LabelMask& pred, const LabelMask& gt, int b_px, bool* empty_band = nullptr);

// Full report for one prediction/GT pair.
MetricReport evaluate_pair(const LabelMask& pred, const LabelMask& gt, int b_px);

// CSV report: one row per image plus an "aggregate" row computed from the
// summed confusion matrices. Columns:
// image,iou_smooth,...,iou_background,miou,aacc,biou
struct ReportRow {
  std::string image;
  MetricReport report;
};
std::string report_csv(const std::vector<ReportRow>& rows, const MetricReport& aggregate);

// Aggregate metrics across pairs (confusions summed before the division).
MetricReport evaluate_set(const std::vector<const LabelMask*>& preds,
                          const std::vector<const LabelMask*>& gts, int b_px);

}  // namespace terra
