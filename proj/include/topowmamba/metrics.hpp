#pragma once

#include <optional>
#include <string>

#include "topowmamba/network.hpp"

namespace twm {

// Integer class-id mask with physical pixel spacing in millimeters.
struct LabelMask {
  std::int64_t h = 0, w = 0;
  std::vector<std::uint8_t> classes;  // row-major, h*w entries
  double spacing_r = 1.0, spacing_c = 1.0;

  void validate(std::int64_t num_classes) const;
};

// Per-case, per-class overlap and boundary scores. Percentages in [0,100],
// distances in millimeters. Empty-structure conventions: both masks empty
// scores 100% / 0 mm with the both_empty flag; exactly one empty scores 0%
// and the image-diagonal penalty with the one_empty flag.
struct ClassStats {
  int id = 0;
  double dice_pct = 0, iou_pct = 0, hd95_mm = 0;
  bool both_empty = false, one_empty = false;
  std::int64_t support = 0;  // ground-truth pixels of this class
};

struct Hd95Result {
  double mm = 0;
  bool both_empty = false, one_empty = false;
};

// Foreground pixels with at least one background (or out-of-image) 4-neighbor.
std::vector<std::pair<std::int64_t, std::int64_t>> extract_boundary(const std::vector<std::uint8_t>& mask,
                                                                    std::int64_t h, std::int64_t w);

// Symmetric 95th-percentile boundary distance, nearest-rank percentile per
// directed set, max over the two directions.
Hd95Result hd95(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt, std::int64_t h,
                std::int64_t w, double spacing_r, double spacing_c);

// Dice and IoU for the foreground classes 1..num_classes-1.
std::vector<ClassStats> overlap_metrics(const LabelMask& pred, const LabelMask& gt, std::int64_t num_classes);

// overlap_metrics plus hd95 per class
std::vector<ClassStats> case_metrics(const LabelMask& pred, const LabelMask& gt, std::int64_t num_classes);

struct PerClassReport {
  int id = 0;
  std::string name;
  double dice = 0, hd95 = 0, iou = 0;
  std::int64_t support = 0;
  std::int64_t n_both_empty = 0, n_one_empty = 0;
};

struct MetricsReport {
  std::vector<PerClassReport> per_class;
  double mean_dice = 0, mean_hd95 = 0, mean_iou = 0;
  std::int64_t n_cases = 0;
  std::string to_json_string(int indent = 2) const;
};

// Arithmetic mean per class over cases, then over foreground classes.
MetricsReport aggregate_metrics(const std::vector<std::vector<ClassStats>>& cases,
                                const std::vector<std::string>& class_names);

// Nearest-neighbor label downsampling by an integer factor (top-left rule).
LabelMask downsample_labels(const LabelMask& mask, std::int64_t factor);

// Dice + cross-entropy training loss over softmax probabilities, deep
// supervision terms weighted 0.5^k by scale. Dice uses 1e-5 smoothing and
// averages over all classes; CE averages over pixels.
template <typename T>
Tensor<T> seg_loss(const SegOutput<T>& output, const std::vector<LabelMask>& gt);

}  // namespace twm
