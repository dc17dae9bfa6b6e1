#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "stagedepth/data.hpp"

namespace stagedepth {

/// Boxes are pixel xywh (COCO convention: top-left corner, width, height).
struct Detection {
  int image_id = 0;
  int category = 0;
  std::array<double, 4> bbox{};
  double score = 0.0;
};

struct GroundTruth {
  int image_id = 0;
  int category = 0;
  std::array<double, 4> bbox{};
};

struct APReport {
  double ap = 0.0;  // mean over IoU 0.50:0.05:0.95
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ap_small = 0.0;
  double ap_medium = 0.0;
  double ap_large = 0.0;
  double ar1 = 0.0;
  double ar10 = 0.0;
  double ar100 = 0.0;
  double ar_small = 0.0;
  double ar_medium = 0.0;
  double ar_large = 0.0;

  /// Ordered (name, value) pairs; stable column order for CSV output.
  std::vector<std::pair<std::string, double>> fields() const;
};

struct EvalOptions {
  std::vector<double> iou_thresholds;  // empty -> 0.50:0.05:0.95
  double small_area = 0.0;             // area < small_area is "small"
  double medium_area = 0.0;            // area < medium_area is "medium"
  std::array<int, 3> max_dets{1, 10, 100};
};

/// Area thresholds matching the dataset's size tiers for the given side.
EvalOptions eval_options_for(int image_side);

/// COCO-style 101-point interpolated AP. Detections are first put into a
/// canonical order (score descending, then image, category, box), so the
/// result does not depend on input order. Metrics with no ground truth in
/// their area range report 0.
APReport evaluate_map(const std::vector<Detection>& detections,
                      const std::vector<GroundTruth>& ground_truth, const EvalOptions& options);

std::vector<GroundTruth> ground_truth_of(const std::vector<Scene>& scenes);
/// Normalized cxcywh -> pixel xywh.
std::array<double, 4> to_pixel_xywh(const std::array<double, 4>& cxcywh, int height, int width);

}  // namespace stagedepth
