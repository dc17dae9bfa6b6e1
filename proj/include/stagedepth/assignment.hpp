#pragma once

#include <map>
#include <set>
#include <vector>

#include <torch/torch.h>

#include "stagedepth/model.hpp"

namespace stagedepth {

/// Ground truth of one image: boxes G x 4 (normalized cxcywh), labels G (int64).
struct ImageTargets {
  torch::Tensor boxes;
  torch::Tensor labels;
  int64_t size() const { return boxes.defined() ? boxes.size(0) : 0; }
};

struct MatchResult {
  std::map<int, int> sigma;  // query index -> ground-truth index
  double cost = 0.0;

  /// Inverse view: query assigned to each ground truth, ordered by gt index.
  std::vector<int> query_of_gt() const;
};

/// Globally cost-minimal injective assignment of every column (ground truth)
/// to a row (query). `cost` is row-major Q x G. Among optimal assignments
/// the one whose query_of_gt() is lexicographically smallest is returned.
MatchResult hungarian_match(const std::vector<double>& cost, int queries, int targets);
MatchResult hungarian_match(const torch::Tensor& cost);

struct MatchCostWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
};

/// cost = w_cls * (-p(target class)) + w_l1 * L1 + w_giou * (1 - GIoU).
torch::Tensor detr_cost_matrix(const torch::Tensor& logits, const torch::Tensor& boxes,
                               const ImageTargets& target, const MatchCostWeights& w);
MatchResult detr_assign(const torch::Tensor& logits, const torch::Tensor& boxes,
                        const ImageTargets& target, const MatchCostWeights& w = {});
/// One match per image on the returned (exit-layer) predictions.
std::vector<MatchResult> detr_assign(const ModelOutputs& outputs,
                                     const std::vector<ImageTargets>& targets,
                                     const MatchCostWeights& w = {});

/// Maps each matched base-net query to the super-net query that predicts the
/// same ground-truth object.
std::map<int, int> align_teacher_queries(const MatchResult& match_super,
                                         const MatchResult& match_base);

struct TalParams {
  int topk = 4;
  double alpha = 1.0;
  double beta = 6.0;
};

struct AnchorAssignment {
  std::set<int> foreground;
  std::map<int, int> target_of;          // anchor -> ground-truth index
  std::vector<double> alignment_score;   // per anchor, 0 for background
  std::vector<double> overlap;           // per anchor IoU with its target, 0 for background
};

/// Task-aligned assignment for one image. scores: A x C probabilities,
/// boxes: A x 4 predictions, anchors: A x 2 normalized centers.
AnchorAssignment tal_assign(const torch::Tensor& scores, const torch::Tensor& boxes,
                            const torch::Tensor& anchors, const ImageTargets& target,
                            const TalParams& params = {});
std::vector<AnchorAssignment> tal_assign(const ModelOutputs& outputs,
                                         const std::vector<ImageTargets>& targets,
                                         const TalParams& params = {});

struct KDAnchorSets {
  std::set<int> conflict;
  std::set<int> valid;
};

KDAnchorSets kd_anchor_sets(const AnchorAssignment& assign_super,
                            const AnchorAssignment& assign_base);

}  // namespace stagedepth
