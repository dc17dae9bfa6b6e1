#pragma once

#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "stagedepth/assignment.hpp"
#include "stagedepth/hyper.hpp"
#include "stagedepth/model.hpp"

namespace stagedepth {

struct LossBreakdown {
  torch::Tensor total;
  // gt_cls, gt_reg, kd_cls, kd_reg_iou, kd_reg_edge, kd_feat (only those computed)
  std::map<std::string, torch::Tensor> components;

  std::map<std::string, double> values() const;
};

struct GtLossOptions {
  MatchCostWeights match;
  TalParams tal;
  // set-prediction head
  double w_cls = 1.0;
  double w_l1 = 5.0;
  double w_giou = 2.0;
  // dense head
  double w_cls_dense = 0.5;
  double w_iou_dense = 7.5;
  double w_dfl = 1.5;
};

struct GtLossResult {
  LossBreakdown loss;
  std::vector<std::vector<MatchResult>> matches;  // [layer][image], set-prediction head
  std::vector<AnchorAssignment> assignments;      // [image], dense head
};

/// Ground-truth detection loss. Set prediction: every returned decoder layer
/// contributes BCE + L1 + GIoU on its own Hungarian matches. Dense: TAL
/// weighted BCE + CIoU + distribution focal loss.
GtLossResult detection_gt_loss(const ModelOutputs& outputs,
                               const std::vector<ImageTargets>& targets, HeadKind head,
                               const GtLossOptions& options = {});

/// Distribution focal loss of bin logits (... x bins) against continuous
/// targets in [0, bins - 1).
torch::Tensor distribution_focal_loss(const torch::Tensor& logits, const torch::Tensor& target);

/// Rows of teacher and student are aligned; the loss averages over `valid`
/// rows. Teacher values never receive gradient.
torch::Tensor kd_cls_loss(const torch::Tensor& teacher_logits, const torch::Tensor& student_logits,
                          const std::vector<int64_t>& valid, double temperature);

struct KdRegTerms {
  torch::Tensor iou;
  torch::Tensor edge;
};

/// Boxes are N x 4 cxcywh. The DFL variant uses N x 4 x bins logits.
KdRegTerms kd_reg_loss(const torch::Tensor& teacher_boxes, const torch::Tensor& student_boxes,
                       const std::vector<int64_t>& valid, EdgeVariant variant,
                       const torch::Tensor& teacher_distribution = {},
                       const torch::Tensor& student_distribution = {},
                       double dfl_temperature = 1.0);

struct FeatureBoundary {
  std::string stage_id;
  StageGroup group = StageGroup::Backbone;
  torch::Tensor essential;  // B x C x H x W, student side
  torch::Tensor full;       // B x C x H x W, teacher side
};

/// Mean over supervised stages of group-weighted ||f_ess - f_full||^2 between
/// l2-normalized global-average-pooled channel descriptors.
torch::Tensor kd_feat_loss(const std::vector<FeatureBoundary>& boundaries, const KDHyper& hyper);
/// Per-location variant: l2-normalize each spatial cell, average over cells.
torch::Tensor kd_feat_spatial_loss(const std::vector<FeatureBoundary>& boundaries,
                                   const KDHyper& hyper);

struct KdTerms {
  torch::Tensor cls;
  torch::Tensor iou;
  torch::Tensor edge;
  torch::Tensor feat;
};

/// alpha * L_gt + (1 - alpha) * (w_cls L_cls + w_iou L_iou + w_edge L_edge + L_feat).
LossBreakdown base_total_loss(const LossBreakdown& gt, const KdTerms& kd, const KDHyper& hyper);

/// Builds the supervised boundary list from a teacher (full) and a student
/// (essential) capture.
std::vector<FeatureBoundary> pair_boundaries(const ArchSpec& arch,
                                             const std::map<std::string, BoundaryPair>& teacher,
                                             const std::map<std::string, BoundaryPair>& student,
                                             const KDHyper& hyper);

}  // namespace stagedepth
