#pragma once

#include <set>
#include <string>

#include "stagedepth/config.hpp"

namespace stagedepth {

enum class EdgeVariant { L1, Dfl };
enum class FeatureAlignment { Gap, Spatial };

/// Self-distillation hyperparameters. The two factory functions carry the
/// reference defaults for the set-prediction and dense detectors.
struct KDHyper {
  double alpha = 0.0;
  double w_cls_kd = 3.75;
  double t_cls = 1.0;
  double w_iou_kd = 2.0;
  double w_edge_kd = 5.0;
  EdgeVariant edge_variant = EdgeVariant::L1;
  double t_dfl = 1.0;
  double feat_weight_backbone = 0.5;
  double feat_weight_neck = 0.2;
  FeatureAlignment feat_alignment = FeatureAlignment::Gap;
  // Empty means every adaptable backbone and neck stage.
  std::set<std::string> supervised_stages;

  double feat_weight(StageGroup group) const {
    return group == StageGroup::Backbone ? feat_weight_backbone : feat_weight_neck;
  }
  bool operator==(const KDHyper&) const = default;
};

KDHyper set_prediction_defaults();
KDHyper dense_defaults();
KDHyper defaults_for(HeadKind head);
/// Ground-truth-only objective for both passes (alpha = 1, KD weights 0).
KDHyper naive_joint_hyper(HeadKind head);

void validate(const KDHyper& hyper);

}  // namespace stagedepth
