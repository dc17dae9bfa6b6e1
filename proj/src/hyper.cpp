#include "stagedepth/hyper.hpp"

#include <cmath>

#include "stagedepth/errors.hpp"

namespace stagedepth {

KDHyper set_prediction_defaults() {
  KDHyper h;
  h.alpha = 0.0;
  h.w_cls_kd = 3.75;
  h.t_cls = 1.0;
  h.w_iou_kd = 2.0;
  h.w_edge_kd = 5.0;
  h.edge_variant = EdgeVariant::L1;
  h.t_dfl = 1.0;
  h.feat_weight_backbone = 0.5;
  h.feat_weight_neck = 0.2;
  return h;
}

KDHyper dense_defaults() {
  KDHyper h;
  h.alpha = 0.2;
  h.w_cls_kd = 0.4;
  h.t_cls = 2.0;
  h.w_iou_kd = 1.2;
  h.w_edge_kd = 0.8;
  h.edge_variant = EdgeVariant::Dfl;
  h.t_dfl = 1.0;
  h.feat_weight_backbone = 0.4;
  h.feat_weight_neck = 0.4;
  return h;
}

KDHyper defaults_for(HeadKind head) {
  return head == HeadKind::SetPrediction ? set_prediction_defaults() : dense_defaults();
}

KDHyper naive_joint_hyper(HeadKind head) {
  KDHyper h = defaults_for(head);
  h.alpha = 1.0;
  h.w_cls_kd = 0.0;
  h.w_iou_kd = 0.0;
  h.w_edge_kd = 0.0;
  h.feat_weight_backbone = 0.0;
  h.feat_weight_neck = 0.0;
  return h;
}

void validate(const KDHyper& h) {
  auto finite_nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
  if (!(h.alpha >= 0.0 && h.alpha <= 1.0)) throw InvalidSpec("alpha must lie in [0, 1]");
  if (!finite_nonneg(h.w_cls_kd) || !finite_nonneg(h.w_iou_kd) || !finite_nonneg(h.w_edge_kd) ||
      !finite_nonneg(h.feat_weight_backbone) || !finite_nonneg(h.feat_weight_neck)) {
    throw InvalidSpec("distillation weights must be finite and nonnegative");
  }
  if (!(h.t_cls > 0.0) || !std::isfinite(h.t_cls)) throw InvalidSpec("t_cls must be positive");
  if (!(h.t_dfl > 0.0) || !std::isfinite(h.t_dfl)) throw InvalidSpec("t_dfl must be positive");
}

}  // namespace stagedepth
