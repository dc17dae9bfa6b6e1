#include "stagedepth/losses.hpp"

#include <algorithm>

#include "stagedepth/box_ops.hpp"
#include "stagedepth/errors.hpp"

namespace stagedepth {

namespace F = torch::nn::functional;

std::map<std::string, double> LossBreakdown::values() const {
  std::map<std::string, double> out;
  out["total"] = total.defined() ? total.item<double>() : 0.0;
  for (const auto& [k, v] : components) out[k] = v.item<double>();
  return out;
}

namespace {

torch::Tensor index_tensor(const std::vector<int64_t>& idx) {
  return torch::tensor(idx, torch::TensorOptions().dtype(torch::kLong));
}

torch::Tensor zero_like_scalar(const torch::Tensor& ref) {
  return torch::zeros({}, ref.options());
}

LossBreakdown set_prediction_gt_loss(const ModelOutputs& outputs,
                                     const std::vector<ImageTargets>& targets,
                                     const GtLossOptions& opt,
                                     std::vector<std::vector<MatchResult>>& matches) {
  const auto& layers = outputs.decoder_aux;
  if (layers.empty()) throw InvalidConfig("set-prediction outputs carry no decoder layers");
  const auto B = layers.front().logits.size(0);
  const auto C = layers.front().logits.size(2);
  int64_t num_gt = 0;
  for (const auto& t : targets) num_gt += t.size();
  const double norm = std::max<int64_t>(num_gt, 1);

  auto cls_total = zero_like_scalar(layers.front().logits);
  auto reg_total = zero_like_scalar(layers.front().logits);
  for (const auto& layer : layers) {
    std::vector<MatchResult> layer_matches;
    auto target_cls = torch::zeros_like(layer.logits);
    std::vector<int64_t> pred_rows;
    std::vector<torch::Tensor> gt_boxes;
    for (int64_t b = 0; b < B; ++b) {
      const auto& t = targets[b];
      layer_matches.push_back(detr_assign(layer.logits[b], layer.boxes[b], t, opt.match));
      if (t.size() == 0) continue;
      auto labels = t.labels.to(torch::kLong);
      for (const auto& [q, g] : layer_matches.back().sigma) {
        target_cls[b][q][labels[g].item<int64_t>()] = 1.0;
        pred_rows.push_back(b * layer.logits.size(1) + q);
        gt_boxes.push_back(t.boxes[g].to(layer.boxes.dtype()));
      }
    }
    matches.push_back(std::move(layer_matches));
    cls_total = cls_total + opt.w_cls * F::binary_cross_entropy_with_logits(
                                            layer.logits, target_cls,
                                            F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kSum)) /
                                            norm;
    if (!pred_rows.empty()) {
      auto pred = layer.boxes.reshape({-1, 4}).index_select(0, index_tensor(pred_rows));
      auto gt = torch::stack(gt_boxes);
      auto l1 = (pred - gt).abs().sum();
      auto giou = (1.0 - elementwise_giou(pred, gt)).sum();
      reg_total = reg_total + (opt.w_l1 * l1 + opt.w_giou * giou) / norm;
    }
  }
  (void)C;
  LossBreakdown out;
  out.components["gt_cls"] = cls_total;
  out.components["gt_reg"] = reg_total;
  out.total = cls_total + reg_total;
  return out;
}

LossBreakdown dense_gt_loss(const ModelOutputs& outputs, const std::vector<ImageTargets>& targets,
                            const GtLossOptions& opt, std::vector<AnchorAssignment>& assignments) {
  assignments = tal_assign(outputs, targets, opt.tal);
  const auto B = outputs.cls_logits.size(0);
  const auto A = outputs.cls_logits.size(1);
  const auto bins = outputs.box_distribution.size(-1);
  const auto [H, W] = outputs.input_hw;
  auto target_scores = torch::zeros_like(outputs.cls_logits);
  std::vector<int64_t> rows;
  std::vector<double> weights;
  std::vector<torch::Tensor> gt_boxes;
  for (int64_t b = 0; b < B; ++b) {
    const auto& as = assignments[b];
    const auto& t = targets[b];
    if (as.foreground.empty()) continue;
    // Per-gt normalization of the alignment metric to the best overlap.
    std::map<int, double> max_align, max_iou;
    for (int a : as.foreground) {
      const int g = as.target_of.at(a);
      max_align[g] = std::max(max_align[g], as.alignment_score[a]);
      max_iou[g] = std::max(max_iou[g], as.overlap[a]);
    }
    auto labels = t.labels.to(torch::kLong);
    for (int a : as.foreground) {
      const int g = as.target_of.at(a);
      const double w = as.alignment_score[a] * max_iou[g] / (max_align[g] + 1e-9);
      target_scores[b][a][labels[g].item<int64_t>()] = w;
      rows.push_back(b * A + a);
      weights.push_back(w);
      gt_boxes.push_back(t.boxes[g].to(outputs.boxes.dtype()));
    }
  }
  const double norm = std::max(1.0, target_scores.sum().item<double>());
  auto cls = F::binary_cross_entropy_with_logits(
                 outputs.cls_logits, target_scores,
                 F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kSum)) /
             norm;
  auto reg = zero_like_scalar(outputs.cls_logits);
  if (!rows.empty()) {
    auto idx = index_tensor(rows);
    auto w = torch::tensor(weights, outputs.boxes.options());
    auto pred = outputs.boxes.reshape({-1, 4}).index_select(0, idx);
    auto gt = torch::stack(gt_boxes);
    auto iou_loss = ((1.0 - elementwise_ciou(pred, gt)) * w).sum() / norm;

    // Distance targets in stride units, anchor to gt edges.
    auto anchors = outputs.anchors.index_select(0, idx.remainder(A));
    auto strides = outputs.anchor_strides.index_select(0, idx.remainder(A));
    auto gx = cxcywh_to_xyxy(gt);
    auto ltrb = torch::stack({(anchors.select(1, 0) - gx.select(1, 0)) * W / strides,
                              (anchors.select(1, 1) - gx.select(1, 1)) * H / strides,
                              (gx.select(1, 2) - anchors.select(1, 0)) * W / strides,
                              (gx.select(1, 3) - anchors.select(1, 1)) * H / strides},
                             1)
                    .clamp(0.0, static_cast<double>(bins) - 1.01);
    auto dist = outputs.box_distribution.reshape({-1, 4, bins}).index_select(0, idx);
    auto dfl = (distribution_focal_loss(dist, ltrb).mean(1) * w).sum() / norm;
    reg = opt.w_iou_dense * iou_loss + opt.w_dfl * dfl;
  }
  LossBreakdown out;
  out.components["gt_cls"] = opt.w_cls_dense * cls;
  out.components["gt_reg"] = reg;
  out.total = out.components["gt_cls"] + reg;
  return out;
}

}  // namespace

torch::Tensor distribution_focal_loss(const torch::Tensor& logits, const torch::Tensor& target) {
  const auto bins = logits.size(-1);
  auto left = target.floor().clamp(0, bins - 2).to(torch::kLong);
  auto right = left + 1;
  auto wl = right.to(target.dtype()) - target;
  auto wr = 1.0 - wl;
  auto logp = torch::log_softmax(logits, -1);
  auto lp = logp.gather(-1, left.unsqueeze(-1)).squeeze(-1);
  auto rp = logp.gather(-1, right.unsqueeze(-1)).squeeze(-1);
  return -(lp * wl + rp * wr);
}

GtLossResult detection_gt_loss(const ModelOutputs& outputs,
                               const std::vector<ImageTargets>& targets, HeadKind head,
                               const GtLossOptions& options) {
  GtLossResult r;
  if (head == HeadKind::SetPrediction) {
    r.loss = set_prediction_gt_loss(outputs, targets, options, r.matches);
  } else {
    r.loss = dense_gt_loss(outputs, targets, options, r.assignments);
  }
  return r;
}

torch::Tensor kd_cls_loss(const torch::Tensor& teacher_logits, const torch::Tensor& student_logits,
                          const std::vector<int64_t>& valid, double temperature) {
  if (!(temperature > 0.0)) throw InvalidSpec("temperature must be positive");
  if (valid.empty()) return zero_like_scalar(student_logits);
  auto idx = index_tensor(valid);
  auto t = teacher_logits.detach().index_select(0, idx) / temperature;
  auto s = student_logits.index_select(0, idx) / temperature;
  auto log_pt = torch::log_softmax(t, -1);
  auto log_ps = torch::log_softmax(s, -1);
  auto kl = (log_pt.exp() * (log_pt - log_ps)).sum(-1);
  return kl.mean() * (temperature * temperature);
}

KdRegTerms kd_reg_loss(const torch::Tensor& teacher_boxes, const torch::Tensor& student_boxes,
                       const std::vector<int64_t>& valid, EdgeVariant variant,
                       const torch::Tensor& teacher_distribution,
                       const torch::Tensor& student_distribution, double dfl_temperature) {
  if (valid.empty()) {
    auto z = zero_like_scalar(student_boxes);
    return {z, z};
  }
  auto idx = index_tensor(valid);
  auto tb = teacher_boxes.detach().index_select(0, idx);
  auto sb = student_boxes.index_select(0, idx);
  KdRegTerms out;
  out.iou = (1.0 - elementwise_giou(sb, tb)).mean();
  if (variant == EdgeVariant::L1) {
    out.edge = (sb - tb).abs().sum(-1).mean();
  } else {
    if (!teacher_distribution.defined() || !student_distribution.defined()) {
      throw InvalidConfig("DFL edge distillation needs edge distributions");
    }
    const double T = dfl_temperature;
    auto td = teacher_distribution.detach().index_select(0, idx) / T;
    auto sd = student_distribution.index_select(0, idx) / T;
    auto log_pt = torch::log_softmax(td, -1);
    auto log_ps = torch::log_softmax(sd, -1);
    auto kl = (log_pt.exp() * (log_pt - log_ps)).sum(-1);  // N x 4
    out.edge = kl.mean() * (T * T);
  }
  return out;
}

namespace {

constexpr double kNormEps = 1e-8;

torch::Tensor normalized(const torch::Tensor& v, int64_t dim) {
  return v / (v.norm(2, dim, true) + kNormEps);
}

template <typename PerStage>
torch::Tensor weighted_stage_mean(const std::vector<FeatureBoundary>& boundaries,
                                  const KDHyper& hyper, PerStage per_stage) {
  torch::Tensor total;
  int64_t count = 0;
  for (const auto& fb : boundaries) {
    if (!hyper.supervised_stages.empty() && !hyper.supervised_stages.contains(fb.stage_id)) continue;
    if (fb.essential.sizes() != fb.full.sizes()) {
      throw ShapeError("boundary shapes differ at stage '" + fb.stage_id + "'");
    }
    auto term = hyper.feat_weight(fb.group) * per_stage(fb.essential, fb.full.detach());
    total = total.defined() ? total + term : term;
    ++count;
  }
  if (count == 0) return torch::zeros({});
  return total / static_cast<double>(count);
}

}  // namespace

torch::Tensor kd_feat_loss(const std::vector<FeatureBoundary>& boundaries, const KDHyper& hyper) {
  return weighted_stage_mean(boundaries, hyper, [](const torch::Tensor& ess, const torch::Tensor& full) {
    auto fe = normalized(ess.mean({2, 3}), 1);
    auto ff = normalized(full.mean({2, 3}), 1);
    return (fe - ff).pow(2).sum(1).mean();
  });
}

torch::Tensor kd_feat_spatial_loss(const std::vector<FeatureBoundary>& boundaries,
                                   const KDHyper& hyper) {
  return weighted_stage_mean(boundaries, hyper, [](const torch::Tensor& ess, const torch::Tensor& full) {
    auto xe = normalized(ess, 1);
    auto xf = normalized(full, 1);
    return (xe - xf).pow(2).sum(1).mean();
  });
}

LossBreakdown base_total_loss(const LossBreakdown& gt, const KdTerms& kd, const KDHyper& hyper) {
  validate(hyper);
  auto ref = gt.total;
  auto or_zero = [&](const torch::Tensor& t) { return t.defined() ? t : torch::zeros({}, ref.options()); };
  auto cls = or_zero(kd.cls);
  auto iou = or_zero(kd.iou);
  auto edge = or_zero(kd.edge);
  auto feat = or_zero(kd.feat);
  LossBreakdown out;
  out.components = gt.components;
  out.components["kd_cls"] = cls;
  out.components["kd_reg_iou"] = iou;
  out.components["kd_reg_edge"] = edge;
  out.components["kd_feat"] = feat;
  auto kd_total = hyper.w_cls_kd * cls + hyper.w_iou_kd * iou + hyper.w_edge_kd * edge + feat;
  out.total = hyper.alpha * gt.total + (1.0 - hyper.alpha) * kd_total;
  return out;
}

std::vector<FeatureBoundary> pair_boundaries(const ArchSpec& arch,
                                             const std::map<std::string, BoundaryPair>& teacher,
                                             const std::map<std::string, BoundaryPair>& student,
                                             const KDHyper& hyper) {
  std::vector<FeatureBoundary> out;
  for (const auto& id : arch.adaptable_ids()) {
    if (!hyper.supervised_stages.empty() && !hyper.supervised_stages.contains(id)) continue;
    auto t = teacher.find(id);
    auto s = student.find(id);
    if (t == teacher.end() || s == student.end() || !t->second.full || !s->second.essential) continue;
    out.push_back({id, arch.group_of(id), *s->second.essential, *t->second.full});
  }
  return out;
}

}  // namespace stagedepth
