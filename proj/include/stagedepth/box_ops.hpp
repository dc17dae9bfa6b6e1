#pragma once

#include <torch/torch.h>

namespace stagedepth {

// Boxes are normalized (cx, cy, w, h) unless a name says xyxy.

torch::Tensor cxcywh_to_xyxy(const torch::Tensor& boxes);
torch::Tensor xyxy_to_cxcywh(const torch::Tensor& boxes);

/// Pairwise IoU, N x 4 and M x 4 cxcywh -> N x M.
torch::Tensor pairwise_iou(const torch::Tensor& a, const torch::Tensor& b);
/// Pairwise generalized IoU, N x M.
torch::Tensor pairwise_giou(const torch::Tensor& a, const torch::Tensor& b);

/// Element-wise over matching rows (... x 4) -> (...).
torch::Tensor elementwise_iou(const torch::Tensor& a, const torch::Tensor& b, double eps = 1e-9);
torch::Tensor elementwise_giou(const torch::Tensor& a, const torch::Tensor& b, double eps = 1e-9);
/// Complete IoU (IoU minus center-distance and aspect-ratio penalties).
torch::Tensor elementwise_ciou(const torch::Tensor& a, const torch::Tensor& b, double eps = 1e-9);

struct BoxXYXY {
  double x1, y1, x2, y2;
  double area() const { return std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1); }
};

double iou(const BoxXYXY& a, const BoxXYXY& b);

}  // namespace stagedepth
