#include "stagedepth/box_ops.hpp"

#include <cmath>
#include <numbers>

namespace stagedepth {

torch::Tensor cxcywh_to_xyxy(const torch::Tensor& b) {
  auto cx = b.select(-1, 0), cy = b.select(-1, 1), w = b.select(-1, 2), h = b.select(-1, 3);
  return torch::stack({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, -1);
}

torch::Tensor xyxy_to_cxcywh(const torch::Tensor& b) {
  auto x1 = b.select(-1, 0), y1 = b.select(-1, 1), x2 = b.select(-1, 2), y2 = b.select(-1, 3);
  return torch::stack({(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1}, -1);
}

namespace {

struct Parts {
  torch::Tensor inter, uni, enclose;
};

// a and b broadcast against each other; boxes in xyxy.
Parts overlap_parts(const torch::Tensor& a, const torch::Tensor& b) {
  auto area_a = (a.select(-1, 2) - a.select(-1, 0)).clamp_min(0) *
                (a.select(-1, 3) - a.select(-1, 1)).clamp_min(0);
  auto area_b = (b.select(-1, 2) - b.select(-1, 0)).clamp_min(0) *
                (b.select(-1, 3) - b.select(-1, 1)).clamp_min(0);
  auto iw = (torch::min(a.select(-1, 2), b.select(-1, 2)) - torch::max(a.select(-1, 0), b.select(-1, 0)))
                .clamp_min(0);
  auto ih = (torch::min(a.select(-1, 3), b.select(-1, 3)) - torch::max(a.select(-1, 1), b.select(-1, 1)))
                .clamp_min(0);
  auto inter = iw * ih;
  auto ew = torch::max(a.select(-1, 2), b.select(-1, 2)) - torch::min(a.select(-1, 0), b.select(-1, 0));
  auto eh = torch::max(a.select(-1, 3), b.select(-1, 3)) - torch::min(a.select(-1, 1), b.select(-1, 1));
  return {inter, area_a + area_b - inter, ew * eh};
}

}  // namespace

torch::Tensor pairwise_iou(const torch::Tensor& a, const torch::Tensor& b) {
  return elementwise_iou(a.unsqueeze(1), b.unsqueeze(0));
}

torch::Tensor pairwise_giou(const torch::Tensor& a, const torch::Tensor& b) {
  return elementwise_giou(a.unsqueeze(1), b.unsqueeze(0));
}

torch::Tensor elementwise_iou(const torch::Tensor& a, const torch::Tensor& b, double eps) {
  auto p = overlap_parts(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b));
  return p.inter / (p.uni + eps);
}

torch::Tensor elementwise_giou(const torch::Tensor& a, const torch::Tensor& b, double eps) {
  auto p = overlap_parts(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b));
  auto iou = p.inter / (p.uni + eps);
  return iou - (p.enclose - p.uni) / (p.enclose + eps);
}

torch::Tensor elementwise_ciou(const torch::Tensor& a, const torch::Tensor& b, double eps) {
  auto ax = cxcywh_to_xyxy(a);
  auto bx = cxcywh_to_xyxy(b);
  auto p = overlap_parts(ax, bx);
  auto iou = p.inter / (p.uni + eps);
  auto cw = torch::max(ax.select(-1, 2), bx.select(-1, 2)) - torch::min(ax.select(-1, 0), bx.select(-1, 0));
  auto ch = torch::max(ax.select(-1, 3), bx.select(-1, 3)) - torch::min(ax.select(-1, 1), bx.select(-1, 1));
  auto c2 = cw.pow(2) + ch.pow(2) + eps;
  auto rho2 = (a.select(-1, 0) - b.select(-1, 0)).pow(2) + (a.select(-1, 1) - b.select(-1, 1)).pow(2);
  const double k = 4.0 / (std::numbers::pi * std::numbers::pi);
  auto v = k * (torch::atan(b.select(-1, 2) / (b.select(-1, 3) + eps)) -
                torch::atan(a.select(-1, 2) / (a.select(-1, 3) + eps)))
                   .pow(2);
  torch::Tensor alpha;
  {
    torch::NoGradGuard guard;
    alpha = v / (v - iou + (1.0 + eps));
  }
  return iou - (rho2 / c2 + v * alpha);
}

double iou(const BoxXYXY& a, const BoxXYXY& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace stagedepth
