#include "stagedepth/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "stagedepth/box_ops.hpp"
#include "stagedepth/errors.hpp"

namespace stagedepth {

std::vector<int> MatchResult::query_of_gt() const {
  std::vector<int> out(sigma.size(), -1);
  for (const auto& [q, g] : sigma) {
    if (g >= 0 && g < static_cast<int>(out.size())) out[g] = q;
  }
  return out;
}

namespace {

struct Solution {
  double cost = 0.0;
  std::vector<int> col_of_row;  // indexes into the supplied column list
};

// Shortest augmenting path Hungarian method (rows <= cols). cost(r, c) is
// evaluated over the given row/column subsets.
template <typename CostFn>
Solution solve_assignment(int rows, int cols, CostFn cost) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<int> p(cols + 1, 0), way(cols + 1, 0);
  for (int i = 1; i <= rows; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(cols + 1, inf);
    std::vector<char> used(cols + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Solution s;
  s.col_of_row.assign(rows, -1);
  for (int j = 1; j <= cols; ++j) {
    if (p[j] != 0) s.col_of_row[p[j] - 1] = j - 1;
  }
  for (int r = 0; r < rows; ++r) s.cost += cost(r, s.col_of_row[r]);
  return s;
}

}  // namespace

MatchResult hungarian_match(const std::vector<double>& cost, int queries, int targets) {
  if (queries < 0 || targets < 0) throw InvalidConfig("negative matrix dimension");
  if (static_cast<std::size_t>(queries) * targets != cost.size()) {
    throw ShapeError("cost matrix has wrong number of entries");
  }
  if (queries < targets) {
    throw Infeasible("cannot assign " + std::to_string(targets) + " targets to " +
                     std::to_string(queries) + " queries");
  }
  for (double c : cost) {
    if (!std::isfinite(c)) throw InvalidConfig("cost matrix entries must be finite");
  }
  MatchResult result;
  if (targets == 0) return result;
  // Rows of the solver are ground truths, columns are queries.
  auto at = [&](int g, int q) { return cost[static_cast<std::size_t>(q) * targets + g]; };
  const Solution best =
      solve_assignment(targets, queries, [&](int r, int c) { return at(r, c); });
  const double optimum = best.cost;
  const double tol = 1e-9 * std::max(1.0, std::abs(optimum));

  // Lexicographic tie-break: fix ground truths in order, each to the smallest
  // query that still admits an optimal completion.
  std::vector<int> chosen = best.col_of_row;
  std::vector<char> taken(queries, 0);
  double fixed_cost = 0.0;
  for (int g = 0; g < targets; ++g) {
    for (int q = 0; q < chosen[g]; ++q) {
      if (taken[q]) continue;
      std::vector<int> rest_rows, rest_cols;
      for (int r = g + 1; r < targets; ++r) rest_rows.push_back(r);
      for (int c = 0; c < queries; ++c) {
        if (!taken[c] && c != q) rest_cols.push_back(c);
      }
      Solution rest;
      if (!rest_rows.empty()) {
        rest = solve_assignment(static_cast<int>(rest_rows.size()), static_cast<int>(rest_cols.size()),
                                [&](int r, int c) { return at(rest_rows[r], rest_cols[c]); });
      }
      if (fixed_cost + at(g, q) + rest.cost <= optimum + tol) {
        chosen[g] = q;
        for (std::size_t r = 0; r < rest_rows.size(); ++r) {
          chosen[rest_rows[r]] = rest_cols[rest.col_of_row[r]];
        }
        break;
      }
    }
    taken[chosen[g]] = 1;
    fixed_cost += at(g, chosen[g]);
  }
  for (int g = 0; g < targets; ++g) {
    result.sigma[chosen[g]] = g;
    result.cost += at(g, chosen[g]);
  }
  return result;
}

MatchResult hungarian_match(const torch::Tensor& cost) {
  if (cost.dim() != 2) throw ShapeError("cost matrix must be 2-D");
  auto c = cost.detach().to(torch::kDouble).contiguous();
  std::vector<double> values(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
  return hungarian_match(values, static_cast<int>(c.size(0)), static_cast<int>(c.size(1)));
}

torch::Tensor detr_cost_matrix(const torch::Tensor& logits, const torch::Tensor& boxes,
                               const ImageTargets& target, const MatchCostWeights& w) {
  torch::NoGradGuard guard;
  auto prob = torch::sigmoid(logits);                         // Q x C
  auto cls = -prob.index_select(1, target.labels);            // Q x G
  auto l1 = torch::cdist(boxes, target.boxes.to(boxes.dtype()), 1.0);
  auto giou = pairwise_giou(boxes, target.boxes.to(boxes.dtype()));
  return w.cls * cls + w.l1 * l1 + w.giou * (1.0 - giou);
}

MatchResult detr_assign(const torch::Tensor& logits, const torch::Tensor& boxes,
                        const ImageTargets& target, const MatchCostWeights& w) {
  if (target.size() == 0) return {};
  return hungarian_match(detr_cost_matrix(logits, boxes, target, w));
}

std::vector<MatchResult> detr_assign(const ModelOutputs& outputs,
                                     const std::vector<ImageTargets>& targets,
                                     const MatchCostWeights& w) {
  std::vector<MatchResult> out;
  for (std::size_t b = 0; b < targets.size(); ++b) {
    out.push_back(detr_assign(outputs.cls_logits[b], outputs.boxes[b], targets[b], w));
  }
  return out;
}

std::map<int, int> align_teacher_queries(const MatchResult& match_super,
                                         const MatchResult& match_base) {
  std::map<int, int> super_query_of_gt;
  for (const auto& [q, g] : match_super.sigma) super_query_of_gt[g] = q;
  std::map<int, int> out;
  for (const auto& [q, g] : match_base.sigma) {
    auto it = super_query_of_gt.find(g);
    if (it == super_query_of_gt.end()) {
      throw InvalidConfig("ground truth " + std::to_string(g) + " matched by the base net only");
    }
    out[q] = it->second;
  }
  if (out.size() != super_query_of_gt.size()) {
    throw InvalidConfig("matches cover different ground-truth sets");
  }
  return out;
}

AnchorAssignment tal_assign(const torch::Tensor& scores, const torch::Tensor& boxes,
                            const torch::Tensor& anchors, const ImageTargets& target,
                            const TalParams& params) {
  torch::NoGradGuard guard;
  const int A = static_cast<int>(anchors.size(0));
  AnchorAssignment out;
  out.alignment_score.assign(A, 0.0);
  out.overlap.assign(A, 0.0);
  const int G = static_cast<int>(target.size());
  if (G == 0) return out;

  auto gt = target.boxes.to(torch::kDouble);
  auto gt_xyxy = cxcywh_to_xyxy(gt).contiguous();
  auto anc = anchors.to(torch::kDouble).contiguous();
  auto labels = target.labels.to(torch::kLong).contiguous();
  auto s = scores.to(torch::kDouble).index_select(1, labels).contiguous();     // A x G
  auto ov = pairwise_iou(boxes.to(torch::kDouble), gt).clamp_min(0).contiguous();  // A x G
  auto align = (s.pow(params.alpha) * ov.pow(params.beta)).contiguous();
  auto gx = gt_xyxy.accessor<double, 2>();
  auto ax = anc.accessor<double, 2>();
  auto al = align.accessor<double, 2>();
  auto io = ov.accessor<double, 2>();

  constexpr double eps = 1e-9;
  std::vector<int> best_gt(A, -1);
  std::vector<double> best_score(A, -1.0);
  for (int g = 0; g < G; ++g) {
    std::vector<int> cand;
    for (int a = 0; a < A; ++a) {
      const double x = ax[a][0], y = ax[a][1];
      if (x - gx[g][0] > eps && gx[g][2] - x > eps && y - gx[g][1] > eps && gx[g][3] - y > eps) {
        cand.push_back(a);
      }
    }
    std::stable_sort(cand.begin(), cand.end(), [&](int l, int r) { return al[l][g] > al[r][g]; });
    const int keep = std::min<int>(params.topk, static_cast<int>(cand.size()));
    for (int i = 0; i < keep; ++i) {
      const int a = cand[i];
      if (al[a][g] > best_score[a]) {
        best_score[a] = al[a][g];
        best_gt[a] = g;
      }
    }
  }
  for (int a = 0; a < A; ++a) {
    if (best_gt[a] < 0) continue;
    out.foreground.insert(a);
    out.target_of[a] = best_gt[a];
    out.alignment_score[a] = best_score[a];
    out.overlap[a] = io[a][best_gt[a]];
  }
  return out;
}

std::vector<AnchorAssignment> tal_assign(const ModelOutputs& outputs,
                                         const std::vector<ImageTargets>& targets,
                                         const TalParams& params) {
  torch::NoGradGuard guard;
  auto scores = torch::sigmoid(outputs.cls_logits);
  std::vector<AnchorAssignment> out;
  for (std::size_t b = 0; b < targets.size(); ++b) {
    out.push_back(tal_assign(scores[b], outputs.boxes[b], outputs.anchors, targets[b], params));
  }
  return out;
}

KDAnchorSets kd_anchor_sets(const AnchorAssignment& assign_super,
                            const AnchorAssignment& assign_base) {
  KDAnchorSets sets;
  for (int j : assign_super.foreground) {
    if (!assign_base.foreground.contains(j)) continue;
    if (assign_super.target_of.at(j) != assign_base.target_of.at(j)) {
      sets.conflict.insert(j);
    } else {
      sets.valid.insert(j);
    }
  }
  return sets;
}

}  // namespace stagedepth
