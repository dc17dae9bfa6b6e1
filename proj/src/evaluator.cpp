#include "stagedepth/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <tuple>

#include "stagedepth/errors.hpp"

namespace stagedepth {

std::vector<std::pair<std::string, double>> APReport::fields() const {
  return {{"AP", ap},           {"AP50", ap50},         {"AP75", ap75},
          {"APs", ap_small},    {"APm", ap_medium},     {"APl", ap_large},
          {"AR1", ar1},         {"AR10", ar10},         {"AR100", ar100},
          {"ARs", ar_small},    {"ARm", ar_medium},     {"ARl", ar_large}};
}

EvalOptions eval_options_for(int image_side) {
  EvalOptions o;
  const double s = kSmallSide * image_side;
  const double m = kMediumSide * image_side;
  o.small_area = s * s;
  o.medium_area = m * m;
  return o;
}

std::array<double, 4> to_pixel_xywh(const std::array<double, 4>& b, int height, int width) {
  const double w = b[2] * width, h = b[3] * height;
  return {b[0] * width - w / 2, b[1] * height - h / 2, w, h};
}

std::vector<GroundTruth> ground_truth_of(const std::vector<Scene>& scenes) {
  std::vector<GroundTruth> out;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    for (const auto& o : scenes[i].objects) {
      out.push_back({static_cast<int>(i), o.category, to_pixel_xywh(o.box, scenes[i].height, scenes[i].width)});
    }
  }
  return out;
}

namespace {

double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  const double iw = std::max(0.0, std::min(a[0] + a[2], b[0] + b[2]) - std::max(a[0], b[0]));
  const double ih = std::max(0.0, std::min(a[1] + a[3], b[1] + b[3]) - std::max(a[1], b[1]));
  const double inter = iw * ih;
  const double uni = a[2] * a[3] + b[2] * b[3] - inter;
  return uni > 0 ? inter / uni : 0.0;
}

struct AreaRange {
  double lo, hi;
  bool contains(double area) const { return area >= lo && area < hi; }
};

// Matching result of one (image, category, area range) cell at every IoU
// threshold, for detections truncated to the largest max_dets.
struct CellEval {
  std::vector<const Detection*> dets;            // score order
  std::vector<std::vector<char>> matched;        // [t][d]
  std::vector<std::vector<char>> ignored;        // [t][d]
  int n_gt = 0;                                  // non-ignored ground truths
};

CellEval evaluate_cell(std::vector<const Detection*> dets, const std::vector<const GroundTruth*>& gts,
                       const AreaRange& range, const std::vector<double>& thresholds, int max_det) {
  CellEval cell;
  // Non-ignored ground truths first.
  std::vector<const GroundTruth*> sorted_gt;
  std::vector<char> gt_ignore;
  for (int pass = 0; pass < 2; ++pass) {
    for (const auto* g : gts) {
      const bool ign = !range.contains(g->bbox[2] * g->bbox[3]);
      if (ign == (pass == 1)) {
        sorted_gt.push_back(g);
        gt_ignore.push_back(ign);
      }
    }
  }
  for (char c : gt_ignore) cell.n_gt += !c;
  if (static_cast<int>(dets.size()) > max_det) dets.resize(max_det);
  cell.dets = dets;
  const std::size_t D = dets.size(), G = sorted_gt.size();
  for (double t : thresholds) {
    std::vector<char> gt_used(G, 0), dm(D, 0), di(D, 0);
    for (std::size_t d = 0; d < D; ++d) {
      double best = std::min(t, 1.0 - 1e-10);
      int m = -1;
      for (std::size_t g = 0; g < G; ++g) {
        if (gt_used[g]) continue;
        if (m > -1 && !gt_ignore[m] && gt_ignore[g]) break;
        const double iou = box_iou(dets[d]->bbox, sorted_gt[g]->bbox);
        if (iou < best) continue;
        best = iou;
        m = static_cast<int>(g);
      }
      if (m == -1) {
        di[d] = !range.contains(dets[d]->bbox[2] * dets[d]->bbox[3]);
        continue;
      }
      gt_used[m] = 1;
      dm[d] = 1;
      di[d] = gt_ignore[m];
    }
    cell.matched.push_back(std::move(dm));
    cell.ignored.push_back(std::move(di));
  }
  return cell;
}

struct PrResult {
  double precision = -1.0;  // 101-point average, -1 when no ground truth
  double recall = -1.0;
};

bool canonical_less(const Detection* a, const Detection* b) {
  return std::make_tuple(-a->score, a->image_id, a->category, a->bbox) <
         std::make_tuple(-b->score, b->image_id, b->category, b->bbox);
}

PrResult accumulate(const std::vector<const CellEval*>& cells, std::size_t t, int max_det) {
  int n_gt = 0;
  struct Entry {
    const Detection* det;
    bool tp;
  };
  std::vector<Entry> entries;
  for (const auto* c : cells) {
    n_gt += c->n_gt;
    const std::size_t n = std::min<std::size_t>(c->dets.size(), max_det);
    for (std::size_t d = 0; d < n; ++d) {
      if (c->ignored[t][d]) continue;
      entries.push_back({c->dets[d], c->matched[t][d] != 0});
    }
  }
  PrResult r;
  if (n_gt == 0) return r;
  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& a, const Entry& b) { return canonical_less(a.det, b.det); });
  std::vector<double> rec, prec;
  double tp = 0, fp = 0;
  for (const auto& e : entries) {
    (e.tp ? tp : fp) += 1;
    rec.push_back(tp / n_gt);
    prec.push_back(tp / (tp + fp + std::numeric_limits<double>::epsilon()));
  }
  r.recall = rec.empty() ? 0.0 : rec.back();
  for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double sum = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double level = k / 100.0;
    const auto it = std::lower_bound(rec.begin(), rec.end(), level);
    if (it != rec.end()) sum += prec[static_cast<std::size_t>(it - rec.begin())];
  }
  r.precision = sum / 101.0;
  return r;
}

double mean_valid(const std::vector<double>& v) {
  double s = 0;
  int n = 0;
  for (double x : v) {
    if (x >= 0) {
      s += x;
      ++n;
    }
  }
  return n ? s / n : 0.0;
}

}  // namespace

APReport evaluate_map(const std::vector<Detection>& detections,
                      const std::vector<GroundTruth>& ground_truth, const EvalOptions& options) {
  std::vector<double> thresholds = options.iou_thresholds;
  if (thresholds.empty()) {
    for (int i = 0; i < 10; ++i) thresholds.push_back(0.5 + 0.05 * i);
  }
  for (double t : thresholds) {
    if (!(t > 0.0 && t <= 1.0)) throw InvalidConfig("IoU thresholds must lie in (0, 1]");
  }
  const double small = options.small_area > 0 ? options.small_area : 32.0 * 32.0;
  const double medium = options.medium_area > 0 ? options.medium_area : 96.0 * 96.0;
  constexpr double inf = std::numeric_limits<double>::infinity();
  const std::array<AreaRange, 4> ranges{AreaRange{0, inf}, AreaRange{0, small}, AreaRange{small, medium},
                                        AreaRange{medium, inf}};
  const int max_det = *std::max_element(options.max_dets.begin(), options.max_dets.end());

  using Key = std::pair<int, int>;  // (image, category)
  std::map<Key, std::vector<const Detection*>> det_by;
  std::map<Key, std::vector<const GroundTruth*>> gt_by;
  std::set<int> categories;
  for (const auto& g : ground_truth) {
    gt_by[{g.image_id, g.category}].push_back(&g);
    categories.insert(g.category);
  }
  for (const auto& d : detections) {
    if (!std::isfinite(d.score)) throw InvalidConfig("detection score must be finite");
    det_by[{d.image_id, d.category}].push_back(&d);
    categories.insert(d.category);
  }
  for (auto& [k, v] : det_by) std::sort(v.begin(), v.end(), canonical_less);
  std::set<Key> keys;
  for (const auto& [k, v] : det_by) keys.insert(k);
  for (const auto& [k, v] : gt_by) keys.insert(k);

  // cells[range][category] -> evaluated cells of every image
  std::vector<std::map<int, std::vector<CellEval>>> cells(ranges.size());
  static const std::vector<const GroundTruth*> no_gt;
  static const std::vector<const Detection*> no_det;
  for (std::size_t a = 0; a < ranges.size(); ++a) {
    for (const auto& key : keys) {
      auto dit = det_by.find(key);
      auto git = gt_by.find(key);
      cells[a][key.second].push_back(evaluate_cell(dit == det_by.end() ? no_det : dit->second,
                                                   git == gt_by.end() ? no_gt : git->second,
                                                   ranges[a], thresholds, max_det));
    }
  }

  auto metric = [&](std::size_t area, int max_d, bool want_precision,
                    const std::vector<std::size_t>& thr) {
    std::vector<double> values;
    for (int c : categories) {
      std::vector<const CellEval*> ptrs;
      for (const auto& cell : cells[area][c]) ptrs.push_back(&cell);
      for (std::size_t t : thr) {
        const PrResult r = accumulate(ptrs, t, max_d);
        values.push_back(want_precision ? r.precision : r.recall);
      }
    }
    return mean_valid(values);
  };

  std::vector<std::size_t> all_t(thresholds.size());
  std::iota(all_t.begin(), all_t.end(), 0);
  auto index_of = [&](double t) -> std::vector<std::size_t> {
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      if (std::abs(thresholds[i] - t) < 1e-9) return {i};
    }
    return {};
  };

  APReport r;
  r.ap = metric(0, max_det, true, all_t);
  const auto t50 = index_of(0.5), t75 = index_of(0.75);
  r.ap50 = t50.empty() ? 0.0 : metric(0, max_det, true, t50);
  r.ap75 = t75.empty() ? 0.0 : metric(0, max_det, true, t75);
  r.ap_small = metric(1, max_det, true, all_t);
  r.ap_medium = metric(2, max_det, true, all_t);
  r.ap_large = metric(3, max_det, true, all_t);
  r.ar1 = metric(0, options.max_dets[0], false, all_t);
  r.ar10 = metric(0, options.max_dets[1], false, all_t);
  r.ar100 = metric(0, options.max_dets[2], false, all_t);
  r.ar_small = metric(1, max_det, false, all_t);
  r.ar_medium = metric(2, max_det, false, all_t);
  r.ar_large = metric(3, max_det, false, all_t);
  return r;
}

}  // namespace stagedepth
