#include "doctest_torch.hpp"

#include <functional>
#include <random>

#include "oracles.hpp"
#include "stagedepth/errors.hpp"
#include "stagedepth/losses.hpp"

using namespace stagedepth;

namespace {

const auto kD = torch::TensorOptions().dtype(torch::kDouble);

double bce(double logit, double target) {
  const double p = 1.0 / (1.0 + std::exp(-logit));
  return -(target * std::log(p) + (1 - target) * std::log(1 - p));
}

oracle::Box box_of(const torch::Tensor& t) {
  return {t[0].item<double>(), t[1].item<double>(), t[2].item<double>(), t[3].item<double>()};
}

torch::Tensor random_cxcywh(int n) {
  auto c = torch::rand({n, 2}, kD) * 0.5 + 0.25;
  auto s = torch::rand({n, 2}, kD) * 0.3 + 0.1;
  return torch::cat({c, s}, 1);
}

// Largest relative error between autograd and central differences.
double gradient_error(const std::function<torch::Tensor(const torch::Tensor&)>& f, torch::Tensor x) {
  x = x.detach().clone().set_requires_grad(true);
  auto analytic = torch::autograd::grad({f(x)}, {x})[0];
  const double h = 1e-6;
  auto flat = x.detach().clone().reshape(-1);
  double worst = 0.0;
  for (int64_t i = 0; i < flat.numel(); ++i) {
    auto plus = flat.clone(), minus = flat.clone();
    plus[i] += h;
    minus[i] -= h;
    const double numeric = (f(plus.view(x.sizes())).item<double>() - f(minus.view(x.sizes())).item<double>()) / (2 * h);
    const double a = analytic.reshape(-1)[i].item<double>();
    worst = std::max(worst, std::abs(a - numeric) / std::max(1e-3, std::abs(numeric)));
  }
  return worst;
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("set-prediction loss of one query and one object has a closed form") {
  ModelOutputs out;
  auto logits = torch::tensor({{{0.3, -1.2, 0.7}}}, kD);
  auto boxes = torch::tensor({{{0.5, 0.5, 0.2, 0.3}}}, kD);
  out.decoder_aux.push_back({logits, boxes});
  out.cls_logits = logits;
  out.boxes = boxes;
  const ImageTargets t{torch::tensor({{0.55, 0.45, 0.25, 0.3}}, kD), torch::tensor({1}, torch::kLong)};
  const GtLossOptions opt;
  auto r = detection_gt_loss(out, {t}, HeadKind::SetPrediction, opt);
  const double cls = opt.w_cls * (bce(0.3, 0) + bce(-1.2, 1) + bce(0.7, 0));
  const double l1 = 0.05 + 0.05 + 0.05 + 0.0;
  const double reg = opt.w_l1 * l1 + opt.w_giou * (1 - oracle::giou({0.5, 0.5, 0.2, 0.3}, {0.55, 0.45, 0.25, 0.3}));
  CHECK(r.loss.components.at("gt_cls").item<double>() == doctest::Approx(cls).epsilon(1e-10));
  CHECK(r.loss.components.at("gt_reg").item<double>() == doctest::Approx(reg).epsilon(1e-7));
  CHECK(r.loss.total.item<double>() == doctest::Approx(cls + reg).epsilon(1e-7));
  REQUIRE(r.matches.size() == 1);
  CHECK(r.matches[0][0].sigma.at(0) == 0);
}

TEST_CASE("an image without objects yields a pure background loss") {
  ModelOutputs out;
  auto logits = torch::randn({1, 4, 3}, kD);
  out.decoder_aux.push_back({logits, random_cxcywh(4).unsqueeze(0)});
  const ImageTargets empty{torch::empty({0, 4}, kD), torch::empty({0}, torch::kLong)};
  auto r = detection_gt_loss(out, {empty}, HeadKind::SetPrediction);
  double expect = 0;
  auto acc = logits.reshape(-1);
  for (int i = 0; i < acc.numel(); ++i) expect += bce(acc[i].item<double>(), 0);
  CHECK(r.loss.components.at("gt_cls").item<double>() == doctest::Approx(expect).epsilon(1e-10));
  CHECK(r.loss.components.at("gt_reg").item<double>() == 0.0);

  const auto arch = toy_dense_arch();
  auto model = build_detector(arch, 0);
  auto dense = forward(model, torch::rand({1, 3, 96, 96}), super_config(arch));
  auto d = detection_gt_loss(dense, {ImageTargets{torch::empty({0, 4}), torch::empty({0}, torch::kLong)}},
                             HeadKind::Dense);
  CHECK(d.loss.components.at("gt_reg").item<double>() == 0.0);
  CHECK(d.assignments[0].foreground.empty());
  CHECK(std::isfinite(d.loss.total.item<double>()));
}

TEST_CASE("distribution focal loss interpolates the two neighbouring bins") {
  auto logits = torch::tensor({{0.1, 0.4, -0.3, 1.0, 0.2}}, kD);
  auto target = torch::tensor({2.3}, kD);
  auto logp = torch::log_softmax(logits, -1);
  const double expect = -(0.7 * logp[0][2].item<double>() + 0.3 * logp[0][3].item<double>());
  CHECK(distribution_focal_loss(logits, target).item<double>() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("classification distillation equals tempered KL times T squared") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 2);
  for (double T : {1.0, 2.0, 4.0}) {
    auto t = torch::empty({5, 4}, kD), s = torch::empty({5, 4}, kD);
    for (int i = 0; i < 5; ++i) {
      for (int c = 0; c < 4; ++c) {
        t[i][c] = n(rng);
        s[i][c] = n(rng);
      }
    }
    const std::vector<int64_t> valid{0, 2, 3};
    double expect = 0;
    for (auto i : valid) {
      std::vector<double> tv(4), sv(4);
      for (int c = 0; c < 4; ++c) {
        tv[c] = t[i][c].item<double>();
        sv[c] = s[i][c].item<double>();
      }
      expect += oracle::kl_softmax(tv, sv, T) / valid.size();
    }
    CHECK(kd_cls_loss(t, s, valid, T).item<double>() == doctest::Approx(expect).epsilon(1e-10));
  }
  CHECK(kd_cls_loss(torch::zeros({2, 3}), torch::ones({2, 3}), {}, 1.0).item<double>() == 0.0);
  CHECK_THROWS_AS(kd_cls_loss(torch::zeros({2, 3}), torch::ones({2, 3}), {0}, 0.0), InvalidSpec);
}

TEST_CASE("regression distillation follows GIoU and L1 oracles") {
  auto t = random_cxcywh(6), s = random_cxcywh(6);
  const std::vector<int64_t> valid{1, 4, 5};
  double giou = 0, l1 = 0;
  for (auto i : valid) {
    giou += (1 - oracle::giou(box_of(s[i]), box_of(t[i]))) / valid.size();
    l1 += (s[i] - t[i]).abs().sum().item<double>() / valid.size();
  }
  auto r = kd_reg_loss(t, s, valid, EdgeVariant::L1);
  CHECK(r.iou.item<double>() == doctest::Approx(giou).epsilon(1e-7));
  CHECK(r.edge.item<double>() == doctest::Approx(l1).epsilon(1e-10));
  CHECK(kd_reg_loss(t, t, valid, EdgeVariant::L1).iou.item<double>() == doctest::Approx(0.0));
  CHECK_THROWS_AS(kd_reg_loss(t, s, valid, EdgeVariant::Dfl), InvalidConfig);

  auto td = torch::randn({6, 4, 8}, kD), sd = torch::randn({6, 4, 8}, kD);
  auto dfl = kd_reg_loss(t, s, valid, EdgeVariant::Dfl, td, sd, 2.0);
  double expect = 0;
  for (auto i : valid) {
    for (int e = 0; e < 4; ++e) {
      std::vector<double> tv(8), sv(8);
      for (int k = 0; k < 8; ++k) {
        tv[k] = td[i][e][k].item<double>();
        sv[k] = sd[i][e][k].item<double>();
      }
      expect += oracle::kl_softmax(tv, sv, 2.0) / (valid.size() * 4.0);
    }
  }
  CHECK(dfl.edge.item<double>() == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("pooled feature alignment equals 2(1 - cosine)") {
  KDHyper h;
  h.feat_weight_backbone = 1.0;
  for (int trial = 0; trial < 100; ++trial) {
    torch::manual_seed(trial);
    auto e = torch::randn({2, 6, 3, 3}, kD) + 0.5, f = torch::randn({2, 6, 3, 3}, kD) + 0.5;
    const double got = kd_feat_loss({{"P3", StageGroup::Backbone, e, f}}, h).item<double>();
    auto ge = e.mean({2, 3}), gf = f.mean({2, 3});
    double expect = 0;
    for (int b = 0; b < 2; ++b) {
      const double cos = (ge[b] * gf[b]).sum().item<double>() / (ge[b].norm().item<double>() * gf[b].norm().item<double>());
      expect += 2 * (1 - cos) / 2;
    }
    CHECK(got == doctest::Approx(expect).epsilon(1e-6));
  }
}

TEST_CASE("spatial feature alignment matches a per-cell loop") {
  torch::manual_seed(4);
  auto e = torch::randn({2, 5, 3, 4}, kD), f = torch::randn({2, 5, 3, 4}, kD);
  KDHyper h;
  h.feat_weight_neck = 0.3;
  const double got = kd_feat_spatial_loss({{"P4_fpn", StageGroup::Neck, e, f}}, h).item<double>();
  double expect = 0;
  for (int b = 0; b < 2; ++b) {
    for (int y = 0; y < 3; ++y) {
      for (int x = 0; x < 4; ++x) {
        double ne = 0, nf = 0, dot = 0;
        for (int c = 0; c < 5; ++c) {
          const double a = e[b][c][y][x].item<double>(), q = f[b][c][y][x].item<double>();
          ne += a * a;
          nf += q * q;
          dot += a * q;
        }
        expect += 2 * (1 - dot / std::sqrt(ne * nf)) / 24.0;
      }
    }
  }
  CHECK(got == doctest::Approx(0.3 * expect).epsilon(1e-6));
}

TEST_CASE("spatially constant features reduce the spatial variant to the pooled one") {
  torch::manual_seed(8);
  auto e = torch::randn({3, 7, 1, 1}, kD).expand({3, 7, 4, 4}).contiguous();
  auto f = torch::randn({3, 7, 1, 1}, kD).expand({3, 7, 4, 4}).contiguous();
  KDHyper h;
  const std::vector<FeatureBoundary> fb{{"P2", StageGroup::Backbone, e, f}};
  CHECK(kd_feat_spatial_loss(fb, h).item<double>() == doctest::Approx(kd_feat_loss(fb, h).item<double>()).epsilon(1e-9));
}

TEST_CASE("feature alignment averages over supervised stages with group weights") {
  torch::manual_seed(9);
  auto a = torch::randn({2, 4, 2, 2}, kD), b = torch::randn({2, 4, 2, 2}, kD);
  KDHyper h;
  h.feat_weight_backbone = 0.5;
  h.feat_weight_neck = 0.2;
  const double single = kd_feat_loss({{"P2", StageGroup::Backbone, a, b}}, KDHyper{.feat_weight_backbone = 1.0}).item<double>();
  const double both = kd_feat_loss({{"P2", StageGroup::Backbone, a, b}, {"P3_fpn", StageGroup::Neck, a, b}}, h).item<double>();
  CHECK(both == doctest::Approx((0.5 + 0.2) * single / 2).epsilon(1e-10));
  h.supervised_stages = {"P3_fpn"};
  CHECK(kd_feat_loss({{"P2", StageGroup::Backbone, a, b}, {"P3_fpn", StageGroup::Neck, a, b}}, h).item<double>() ==
        doctest::Approx(0.2 * single).epsilon(1e-10));
  CHECK_THROWS_AS(kd_feat_loss({{"P2", StageGroup::Backbone, a, b.slice(2, 0, 1)}}, KDHyper{}), ShapeError);
}

TEST_CASE("alpha mixes ground truth and distillation") {
  LossBreakdown gt;
  gt.total = torch::tensor(2.0, kD);
  KdTerms kd{torch::tensor(1.0, kD), torch::tensor(0.5, kD), torch::tensor(0.25, kD), torch::tensor(0.1, kD)};
  KDHyper h;
  h.w_cls_kd = 2.0;
  h.w_iou_kd = 4.0;
  h.w_edge_kd = 8.0;
  const double kd_sum = 2.0 * 1.0 + 4.0 * 0.5 + 8.0 * 0.25 + 0.1;
  for (double alpha : {0.0, 0.2, 1.0}) {
    h.alpha = alpha;
    CHECK(base_total_loss(gt, kd, h).total.item<double>() == doctest::Approx(alpha * 2.0 + (1 - alpha) * kd_sum));
  }
  h.alpha = 1.5;
  CHECK_THROWS_AS(base_total_loss(gt, kd, h), InvalidSpec);
}

TEST_CASE("analytic gradients agree with finite differences") {
  for (int seed = 0; seed < 20; ++seed) {
    torch::manual_seed(100 + seed);
    const auto teacher_logits = torch::randn({4, 5}, kD);
    const auto teacher_boxes = random_cxcywh(4);
    const auto teacher_dist = torch::randn({4, 4, 6}, kD);
    const auto feat_full = torch::randn({2, 3, 2, 2}, kD);
    const std::vector<int64_t> valid{0, 2, 3};
    const KDHyper h;
    CAPTURE(seed);

    CHECK(gradient_error([&](const torch::Tensor& s) { return kd_cls_loss(teacher_logits, s, valid, 2.0); },
                         torch::randn({4, 5}, kD)) <= 1e-3);
    CHECK(gradient_error([&](const torch::Tensor& s) { return kd_reg_loss(teacher_boxes, s, valid, EdgeVariant::L1).iou; },
                         random_cxcywh(4)) <= 1e-3);
    CHECK(gradient_error(
              [&](const torch::Tensor& s) {
                return kd_reg_loss(teacher_boxes, teacher_boxes, valid, EdgeVariant::Dfl, teacher_dist, s, 1.5).edge;
              },
              torch::randn({4, 4, 6}, kD)) <= 1e-3);
    CHECK(gradient_error(
              [&](const torch::Tensor& s) {
                return kd_feat_loss({{"P2", StageGroup::Backbone, s, feat_full}}, h);
              },
              torch::randn({2, 3, 2, 2}, kD)) <= 1e-3);
    CHECK(gradient_error(
              [&](const torch::Tensor& s) {
                return kd_feat_spatial_loss({{"P2", StageGroup::Backbone, s, feat_full}}, h);
              },
              torch::randn({2, 3, 2, 2}, kD)) <= 1e-3);
    auto target = torch::rand({4, 4}, kD) * 4.5;
    CHECK(gradient_error([&](const torch::Tensor& s) { return distribution_focal_loss(s, target).sum(); },
                         torch::randn({4, 4, 6}, kD)) <= 1e-3);
  }
}

TEST_CASE("teacher tensors never receive gradient") {
  auto t = torch::randn({3, 4}, kD).set_requires_grad(true);
  auto s = torch::randn({3, 4}, kD).set_requires_grad(true);
  kd_cls_loss(t, s, {0, 1, 2}, 1.0).backward();
  CHECK_FALSE(t.grad().defined());
  CHECK(s.grad().abs().sum().item<double>() > 0);

  auto tb = random_cxcywh(3).set_requires_grad(true);
  auto sb = random_cxcywh(3).set_requires_grad(true);
  auto r = kd_reg_loss(tb, sb, {0, 1, 2}, EdgeVariant::L1);
  (r.iou + r.edge).backward();
  CHECK_FALSE(tb.grad().defined());

  auto ff = torch::randn({1, 3, 2, 2}, kD).set_requires_grad(true);
  auto fe = torch::randn({1, 3, 2, 2}, kD).set_requires_grad(true);
  kd_feat_loss({{"P2", StageGroup::Backbone, fe, ff}}, KDHyper{}).backward();
  CHECK_FALSE(ff.grad().defined());
  CHECK(fe.grad().defined());
}

}  // TEST_SUITE
