// Acceptance run: one PASS/FAIL line per criterion, exit code 1 on any failure.
//
// Environment:
//   STAGEDEPTH_ACCEPT_STEPS  training steps of the desk-scale runs (default 2000)
//   STAGEDEPTH_OUT           directory for run artifacts (default ./acceptance_artifacts)

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include <torch/torch.h>

#include "../oracles.hpp"
#include "stagedepth/analysis.hpp"
#include "stagedepth/losses.hpp"
#include "stagedepth/trainer.hpp"

using namespace stagedepth;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradRelTol = 1e-3;
constexpr double kFeatTol = 1e-6;
constexpr double kCkaTol = 1e-6;
constexpr double kMinStageCka = 0.8;
constexpr double kTradeoffSlack = 0.05;
constexpr double kUntrainedFactor = 5.0;
constexpr double kMaxOverhead = 0.04;
constexpr double kEnumerateBudgetSec = 300.0;
constexpr double kTrainBudgetSec = 1800.0;
constexpr int kTrainImages = 2000;
constexpr int kValImages = 200;
constexpr int kMaxSteps = 5000;
constexpr int kBatch = 16;
constexpr std::uint64_t kSeed = 0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;
std::string transcript;

void say(const std::string& line) {
  std::cout << line << std::endl;
  transcript += line + "\n";
}

void report(int id, const std::string& name, const Outcome& o) {
  say(std::string(o.pass ? "PASS" : "FAIL") + "  C" + std::to_string(id) + " " + name + ": " + o.detail);
  if (!o.pass) ++failures;
}

void run(int id, const std::string& name, const std::function<Outcome()>& body) {
  try {
    report(id, name, body());
  } catch (const std::exception& e) {
    report(id, name, {false, std::string("exception: ") + e.what()});
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

// ---------------------------------------------------------------------------

Outcome exhaustive_configs() {
  torch::NoGradGuard guard;
  const auto t0 = std::chrono::steady_clock::now();
  const auto arch = toy_set_prediction_arch();
  auto model = build_detector(arch, kSeed);
  model->eval();
  const auto x = torch::rand({1, 3, 96, 96});
  const auto configs = enumerate_configs(arch);
  const auto ref = forward(model, x, super_config(arch));
  int bad = 0;
  for (const auto& c : configs) {
    const auto out = forward(model, x, c);
    if (out.cls_logits.sizes() != ref.cls_logits.sizes() || out.boxes.sizes() != ref.boxes.sizes()) ++bad;
  }
  const double secs = seconds_since(t0);
  return {bad == 0 && configs.size() == 768 && secs < kEnumerateBudgetSec,
          std::to_string(configs.size()) + " configs, " + std::to_string(bad) + " shape mismatches, " +
              num(secs, 3) + " s"};
}

Outcome residual_composition() {
  std::mt19937 rng(7);
  int bad = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int S = 2 + static_cast<int>(rng() % 6);
    const int m = 1 + static_cast<int>(rng() % (S - 1));
    const int c_out = 4 + static_cast<int>(rng() % 3) * 4;
    const int c_in = rng() % 2 ? c_out : 6;
    const int hidden = 2 + static_cast<int>(rng() % 6);
    ResidualStage stage(make_stage("S", StageKind::Residual, S, c_in, c_out, hidden, 8, m), true);
    stage.to(torch::kDouble);
    torch::manual_seed(trial);
    {
      torch::NoGradGuard guard;
      for (auto& p : stage.parameters()) p.copy_(torch::randn_like(p) * 0.3);
    }
    stage.eval();
    const auto x = torch::randn({2, c_in, 5, 6}, torch::kDouble);
    const auto full = residual_stage_forward(stage, x, ExecutionMode::Full, true);
    const auto prefix = stage.run_blocks(stage.enter(x, ExecutionMode::Full), 0, m, ExecutionMode::Full);
    const auto composed = stage.run_blocks(prefix, m, S, ExecutionMode::Full);
    if (!torch::equal(full.output, composed) || !torch::equal(*full.boundary_essential, prefix)) ++bad;
  }
  return {bad == 0, "100 random specs, " + std::to_string(bad) + " mismatches (bitwise, float64)"};
}

double gradient_error(const std::function<torch::Tensor(const torch::Tensor&)>& f, torch::Tensor x) {
  x = x.detach().clone().set_requires_grad(true);
  const auto analytic = torch::autograd::grad({f(x)}, {x})[0].reshape(-1);
  const double h = 1e-6;
  auto flat = x.detach().clone().reshape(-1);
  double worst = 0.0;
  for (int64_t i = 0; i < flat.numel(); ++i) {
    auto plus = flat.clone(), minus = flat.clone();
    plus[i] += h;
    minus[i] -= h;
    const double numeric =
        (f(plus.view(x.sizes())).item<double>() - f(minus.view(x.sizes())).item<double>()) / (2 * h);
    worst = std::max(worst, std::abs(analytic[i].item<double>() - numeric) / std::max(1e-3, std::abs(numeric)));
  }
  return worst;
}

torch::Tensor random_boxes(int n) {
  const auto d = torch::TensorOptions().dtype(torch::kDouble);
  return torch::cat({torch::rand({n, 2}, d) * 0.5 + 0.25, torch::rand({n, 2}, d) * 0.3 + 0.1}, 1);
}

Outcome gradient_checks() {
  const auto d = torch::TensorOptions().dtype(torch::kDouble);
  std::map<std::string, double> worst;
  for (int seed = 0; seed < 20; ++seed) {
    torch::manual_seed(1000 + seed);
    const auto t_logits = torch::randn({4, 5}, d);
    const auto t_boxes = random_boxes(4);
    const auto t_dist = torch::randn({4, 4, 6}, d);
    const auto f_full = torch::randn({2, 3, 2, 2}, d);
    const auto target = torch::rand({4, 4}, d) * 4.5;
    const std::vector<int64_t> valid{0, 2, 3};
    const KDHyper h;
    auto track = [&](const std::string& k, double e) { worst[k] = std::max(worst[k], e); };
    track("kd_cls", gradient_error([&](const torch::Tensor& s) { return kd_cls_loss(t_logits, s, valid, 2.0); },
                                   torch::randn({4, 5}, d)));
    track("kd_giou", gradient_error(
                         [&](const torch::Tensor& s) { return kd_reg_loss(t_boxes, s, valid, EdgeVariant::L1).iou; },
                         random_boxes(4)));
    track("kd_dfl", gradient_error(
                        [&](const torch::Tensor& s) {
                          return kd_reg_loss(t_boxes, t_boxes, valid, EdgeVariant::Dfl, t_dist, s, 1.5).edge;
                        },
                        torch::randn({4, 4, 6}, d)));
    track("kd_feat_gap", gradient_error(
                             [&](const torch::Tensor& s) {
                               return kd_feat_loss({{"P2", StageGroup::Backbone, s, f_full}}, h);
                             },
                             torch::randn({2, 3, 2, 2}, d)));
    track("kd_feat_spatial", gradient_error(
                                 [&](const torch::Tensor& s) {
                                   return kd_feat_spatial_loss({{"P2", StageGroup::Backbone, s, f_full}}, h);
                                 },
                                 torch::randn({2, 3, 2, 2}, d)));
    track("dfl", gradient_error([&](const torch::Tensor& s) { return distribution_focal_loss(s, target).sum(); },
                                torch::randn({4, 4, 6}, d)));
  }
  bool ok = true;
  std::string detail = "max rel err:";
  for (const auto& [k, v] : worst) {
    ok = ok && v <= kGradRelTol;
    detail += " " + k + "=" + num(v, 2);
  }
  return {ok && worst.size() == 6, detail};
}

Outcome assignment_oracles() {
  std::mt19937_64 rng(11);
  int hung = 0, sets_bad = 0, align_bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int G = std::uniform_int_distribution<int>(1, 5)(rng);
    const int Q = std::uniform_int_distribution<int>(G, 7)(rng);
    std::vector<double> cost(static_cast<std::size_t>(Q) * G);
    for (auto& c : cost) {
      c = trial % 2 ? std::uniform_real_distribution<double>(-2, 2)(rng)
                    : std::uniform_int_distribution<int>(0, 3)(rng);
    }
    if (hungarian_match(cost, Q, G).query_of_gt() != oracle::brute_force_match(cost, Q, G).query_of_gt) ++hung;
  }
  for (int trial = 0; trial < 1000; ++trial) {
    AnchorAssignment s, b;
    std::bernoulli_distribution fg(0.3);
    for (int a = 0; a < 40; ++a) {
      if (fg(rng)) {
        s.foreground.insert(a);
        s.target_of[a] = static_cast<int>(rng() % 4);
      }
      if (fg(rng)) {
        b.foreground.insert(a);
        b.target_of[a] = static_cast<int>(rng() % 4);
      }
    }
    std::set<int> conflict, valid;
    for (int a = 0; a < 40; ++a) {
      if (s.foreground.count(a) && b.foreground.count(a)) {
        (s.target_of[a] == b.target_of[a] ? valid : conflict).insert(a);
      }
    }
    const auto sets = kd_anchor_sets(s, b);
    if (sets.valid != valid || sets.conflict != conflict) ++sets_bad;
  }
  for (int trial = 0; trial < 1000; ++trial) {
    const int Q = std::uniform_int_distribution<int>(3, 12)(rng);
    const int G = std::uniform_int_distribution<int>(0, Q)(rng);
    std::vector<int> qs(Q), qb(Q);
    std::iota(qs.begin(), qs.end(), 0);
    std::iota(qb.begin(), qb.end(), 0);
    std::shuffle(qs.begin(), qs.end(), rng);
    std::shuffle(qb.begin(), qb.end(), rng);
    MatchResult ms, mb;
    for (int g = 0; g < G; ++g) {
      ms.sigma[qs[g]] = g;
      mb.sigma[qb[g]] = g;
    }
    const auto map = align_teacher_queries(ms, mb);
    bool ok = map.size() == static_cast<std::size_t>(G);
    for (const auto& [k, q] : map) ok = ok && mb.sigma.at(k) == ms.sigma.at(q);
    if (!ok) ++align_bad;
  }
  return {hung + sets_bad + align_bad == 0, "failures: hungarian " + std::to_string(hung) + "/1000, anchor sets " +
                                                std::to_string(sets_bad) + "/1000, query alignment " +
                                                std::to_string(align_bad) + "/1000"};
}

Outcome feature_alignment() {
  const auto d = torch::TensorOptions().dtype(torch::kDouble);
  KDHyper h;
  h.feat_weight_backbone = 1.0;
  double worst_gap = 0, worst_spatial = 0;
  for (int trial = 0; trial < 100; ++trial) {
    torch::manual_seed(trial);
    const auto e = torch::randn({2, 6, 3, 3}, d) + 0.5, f = torch::randn({2, 6, 3, 3}, d) + 0.5;
    const std::vector<FeatureBoundary> fb{{"P3", StageGroup::Backbone, e, f}};
    const auto ge = e.mean({2, 3}), gf = f.mean({2, 3});
    double gap = 0;
    for (int b = 0; b < 2; ++b) {
      const double cos =
          (ge[b] * gf[b]).sum().item<double>() / (ge[b].norm().item<double>() * gf[b].norm().item<double>());
      gap += (1 - cos);  // 2(1 - cos) averaged over the batch of 2
    }
    worst_gap = std::max(worst_gap, std::abs(kd_feat_loss(fb, h).item<double>() - gap));
    double spatial = 0;
    auto ea = e.accessor<double, 4>(), fa = f.accessor<double, 4>();
    for (int b = 0; b < 2; ++b) {
      for (int y = 0; y < 3; ++y) {
        for (int x = 0; x < 3; ++x) {
          double ne = 0, nf = 0, dot = 0;
          for (int c = 0; c < 6; ++c) {
            ne += ea[b][c][y][x] * ea[b][c][y][x];
            nf += fa[b][c][y][x] * fa[b][c][y][x];
            dot += ea[b][c][y][x] * fa[b][c][y][x];
          }
          spatial += 2 * (1 - dot / std::sqrt(ne * nf)) / 18.0;
        }
      }
    }
    worst_spatial = std::max(worst_spatial, std::abs(kd_feat_spatial_loss(fb, h).item<double>() - spatial));
  }
  return {worst_gap <= kFeatTol && worst_spatial <= kFeatTol,
          "max abs err pooled " + num(worst_gap, 2) + ", per-location " + num(worst_spatial, 2) + " (100 inputs)"};
}

std::vector<std::vector<double>> rows_of(const torch::Tensor& t) {
  auto a = t.accessor<double, 2>();
  std::vector<std::vector<double>> out(t.size(0), std::vector<double>(t.size(1)));
  for (int64_t i = 0; i < t.size(0); ++i) {
    for (int64_t j = 0; j < t.size(1); ++j) out[i][j] = a[i][j];
  }
  return out;
}

Outcome cka_correctness() {
  const auto d = torch::TensorOptions().dtype(torch::kDouble);
  double oracle_err = 0, self_err = 0, inv_err = 0;
  for (int seed = 0; seed < 20; ++seed) {
    torch::manual_seed(seed);
    const auto X = torch::randn({40, 7}, d);
    const auto Y = torch::mm(X, torch::randn({7, 5}, d)) + 0.5 * torch::randn({40, 5}, d);
    const double c = linear_cka(X, Y);
    oracle_err = std::max(oracle_err, std::abs(c - oracle::gram_cka(rows_of(X), rows_of(Y))));
    self_err = std::max(self_err, std::abs(linear_cka(X, X) - 1.0));
    const auto Q = std::get<0>(torch::linalg_qr(torch::randn({7, 7}, d)));
    inv_err = std::max(inv_err, std::abs(linear_cka(torch::mm(X, Q) * 2.5, Y) - c));
  }
  return {oracle_err <= kCkaTol && self_err <= kCkaTol && inv_err <= kCkaTol,
          "max abs err: gram oracle " + num(oracle_err, 2) + ", self " + num(self_err, 2) + ", orth/scale " +
              num(inv_err, 2)};
}

// ---------------------------------------------------------------------------
// Desk-scale runs shared by criteria 7-9.

struct DeskRun {
  TrainState full;
  TrainState naive;
  double train_seconds = 0.0;
  APReport untrained_base;
  APReport full_super, full_base;
  CkaReport cka_full, cka_naive;
  std::vector<SweepRow> sweep;
};

int env_int(const char* name, int fallback) {
  const char* v = std::getenv(name);
  return v ? std::atoi(v) : fallback;
}

DeskRun desk_scale(const std::filesystem::path& out_dir, int steps) {
  const auto arch = toy_dense_arch();
  DatasetSpec spec;
  const auto train_set = generate_dataset(2024, kTrainImages, spec);
  const auto val_set = generate_dataset(77, kValImages, spec);
  const OptimizerSettings optim{.lr = 1e-3, .total_steps = steps};
  const Schedule schedule{.steps = steps, .batch_size = kBatch, .eval_every = 0, .eval_batch = 50};

  DeskRun r{make_train_state(arch, dense_defaults(), kSeed, optim),
            make_train_state(non_switchable_twin(arch), naive_joint_hyper(arch.head), kSeed, optim)};
  r.untrained_base = evaluate_model(r.full.model, val_set, base_config(arch), 50);

  auto t0 = std::chrono::steady_clock::now();
  train(r.full, train_set, {}, schedule, TrainOutputs{out_dir / "full"});
  r.train_seconds = seconds_since(t0);
  say("      full method: " + std::to_string(steps) + " steps in " + num(r.train_seconds, 4) + " s");
  t0 = std::chrono::steady_clock::now();
  train(r.naive, train_set, {}, schedule, TrainOutputs{out_dir / "naive"});
  say("      naive joint training: " + std::to_string(steps) + " steps in " + num(seconds_since(t0), 4) + " s");

  r.full_super = evaluate_model(r.full.model, val_set, super_config(arch), 50);
  r.full_base = evaluate_model(r.full.model, val_set, base_config(arch), 50);
  r.cka_full = cka_report(r.full.model, val_set, 200, 50, kValImages * 16, 500, kSeed);
  r.cka_naive = cka_report(r.naive.model, val_set, 200, 50, kValImages * 16, 500, kSeed);
  r.sweep = depth_sweep(r.full.model, val_set, enumerate_configs(arch), 50);

  std::ofstream(out_dir / "cka_full.csv") << cka_csv(r.cka_full);
  std::ofstream(out_dir / "cka_naive.csv") << cka_csv(r.cka_naive);
  std::ofstream(out_dir / "sweep.csv") << sweep_csv(arch, r.sweep);
  std::ofstream(out_dir / "pareto.svg") << pareto_svg(r.sweep, "depth sweep, toy dense detector");
  return r;
}

Outcome training_ordering(const DeskRun& r, int steps) {
  const auto arch = toy_dense_arch();
  const double s50 = r.full_super.ap50, b50 = r.full_base.ap50, u50 = r.untrained_base.ap50;
  const bool a = s50 >= b50 && b50 >= kUntrainedFactor * u50 && b50 > 0.0;
  double min_cka = 1.0;
  std::string worst_stage;
  for (const auto& [id, e] : r.cka_full.stages) {
    if (e.cka < min_cka) {
      min_cka = e.cka;
      worst_stage = id;
    }
  }
  const bool b = min_cka >= kMinStageCka && r.cka_full.stages.size() == arch.adaptable_ids().size();
  std::vector<std::string> neck;
  for (const auto& s : arch.neck) {
    if (s.adaptable()) neck.push_back(s.id);
  }
  const double neck_full = r.cka_full.mean_over(neck), neck_naive = r.cka_naive.mean_over(neck);
  const bool c = neck_full > neck_naive;
  const bool budget = steps <= kMaxSteps && r.train_seconds < kTrainBudgetSec;
  return {a && b && c && budget,
          "(a) AP50 super " + num(s50) + " >= base " + num(b50) + " >= 5x untrained " + num(u50) + " [" +
              (a ? "ok" : "no") + "]; (b) min stage CKA " + num(min_cka) + " at " + worst_stage + " [" +
              (b ? "ok" : "no") + "]; (c) neck CKA full " + num(neck_full) + " > naive " + num(neck_naive) +
              " [" + (c ? "ok" : "no") + "]; " + std::to_string(steps) + " steps, " +
              num(r.train_seconds, 4) + " s"};
}

Outcome smooth_tradeoff(const DeskRun& r) {
  const auto arch = toy_dense_arch();
  const double base_ap = r.full_base.ap;
  double worst = 1.0;
  int below = 0;
  for (const auto& row : r.sweep) {
    worst = std::min(worst, row.report.ap - base_ap);
    if (row.report.ap < base_ap - kTradeoffSlack) ++below;
  }
  int not_monotone = 0;
  for (const auto& c : enumerate_configs(arch)) {
    const double f = flops_estimate(arch, c, {96, 96});
    for (const auto& id : arch.adaptable_ids()) {
      if (c.mode_of(id) == ExecutionMode::Full) continue;
      auto up = c;
      up.stage_modes[id] = ExecutionMode::Full;
      if (!(flops_estimate(arch, up, {96, 96}) > f)) ++not_monotone;
    }
  }
  return {below == 0 && not_monotone == 0 && r.sweep.size() == 256,
          std::to_string(r.sweep.size()) + " configs, base AP " + num(base_ap) + ", min (AP - base AP) " +
              num(worst) + ", " + std::to_string(below) + " below slack; " + std::to_string(not_monotone) +
              " non-monotone flips"};
}

Outcome isolation(DeskRun& r) {
  // Teacher-side inputs.
  const auto d = torch::TensorOptions().dtype(torch::kDouble);
  auto tl = torch::randn({3, 4}, d).set_requires_grad(true), sl = torch::randn({3, 4}, d).set_requires_grad(true);
  auto tb = random_boxes(3).set_requires_grad(true), sb = random_boxes(3).set_requires_grad(true);
  auto td = torch::randn({3, 4, 6}, d).set_requires_grad(true), sd = torch::randn({3, 4, 6}, d).set_requires_grad(true);
  auto ff = torch::randn({2, 3, 2, 2}, d).set_requires_grad(true), fe = torch::randn({2, 3, 2, 2}, d).set_requires_grad(true);
  const auto reg = kd_reg_loss(tb, sb, {0, 1, 2}, EdgeVariant::Dfl, td, sd, 1.0);
  (kd_cls_loss(tl, sl, {0, 1, 2}, 2.0) + reg.iou + reg.edge +
   kd_feat_loss({{"P2", StageGroup::Backbone, fe, ff}}, KDHyper{}) +
   kd_feat_spatial_loss({{"P2", StageGroup::Backbone, fe, ff}}, KDHyper{}))
      .backward();
  const bool teacher_silent = !tl.grad().defined() && !tb.grad().defined() && !td.grad().defined() && !ff.grad().defined();

  // Essential-mode pass of the trained model.
  auto& state = r.full;
  state.model->train();
  const auto batch = make_batch(generate_dataset(5, 8, DatasetSpec{}), {0, 1, 2, 3, 4, 5, 6, 7});
  const auto teacher = super_pass(state, batch).teacher;
  state.model->zero_grad();
  base_pass(state, batch, teacher).total.backward();
  double refinement_grad = 0;
  for (auto& p : state.model->refinement_parameters()) {
    if (p.grad().defined()) refinement_grad += p.grad().abs().sum().item<double>();
  }
  state.model->zero_grad();

  // Branch statistics of every switchable BN after training.
  int branches = 0, identical = 0;
  double min_distance = std::numeric_limits<double>::infinity();
  for (const auto& m : r.full.model->modules(false)) {
    auto* bn = dynamic_cast<SwitchableBatchNormImpl*>(m.get());
    if (!bn || !bn->switchable()) continue;
    ++branches;
    const double dist = (bn->full->running_mean - bn->essential->running_mean).norm().item<double>() +
                        (bn->full->running_var - bn->essential->running_var).norm().item<double>();
    min_distance = std::min(min_distance, dist);
    if (!(dist > 0)) ++identical;
  }
  return {teacher_silent && refinement_grad == 0.0 && branches > 0 && identical == 0,
          std::string("teacher grads ") + (teacher_silent ? "none" : "PRESENT") + "; refinement grad sum " +
              num(refinement_grad) + "; " + std::to_string(branches) + " switchable BNs, min branch distance " +
              num(min_distance)};
}

Outcome parameter_overhead() {
  std::string detail;
  bool ok = true;
  for (const auto& arch : {toy_set_prediction_arch(), toy_dense_arch()}) {
    const auto with = build_detector(arch, kSeed)->parameter_count();
    const auto twin = build_detector(non_switchable_twin(arch), kSeed)->parameter_count();
    const double overhead = static_cast<double>(with - twin) / static_cast<double>(twin);
    ok = ok && overhead < kMaxOverhead && with > twin;
    detail += (detail.empty() ? "" : "; ") + std::string(arch.head == HeadKind::Dense ? "dense " : "set ") +
              std::to_string(with) + " vs " + std::to_string(twin) + " (" + num(100 * overhead, 3) + "%)";
  }
  return {ok, detail};
}

}  // namespace

int main() {
  torch::set_num_threads(1);
  const auto t0 = std::chrono::steady_clock::now();
  const int steps = env_int("STAGEDEPTH_ACCEPT_STEPS", 2000);
  const char* out_env = std::getenv("STAGEDEPTH_OUT");
  const std::filesystem::path out_dir = out_env ? out_env : "acceptance_artifacts";
  std::filesystem::create_directories(out_dir);

  run(1, "exhaustive configuration validity", exhaustive_configs);
  run(2, "residual composition oracle", residual_composition);
  run(3, "loss gradient checks", gradient_checks);
  run(4, "assignment oracles", assignment_oracles);
  run(5, "feature alignment equivalences", feature_alignment);
  run(6, "CKA correctness", cka_correctness);

  std::optional<DeskRun> desk;
  try {
    desk.emplace(desk_scale(out_dir, steps));
  } catch (const std::exception& e) {
    say(std::string("      desk-scale run failed: ") + e.what());
  }
  auto with_desk = [&](auto fn) {
    return [&, fn]() -> Outcome {
      if (!desk) return {false, "desk-scale run unavailable"};
      return fn(*desk);
    };
  };
  run(7, "desk-scale training ordering", with_desk([&](DeskRun& r) { return training_ordering(r, steps); }));
  run(8, "smooth accuracy-compute trade-off", with_desk([](DeskRun& r) { return smooth_tradeoff(r); }));
  run(9, "teacher constancy and gradient isolation", with_desk([](DeskRun& r) { return isolation(r); }));
  run(10, "switchable parameter overhead", parameter_overhead);

  say((failures == 0 ? std::string("ALL PASS") : std::to_string(failures) + " FAILED") + " (" +
      num(seconds_since(t0), 4) + " s, artifacts in " + out_dir.string() + ")");
  std::ofstream(out_dir / "acceptance_report.txt") << transcript;
  return failures == 0 ? 0 : 1;
}
