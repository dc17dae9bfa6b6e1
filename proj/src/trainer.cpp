#include "stagedepth/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "stagedepth/box_ops.hpp"
#include "stagedepth/errors.hpp"
#include "stagedepth/serialization.hpp"

namespace stagedepth {

Batch make_batch(const std::vector<Scene>& scenes, const std::vector<int>& indices) {
  return {images_tensor(scenes, indices), targets_of(scenes, indices)};
}

double learning_rate_at(const OptimizerSettings& optim, std::int64_t step) {
  if (optim.total_steps <= 0) return optim.lr;
  const double t = std::min<double>(step, optim.total_steps) / static_cast<double>(optim.total_steps);
  return optim.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

namespace {

std::unique_ptr<torch::optim::AdamW> make_optimizer(DetectorModel& model, const OptimizerSettings& o) {
  return std::make_unique<torch::optim::AdamW>(
      model->parameters(), torch::optim::AdamWOptions(o.lr).weight_decay(o.weight_decay));
}

void set_lr(torch::optim::AdamW& opt, double lr) {
  for (auto& group : opt.param_groups()) {
    static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
  }
}

void check_finite(const LossBreakdown& loss, const char* pass, std::int64_t step) {
  bool ok = std::isfinite(loss.total.item<double>());
  for (const auto& [k, v] : loss.components) ok = ok && std::isfinite(v.item<double>());
  if (ok) return;
  std::ostringstream os;
  os << pass << " pass at step " << step << ":";
  for (const auto& [k, v] : loss.values()) os << " " << k << "=" << v;
  throw NonFiniteLoss(os.str());
}

void optimizer_step(TrainState& state, const torch::Tensor& loss) {
  state.optimizer->zero_grad();
  loss.backward();
  if (state.optim.grad_clip > 0) {
    std::vector<torch::Tensor> with_grad;
    for (auto& p : state.model->parameters()) {
      if (p.grad().defined()) with_grad.push_back(p);
    }
    torch::nn::utils::clip_grad_norm_(with_grad, state.optim.grad_clip);
  }
  state.optimizer->step();
}

torch::Tensor index_tensor(const std::vector<int64_t>& idx) {
  return torch::tensor(idx, torch::TensorOptions().dtype(torch::kLong));
}

}  // namespace

TrainState make_train_state(const ArchSpec& arch, const KDHyper& hyper, std::uint64_t seed,
                            const OptimizerSettings& optim) {
  validate(arch);
  validate(hyper);
  TrainState s;
  s.arch = arch;
  s.hyper = hyper;
  s.optim = optim;
  s.seed = seed;
  s.model = build_detector(arch, seed);
  s.optimizer = make_optimizer(s.model, optim);
  return s;
}

PassResult super_pass(TrainState& state, const Batch& batch) {
  const auto config = super_config(state.arch);
  auto out = forward(state.model, batch.images, config, Capture::Taken);
  auto gt = detection_gt_loss(out, batch.targets, state.arch.head, state.gt_options);
  PassResult r;
  r.loss = gt.loss;
  auto& t = r.teacher;
  t.logits = out.cls_logits.detach();
  t.boxes = out.boxes.detach();
  if (out.box_distribution.defined()) t.distribution = out.box_distribution.detach();
  if (!gt.matches.empty()) t.matches = gt.matches.back();
  t.assignments = gt.assignments;
  for (const auto& [id, pair] : out.boundary_features) {
    BoundaryPair p;
    if (pair.full) p.full = pair.full->detach();
    t.boundaries[id] = p;
  }
  return r;
}

KdTerms distillation_terms(const ArchSpec& arch, const KDHyper& hyper, const ModelOutputs& student,
                           const GtLossResult& student_gt, const TeacherCache& teacher) {
  KdTerms kd;
  const auto B = student.cls_logits.size(0);
  const auto N = student.cls_logits.size(1);
  const auto C = student.cls_logits.size(2);
  auto s_logits = student.cls_logits.reshape({B * N, C});
  auto s_boxes = student.boxes.reshape({B * N, 4});
  std::vector<int64_t> valid;
  torch::Tensor t_logits, t_boxes, t_dist, s_dist;

  if (arch.head == HeadKind::SetPrediction) {
    // Teacher rows reordered so row k answers the same ground truth as student query k.
    std::vector<int64_t> teacher_row(B * N);
    std::iota(teacher_row.begin(), teacher_row.end(), 0);
    const auto& base_matches = student_gt.matches.back();
    for (int64_t b = 0; b < B; ++b) {
      const auto map = align_teacher_queries(teacher.matches.at(b), base_matches.at(b));
      for (const auto& [q_base, q_super] : map) {
        teacher_row[b * N + q_base] = b * N + q_super;
        valid.push_back(b * N + q_base);
      }
    }
    std::sort(valid.begin(), valid.end());
    auto rows = index_tensor(teacher_row);
    t_logits = teacher.logits.reshape({B * N, C}).index_select(0, rows);
    t_boxes = teacher.boxes.reshape({B * N, 4}).index_select(0, rows);
  } else {
    for (int64_t b = 0; b < B; ++b) {
      const auto sets = kd_anchor_sets(teacher.assignments.at(b), student_gt.assignments.at(b));
      for (int j : sets.valid) valid.push_back(b * N + j);
    }
    t_logits = teacher.logits.reshape({B * N, C});
    t_boxes = teacher.boxes.reshape({B * N, 4});
    const auto bins = student.box_distribution.size(3);
    t_dist = teacher.distribution.reshape({B * N, 4, bins});
    s_dist = student.box_distribution.reshape({B * N, 4, bins});
  }

  kd.cls = kd_cls_loss(t_logits, s_logits, valid, hyper.t_cls);
  const auto reg = kd_reg_loss(t_boxes, s_boxes, valid, hyper.edge_variant, t_dist, s_dist, hyper.t_dfl);
  kd.iou = reg.iou;
  kd.edge = reg.edge;
  const auto pairs = pair_boundaries(arch, teacher.boundaries, student.boundary_features, hyper);
  kd.feat = hyper.feat_alignment == FeatureAlignment::Gap ? kd_feat_loss(pairs, hyper)
                                                          : kd_feat_spatial_loss(pairs, hyper);
  return kd;
}

LossBreakdown base_pass(TrainState& state, const Batch& batch, const TeacherCache& teacher) {
  const auto config = base_config(state.arch);
  auto out = forward(state.model, batch.images, config, Capture::Taken);
  auto gt = detection_gt_loss(out, batch.targets, state.arch.head, state.gt_options);
  const auto kd = distillation_terms(state.arch, state.hyper, out, gt, teacher);
  return base_total_loss(gt.loss, kd, state.hyper);
}

StepMetrics train_step(TrainState& state, const Batch& batch) {
  if (batch.images.dim() != 4 || batch.images.size(0) != static_cast<int64_t>(batch.targets.size())) {
    throw ShapeError("batch images and targets disagree");
  }
  state.model->train();
  const double lr = learning_rate_at(state.optim, state.step);
  set_lr(*state.optimizer, lr);

  auto pass1 = super_pass(state, batch);
  check_finite(pass1.loss, "super", state.step);
  optimizer_step(state, pass1.loss.total);

  auto base_loss = base_pass(state, batch, pass1.teacher);
  check_finite(base_loss, "base", state.step);
  optimizer_step(state, base_loss.total);

  StepMetrics m;
  m.step = state.step;
  m.lr = lr;
  m.super_loss = pass1.loss.values();
  m.base_loss = base_loss.values();
  state.history_super.push_back(m.super_loss);
  state.history_base.push_back(m.base_loss);
  ++state.step;
  return m;
}

namespace {

// Greedy per-class suppression over xyxy boxes sorted by descending score.
std::vector<int64_t> class_nms(const torch::Tensor& boxes_xyxy, const torch::Tensor& scores,
                               double iou_threshold) {
  auto order = std::get<1>(scores.sort(0, /*descending=*/true));
  auto b = boxes_xyxy.index_select(0, order).contiguous();
  auto ba = b.accessor<float, 2>();
  auto oa = order.accessor<int64_t, 1>();
  std::vector<int64_t> keep;
  std::vector<char> removed(order.size(0), 0);
  for (int64_t i = 0; i < order.size(0); ++i) {
    if (removed[i]) continue;
    keep.push_back(oa[i]);
    const BoxXYXY bi{ba[i][0], ba[i][1], ba[i][2], ba[i][3]};
    for (int64_t j = i + 1; j < order.size(0); ++j) {
      if (removed[j]) continue;
      if (iou(bi, BoxXYXY{ba[j][0], ba[j][1], ba[j][2], ba[j][3]}) > iou_threshold) removed[j] = 1;
    }
  }
  return keep;
}

}  // namespace

std::vector<Detection> predict(DetectorModel& model, const std::vector<Scene>& scenes,
                               const DepthConfiguration& config, int batch_size, int max_dets) {
  torch::NoGradGuard guard;
  const bool was_training = model->is_training();
  model->eval();
  std::vector<Detection> dets;
  const int n = static_cast<int>(scenes.size());
  for (int start = 0; start < n; start += batch_size) {
    std::vector<int> idx;
    for (int i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
    auto out = forward(model, images_tensor(scenes, idx), config);
    auto probs = torch::sigmoid(out.cls_logits).to(torch::kFloat);
    auto boxes = out.boxes.to(torch::kFloat);
    const auto N = probs.size(1), C = probs.size(2);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto& scene = scenes[idx[k]];
      auto p = probs[k];
      auto bx = boxes[k];
      std::vector<std::pair<double, std::pair<int64_t, int64_t>>> cand;  // score, (row, class)
      if (model->arch().head == HeadKind::SetPrediction) {
        auto flat = p.reshape({-1});
        const auto kk = std::min<int64_t>(max_dets, flat.size(0));
        auto [vals, inds] = flat.topk(kk);
        for (int64_t i = 0; i < kk; ++i) {
          const auto id = inds[i].item<int64_t>();
          cand.push_back({vals[i].item<double>(), {id / C, id % C}});
        }
      } else {
        auto xyxy = cxcywh_to_xyxy(bx);
        for (int64_t c = 0; c < C; ++c) {
          auto sc = p.select(1, c);
          auto mask = sc > kDenseScoreThreshold;
          auto rows = mask.nonzero().reshape({-1});
          if (rows.size(0) == 0) continue;
          const auto keep = class_nms(xyxy.index_select(0, rows), sc.index_select(0, rows), kDenseNmsIou);
          auto ra = rows.accessor<int64_t, 1>();
          for (auto i : keep) cand.push_back({sc[ra[i]].item<double>(), {ra[i], c}});
        }
        std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
        if (static_cast<int>(cand.size()) > max_dets) cand.resize(max_dets);
      }
      auto ba = bx.contiguous();
      auto acc = ba.accessor<float, 2>();
      for (const auto& [score, rc] : cand) {
        const auto [row, cls] = rc;
        const std::array<double, 4> b{acc[row][0], acc[row][1], acc[row][2], acc[row][3]};
        dets.push_back({idx[k], static_cast<int>(cls), to_pixel_xywh(b, scene.height, scene.width), score});
      }
      (void)N;
    }
  }
  if (was_training) model->train();
  return dets;
}

APReport evaluate_model(DetectorModel& model, const std::vector<Scene>& scenes,
                        const DepthConfiguration& config, int batch_size) {
  if (scenes.empty()) throw InvalidConfig("evaluation set is empty");
  return evaluate_map(predict(model, scenes, config, batch_size), ground_truth_of(scenes),
                      eval_options_for(std::min(scenes[0].height, scenes[0].width)));
}

namespace {

std::vector<int> batch_indices(std::uint64_t seed, std::int64_t step, int n, int batch_size) {
  const int per_epoch = std::max(1, n / batch_size);
  const std::int64_t epoch = step / per_epoch;
  const int pos = static_cast<int>(step % per_epoch);
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0xba7c4u};
  std::mt19937_64 rng(seq);
  std::shuffle(perm.begin(), perm.end(), rng);
  const int b = std::min(batch_size, n);
  return {perm.begin() + pos * b, perm.begin() + pos * b + b};
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(8);
  os << v;
  return os.str();
}

}  // namespace

std::vector<EvalRecord> train(TrainState& state, const std::vector<Scene>& train_set,
                              const std::vector<Scene>& val_set, const Schedule& schedule,
                              const TrainOutputs& outputs) {
  if (train_set.empty()) throw InvalidConfig("training set is empty");
  if (schedule.batch_size < 1) throw InvalidConfig("batch size must be positive");
  std::vector<EvalRecord> evals;
  const bool write = !outputs.dir.empty();
  std::ofstream csv;
  std::vector<std::string> super_keys, base_keys;
  double best_ap = -1.0;
  if (write) std::filesystem::create_directories(outputs.dir);

  auto run_eval = [&]() {
    if (val_set.empty()) return;
    EvalRecord r;
    r.step = state.step;
    r.super_net = evaluate_model(state.model, val_set, super_config(state.arch), schedule.eval_batch);
    r.base_net = evaluate_model(state.model, val_set, base_config(state.arch), schedule.eval_batch);
    evals.push_back(r);
    if (write && r.super_net.ap > best_ap) {
      best_ap = r.super_net.ap;
      save_checkpoint(state, outputs.dir / "best.pt");
    }
  };

  const std::int64_t end = state.step + schedule.steps;
  for (std::int64_t i = 0; i < schedule.steps; ++i) {
    const auto idx = batch_indices(state.seed, state.step, static_cast<int>(train_set.size()),
                                   schedule.batch_size);
    const auto m = train_step(state, make_batch(train_set, idx));
    const bool eval_now = (schedule.eval_every > 0 && state.step % schedule.eval_every == 0) || state.step == end;
    if (eval_now) run_eval();
    if (!write) continue;
    if (!csv.is_open()) {
      const auto path = outputs.dir / "metrics.csv";
      const bool fresh = !std::filesystem::exists(path);
      csv.open(path, std::ios::app);
      for (const auto& [k, v] : m.super_loss) super_keys.push_back(k);
      for (const auto& [k, v] : m.base_loss) base_keys.push_back(k);
      if (fresh) {
        csv << "step,lr";
        for (const auto& k : super_keys) csv << ",super_" << k;
        for (const auto& k : base_keys) csv << ",base_" << k;
        csv << ",eval_super_AP,eval_super_AP50,eval_base_AP,eval_base_AP50\n";
      }
    }
    csv << m.step << "," << fmt(m.lr);
    for (const auto& k : super_keys) csv << "," << fmt(m.super_loss.at(k));
    for (const auto& k : base_keys) csv << "," << fmt(m.base_loss.at(k));
    if (eval_now && !evals.empty() && evals.back().step == state.step) {
      const auto& e = evals.back();
      csv << "," << fmt(e.super_net.ap) << "," << fmt(e.super_net.ap50) << "," << fmt(e.base_net.ap)
          << "," << fmt(e.base_net.ap50) << "\n";
    } else {
      csv << ",,,,\n";
    }
    csv.flush();
  }
  if (write) save_checkpoint(state, outputs.dir / "last.pt");
  return evals;
}

namespace {

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::filesystem::path sidecar_of(const std::filesystem::path& p) { return p.string() + ".json"; }

// Blob layout: magic, record count, then per record
//   u32 name length, name, u8 dtype, u32 rank, i64 sizes[rank], raw little-endian data.
// Records are written in module order, so equal states give equal bytes.
constexpr char kBlobMagic[8] = {'S', 'D', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
void put(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

std::uint8_t dtype_code(torch::Dtype d) {
  switch (d) {
    case torch::kFloat: return 0;
    case torch::kDouble: return 1;
    case torch::kLong: return 2;
    default: throw CheckpointError("unsupported tensor type in checkpoint");
  }
}

torch::Dtype dtype_of(std::uint8_t code) {
  switch (code) {
    case 0: return torch::kFloat;
    case 1: return torch::kDouble;
    case 2: return torch::kLong;
    default: throw CheckpointError("unknown tensor type code " + std::to_string(code));
  }
}

std::vector<std::pair<std::string, torch::Tensor>> state_records(const TrainState& state) {
  std::vector<std::pair<std::string, torch::Tensor>> rec;
  auto& model = *state.model;
  for (const auto& item : model.named_parameters()) rec.emplace_back("model/" + item.key(), item.value());
  for (const auto& item : model.named_buffers()) rec.emplace_back("model/" + item.key(), item.value());
  const auto params = model.parameters();
  const auto& opt_state = state.optimizer->state();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto it = opt_state.find(params[i].unsafeGetTensorImpl());
    if (it == opt_state.end()) continue;
    const auto& st = static_cast<const torch::optim::AdamWParamState&>(*it->second);
    const std::string key = "optim/" + std::to_string(i) + "/";
    rec.emplace_back(key + "step", torch::tensor(st.step(), torch::kLong));
    rec.emplace_back(key + "exp_avg", st.exp_avg());
    rec.emplace_back(key + "exp_avg_sq", st.exp_avg_sq());
  }
  return rec;
}

std::string encode_state(const TrainState& state) {
  const auto rec = state_records(state);
  std::string out(kBlobMagic, sizeof(kBlobMagic));
  put<std::uint64_t>(out, rec.size());
  for (const auto& [name, tensor] : rec) {
    auto t = tensor.detach().cpu().contiguous();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint8_t>(out, dtype_code(t.scalar_type()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
    for (auto d : t.sizes()) put<std::int64_t>(out, d);
    out.append(static_cast<const char*>(t.data_ptr()), t.nbytes());
  }
  return out;
}

void decode_state(const std::string& bytes, TrainState& s, const std::filesystem::path& path) {
  std::size_t pos = 0;
  auto take = [&](std::size_t n) {
    if (pos + n > bytes.size()) throw CheckpointError("truncated tensor data in " + path.string());
    const char* p = bytes.data() + pos;
    pos += n;
    return p;
  };
  auto get = [&]<typename T>(T) {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  };
  if (std::memcmp(take(sizeof(kBlobMagic)), kBlobMagic, sizeof(kBlobMagic)) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint blob");
  }
  std::map<std::string, torch::Tensor> rec;
  const auto count = get(std::uint64_t{});
  for (std::uint64_t r = 0; r < count; ++r) {
    const auto len = get(std::uint32_t{});
    std::string name(take(len), len);
    const auto dtype = dtype_of(get(std::uint8_t{}));
    const auto rank = get(std::uint32_t{});
    std::vector<std::int64_t> sizes(rank);
    for (auto& d : sizes) d = get(std::int64_t{});
    auto t = torch::empty(sizes, torch::TensorOptions().dtype(dtype));
    std::memcpy(t.data_ptr(), take(t.nbytes()), t.nbytes());
    rec[name] = t;
  }
  if (pos != bytes.size()) throw CheckpointError("trailing bytes in " + path.string());

  torch::NoGradGuard guard;
  auto fill = [&](const std::string& key, torch::Tensor target) {
    auto it = rec.find(key);
    if (it == rec.end()) throw CheckpointError("missing tensor '" + key + "' in " + path.string());
    if (it->second.sizes() != target.sizes() || it->second.scalar_type() != target.scalar_type()) {
      throw CheckpointError("tensor '" + key + "' has the wrong shape or type in " + path.string());
    }
    target.copy_(it->second);
  };
  auto& model = *s.model;
  for (auto& item : model.named_parameters()) fill("model/" + item.key(), item.value());
  for (auto& item : model.named_buffers()) fill("model/" + item.key(), item.value());
  const auto params = model.parameters();
  auto& opt_state = s.optimizer->state();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string key = "optim/" + std::to_string(i) + "/";
    auto step = rec.find(key + "step");
    if (step == rec.end()) continue;
    auto st = std::make_unique<torch::optim::AdamWParamState>();
    st->step(step->second.item<std::int64_t>());
    auto avg = torch::zeros_like(params[i]);
    auto avg_sq = torch::zeros_like(params[i]);
    fill(key + "exp_avg", avg);
    fill(key + "exp_avg_sq", avg_sq);
    st->exp_avg(avg);
    st->exp_avg_sq(avg_sq);
    opt_state[params[i].unsafeGetTensorImpl()] = std::move(st);
  }
}

json history_json(const std::vector<std::map<std::string, double>>& h) {
  json out = json::array();
  for (const auto& row : h) out.push_back(row);
  return out;
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  const std::string bytes = encode_state(state);

  json meta = {{"schema_version", kCheckpointSchemaVersion},
               {"step", state.step},
               {"seed", state.seed},
               {"arch_hash", hex(arch_hash(state.arch))},
               {"arch", to_json(state.arch)},
               {"hyper", to_json(state.hyper)},
               {"optimizer", {{"lr", state.optim.lr},
                              {"weight_decay", state.optim.weight_decay},
                              {"total_steps", state.optim.total_steps},
                              {"grad_clip", state.optim.grad_clip}}},
               {"blob_bytes", bytes.size()},
               {"blob_fnv1a", hex(fnv1a(bytes))},
               {"history_super", history_json(state.history_super)},
               {"history_base", history_json(state.history_base)}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_text_atomic(path, bytes);
  write_text_atomic(sidecar_of(path), meta.dump(1));
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  json meta;
  try {
    meta = read_json_file(sidecar_of(path));
  } catch (const std::exception& e) {
    throw CheckpointError("unreadable metadata for " + path.string() + ": " + e.what());
  }
  const int version = meta.value("schema_version", -1);
  if (version != kCheckpointSchemaVersion) {
    throw CheckpointError("schema version " + std::to_string(version) + " in " + path.string() +
                          ", this build reads version " + std::to_string(kCheckpointSchemaVersion));
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != meta.at("blob_bytes").get<std::size_t>()) {
    throw CheckpointError(path.string() + " has " + std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string(meta.at("blob_bytes").get<std::size_t>()) + " (schema version " +
                          std::to_string(version) + ")");
  }
  if (hex(fnv1a(bytes)) != meta.at("blob_fnv1a").get<std::string>()) {
    throw CheckpointError(path.string() + " failed its integrity check (schema version " +
                          std::to_string(version) + ")");
  }

  TrainState s;
  try {
    s.arch = arch_from_json(meta.at("arch"));
    s.hyper = hyper_from_json(meta.at("hyper"));
    const auto& o = meta.at("optimizer");
    s.optim.lr = o.at("lr").get<double>();
    s.optim.weight_decay = o.at("weight_decay").get<double>();
    s.optim.total_steps = o.at("total_steps").get<std::int64_t>();
    s.optim.grad_clip = o.at("grad_clip").get<double>();
    s.step = meta.at("step").get<std::int64_t>();
    s.seed = meta.at("seed").get<std::uint64_t>();
    for (const auto& row : meta.at("history_super")) s.history_super.push_back(row.get<std::map<std::string, double>>());
    for (const auto& row : meta.at("history_base")) s.history_base.push_back(row.get<std::map<std::string, double>>());
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("malformed metadata: ") + e.what());
  }
  if (hex(arch_hash(s.arch)) != meta.at("arch_hash").get<std::string>()) {
    throw CheckpointError("architecture hash mismatch in " + path.string());
  }
  s.model = build_detector(s.arch, s.seed);
  s.optimizer = make_optimizer(s.model, s.optim);
  decode_state(bytes, s, path);
  return s;
}

}  // namespace stagedepth
