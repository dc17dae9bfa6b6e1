#include "doctest_torch.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "stagedepth/errors.hpp"
#include "stagedepth/trainer.hpp"

using namespace stagedepth;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("stagedepth_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool same_parameters(DetectorModel& a, DetectorModel& b) {
  auto pa = a->parameters(), pb = b->parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!torch::equal(pa[i], pb[i])) return false;
  }
  return true;
}

Batch toy_batch(int n, std::uint64_t seed = 1) {
  const auto scenes = generate_dataset(seed, n, DatasetSpec{});
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return make_batch(scenes, idx);
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("with alpha = 1 and no distillation the base pass is plain ground-truth training") {
  for (const auto& arch : {toy_dense_arch(), toy_set_prediction_arch()}) {
    auto hyper = naive_joint_hyper(arch.head);
    REQUIRE(hyper.alpha == 1.0);
    auto state = make_train_state(arch, hyper, 3);
    state.model->train();
    const auto batch = toy_batch(2);
    const auto teacher = super_pass(state, batch).teacher;

    state.model->zero_grad();
    base_pass(state, batch, teacher).total.backward();
    std::vector<torch::Tensor> kd_grads;
    for (auto& p : state.model->parameters()) {
      kd_grads.push_back(p.grad().defined() ? p.grad().clone() : torch::zeros_like(p));
    }

    state.model->zero_grad();
    auto out = forward(state.model, batch.images, base_config(arch));
    detection_gt_loss(out, batch.targets, arch.head, state.gt_options).loss.total.backward();
    auto params = state.model->parameters();
    bool close = true;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto g = params[i].grad().defined() ? params[i].grad() : torch::zeros_like(params[i]);
      // float32 sums over a different graph; equal up to rounding
      close = close && torch::allclose(kd_grads[i], g, 1e-4, 1e-6);
    }
    CHECK(close);
  }
}

TEST_CASE("two training steps are bitwise reproducible") {
  const auto arch = toy_dense_arch();
  const auto batch = toy_batch(4);
  auto a = make_train_state(arch, dense_defaults(), 7);
  auto b = make_train_state(arch, dense_defaults(), 7);
  for (int i = 0; i < 2; ++i) {
    const auto ma = train_step(a, batch);
    const auto mb = train_step(b, batch);
    CHECK(ma.base_loss == mb.base_loss);
  }
  CHECK(same_parameters(a.model, b.model));
  CHECK(a.step == 2);
}

TEST_CASE("a single batch can be overfit") {
  const auto arch = toy_dense_arch();
  const auto batch = toy_batch(4, 21);
  auto state = make_train_state(arch, dense_defaults(), 1, OptimizerSettings{.lr = 2e-3});
  const double first = train_step(state, batch).super_loss.at("total");
  double last = first;
  for (int i = 1; i < 50; ++i) last = train_step(state, batch).super_loss.at("total");
  CHECK(last <= 0.5 * first);
}

TEST_CASE("zero steps leave the model untouched") {
  const auto arch = toy_dense_arch();
  auto state = make_train_state(arch, dense_defaults(), 2);
  auto fresh = build_detector(arch, 2);
  const auto scenes = generate_dataset(1, 4, DatasetSpec{});
  train(state, scenes, {}, Schedule{.steps = 0, .batch_size = 2});
  CHECK(same_parameters(state.model, fresh));
  CHECK(state.step == 0);
}

TEST_CASE("the learning rate follows a cosine decay") {
  OptimizerSettings o{.lr = 1e-3, .total_steps = 100};
  CHECK(learning_rate_at(o, 0) == doctest::Approx(1e-3));
  CHECK(learning_rate_at(o, 50) == doctest::Approx(5e-4));
  CHECK(learning_rate_at(o, 100) == doctest::Approx(0.0));
  CHECK(learning_rate_at(OptimizerSettings{.lr = 1e-3}, 1000) == doctest::Approx(1e-3));
}

TEST_CASE("checkpoints round trip exactly") {
  const auto dir = scratch_dir("ckpt");
  const auto arch = toy_dense_arch();
  auto state = make_train_state(arch, dense_defaults(), 4);
  const auto batch = toy_batch(2);
  train_step(state, batch);
  save_checkpoint(state, dir / "a.pt");
  auto loaded = load_checkpoint(dir / "a.pt");
  save_checkpoint(loaded, dir / "b.pt");
  CHECK(file_bytes(dir / "a.pt") == file_bytes(dir / "b.pt"));
  auto ja = nlohmann::json::parse(file_bytes(dir / "a.pt.json"));
  auto jb = nlohmann::json::parse(file_bytes(dir / "b.pt.json"));
  CHECK(ja == jb);
  CHECK(ja.at("schema_version") == kCheckpointSchemaVersion);
  CHECK(loaded.step == 1);
  CHECK(loaded.hyper == state.hyper);

  torch::NoGradGuard guard;
  state.model->eval();
  loaded.model->eval();
  const auto x = torch::rand({2, 3, 96, 96});
  for (const auto& c : {super_config(arch), base_config(arch)}) {
    CHECK(torch::equal(forward(state.model, x, c).cls_logits, forward(loaded.model, x, c).cls_logits));
  }

  // Training continues identically from the restored optimizer state.
  torch::GradMode::set_enabled(true);
  train_step(state, batch);
  train_step(loaded, batch);
  CHECK(same_parameters(state.model, loaded.model));
  std::filesystem::remove_all(dir);
}

TEST_CASE("damaged checkpoints are rejected") {
  const auto dir = scratch_dir("ckpt_bad");
  auto state = make_train_state(toy_dense_arch(), dense_defaults(), 4);
  save_checkpoint(state, dir / "c.pt");

  const auto bytes = file_bytes(dir / "c.pt");
  {
    std::ofstream out(dir / "c.pt", std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "c.pt"), CheckpointError);

  {
    std::ofstream out(dir / "c.pt", std::ios::binary | std::ios::trunc);
    auto flipped = bytes;
    flipped[flipped.size() / 2] ^= 0x5a;
    out.write(flipped.data(), static_cast<std::streamsize>(flipped.size()));
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "c.pt"), CheckpointError);

  {
    std::ofstream out(dir / "c.pt", std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  auto meta = nlohmann::json::parse(file_bytes(dir / "c.pt.json"));
  meta["schema_version"] = kCheckpointSchemaVersion + 1;
  std::ofstream(dir / "c.pt.json") << meta.dump();
  try {
    load_checkpoint(dir / "c.pt");
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("schema version") != std::string::npos);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.pt"), CheckpointError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("a non-finite loss aborts the step with a component dump") {
  auto state = make_train_state(toy_dense_arch(), dense_defaults(), 0);
  auto batch = toy_batch(2);
  batch.images[0][0][10][10] = std::numeric_limits<float>::quiet_NaN();
  try {
    train_step(state, batch);
    FAIL("expected NonFiniteLoss");
  } catch (const NonFiniteLoss& e) {
    CHECK(std::string(e.what()).find("gt_cls") != std::string::npos);
  }
}

TEST_CASE("the base pass sends no gradient to refinement blocks") {
  for (const auto& arch : {toy_dense_arch(), toy_set_prediction_arch()}) {
    auto state = make_train_state(arch, defaults_for(arch.head), 5);
    state.model->train();
    const auto batch = toy_batch(2);
    const auto teacher = super_pass(state, batch).teacher;
    state.model->zero_grad();
    base_pass(state, batch, teacher).total.backward();
    bool silent = true;
    for (auto& p : state.model->refinement_parameters()) {
      silent = silent && (!p.grad().defined() || p.grad().abs().max().item<double>() == 0.0);
    }
    CHECK(silent);
    double touched = 0;
    for (auto& p : state.model->parameters()) {
      if (p.grad().defined()) touched += p.grad().abs().sum().item<double>();
    }
    CHECK(touched > 0);
  }
}

TEST_CASE("training writes metrics and checkpoints") {
  const auto dir = scratch_dir("train_run");
  auto state = make_train_state(toy_dense_arch(), dense_defaults(), 6);
  const auto train_set = generate_dataset(1, 8, DatasetSpec{});
  const auto val_set = generate_dataset(2, 4, DatasetSpec{});
  const auto records = train(state, train_set, val_set, Schedule{.steps = 3, .batch_size = 4, .eval_every = 2, .eval_batch = 4},
                             TrainOutputs{dir});
  CHECK(records.size() == 2);
  CHECK(records.back().step == 3);
  CHECK(std::filesystem::exists(dir / "metrics.csv"));
  CHECK(std::filesystem::exists(dir / "last.pt"));
  CHECK(std::filesystem::exists(dir / "best.pt.json"));
  CHECK(load_checkpoint(dir / "last.pt").step == 3);
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
