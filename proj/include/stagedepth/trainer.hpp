#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "stagedepth/data.hpp"
#include "stagedepth/evaluator.hpp"
#include "stagedepth/hyper.hpp"
#include "stagedepth/losses.hpp"
#include "stagedepth/model.hpp"

namespace stagedepth {

inline constexpr int kCheckpointSchemaVersion = 1;

struct Batch {
  torch::Tensor images;  // B x 3 x H x W
  std::vector<ImageTargets> targets;
};
Batch make_batch(const std::vector<Scene>& scenes, const std::vector<int>& indices);

struct OptimizerSettings {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  // Cosine decay horizon; 0 keeps the learning rate constant.
  std::int64_t total_steps = 0;
  double grad_clip = 10.0;  // max global norm, <= 0 disables
};

struct TrainState {
  ArchSpec arch;
  KDHyper hyper;
  GtLossOptions gt_options;
  OptimizerSettings optim;
  DetectorModel model{nullptr};
  std::unique_ptr<torch::optim::AdamW> optimizer;
  std::int64_t step = 0;
  std::uint64_t seed = 0;  // parameters at init and batch order
  std::vector<std::map<std::string, double>> history_super;
  std::vector<std::map<std::string, double>> history_base;
};

TrainState make_train_state(const ArchSpec& arch, const KDHyper& hyper, std::uint64_t seed,
                            const OptimizerSettings& optim = {});
double learning_rate_at(const OptimizerSettings& optim, std::int64_t step);

/// Pass-1 outputs held fixed while the base net trains on the same batch.
struct TeacherCache {
  torch::Tensor logits;        // B x N x C
  torch::Tensor boxes;         // B x N x 4
  torch::Tensor distribution;  // B x A x 4 x bins (dense head)
  std::vector<MatchResult> matches;            // final-layer matches (set prediction)
  std::vector<AnchorAssignment> assignments;   // dense head
  std::map<std::string, BoundaryPair> boundaries;
};

struct PassResult {
  LossBreakdown loss;
  TeacherCache teacher;  // filled by the super pass only
};

/// Forward of the super-net with the ground-truth loss; no backward.
PassResult super_pass(TrainState& state, const Batch& batch);
/// Forward of the base-net with the distillation objective; no backward.
LossBreakdown base_pass(TrainState& state, const Batch& batch, const TeacherCache& teacher);

/// Distillation terms between a cached teacher and a student forward.
KdTerms distillation_terms(const ArchSpec& arch, const KDHyper& hyper, const ModelOutputs& student,
                           const GtLossResult& student_gt, const TeacherCache& teacher);

struct StepMetrics {
  std::int64_t step = 0;
  double lr = 0.0;
  std::map<std::string, double> super_loss;
  std::map<std::string, double> base_loss;
};

/// Two sequential forward/backward passes, each followed by an optimizer step.
StepMetrics train_step(TrainState& state, const Batch& batch);

struct Schedule {
  std::int64_t steps = 0;
  int batch_size = 16;
  std::int64_t eval_every = 0;  // 0: evaluate once at the end
  int eval_batch = 32;
};

struct TrainOutputs {
  std::filesystem::path dir;  // empty: no files written
};

struct EvalRecord {
  std::int64_t step = 0;
  APReport super_net;
  APReport base_net;
};

/// Runs train_step over shuffled batches. With an output directory it appends
/// metrics.csv and writes checkpoints "last" and "best" (best super-net AP).
std::vector<EvalRecord> train(TrainState& state, const std::vector<Scene>& train_set,
                              const std::vector<Scene>& val_set, const Schedule& schedule,
                              const TrainOutputs& outputs = {});

/// Dense-head post-processing: per-class greedy NMS.
inline constexpr double kDenseNmsIou = 0.65;
inline constexpr double kDenseScoreThreshold = 0.05;

/// Detections of one configuration on the given scenes (model in eval mode).
std::vector<Detection> predict(DetectorModel& model, const std::vector<Scene>& scenes,
                               const DepthConfiguration& config, int batch_size = 32,
                               int max_dets = 100);
APReport evaluate_model(DetectorModel& model, const std::vector<Scene>& scenes,
                        const DepthConfiguration& config, int batch_size = 32);

/// Writes path (serialized parameters, buffers and optimizer state) and
/// path + ".json" (schema version, step, arch hash, hyper, rng, checksum).
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

}  // namespace stagedepth
