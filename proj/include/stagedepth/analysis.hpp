#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "stagedepth/config.hpp"
#include "stagedepth/data.hpp"
#include "stagedepth/evaluator.hpp"
#include "stagedepth/model.hpp"

namespace stagedepth {

/// Linear CKA of n x p and n x q matrices (columns centered internally),
/// computed from the p x q cross-covariance. Throws Undefined when either
/// input has zero variance.
double linear_cka(const torch::Tensor& X, const torch::Tensor& Y);

struct BoundaryMatrices {
  torch::Tensor essential;  // rows x C
  torch::Tensor full;       // rows x C
};

/// 4x4 adaptive average pool of every boundary map, flattened to (B*16) x C
/// rows. Consumes scenes in order, at most `max_batches` batches, and keeps
/// the first min(max_samples, rows seen) rows.
std::map<std::string, BoundaryMatrices> collect_boundary_features(DetectorModel& model,
                                                                  const std::vector<Scene>& scenes,
                                                                  int batch_size,
                                                                  int max_samples = 20000,
                                                                  int max_batches = 500);
/// The pooling and flattening step alone: B x C x H x W -> (B*16) x C.
torch::Tensor pooled_rows(const torch::Tensor& feature_map);

struct CkaEntry {
  double cka = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::int64_t n_samples = 0;
};

struct CkaReport {
  std::map<std::string, CkaEntry> stages;
  double mean_over(const std::vector<std::string>& ids) const;
};

/// Percentile bootstrap (rows resampled with replacement), 95% interval.
CkaReport cka_report(const std::map<std::string, BoundaryMatrices>& features, int bootstrap_n = 500,
                     std::uint64_t seed = 0);
CkaReport cka_report(DetectorModel& model, const std::vector<Scene>& scenes, int bootstrap_n = 500,
                     int batch_size = 16, int max_samples = 20000, int max_batches = 500,
                     std::uint64_t seed = 0);
std::string cka_csv(const CkaReport& report);

struct SweepRow {
  DepthConfiguration config;
  double flops = 0.0;
  APReport report;
  bool pareto = false;
};

/// Marks rows not dominated in (lower flops, higher AP).
void mark_pareto(std::vector<SweepRow>& rows);
std::vector<SweepRow> depth_sweep(DetectorModel& model, const std::vector<Scene>& scenes,
                                  const std::vector<DepthConfiguration>& configs, int batch_size = 32);
std::string sweep_csv(const ArchSpec& arch, const std::vector<SweepRow>& rows);
std::vector<SweepRow> read_sweep_csv(const ArchSpec& arch, const std::filesystem::path& path);

/// Accuracy-vs-FLOPs scatter with the Pareto front as a polyline.
std::string pareto_svg(const std::vector<SweepRow>& rows, const std::string& title);

struct PrBreakdown {
  APReport super_net;
  APReport base_net;
  /// (metric, super, base, super - base) in APReport field order.
  std::vector<std::tuple<std::string, double, double, double>> rows;
};
PrBreakdown pr_breakdown(const std::vector<Detection>& predictions_super,
                         const std::vector<Detection>& predictions_base,
                         const std::vector<GroundTruth>& ground_truth, const EvalOptions& options);
std::string pr_breakdown_table(const PrBreakdown& b);

}  // namespace stagedepth
