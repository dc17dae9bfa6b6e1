#pragma once

#include <optional>

#include <torch/torch.h>

#include "stagedepth/config.hpp"

namespace stagedepth {

enum class Capture { None, Taken, Both };

struct StageOutput {
  torch::Tensor output;
  std::optional<torch::Tensor> boundary_essential;
  std::optional<torch::Tensor> boundary_full;
};

/// Accumulates per-sample multiply-accumulates of every convolution and
/// matrix product executed on this thread while a scope is alive.
class MacTraceScope {
 public:
  MacTraceScope();
  ~MacTraceScope();
  MacTraceScope(const MacTraceScope&) = delete;
  MacTraceScope& operator=(const MacTraceScope&) = delete;
  double macs() const { return macs_; }

  static void record(double macs);

 private:
  double macs_ = 0.0;
  MacTraceScope* previous_;
};

/// Two independent normalizers (full-mode and essential-mode) for blocks on
/// the essential path; one shared normalizer when built non-switchable.
class SwitchableBatchNormImpl : public torch::nn::Module {
 public:
  SwitchableBatchNormImpl(int channels, bool switchable);

  torch::Tensor forward(const torch::Tensor& x, ExecutionMode mode);
  torch::nn::BatchNorm2d& bn_branch(ExecutionMode mode);
  bool switchable() const { return !essential.is_empty(); }

  torch::nn::BatchNorm2d full{nullptr};
  torch::nn::BatchNorm2d essential{nullptr};
};
TORCH_MODULE(SwitchableBatchNorm);

/// Bias-free convolution, (switchable) batch norm, optional SiLU.
class ConvNormImpl : public torch::nn::Module {
 public:
  ConvNormImpl(int c_in, int c_out, int kernel, int stride, bool switchable, bool activation);

  torch::Tensor forward(const torch::Tensor& x, ExecutionMode mode = ExecutionMode::Full);
  /// Convolution with an explicit weight (used for the column-sliced aggregator).
  torch::Tensor forward_with_weight(const torch::Tensor& x, const torch::Tensor& weight,
                                    ExecutionMode mode);
  void zero_init_norm_scale();

  torch::nn::Conv2d conv{nullptr};
  SwitchableBatchNorm norm{nullptr};
  bool activation;
  int stride;
  int padding;
};
TORCH_MODULE(ConvNorm);

/// Records the MACs of a convolution for the trace and runs it.
torch::Tensor traced_conv2d(const torch::Tensor& x, const torch::Tensor& weight,
                            const torch::Tensor& bias, int stride, int padding);

class AdaptiveStage : public torch::nn::Module {
 public:
  explicit AdaptiveStage(StageSpec spec) : spec_(std::move(spec)) {}
  virtual StageOutput forward(const torch::Tensor& x, ExecutionMode mode, Capture capture) = 0;
  const StageSpec& spec() const { return spec_; }
  /// Parameters of blocks m+1..S.
  virtual std::vector<torch::Tensor> refinement_parameters() = 0;

 protected:
  ExecutionMode effective(ExecutionMode mode) const {
    return spec_.adaptable() ? mode : ExecutionMode::Full;
  }
  StageSpec spec_;
};

/// x_i = x_{i-1} + f_i(x_{i-1}); f is conv3x3-BN-SiLU-conv3x3-BN.
class ResidualBlockImpl : public torch::nn::Module {
 public:
  ResidualBlockImpl(int channels, int hidden, bool switchable, bool zero_init_last);
  torch::Tensor forward(const torch::Tensor& x, ExecutionMode mode);
  torch::Tensor residual(const torch::Tensor& x, ExecutionMode mode);

  ConvNorm conv1{nullptr};
  ConvNorm conv2{nullptr};
};
TORCH_MODULE(ResidualBlock);

class ResidualStage : public AdaptiveStage {
 public:
  ResidualStage(StageSpec spec, bool switchable);

  StageOutput forward(const torch::Tensor& x, ExecutionMode mode, Capture capture) override;
  /// Runs blocks [begin, end) (0-based) on x under the given BN branch.
  torch::Tensor run_blocks(torch::Tensor x, int begin, int end, ExecutionMode mode);
  /// Projection to the stage width, identity when in == out.
  torch::Tensor enter(const torch::Tensor& x, ExecutionMode mode);
  std::vector<torch::Tensor> refinement_parameters() override;

  ConvNorm projection{nullptr};
  std::vector<ResidualBlock> blocks;
};

/// Two 3x3 conv units with hidden width c' and an identity shortcut.
class CspBlockImpl : public torch::nn::Module {
 public:
  CspBlockImpl(int hidden, bool switchable, bool zero_init_last);
  torch::Tensor forward(const torch::Tensor& x, ExecutionMode mode);

  ConvNorm conv1{nullptr};
  ConvNorm conv2{nullptr};
};
TORCH_MODULE(CspBlock);

/// Aggregation weights of a CSP stage: W_cv2 over (S+1)c' inputs and the
/// optional dedicated essential aggregator over (m+1)c' inputs.
struct CspAggregators {
  torch::Tensor full_weight;
  std::optional<torch::Tensor> essential_weight;
};

class CspStage : public AdaptiveStage {
 public:
  CspStage(StageSpec spec, bool switchable);

  StageOutput forward(const torch::Tensor& x, ExecutionMode mode, Capture capture) override;
  CspAggregators aggregators() const;
  /// Essential aggregation of the prefix concat [x0..xm].
  torch::Tensor aggregate_essential(const torch::Tensor& prefix_concat);
  std::vector<torch::Tensor> refinement_parameters() override;

  ConvNorm cv1{nullptr};
  std::vector<CspBlock> blocks;
  ConvNorm cv2{nullptr};
  ConvNorm cv2_essential{nullptr};  // empty unless the stage has a switchable aggregator
};

std::shared_ptr<AdaptiveStage> make_adaptive_stage(const StageSpec& spec, bool switchable);

/// Free-function forms operating on an already built stage.
StageOutput residual_stage_forward(ResidualStage& stage, const torch::Tensor& x,
                                   ExecutionMode mode, bool capture);
StageOutput csp_stage_forward(CspStage& stage, const torch::Tensor& x, ExecutionMode mode,
                              bool capture);

/// Checks W_cv2 / W_cv2_ess shapes against S, m, c' and c_out.
void check_aggregators(const StageSpec& spec, const CspAggregators& aggs);

}  // namespace stagedepth
