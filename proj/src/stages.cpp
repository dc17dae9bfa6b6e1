#include "stagedepth/stages.hpp"

#include "stagedepth/errors.hpp"

namespace stagedepth {

namespace {
thread_local MacTraceScope* active_trace = nullptr;
}

MacTraceScope::MacTraceScope() : previous_(active_trace) { active_trace = this; }
MacTraceScope::~MacTraceScope() { active_trace = previous_; }

void MacTraceScope::record(double macs) {
  for (auto* t = active_trace; t != nullptr; t = t->previous_) t->macs_ += macs;
}

torch::Tensor traced_conv2d(const torch::Tensor& x, const torch::Tensor& weight,
                            const torch::Tensor& bias, int stride, int padding) {
  auto y = torch::conv2d(x, weight, bias, stride, padding);
  if (active_trace != nullptr) {
    MacTraceScope::record(static_cast<double>(weight.size(0)) * weight.size(1) * weight.size(2) *
                          weight.size(3) * y.size(2) * y.size(3));
  }
  return y;
}

SwitchableBatchNormImpl::SwitchableBatchNormImpl(int channels, bool switchable) {
  full = register_module("full", torch::nn::BatchNorm2d(channels));
  if (switchable) essential = register_module("essential", torch::nn::BatchNorm2d(channels));
}

torch::nn::BatchNorm2d& SwitchableBatchNormImpl::bn_branch(ExecutionMode mode) {
  if (mode == ExecutionMode::Essential && !essential.is_empty()) return essential;
  return full;
}

torch::Tensor SwitchableBatchNormImpl::forward(const torch::Tensor& x, ExecutionMode mode) {
  return bn_branch(mode)->forward(x);
}

ConvNormImpl::ConvNormImpl(int c_in, int c_out, int kernel, int stride_, bool switchable,
                           bool activation_)
    : activation(activation_), stride(stride_), padding(kernel / 2) {
  conv = register_module(
      "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(c_in, c_out, kernel).bias(false)));
  norm = register_module("norm", SwitchableBatchNorm(c_out, switchable));
}

torch::Tensor ConvNormImpl::forward(const torch::Tensor& x, ExecutionMode mode) {
  return forward_with_weight(x, conv->weight, mode);
}

torch::Tensor ConvNormImpl::forward_with_weight(const torch::Tensor& x, const torch::Tensor& weight,
                                                ExecutionMode mode) {
  auto y = norm->forward(traced_conv2d(x, weight, {}, stride, padding), mode);
  return activation ? torch::silu(y) : y;
}

void ConvNormImpl::zero_init_norm_scale() {
  torch::NoGradGuard guard;
  norm->full->weight.zero_();
  if (!norm->essential.is_empty()) norm->essential->weight.zero_();
}

// ---------------------------------------------------------------------------

ResidualBlockImpl::ResidualBlockImpl(int channels, int hidden, bool switchable,
                                     bool zero_init_last) {
  conv1 = register_module("conv1", ConvNorm(channels, hidden, 3, 1, switchable, true));
  conv2 = register_module("conv2", ConvNorm(hidden, channels, 3, 1, switchable, false));
  if (zero_init_last) conv2->zero_init_norm_scale();
}

torch::Tensor ResidualBlockImpl::residual(const torch::Tensor& x, ExecutionMode mode) {
  return conv2->forward(conv1->forward(x, mode), mode);
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x, ExecutionMode mode) {
  return x + residual(x, mode);
}

ResidualStage::ResidualStage(StageSpec spec, bool switchable) : AdaptiveStage(std::move(spec)) {
  if (spec_.kind != StageKind::Residual) throw InvalidSpec("stage '" + spec_.id + "' is not residual");
  if (spec_.in_channels != spec_.out_channels) {
    projection = register_module(
        "projection", ConvNorm(spec_.in_channels, spec_.out_channels, 1, 1, switchable, true));
  }
  for (int i = 0; i < spec_.block_count; ++i) {
    const bool refinement = spec_.adaptable() && i >= spec_.split_point;
    // Refinement blocks see one input distribution and keep a single BN.
    auto block = ResidualBlock(spec_.out_channels, spec_.hidden, switchable && !refinement,
                               refinement);
    blocks.push_back(register_module("block" + std::to_string(i), block));
  }
}

torch::Tensor ResidualStage::enter(const torch::Tensor& x, ExecutionMode mode) {
  if (x.dim() != 4 || x.size(1) != spec_.in_channels) {
    throw ShapeError("stage '" + spec_.id + "' expects " + std::to_string(spec_.in_channels) +
                     " input channels");
  }
  return projection.is_empty() ? x : projection->forward(x, mode);
}

torch::Tensor ResidualStage::run_blocks(torch::Tensor x, int begin, int end, ExecutionMode mode) {
  for (int i = begin; i < end; ++i) x = blocks[i]->forward(x, mode);
  return x;
}

StageOutput ResidualStage::forward(const torch::Tensor& x, ExecutionMode mode, Capture capture) {
  mode = effective(mode);
  const int m = spec_.split_point;
  StageOutput out;
  auto h = run_blocks(enter(x, mode), 0, m, mode);
  if (mode == ExecutionMode::Essential) {
    out.output = h;
    if (capture != Capture::None) out.boundary_essential = h;
    return out;
  }
  if (capture == Capture::Both) out.boundary_essential = h;
  h = run_blocks(h, m, spec_.block_count, mode);
  out.output = h;
  if (capture != Capture::None) out.boundary_full = h;
  return out;
}

std::vector<torch::Tensor> ResidualStage::refinement_parameters() {
  std::vector<torch::Tensor> out;
  if (!spec_.adaptable()) return out;
  for (int i = spec_.split_point; i < spec_.block_count; ++i) {
    for (auto& p : blocks[i]->parameters()) out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------

CspBlockImpl::CspBlockImpl(int hidden, bool switchable, bool zero_init_last) {
  conv1 = register_module("conv1", ConvNorm(hidden, hidden, 3, 1, switchable, true));
  conv2 = register_module("conv2", ConvNorm(hidden, hidden, 3, 1, switchable, true));
  if (zero_init_last) conv2->zero_init_norm_scale();
}

torch::Tensor CspBlockImpl::forward(const torch::Tensor& x, ExecutionMode mode) {
  return x + conv2->forward(conv1->forward(x, mode), mode);
}

CspStage::CspStage(StageSpec spec, bool switchable) : AdaptiveStage(std::move(spec)) {
  if (spec_.kind != StageKind::Csp) throw InvalidSpec("stage '" + spec_.id + "' is not csp");
  const int c = spec_.hidden;
  cv1 = register_module("cv1", ConvNorm(spec_.in_channels, c, 1, 1, switchable, true));
  for (int i = 0; i < spec_.block_count; ++i) {
    const bool refinement = spec_.adaptable() && i >= spec_.split_point;
    blocks.push_back(register_module(
        "block" + std::to_string(i), CspBlock(c, switchable && !refinement, refinement)));
  }
  const bool dedicated = spec_.switchable_aggregator;
  // Without a dedicated essential aggregator W_cv2 serves both modes, so its
  // normalizer switches with the mode.
  cv2 = register_module("cv2", ConvNorm((spec_.block_count + 1) * c, spec_.out_channels, 1, 1,
                                        switchable && !dedicated && spec_.adaptable(), true));
  if (dedicated) {
    cv2_essential = register_module(
        "cv2_essential",
        ConvNorm((spec_.split_point + 1) * c, spec_.out_channels, 1, 1, false, true));
    // Start from the column slice of W_cv2 covering inputs 0..m.
    torch::NoGradGuard guard;
    cv2_essential->conv->weight.copy_(
        cv2->conv->weight.slice(1, 0, (spec_.split_point + 1) * c));
  }
  check_aggregators(spec_, aggregators());
}

CspAggregators CspStage::aggregators() const {
  CspAggregators a{cv2->conv->weight, std::nullopt};
  if (!cv2_essential.is_empty()) a.essential_weight = cv2_essential->conv->weight;
  return a;
}

void check_aggregators(const StageSpec& spec, const CspAggregators& aggs) {
  const int c = spec.hidden;
  auto expect = [&](const torch::Tensor& w, int inputs, const char* name) {
    if (w.dim() != 4 || w.size(0) != spec.out_channels || w.size(1) != inputs * c ||
        w.size(2) != 1 || w.size(3) != 1) {
      throw InvalidSpec("stage '" + spec.id + "': " + name + " must be " +
                        std::to_string(spec.out_channels) + "x" + std::to_string(inputs * c) +
                        " 1x1");
    }
  };
  expect(aggs.full_weight, spec.block_count + 1, "W_cv2");
  if (aggs.essential_weight.has_value() != spec.switchable_aggregator) {
    throw InvalidSpec("stage '" + spec.id + "': essential aggregator presence mismatch");
  }
  if (aggs.essential_weight) expect(*aggs.essential_weight, spec.split_point + 1, "W_cv2_ess");
}

torch::Tensor CspStage::aggregate_essential(const torch::Tensor& prefix_concat) {
  if (!cv2_essential.is_empty()) return cv2_essential->forward(prefix_concat);
  const auto cols = (spec_.split_point + 1) * spec_.hidden;
  return cv2->forward_with_weight(prefix_concat, cv2->conv->weight.slice(1, 0, cols),
                                  ExecutionMode::Essential);
}

StageOutput CspStage::forward(const torch::Tensor& x, ExecutionMode mode, Capture capture) {
  if (x.dim() != 4 || x.size(1) != spec_.in_channels) {
    throw ShapeError("stage '" + spec_.id + "' expects " + std::to_string(spec_.in_channels) +
                     " input channels");
  }
  mode = effective(mode);
  const int m = spec_.split_point;
  std::vector<torch::Tensor> chain{cv1->forward(x, mode)};
  for (int i = 0; i < m; ++i) chain.push_back(blocks[i]->forward(chain.back(), mode));
  StageOutput out;
  if (mode == ExecutionMode::Essential) {
    out.output = aggregate_essential(torch::cat(chain, 1));
    if (capture != Capture::None) out.boundary_essential = out.output;
    return out;
  }
  if (capture == Capture::Both && spec_.adaptable()) {
    out.boundary_essential = aggregate_essential(torch::cat(chain, 1));
  }
  for (int i = m; i < spec_.block_count; ++i) chain.push_back(blocks[i]->forward(chain.back(), mode));
  out.output = cv2->forward(torch::cat(chain, 1), mode);
  if (capture != Capture::None) out.boundary_full = out.output;
  return out;
}

std::vector<torch::Tensor> CspStage::refinement_parameters() {
  std::vector<torch::Tensor> out;
  if (!spec_.adaptable()) return out;
  for (int i = spec_.split_point; i < spec_.block_count; ++i) {
    for (auto& p : blocks[i]->parameters()) out.push_back(p);
  }
  return out;
}

std::shared_ptr<AdaptiveStage> make_adaptive_stage(const StageSpec& spec, bool switchable) {
  if (spec.kind == StageKind::Residual) return std::make_shared<ResidualStage>(spec, switchable);
  return std::make_shared<CspStage>(spec, switchable);
}

StageOutput residual_stage_forward(ResidualStage& stage, const torch::Tensor& x,
                                   ExecutionMode mode, bool capture) {
  return stage.forward(x, mode, capture ? Capture::Both : Capture::None);
}

StageOutput csp_stage_forward(CspStage& stage, const torch::Tensor& x, ExecutionMode mode,
                              bool capture) {
  return stage.forward(x, mode, capture ? Capture::Both : Capture::None);
}

}  // namespace stagedepth
