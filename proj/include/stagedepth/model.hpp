#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "stagedepth/config.hpp"
#include "stagedepth/stages.hpp"

namespace stagedepth {

struct BoundaryPair {
  std::optional<torch::Tensor> essential;
  std::optional<torch::Tensor> full;
};

/// Predictions of one decoder layer (set-prediction head).
struct LayerPrediction {
  torch::Tensor logits;  // B x Q x C
  torch::Tensor boxes;   // B x Q x 4, normalized cxcywh
};

struct ModelOutputs {
  torch::Tensor cls_logits;  // B x N x C (N = queries or anchors)
  torch::Tensor boxes;       // B x N x 4, normalized cxcywh
  std::map<std::string, BoundaryPair> boundary_features;
  std::vector<LayerPrediction> decoder_aux;  // layers 1..exit

  // Dense head only.
  torch::Tensor box_distribution;  // B x A x 4 x bins, raw logits (ltrb)
  torch::Tensor anchors;           // A x 2, normalized anchor centers
  torch::Tensor anchor_strides;    // A, stride in pixels
  std::pair<int, int> input_hw{0, 0};
};

/// Linear layer that reports its MACs to an active MacTraceScope.
class TracedLinearImpl : public torch::nn::Module {
 public:
  TracedLinearImpl(int in, int out);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Linear linear{nullptr};
};
TORCH_MODULE(TracedLinear);

class MultiHeadAttentionImpl : public torch::nn::Module {
 public:
  MultiHeadAttentionImpl(int dim, int heads);
  torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& key,
                        const torch::Tensor& value);

  TracedLinear q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr}, out_proj{nullptr};
  int heads;
};
TORCH_MODULE(MultiHeadAttention);

class DecoderLayerImpl : public torch::nn::Module {
 public:
  DecoderLayerImpl(int dim, int heads, int ffn_dim);
  torch::Tensor forward(torch::Tensor tgt, const torch::Tensor& query_pos,
                        const torch::Tensor& memory, const torch::Tensor& memory_pos);

  MultiHeadAttention self_attn{nullptr}, cross_attn{nullptr};
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr}, norm3{nullptr};
  TracedLinear ffn1{nullptr}, ffn2{nullptr};
};
TORCH_MODULE(DecoderLayer);

/// Transformer decoder over flattened multi-scale memory with learned
/// queries, per-layer class/box heads and iterative box refinement.
class SetPredictionHeadImpl : public torch::nn::Module {
 public:
  SetPredictionHeadImpl(const ArchSpec& arch);

  /// Runs decoder layers 1..exit_depth and returns each layer's predictions.
  std::vector<LayerPrediction> decode(const torch::Tensor& memory, const torch::Tensor& memory_pos,
                                      int exit_depth);
  int num_layers() const { return static_cast<int>(layers.size()); }

  torch::Tensor query_content;    // Q x d
  torch::Tensor query_reference;  // Q x 4, inverse-sigmoid boxes
  torch::Tensor level_embed;      // 3 x d
  std::vector<DecoderLayer> layers;
  std::vector<TracedLinear> class_heads;
  std::vector<TracedLinear> box_layers;  // three per decoder layer: d->d, d->d, d->4
  TracedLinear pos1{nullptr}, pos2{nullptr};
};
TORCH_MODULE(SetPredictionHead);

std::vector<LayerPrediction> decoder_forward_with_exit(SetPredictionHeadImpl& head,
                                                       const torch::Tensor& memory,
                                                       const torch::Tensor& memory_pos,
                                                       int exit_depth);

/// Per-scale decoupled class and distance-distribution towers over
/// grid-cell-center anchor points.
class DenseHeadImpl : public torch::nn::Module {
 public:
  DenseHeadImpl(const ArchSpec& arch);
  std::vector<ConvNorm> cls_tower, box_tower;  // 2 per level
  std::vector<torch::nn::Conv2d> cls_pred, box_pred;
  int num_classes;
  int bins;
};
TORCH_MODULE(DenseHead);

/// Anchor points (normalized) and strides for the three head levels.
std::pair<torch::Tensor, torch::Tensor> make_anchor_points(const std::vector<std::pair<int, int>>& sizes,
                                                           const std::vector<int>& strides,
                                                           std::pair<int, int> input_hw,
                                                           torch::Dtype dtype);

/// Expected ltrb distances (in stride units) from bin logits, then boxes
/// clamped to the image and converted to normalized cxcywh.
torch::Tensor decode_dense_boxes(const torch::Tensor& distribution_logits,
                                 const torch::Tensor& anchors, const torch::Tensor& strides,
                                 std::pair<int, int> input_hw);

class DetectorModelImpl : public torch::nn::Module {
 public:
  explicit DetectorModelImpl(ArchSpec arch);

  ModelOutputs forward(const torch::Tensor& images, const DepthConfiguration& config,
                       Capture capture = Capture::None);

  const ArchSpec& arch() const { return arch_; }
  AdaptiveStage& stage(const std::string& id);
  /// Parameters of every refinement block in the network.
  std::vector<torch::Tensor> refinement_parameters();
  std::int64_t parameter_count();

  ConvNorm stem1{nullptr}, stem2{nullptr};
  std::vector<ConvNorm> transitions;
  std::vector<std::shared_ptr<AdaptiveStage>> stages;  // backbone then neck, arch order
  ConvNorm lat3{nullptr}, lat4{nullptr}, lat5{nullptr};
  ConvNorm down4{nullptr}, down5{nullptr};
  SetPredictionHead set_head{nullptr};
  DenseHead dense_head{nullptr};

 private:
  ModelOutputs run_set_head(const std::vector<torch::Tensor>& levels, int exit_depth);
  ModelOutputs run_dense_head(const std::vector<torch::Tensor>& levels,
                              std::pair<int, int> input_hw);
  ArchSpec arch_;
};
TORCH_MODULE(DetectorModel);

/// Deterministic given the seed.
DetectorModel build_detector(const ArchSpec& arch, std::uint64_t seed);

/// Forward under the model's current train/eval state.
ModelOutputs forward(DetectorModel& model, const torch::Tensor& images,
                     const DepthConfiguration& config, Capture capture = Capture::None);

/// 2D sine position embedding for an h x w grid, returns (h*w) x dim.
torch::Tensor sine_position_embedding(int h, int w, int dim, torch::Dtype dtype);

}  // namespace stagedepth
