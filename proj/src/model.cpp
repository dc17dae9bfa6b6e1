#include "stagedepth/model.hpp"

#include <cmath>
#include <numbers>

#include "stagedepth/errors.hpp"

namespace stagedepth {

TracedLinearImpl::TracedLinearImpl(int in, int out) {
  linear = register_module("linear", torch::nn::Linear(in, out));
}

torch::Tensor TracedLinearImpl::forward(const torch::Tensor& x) {
  const auto in = linear->weight.size(1);
  const auto out = linear->weight.size(0);
  const double tokens_per_sample =
      x.dim() >= 3 ? static_cast<double>(x.numel()) / (x.size(0) * in) : 1.0;
  MacTraceScope::record(tokens_per_sample * in * out);
  return linear->forward(x);
}

MultiHeadAttentionImpl::MultiHeadAttentionImpl(int dim, int heads_) : heads(heads_) {
  q_proj = register_module("q_proj", TracedLinear(dim, dim));
  k_proj = register_module("k_proj", TracedLinear(dim, dim));
  v_proj = register_module("v_proj", TracedLinear(dim, dim));
  out_proj = register_module("out_proj", TracedLinear(dim, dim));
}

torch::Tensor MultiHeadAttentionImpl::forward(const torch::Tensor& query, const torch::Tensor& key,
                                              const torch::Tensor& value) {
  const auto B = query.size(0);
  const auto Lq = query.size(1);
  const auto Lk = key.size(1);
  const auto d = query.size(2);
  const auto dh = d / heads;
  auto split = [&](const torch::Tensor& t, int64_t L) {
    return t.view({B, L, heads, dh}).transpose(1, 2);
  };
  auto q = split(q_proj->forward(query), Lq);
  auto k = split(k_proj->forward(key), Lk);
  auto v = split(v_proj->forward(value), Lk);
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(double(dh)), -1);
  auto y = torch::matmul(attn, v).transpose(1, 2).reshape({B, Lq, d});
  MacTraceScope::record(2.0 * static_cast<double>(Lq) * Lk * d);
  return out_proj->forward(y);
}

DecoderLayerImpl::DecoderLayerImpl(int dim, int heads, int ffn_dim) {
  self_attn = register_module("self_attn", MultiHeadAttention(dim, heads));
  cross_attn = register_module("cross_attn", MultiHeadAttention(dim, heads));
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  norm3 = register_module("norm3", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  ffn1 = register_module("ffn1", TracedLinear(dim, ffn_dim));
  ffn2 = register_module("ffn2", TracedLinear(ffn_dim, dim));
}

torch::Tensor DecoderLayerImpl::forward(torch::Tensor tgt, const torch::Tensor& query_pos,
                                        const torch::Tensor& memory,
                                        const torch::Tensor& memory_pos) {
  auto qk = tgt + query_pos;
  tgt = norm1(tgt + self_attn->forward(qk, qk, tgt));
  tgt = norm2(tgt + cross_attn->forward(tgt + query_pos, memory + memory_pos, memory));
  return norm3(tgt + ffn2->forward(torch::relu(ffn1->forward(tgt))));
}

SetPredictionHeadImpl::SetPredictionHeadImpl(const ArchSpec& arch) {
  const int d = arch.neck_width;
  const int q = arch.num_queries;
  query_content = register_parameter("query_content", torch::randn({q, d}) * 0.1);
  // Reference boxes start on a jittered grid with moderate size.
  auto ref = torch::rand({q, 4}) * 0.8 + 0.1;
  ref.slice(1, 2, 4).fill_(0.2);
  query_reference = register_parameter("query_reference", torch::logit(ref));
  level_embed = register_parameter("level_embed", torch::randn({3, d}) * 0.1);
  pos1 = register_module("pos1", TracedLinear(4, d));
  pos2 = register_module("pos2", TracedLinear(d, d));
  for (int l = 0; l < arch.decoder_layers; ++l) {
    const auto tag = std::to_string(l);
    layers.push_back(
        register_module("layer" + tag, DecoderLayer(d, arch.num_heads, arch.ffn_dim)));
    auto cls = register_module("class_head" + tag, TracedLinear(d, arch.num_classes));
    {
      torch::NoGradGuard guard;
      cls->linear->bias.fill_(-std::log((1.0 - 0.01) / 0.01));
    }
    class_heads.push_back(cls);
    box_layers.push_back(register_module("box_head" + tag + "_0", TracedLinear(d, d)));
    box_layers.push_back(register_module("box_head" + tag + "_1", TracedLinear(d, d)));
    auto last = register_module("box_head" + tag + "_2", TracedLinear(d, 4));
    {
      torch::NoGradGuard guard;
      last->linear->weight.zero_();
      last->linear->bias.zero_();
    }
    box_layers.push_back(last);
  }
}

std::vector<LayerPrediction> SetPredictionHeadImpl::decode(const torch::Tensor& memory,
                                                           const torch::Tensor& memory_pos,
                                                           int exit_depth) {
  if (exit_depth < 1 || exit_depth > num_layers()) {
    throw InvalidConfig("decoder exit " + std::to_string(exit_depth) + " outside [1, " +
                        std::to_string(num_layers()) + "]");
  }
  const auto B = memory.size(0);
  auto tgt = query_content.unsqueeze(0).expand({B, -1, -1});
  auto reference = torch::sigmoid(query_reference).unsqueeze(0).expand({B, -1, -1});
  std::vector<LayerPrediction> out;
  for (int l = 0; l < exit_depth; ++l) {
    auto query_pos = pos2->forward(torch::relu(pos1->forward(reference)));
    tgt = layers[l]->forward(tgt, query_pos, memory, memory_pos);
    auto h = torch::relu(box_layers[3 * l]->forward(tgt));
    h = torch::relu(box_layers[3 * l + 1]->forward(h));
    auto delta = box_layers[3 * l + 2]->forward(h);
    auto boxes = torch::sigmoid(delta + torch::logit(reference, 1e-5));
    out.push_back({class_heads[l]->forward(tgt), boxes});
    reference = boxes.detach();
  }
  return out;
}

std::vector<LayerPrediction> decoder_forward_with_exit(SetPredictionHeadImpl& head,
                                                       const torch::Tensor& memory,
                                                       const torch::Tensor& memory_pos,
                                                       int exit_depth) {
  return head.decode(memory, memory_pos, exit_depth);
}

torch::Tensor sine_position_embedding(int h, int w, int dim, torch::Dtype dtype) {
  const int npf = dim / 4;
  auto opts = torch::TensorOptions().dtype(dtype);
  auto ys = (torch::arange(h, opts) + 0.5) / h;
  auto xs = (torch::arange(w, opts) + 0.5) / w;
  auto grid = torch::meshgrid({ys, xs}, "ij");
  auto y = grid[0].reshape({-1, 1}) * (2.0 * std::numbers::pi);
  auto x = grid[1].reshape({-1, 1}) * (2.0 * std::numbers::pi);
  auto freq = torch::pow(10000.0, torch::arange(npf, opts) / std::max(npf, 1));
  auto px = x / freq;
  auto py = y / freq;
  auto emb = torch::cat({px.sin(), px.cos(), py.sin(), py.cos()}, 1);
  if (emb.size(1) < dim) {
    emb = torch::cat({emb, torch::zeros({emb.size(0), dim - emb.size(1)}, opts)}, 1);
  }
  return emb;
}

// ---------------------------------------------------------------------------

DenseHeadImpl::DenseHeadImpl(const ArchSpec& arch)
    : num_classes(arch.num_classes), bins(arch.reg_bins) {
  const int d = arch.neck_width;
  for (int l = 0; l < 3; ++l) {
    const auto tag = std::to_string(l);
    for (int j = 0; j < 2; ++j) {
      cls_tower.push_back(register_module("cls_tower" + tag + "_" + std::to_string(j),
                                          ConvNorm(d, d, 3, 1, false, true)));
      box_tower.push_back(register_module("box_tower" + tag + "_" + std::to_string(j),
                                          ConvNorm(d, d, 3, 1, false, true)));
    }
    auto cls = register_module("cls_pred" + tag, torch::nn::Conv2d(torch::nn::Conv2dOptions(d, num_classes, 1)));
    auto box = register_module("box_pred" + tag, torch::nn::Conv2d(torch::nn::Conv2dOptions(d, 4 * bins, 1)));
    torch::NoGradGuard guard;
    cls->bias.fill_(-std::log((1.0 - 0.01) / 0.01));
    box->bias.fill_(1.0);
    cls_pred.push_back(cls);
    box_pred.push_back(box);
  }
}

std::pair<torch::Tensor, torch::Tensor> make_anchor_points(
    const std::vector<std::pair<int, int>>& sizes, const std::vector<int>& strides,
    std::pair<int, int> input_hw, torch::Dtype dtype) {
  auto opts = torch::TensorOptions().dtype(dtype);
  std::vector<torch::Tensor> points, stride_list;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const auto [h, w] = sizes[i];
    const double s = strides[i];
    auto ys = (torch::arange(h, opts) + 0.5) * s / input_hw.first;
    auto xs = (torch::arange(w, opts) + 0.5) * s / input_hw.second;
    auto grid = torch::meshgrid({ys, xs}, "ij");
    points.push_back(torch::stack({grid[1].reshape(-1), grid[0].reshape(-1)}, 1));
    stride_list.push_back(torch::full({h * w}, s, opts));
  }
  return {torch::cat(points, 0), torch::cat(stride_list, 0)};
}

torch::Tensor decode_dense_boxes(const torch::Tensor& distribution_logits,
                                 const torch::Tensor& anchors, const torch::Tensor& strides,
                                 std::pair<int, int> input_hw) {
  const auto bins = distribution_logits.size(-1);
  auto proj = torch::arange(bins, distribution_logits.options());
  auto dist = (torch::softmax(distribution_logits, -1) * proj).sum(-1);  // B x A x 4
  const double H = input_hw.first;
  const double W = input_hw.second;
  auto s = strides.view({1, -1});
  auto ax = anchors.select(1, 0).view({1, -1});
  auto ay = anchors.select(1, 1).view({1, -1});
  auto x1 = (ax - dist.select(2, 0) * s / W).clamp(0.0, 1.0);
  auto y1 = (ay - dist.select(2, 1) * s / H).clamp(0.0, 1.0);
  auto x2 = (ax + dist.select(2, 2) * s / W).clamp(0.0, 1.0);
  auto y2 = (ay + dist.select(2, 3) * s / H).clamp(0.0, 1.0);
  return torch::stack({(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1}, -1);
}

// ---------------------------------------------------------------------------

DetectorModelImpl::DetectorModelImpl(ArchSpec arch) : arch_(std::move(arch)) {
  validate(arch_);
  const bool sw = arch_.switchable;
  stem1 = register_module("stem1", ConvNorm(3, arch_.stem_channels, 3, 2, false, true));
  stem2 = register_module("stem2", ConvNorm(arch_.stem_channels, arch_.stem_channels, 3, 2, false, true));
  for (std::size_t i = 1; i < arch_.backbone.size(); ++i) {
    transitions.push_back(register_module(
        "transition" + std::to_string(i),
        ConvNorm(arch_.backbone[i - 1].out_channels, arch_.backbone[i].in_channels, 3, 2, false, true)));
  }
  for (const auto& s : arch_.all_stages()) {
    stages.push_back(register_module("stage_" + s.id, make_adaptive_stage(s, sw)));
  }
  const int nw = arch_.neck_width;
  lat3 = register_module("lat3", ConvNorm(arch_.backbone[1].out_channels, nw, 1, 1, false, true));
  lat4 = register_module("lat4", ConvNorm(arch_.backbone[2].out_channels, nw, 1, 1, false, true));
  lat5 = register_module("lat5", ConvNorm(arch_.backbone[3].out_channels, nw, 1, 1, false, true));
  down4 = register_module("down4", ConvNorm(nw, nw, 3, 2, false, true));
  down5 = register_module("down5", ConvNorm(nw, nw, 3, 2, false, true));
  if (arch_.head == HeadKind::SetPrediction) {
    set_head = register_module("set_head", SetPredictionHead(arch_));
  } else {
    dense_head = register_module("dense_head", DenseHead(arch_));
  }
}

AdaptiveStage& DetectorModelImpl::stage(const std::string& id) {
  for (auto& s : stages) {
    if (s->spec().id == id) return *s;
  }
  throw InvalidSpec("unknown stage id '" + id + "'");
}

std::vector<torch::Tensor> DetectorModelImpl::refinement_parameters() {
  std::vector<torch::Tensor> out;
  for (auto& s : stages) {
    for (auto& p : s->refinement_parameters()) out.push_back(p);
  }
  return out;
}

std::int64_t DetectorModelImpl::parameter_count() {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

ModelOutputs DetectorModelImpl::forward(const torch::Tensor& images,
                                        const DepthConfiguration& config, Capture capture) {
  validate(arch_, config);
  const int max_stride = arch_.backbone.back().stride;
  if (images.dim() != 4 || images.size(1) != 3) throw ShapeError("images must be B x 3 x H x W");
  const int H = static_cast<int>(images.size(2));
  const int W = static_cast<int>(images.size(3));
  if (H % max_stride != 0 || W % max_stride != 0) {
    throw InvalidConfig("input size must be divisible by " + std::to_string(max_stride));
  }
  std::map<std::string, BoundaryPair> boundaries;
  auto run = [&](std::size_t index, const torch::Tensor& x) {
    auto& st = *stages[index];
    const auto& id = st.spec().id;
    auto out = st.forward(x, config.mode_of(id), capture);
    if (st.spec().adaptable() && capture != Capture::None) {
      boundaries[id] = BoundaryPair{out.boundary_essential, out.boundary_full};
    }
    return out.output;
  };
  auto x = stem2->forward(stem1->forward(images));
  std::vector<torch::Tensor> c;
  for (std::size_t i = 0; i < arch_.backbone.size(); ++i) {
    if (i > 0) x = transitions[i - 1]->forward(x);
    x = run(i, x);
    c.push_back(x);
  }
  const std::size_t nb = arch_.backbone.size();
  auto up = [](const torch::Tensor& t) {
    return torch::upsample_nearest2d(t, std::vector<int64_t>{t.size(2) * 2, t.size(3) * 2});
  };
  auto l5 = lat5->forward(c[3]);
  auto l4 = lat4->forward(c[2]);
  auto l3 = lat3->forward(c[1]);
  auto f4 = run(nb + 0, torch::cat({up(l5), l4}, 1));
  auto n3 = run(nb + 1, torch::cat({up(f4), l3}, 1));
  auto n4 = run(nb + 2, torch::cat({down4->forward(n3), f4}, 1));
  auto n5 = run(nb + 3, torch::cat({down5->forward(n4), l5}, 1));

  ModelOutputs out = arch_.head == HeadKind::SetPrediction
                         ? run_set_head({n3, n4, n5}, config.decoder_exit)
                         : run_dense_head({n3, n4, n5}, {H, W});
  out.boundary_features = std::move(boundaries);
  out.input_hw = {H, W};
  return out;
}

ModelOutputs DetectorModelImpl::run_set_head(const std::vector<torch::Tensor>& levels,
                                             int exit_depth) {
  std::vector<torch::Tensor> tokens, pos;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const auto& f = levels[l];
    const auto B = f.size(0);
    const auto d = f.size(1);
    tokens.push_back(f.flatten(2).transpose(1, 2) + set_head->level_embed[l].view({1, 1, d}));
    pos.push_back(sine_position_embedding(static_cast<int>(f.size(2)), static_cast<int>(f.size(3)),
                                          static_cast<int>(d), f.scalar_type())
                      .unsqueeze(0)
                      .expand({B, -1, -1}));
  }
  auto memory = torch::cat(tokens, 1);
  auto memory_pos = torch::cat(pos, 1);
  ModelOutputs out;
  out.decoder_aux = set_head->decode(memory, memory_pos, exit_depth);
  out.cls_logits = out.decoder_aux.back().logits;
  out.boxes = out.decoder_aux.back().boxes;
  return out;
}

ModelOutputs DetectorModelImpl::run_dense_head(const std::vector<torch::Tensor>& levels,
                                               std::pair<int, int> input_hw) {
  auto& head = *dense_head;
  std::vector<torch::Tensor> logits, dists;
  std::vector<std::pair<int, int>> sizes;
  std::vector<int> strides = {arch_.backbone[1].stride, arch_.backbone[2].stride,
                              arch_.backbone[3].stride};
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const auto& f = levels[l];
    const auto B = f.size(0);
    auto cls = head.cls_tower[2 * l + 1]->forward(head.cls_tower[2 * l]->forward(f));
    auto box = head.box_tower[2 * l + 1]->forward(head.box_tower[2 * l]->forward(f));
    auto cl = traced_conv2d(cls, head.cls_pred[l]->weight, head.cls_pred[l]->bias, 1, 0);
    auto bx = traced_conv2d(box, head.box_pred[l]->weight, head.box_pred[l]->bias, 1, 0);
    logits.push_back(cl.flatten(2).transpose(1, 2));
    dists.push_back(bx.view({B, 4, head.bins, -1}).permute({0, 3, 1, 2}));
    sizes.emplace_back(static_cast<int>(f.size(2)), static_cast<int>(f.size(3)));
  }
  ModelOutputs out;
  out.cls_logits = torch::cat(logits, 1);
  out.box_distribution = torch::cat(dists, 1);
  std::tie(out.anchors, out.anchor_strides) =
      make_anchor_points(sizes, strides, input_hw, levels[0].scalar_type());
  out.boxes = decode_dense_boxes(out.box_distribution, out.anchors, out.anchor_strides, input_hw);
  return out;
}

DetectorModel build_detector(const ArchSpec& arch, std::uint64_t seed) {
  validate(arch);
  torch::manual_seed(seed);
  return DetectorModel(arch);
}

ModelOutputs forward(DetectorModel& model, const torch::Tensor& images,
                     const DepthConfiguration& config, Capture capture) {
  return model->forward(images, config, capture);
}

}  // namespace stagedepth
