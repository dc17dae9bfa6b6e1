#include "stagedepth/config.hpp"

#include <algorithm>
#include <sstream>
#include <tuple>

#include "stagedepth/errors.hpp"

namespace stagedepth {

std::string to_string(StageKind kind) { return kind == StageKind::Residual ? "residual" : "csp"; }
std::string to_string(ExecutionMode mode) {
  return mode == ExecutionMode::Essential ? "essential" : "full";
}
std::string to_string(HeadKind kind) {
  return kind == HeadKind::SetPrediction ? "set_prediction" : "dense";
}
std::string to_string(StageGroup group) {
  return group == StageGroup::Backbone ? "backbone" : "neck";
}

std::vector<StageSpec> ArchSpec::all_stages() const {
  std::vector<StageSpec> out = backbone;
  out.insert(out.end(), neck.begin(), neck.end());
  return out;
}

std::vector<std::string> ArchSpec::adaptable_ids() const {
  std::vector<std::string> ids;
  for (const auto& s : all_stages()) {
    if (s.adaptable()) ids.push_back(s.id);
  }
  return ids;
}

const StageSpec& ArchSpec::stage(const std::string& id) const {
  for (const auto& s : backbone) {
    if (s.id == id) return s;
  }
  for (const auto& s : neck) {
    if (s.id == id) return s;
  }
  throw InvalidSpec("unknown stage id '" + id + "'");
}

StageGroup ArchSpec::group_of(const std::string& id) const {
  for (const auto& s : backbone) {
    if (s.id == id) return StageGroup::Backbone;
  }
  for (const auto& s : neck) {
    if (s.id == id) return StageGroup::Neck;
  }
  throw InvalidSpec("unknown stage id '" + id + "'");
}

ExecutionMode DepthConfiguration::mode_of(const std::string& stage_id) const {
  auto it = stage_modes.find(stage_id);
  return it == stage_modes.end() ? ExecutionMode::Full : it->second;
}

std::optional<int> split_point(int block_count, std::optional<int> override_m) {
  if (block_count < 1) throw InvalidSpec("block count must be positive");
  if (override_m) {
    if (*override_m < 1 || *override_m >= block_count) {
      throw InvalidSpec("split point override " + std::to_string(*override_m) +
                        " outside [1, " + std::to_string(block_count - 1) + "]");
    }
    return *override_m;
  }
  if (block_count == 1) return std::nullopt;
  return (block_count + 1) / 2;
}

StageSpec make_stage(std::string id, StageKind kind, int block_count, int in_channels,
                     int out_channels, int hidden, int stride, std::optional<int> override_m,
                     bool switchable) {
  StageSpec s;
  s.id = std::move(id);
  s.kind = kind;
  s.block_count = block_count;
  s.split_point = split_point(block_count, override_m).value_or(block_count);
  s.in_channels = in_channels;
  s.out_channels = out_channels;
  s.hidden = hidden;
  s.stride = stride;
  s.switchable_aggregator = switchable && kind == StageKind::Csp && block_count >= 4;
  return s;
}

namespace {

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

void validate_stage(const StageSpec& s, bool switchable) {
  const std::string where = "stage '" + s.id + "': ";
  if (s.id.empty()) throw InvalidSpec("stage with empty id");
  if (s.block_count < 1) throw InvalidSpec(where + "block count must be positive");
  if (s.in_channels <= 0 || s.out_channels <= 0 || s.hidden <= 0) {
    throw InvalidSpec(where + "channel widths must be positive");
  }
  if (!is_power_of_two(s.stride)) throw InvalidSpec(where + "stride must be a power of two");
  if (s.adaptable()) {
    if (s.split_point < 1 || s.split_point >= s.block_count) {
      throw InvalidSpec(where + "split point must lie in [1, S-1]");
    }
  } else if (s.split_point != s.block_count) {
    throw InvalidSpec(where + "non-adaptable stage must have m = S");
  }
  const bool want_agg = switchable && s.kind == StageKind::Csp && s.block_count >= 4;
  if (s.switchable_aggregator != want_agg) {
    throw InvalidSpec(where + "switchable aggregator must be present exactly for csp stages "
                              "with S >= 4 in switchable builds");
  }
}

}  // namespace

void validate(const ArchSpec& arch) {
  if (arch.backbone.size() != 4) throw InvalidSpec("backbone must have 4 stages (P2..P5)");
  if (arch.neck.size() != 4) throw InvalidSpec("neck must have 4 stages (FPN P4, FPN P3, PAN P4, PAN P5)");
  std::set<std::string> ids;
  for (const auto& s : arch.all_stages()) {
    validate_stage(s, arch.switchable);
    if (!ids.insert(s.id).second) throw InvalidSpec("duplicate stage id '" + s.id + "'");
  }
  for (std::size_t i = 1; i < arch.backbone.size(); ++i) {
    if (arch.backbone[i].stride <= arch.backbone[i - 1].stride) {
      throw InvalidSpec("backbone strides must strictly increase");
    }
    if (arch.backbone[i].stride != 2 * arch.backbone[i - 1].stride) {
      throw InvalidSpec("backbone stages must halve resolution one step at a time");
    }
  }
  if (arch.backbone.front().stride != 4) throw InvalidSpec("first backbone stage must be at stride 4");
  if (arch.backbone.front().in_channels != arch.stem_channels) {
    throw InvalidSpec("first backbone stage input must match stem width");
  }
  for (const auto& s : arch.backbone) {
    if (s.kind == StageKind::Residual && s.in_channels != s.out_channels) {
      throw InvalidSpec("residual backbone stage '" + s.id + "' must keep its width");
    }
  }
  // Neck stages follow the fixed FPN/PAN wiring over the P3..P5 scales.
  const int expected_stride[4] = {arch.backbone[2].stride, arch.backbone[1].stride,
                                  arch.backbone[2].stride, arch.backbone[3].stride};
  for (std::size_t i = 0; i < arch.neck.size(); ++i) {
    const auto& s = arch.neck[i];
    if (s.stride != expected_stride[i]) {
      throw InvalidSpec("neck stage '" + s.id + "' references a scale the backbone does not produce");
    }
    if (s.in_channels != 2 * arch.neck_width || s.out_channels != arch.neck_width) {
      throw InvalidSpec("neck stage '" + s.id + "' must map 2*neck_width to neck_width channels");
    }
  }
  if (arch.num_classes < 1) throw InvalidSpec("num_classes must be positive");
  if (arch.stem_channels < 1 || arch.neck_width < 1) throw InvalidSpec("widths must be positive");
  if (arch.head == HeadKind::SetPrediction) {
    if (arch.decoder_layers < 1) throw InvalidSpec("decoder_layers must be positive");
    if (arch.num_queries < 1) throw InvalidSpec("num_queries must be positive");
    if (arch.num_heads < 1 || arch.neck_width % arch.num_heads != 0) {
      throw InvalidSpec("neck_width must be divisible by num_heads");
    }
    if (arch.ffn_dim < 1) throw InvalidSpec("ffn_dim must be positive");
    if (arch.base_exit < 1 || arch.base_exit > arch.decoder_layers) {
      throw InvalidSpec("base_exit must lie in [1, decoder_layers]");
    }
  } else if (arch.reg_bins < 2) {
    throw InvalidSpec("reg_bins must be at least 2");
  }
}

void validate(const ArchSpec& arch, const DepthConfiguration& config) {
  for (const auto& [id, mode] : config.stage_modes) {
    const StageSpec* found = nullptr;
    for (const auto& s : arch.backbone) {
      if (s.id == id) found = &s;
    }
    for (const auto& s : arch.neck) {
      if (s.id == id) found = &s;
    }
    if (!found) throw InvalidConfig("stage '" + id + "' not in architecture");
    if (!found->adaptable() && mode != ExecutionMode::Full) {
      throw InvalidConfig("stage '" + id + "' is non-adaptable and must run full");
    }
  }
  for (const auto& id : arch.adaptable_ids()) {
    if (!config.stage_modes.contains(id)) {
      throw InvalidConfig("adaptable stage '" + id + "' has no mode");
    }
  }
  if (arch.head == HeadKind::SetPrediction) {
    if (config.decoder_exit < 1 || config.decoder_exit > arch.decoder_layers) {
      throw InvalidConfig("decoder exit " + std::to_string(config.decoder_exit) +
                          " outside [1, " + std::to_string(arch.decoder_layers) + "]");
    }
  } else if (config.decoder_exit != 0) {
    throw InvalidConfig("dense head has no decoder exit");
  }
}

ArchSpec toy_set_prediction_arch() {
  ArchSpec a;
  a.head = HeadKind::SetPrediction;
  a.stem_channels = 16;
  a.neck_width = 32;
  // Block counts follow the ResNet-50 layout (3, 4, 6, 3); encoder stages use S = 3, m = 1.
  a.backbone = {
      make_stage("P2", StageKind::Residual, 3, 16, 16, 8, 4),
      make_stage("P3", StageKind::Residual, 4, 32, 32, 16, 8),
      make_stage("P4", StageKind::Residual, 6, 48, 48, 24, 16),
      make_stage("P5", StageKind::Residual, 3, 64, 64, 32, 32),
  };
  a.neck = {
      make_stage("P4_fpn", StageKind::Residual, 3, 64, 32, 16, 16, 1),
      make_stage("P3_fpn", StageKind::Residual, 3, 64, 32, 16, 8, 1),
      make_stage("P4_pan", StageKind::Residual, 3, 64, 32, 16, 16, 1),
      make_stage("P5_pan", StageKind::Residual, 3, 64, 32, 16, 32, 1),
  };
  a.decoder_layers = 3;
  a.num_queries = 20;
  a.num_heads = 4;
  a.ffn_dim = 64;
  a.base_exit = 2;
  a.num_classes = 3;
  return a;
}

ArchSpec toy_dense_arch() {
  ArchSpec a;
  a.head = HeadKind::Dense;
  a.stem_channels = 16;
  a.neck_width = 32;
  a.backbone = {
      make_stage("P2", StageKind::Csp, 2, 16, 16, 8, 4),
      make_stage("P3", StageKind::Csp, 2, 32, 32, 16, 8),
      make_stage("P4", StageKind::Csp, 4, 48, 48, 24, 16),
      make_stage("P5", StageKind::Csp, 4, 64, 64, 32, 32),
  };
  a.neck = {
      make_stage("P4_fpn", StageKind::Csp, 2, 64, 32, 16, 16),
      make_stage("P3_fpn", StageKind::Csp, 2, 64, 32, 16, 8),
      make_stage("P4_pan", StageKind::Csp, 2, 64, 32, 16, 16),
      make_stage("P5_pan", StageKind::Csp, 2, 64, 32, 16, 32),
  };
  a.reg_bins = 8;
  a.num_classes = 3;
  return a;
}

ArchSpec non_switchable_twin(ArchSpec arch) {
  arch.switchable = false;
  for (auto* group : {&arch.backbone, &arch.neck}) {
    for (auto& s : *group) s.switchable_aggregator = false;
  }
  return arch;
}

DepthConfiguration super_config(const ArchSpec& arch) {
  DepthConfiguration c;
  for (const auto& id : arch.adaptable_ids()) c.stage_modes[id] = ExecutionMode::Full;
  c.decoder_exit = arch.head == HeadKind::SetPrediction ? arch.decoder_layers : 0;
  return c;
}

DepthConfiguration base_config(const ArchSpec& arch) {
  DepthConfiguration c;
  for (const auto& id : arch.adaptable_ids()) c.stage_modes[id] = ExecutionMode::Essential;
  c.decoder_exit = arch.head == HeadKind::SetPrediction ? arch.base_exit : 0;
  return c;
}

std::vector<DepthConfiguration> enumerate_configs(const ArchSpec& arch,
                                                  std::optional<std::set<int>> decoder_exits) {
  const auto ids = arch.adaptable_ids();
  std::vector<int> exits;
  if (arch.head == HeadKind::SetPrediction) {
    if (decoder_exits && !decoder_exits->empty()) {
      for (int e : *decoder_exits) {
        if (e < 1 || e > arch.decoder_layers) {
          throw InvalidConfig("decoder exit " + std::to_string(e) + " out of range");
        }
        exits.push_back(e);
      }
    } else {
      for (int e = 1; e <= arch.decoder_layers; ++e) exits.push_back(e);
    }
  } else {
    exits.push_back(0);
  }
  const std::size_t k = ids.size();
  const std::uint64_t combos = std::uint64_t{1} << k;
  std::vector<DepthConfiguration> out;
  out.reserve(combos * exits.size());
  for (std::uint64_t bits = 0; bits < combos; ++bits) {
    DepthConfiguration c;
    for (std::size_t i = 0; i < k; ++i) {
      // First stage is the most significant digit.
      const bool full = (bits >> (k - 1 - i)) & 1U;
      c.stage_modes[ids[i]] = full ? ExecutionMode::Full : ExecutionMode::Essential;
    }
    for (int e : exits) {
      c.decoder_exit = e;
      out.push_back(c);
    }
  }
  return out;
}

std::string config_bitstring(const ArchSpec& arch, const DepthConfiguration& config) {
  std::string bits;
  for (const auto& id : arch.adaptable_ids()) {
    bits += config.mode_of(id) == ExecutionMode::Full ? '1' : '0';
  }
  return bits;
}

DepthConfiguration parse_config(const ArchSpec& arch, const std::string& text, int decoder_exit) {
  const auto ids_in_order = arch.adaptable_ids();
  if (!text.empty() && text.size() == ids_in_order.size() &&
      text.find_first_not_of("01") == std::string::npos) {
    DepthConfiguration c;
    for (std::size_t i = 0; i < ids_in_order.size(); ++i) {
      c.stage_modes[ids_in_order[i]] = text[i] == '1' ? ExecutionMode::Full : ExecutionMode::Essential;
    }
    c.decoder_exit = arch.head == HeadKind::SetPrediction ? decoder_exit : 0;
    validate(arch, c);
    return c;
  }
  const auto colon = text.find(':');
  if (colon == std::string::npos) {
    throw InvalidConfig("expected a bitstring or '<essential|full>:<all|stage,...>', got '" + text + "'");
  }
  const std::string mode_text = text.substr(0, colon);
  const std::string list = text.substr(colon + 1);
  ExecutionMode named;
  if (mode_text == "essential" || mode_text == "ess") {
    named = ExecutionMode::Essential;
  } else if (mode_text == "full") {
    named = ExecutionMode::Full;
  } else {
    throw InvalidConfig("unknown mode '" + mode_text + "'");
  }
  const ExecutionMode other =
      named == ExecutionMode::Full ? ExecutionMode::Essential : ExecutionMode::Full;
  DepthConfiguration c;
  const auto ids = arch.adaptable_ids();
  for (const auto& id : ids) c.stage_modes[id] = other;
  if (list == "all") {
    for (const auto& id : ids) c.stage_modes[id] = named;
  } else if (!list.empty()) {
    std::stringstream ss(list);
    std::string id;
    while (std::getline(ss, id, ',')) {
      if (std::find(ids.begin(), ids.end(), id) == ids.end()) {
        throw InvalidConfig("'" + id + "' is not an adaptable stage");
      }
      c.stage_modes[id] = named;
    }
  }
  c.decoder_exit = arch.head == HeadKind::SetPrediction ? decoder_exit : 0;
  validate(arch, c);
  return c;
}

namespace {

double residual_stage_macs(const StageSpec& s, int blocks, int h, int w) {
  double macs = 0.0;
  if (s.in_channels != s.out_channels) macs += conv_macs(1, s.in_channels, s.out_channels, h, w);
  const double block = conv_macs(3, s.out_channels, s.hidden, h, w) +
                       conv_macs(3, s.hidden, s.out_channels, h, w);
  return macs + blocks * block;
}

double csp_stage_macs(const StageSpec& s, int blocks, int h, int w) {
  const double cv1 = conv_macs(1, s.in_channels, s.hidden, h, w);
  const double block = 2.0 * conv_macs(3, s.hidden, s.hidden, h, w);
  const double agg = conv_macs(1, (blocks + 1) * s.hidden, s.out_channels, h, w);
  return cv1 + blocks * block + agg;
}

double stage_macs(const StageSpec& s, ExecutionMode mode, int h, int w) {
  const int blocks = (mode == ExecutionMode::Full || !s.adaptable()) ? s.block_count : s.split_point;
  return s.kind == StageKind::Residual ? residual_stage_macs(s, blocks, h, w)
                                       : csp_stage_macs(s, blocks, h, w);
}

}  // namespace

double flops_estimate(const ArchSpec& arch, const DepthConfiguration& config,
                      std::pair<int, int> input_hw) {
  validate(arch, config);
  const auto [H, W] = input_hw;
  const int max_stride = arch.backbone.back().stride;
  if (H <= 0 || W <= 0 || H % max_stride != 0 || W % max_stride != 0) {
    throw InvalidConfig("input size must be a positive multiple of " + std::to_string(max_stride));
  }
  auto hw = [&](int stride) { return std::pair{H / stride, W / stride}; };
  double macs = 0.0;

  // Stem: two stride-2 3x3 convolutions.
  macs += conv_macs(3, 3, arch.stem_channels, H / 2, W / 2);
  macs += conv_macs(3, arch.stem_channels, arch.stem_channels, H / 4, W / 4);

  for (std::size_t i = 0; i < arch.backbone.size(); ++i) {
    const auto& s = arch.backbone[i];
    const auto [h, w] = hw(s.stride);
    if (i > 0) macs += conv_macs(3, arch.backbone[i - 1].out_channels, s.in_channels, h, w);
    macs += stage_macs(s, config.mode_of(s.id), h, w);
  }

  const int nw = arch.neck_width;
  const auto& p3 = arch.backbone[1];
  const auto& p4 = arch.backbone[2];
  const auto& p5 = arch.backbone[3];
  {
    auto [h, w] = hw(p5.stride);
    macs += conv_macs(1, p5.out_channels, nw, h, w);
    std::tie(h, w) = hw(p4.stride);
    macs += conv_macs(1, p4.out_channels, nw, h, w);
    std::tie(h, w) = hw(p3.stride);
    macs += conv_macs(1, p3.out_channels, nw, h, w);
    // PAN downsampling convolutions into P4 and P5.
    std::tie(h, w) = hw(p4.stride);
    macs += conv_macs(3, nw, nw, h, w);
    std::tie(h, w) = hw(p5.stride);
    macs += conv_macs(3, nw, nw, h, w);
  }
  for (const auto& s : arch.neck) {
    const auto [h, w] = hw(s.stride);
    macs += stage_macs(s, config.mode_of(s.id), h, w);
  }

  const int levels[3] = {p3.stride, p4.stride, p5.stride};
  if (arch.head == HeadKind::Dense) {
    for (int stride : levels) {
      const auto [h, w] = hw(stride);
      macs += 4.0 * conv_macs(3, nw, nw, h, w);
      macs += conv_macs(1, nw, arch.num_classes, h, w);
      macs += conv_macs(1, nw, 4 * arch.reg_bins, h, w);
    }
  } else {
    double memory = 0.0;
    for (int stride : levels) {
      const auto [h, w] = hw(stride);
      memory += static_cast<double>(h) * w;
    }
    const double d = nw;
    const double q = arch.num_queries;
    const double per_layer =
        q * (4.0 * d + d * d)                   // query position MLP
        + 4.0 * q * d * d + 2.0 * q * q * d     // self-attention
        + 2.0 * q * d * d + 2.0 * memory * d * d + 2.0 * q * memory * d  // cross-attention
        + 2.0 * q * d * arch.ffn_dim            // feed-forward
        + q * d * arch.num_classes              // class head
        + q * (2.0 * d * d + 4.0 * d);          // box head
    macs += per_layer * config.decoder_exit;
  }
  return macs;
}

}  // namespace stagedepth
