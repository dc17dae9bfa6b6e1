#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace stagedepth {

enum class StageKind { Residual, Csp };
enum class ExecutionMode { Essential, Full };
enum class HeadKind { SetPrediction, Dense };
enum class StageGroup { Backbone, Neck };

std::string to_string(StageKind kind);
std::string to_string(ExecutionMode mode);
std::string to_string(HeadKind kind);
std::string to_string(StageGroup group);

/// One adaptive stage: S blocks split into an essential prefix of m blocks
/// and a refinement suffix of S - m blocks. A stage with S = 1 is
/// non-adaptable and always runs in full mode (split_point == block_count).
struct StageSpec {
  std::string id;
  StageKind kind = StageKind::Residual;
  int block_count = 1;
  int split_point = 1;
  int in_channels = 0;
  int out_channels = 0;
  int hidden = 0;  // c', hidden width per block
  bool switchable_aggregator = false;
  int stride = 1;  // spatial scale relative to the input image

  bool adaptable() const { return block_count >= 2; }
  bool operator==(const StageSpec&) const = default;
};

struct ArchSpec {
  std::vector<StageSpec> backbone;  // P2..P5
  std::vector<StageSpec> neck;      // P4 FPN, P3 FPN, P4 PAN, P5 PAN
  HeadKind head = HeadKind::Dense;
  int stem_channels = 16;
  int neck_width = 32;
  int num_classes = 3;
  // set-prediction head
  int decoder_layers = 3;
  int num_queries = 20;
  int num_heads = 4;
  int ffn_dim = 64;
  int base_exit = 2;
  // dense head
  int reg_bins = 8;
  // false builds the non-switchable twin: one BN per block and no
  // dedicated essential aggregators.
  bool switchable = true;

  std::vector<StageSpec> all_stages() const;
  std::vector<std::string> adaptable_ids() const;
  const StageSpec& stage(const std::string& id) const;
  StageGroup group_of(const std::string& id) const;
  bool operator==(const ArchSpec&) const = default;
};

struct DepthConfiguration {
  std::map<std::string, ExecutionMode> stage_modes;
  int decoder_exit = 0;  // 0 for heads without a decoder

  /// Non-adaptable or unlisted stages resolve to full.
  ExecutionMode mode_of(const std::string& stage_id) const;
  bool operator==(const DepthConfiguration&) const = default;
};

/// Split point m for a stage of S blocks; nullopt marks S = 1 (non-adaptable).
std::optional<int> split_point(int block_count, std::optional<int> override_m = std::nullopt);

StageSpec make_stage(std::string id, StageKind kind, int block_count, int in_channels,
                     int out_channels, int hidden, int stride,
                     std::optional<int> override_m = std::nullopt, bool switchable = true);

/// Throws InvalidSpec on any violated invariant.
void validate(const ArchSpec& arch);
void validate(const ArchSpec& arch, const DepthConfiguration& config);

ArchSpec toy_set_prediction_arch();
ArchSpec toy_dense_arch();
/// Same layout with switchable BN and dedicated essential aggregators removed.
ArchSpec non_switchable_twin(ArchSpec arch);

DepthConfiguration super_config(const ArchSpec& arch);
DepthConfiguration base_config(const ArchSpec& arch);

/// All 2^k x |exits| configurations. Order: stage modes lexicographic in
/// stage order with essential before full, then ascending decoder exit.
std::vector<DepthConfiguration> enumerate_configs(
    const ArchSpec& arch, std::optional<std::set<int>> decoder_exits = std::nullopt);

/// One character per adaptable stage in stage order: '0' essential, '1' full.
std::string config_bitstring(const ArchSpec& arch, const DepthConfiguration& config);

/// Command-line grammar: "essential:all", "full:all", "essential:P2,P3", or a
/// bitstring as produced by config_bitstring. Stages not named take the
/// opposite mode.
DepthConfiguration parse_config(const ArchSpec& arch, const std::string& text, int decoder_exit);

/// Multiply-accumulates of one inference forward at the given input size.
double flops_estimate(const ArchSpec& arch, const DepthConfiguration& config,
                      std::pair<int, int> input_hw);

/// MACs of a single k x k convolution producing an out_h x out_w map.
inline double conv_macs(int kernel, int c_in, int c_out, int out_h, int out_w) {
  return static_cast<double>(kernel) * kernel * c_in * c_out * out_h * out_w;
}

std::uint64_t arch_hash(const ArchSpec& arch);

}  // namespace stagedepth
