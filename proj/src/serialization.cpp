#include "stagedepth/serialization.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>

#include "stagedepth/errors.hpp"

namespace stagedepth {

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const char* what) {
  if (!j.is_object()) throw InvalidSpec(std::string(what) + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw InvalidSpec(std::string("unknown key '") + key + "' in " + what);
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw InvalidSpec(std::string("bad value for '") + key + "': " + e.what());
    }
  }
}

template <typename T>
T read_req(const json& j, const char* key) {
  if (!j.contains(key)) throw InvalidSpec(std::string("missing key '") + key + "'");
  T out{};
  read_opt(j, key, out);
  return out;
}

StageKind kind_from(const std::string& s) {
  if (s == "residual") return StageKind::Residual;
  if (s == "csp") return StageKind::Csp;
  throw InvalidSpec("unknown stage kind '" + s + "'");
}

HeadKind head_from(const std::string& s) {
  if (s == "set_prediction" || s == "detr") return HeadKind::SetPrediction;
  if (s == "dense") return HeadKind::Dense;
  throw InvalidSpec("unknown head kind '" + s + "'");
}

ExecutionMode mode_from(const std::string& s) {
  if (s == "essential") return ExecutionMode::Essential;
  if (s == "full") return ExecutionMode::Full;
  throw InvalidConfig("unknown execution mode '" + s + "'");
}

}  // namespace

json to_json(const StageSpec& s) {
  return json{{"id", s.id},
              {"kind", to_string(s.kind)},
              {"block_count", s.block_count},
              {"split_point", s.split_point},
              {"in_channels", s.in_channels},
              {"out_channels", s.out_channels},
              {"hidden", s.hidden},
              {"switchable_aggregator", s.switchable_aggregator},
              {"stride", s.stride}};
}

json to_json(const ArchSpec& a) {
  json backbone = json::array();
  json neck = json::array();
  for (const auto& s : a.backbone) backbone.push_back(to_json(s));
  for (const auto& s : a.neck) neck.push_back(to_json(s));
  return json{{"backbone", backbone},       {"neck", neck},
              {"head", to_string(a.head)},  {"stem_channels", a.stem_channels},
              {"neck_width", a.neck_width}, {"num_classes", a.num_classes},
              {"decoder_layers", a.decoder_layers}, {"num_queries", a.num_queries},
              {"num_heads", a.num_heads},   {"ffn_dim", a.ffn_dim},
              {"base_exit", a.base_exit},   {"reg_bins", a.reg_bins},
              {"switchable", a.switchable}};
}

json to_json(const DepthConfiguration& c) {
  json modes = json::object();
  for (const auto& [id, mode] : c.stage_modes) modes[id] = to_string(mode);
  return json{{"stage_modes", modes}, {"decoder_exit", c.decoder_exit}};
}

json to_json(const KDHyper& h) {
  return json{{"alpha", h.alpha},
              {"w_cls_kd", h.w_cls_kd},
              {"t_cls", h.t_cls},
              {"w_iou_kd", h.w_iou_kd},
              {"w_edge_kd", h.w_edge_kd},
              {"edge_variant", h.edge_variant == EdgeVariant::L1 ? "l1" : "dfl"},
              {"t_dfl", h.t_dfl},
              {"feat_weight_backbone", h.feat_weight_backbone},
              {"feat_weight_neck", h.feat_weight_neck},
              {"feat_alignment", h.feat_alignment == FeatureAlignment::Gap ? "gap" : "spatial"},
              {"supervised_stages", h.supervised_stages}};
}

StageSpec stage_from_json(const json& j) {
  reject_unknown(j,
                 {"id", "kind", "block_count", "split_point", "in_channels", "out_channels",
                  "hidden", "switchable_aggregator", "stride"},
                 "stage");
  StageSpec s;
  s.id = read_req<std::string>(j, "id");
  s.kind = kind_from(read_req<std::string>(j, "kind"));
  s.block_count = read_req<int>(j, "block_count");
  std::optional<int> m;
  if (j.contains("split_point")) m = read_req<int>(j, "split_point");
  s.in_channels = read_req<int>(j, "in_channels");
  s.out_channels = read_req<int>(j, "out_channels");
  s.hidden = read_req<int>(j, "hidden");
  s.stride = read_req<int>(j, "stride");
  if (s.block_count == 1) {
    if (m && *m != 1) throw InvalidSpec("stage '" + s.id + "' with S = 1 must have m = 1");
    s.split_point = 1;
  } else {
    s.split_point = split_point(s.block_count, m).value();
  }
  s.switchable_aggregator = s.kind == StageKind::Csp && s.block_count >= 4;
  read_opt(j, "switchable_aggregator", s.switchable_aggregator);
  return s;
}

ArchSpec arch_from_json(const json& j) {
  reject_unknown(j,
                 {"backbone", "neck", "head", "stem_channels", "neck_width", "num_classes",
                  "decoder_layers", "num_queries", "num_heads", "ffn_dim", "base_exit", "reg_bins",
                  "switchable"},
                 "arch");
  ArchSpec a;
  a.head = head_from(read_req<std::string>(j, "head"));
  // Start from the toy defaults of the requested head so partial files work.
  a = a.head == HeadKind::SetPrediction ? toy_set_prediction_arch() : toy_dense_arch();
  if (j.contains("backbone")) {
    a.backbone.clear();
    for (const auto& s : j.at("backbone")) a.backbone.push_back(stage_from_json(s));
  }
  if (j.contains("neck")) {
    a.neck.clear();
    for (const auto& s : j.at("neck")) a.neck.push_back(stage_from_json(s));
  }
  read_opt(j, "stem_channels", a.stem_channels);
  read_opt(j, "neck_width", a.neck_width);
  read_opt(j, "num_classes", a.num_classes);
  read_opt(j, "decoder_layers", a.decoder_layers);
  read_opt(j, "num_queries", a.num_queries);
  read_opt(j, "num_heads", a.num_heads);
  read_opt(j, "ffn_dim", a.ffn_dim);
  read_opt(j, "base_exit", a.base_exit);
  read_opt(j, "reg_bins", a.reg_bins);
  bool switchable = true;
  read_opt(j, "switchable", switchable);
  if (!switchable) a = non_switchable_twin(std::move(a));
  validate(a);
  return a;
}

DepthConfiguration config_from_json(const json& j) {
  reject_unknown(j, {"stage_modes", "decoder_exit"}, "depth configuration");
  DepthConfiguration c;
  if (j.contains("stage_modes")) {
    const auto& modes = j.at("stage_modes");
    if (!modes.is_object()) throw InvalidConfig("stage_modes must be an object");
    for (const auto& [id, mode] : modes.items()) {
      c.stage_modes[id] = mode_from(mode.get<std::string>());
    }
  }
  read_opt(j, "decoder_exit", c.decoder_exit);
  return c;
}

KDHyper hyper_from_json(const json& j) {
  reject_unknown(j,
                 {"preset", "alpha", "w_cls_kd", "t_cls", "w_iou_kd", "w_edge_kd", "edge_variant",
                  "t_dfl", "feat_weight_backbone", "feat_weight_neck", "feat_alignment",
                  "supervised_stages"},
                 "hyper");
  KDHyper h;
  if (j.contains("preset")) {
    const auto p = read_req<std::string>(j, "preset");
    if (p == "set_prediction" || p == "detr") {
      h = set_prediction_defaults();
    } else if (p == "dense") {
      h = dense_defaults();
    } else if (p == "naive_set_prediction") {
      h = naive_joint_hyper(HeadKind::SetPrediction);
    } else if (p == "naive_dense") {
      h = naive_joint_hyper(HeadKind::Dense);
    } else {
      throw InvalidSpec("unknown hyper preset '" + p + "'");
    }
  }
  read_opt(j, "alpha", h.alpha);
  read_opt(j, "w_cls_kd", h.w_cls_kd);
  read_opt(j, "t_cls", h.t_cls);
  read_opt(j, "w_iou_kd", h.w_iou_kd);
  read_opt(j, "w_edge_kd", h.w_edge_kd);
  if (j.contains("edge_variant")) {
    const auto v = read_req<std::string>(j, "edge_variant");
    if (v == "l1") {
      h.edge_variant = EdgeVariant::L1;
    } else if (v == "dfl") {
      h.edge_variant = EdgeVariant::Dfl;
    } else {
      throw InvalidSpec("unknown edge variant '" + v + "'");
    }
  }
  read_opt(j, "t_dfl", h.t_dfl);
  read_opt(j, "feat_weight_backbone", h.feat_weight_backbone);
  read_opt(j, "feat_weight_neck", h.feat_weight_neck);
  if (j.contains("feat_alignment")) {
    const auto v = read_req<std::string>(j, "feat_alignment");
    if (v == "gap") {
      h.feat_alignment = FeatureAlignment::Gap;
    } else if (v == "spatial") {
      h.feat_alignment = FeatureAlignment::Spatial;
    } else {
      throw InvalidSpec("unknown feature alignment '" + v + "'");
    }
  }
  read_opt(j, "supervised_stages", h.supervised_stages);
  validate(h);
  return h;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw InvalidSpec(path.string() + ": " + e.what());
  }
}

RunConfig load_run_config(const std::filesystem::path& path, HeadKind default_head) {
  const json j = read_json_file(path);
  reject_unknown(j, {"arch", "hyper"}, "run configuration");
  RunConfig rc;
  rc.arch = j.contains("arch") ? arch_from_json(j.at("arch"))
                               : (default_head == HeadKind::SetPrediction ? toy_set_prediction_arch()
                                                                          : toy_dense_arch());
  rc.hyper = j.contains("hyper") ? hyper_from_json(j.at("hyper")) : defaults_for(rc.arch.head);
  return rc;
}

void save_run_config(const RunConfig& config, const std::filesystem::path& path) {
  write_text_atomic(path, json{{"arch", to_json(config.arch)}, {"hyper", to_json(config.hyper)}}.dump(2));
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << text;
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::uint64_t arch_hash(const ArchSpec& arch) {
  // FNV-1a over the canonical JSON dump (keys are sorted by nlohmann::json).
  const std::string text = to_json(arch).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace stagedepth
