#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "stagedepth/config.hpp"
#include "stagedepth/hyper.hpp"

namespace stagedepth {

using json = nlohmann::json;

// JSON schema (see docs/config_schema.md). Parsing rejects unknown keys and
// fills omitted optional keys from the defaults of the struct.

json to_json(const StageSpec& s);
json to_json(const ArchSpec& arch);
json to_json(const DepthConfiguration& config);
json to_json(const KDHyper& hyper);

StageSpec stage_from_json(const json& j);
ArchSpec arch_from_json(const json& j);
DepthConfiguration config_from_json(const json& j);
KDHyper hyper_from_json(const json& j);

/// The run configuration file: {"arch": {...}, "hyper": {...}}; either key may be omitted.
struct RunConfig {
  ArchSpec arch;
  KDHyper hyper;
};
RunConfig load_run_config(const std::filesystem::path& path, HeadKind default_head);
void save_run_config(const RunConfig& config, const std::filesystem::path& path);

json read_json_file(const std::filesystem::path& path);
/// Writes to a sibling temporary file and renames it into place.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace stagedepth
