#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdet/data.hpp"
#include "cdet/eval.hpp"
#include "cdet/network.hpp"
#include "cdet/pipeline.hpp"

namespace cdet {

struct EvalSettings {
  ApMode mode = ApMode::kAllPoints;
  std::vector<std::vector<int>> similarity_groups;
};

/// Everything a run needs, loaded from a JSON file with sections
/// "network", "train", "inference", "data", "eval" and a top-level "threads".
struct RunConfig {
  NetworkConfig network;
  TrainConfig train;
  InferenceConfig inference;  // theta and flags are taken from `train`
  SyntheticSpec data;
  EvalSettings eval;
  unsigned threads = 0;  // 0 selects the number of available cores

  /// Throws ConfigError on invalid or inconsistent sections.
  void validate() const;
  unsigned resolved_threads() const;
  InferenceConfig resolved_inference() const;
  EvalOptions eval_options() const;
};

/// Defaults, then `text` (may be empty), then `key.path=value` overrides.
/// Unknown keys and mistyped values throw ConfigError.
RunConfig parse_run_config(const std::string& text, std::span<const std::string> overrides = {},
                           const std::string& source = "<config>");
/// Reads the file when given; throws IoError when it cannot be read.
RunConfig load_run_config(const std::optional<std::filesystem::path>& path,
                          std::span<const std::string> overrides = {});
/// Fully resolved configuration as pretty-printed JSON.
std::string to_json(const RunConfig& config);

}  // namespace cdet
