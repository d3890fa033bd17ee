#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "halo/ensemble.hpp"
#include "halo/llm_backend.hpp"
#include "halo/prompting.hpp"
#include "halo/weak_label.hpp"

namespace halo::cli {

// Stable contract for scripts.
enum ExitCode : int {
  kSuccess = 0,
  kUsageError = 1,      // bad flags, bad config, IO failure, invalid inputs
  kPartialFailure = 2,  // item failures above the configured threshold
};

// One JSON document with a section per command. Relative paths resolve
// against the directory holding the document.
struct PipelineConfig {
  std::filesystem::path base_dir;
  std::optional<std::filesystem::path> run_dir;
  std::optional<std::filesystem::path> train;
  std::optional<std::filesystem::path> val;
  std::optional<std::filesystem::path> test;
  PromptSpec prompt;
  BackendConfig backend;
  double failure_threshold = 0.2;
  std::vector<StageSpec> stages;
  std::optional<std::vector<std::string>> candidates;
  std::string reconstruct_labels = "weak";
  std::filesystem::path training_file = "train_chat.jsonl";
  nlohmann::json manifest_overrides = nlohmann::json::object();
  std::vector<std::filesystem::path> vote_inputs;
  TiePolicy tie_policy = TiePolicy::MeanConfidence;
};

// Throws Error(InvalidConfig/IoError).
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

// Entry point behind the `halo` executable. Tables go to `out`, progress and
// diagnostics to `err`, machine-readable artifacts to files.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace halo::cli
