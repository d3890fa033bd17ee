#pragma once

#include <cstddef>
#include <filesystem>
#include <future>
#include <iosfwd>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "halo/data_model.hpp"
#include "halo/llm_backend.hpp"
#include "halo/prompting.hpp"

namespace halo {

namespace fs = std::filesystem;

inline constexpr std::string_view kClarificationMessage =
    "Answer with exactly 'Hallucination' or 'Not Hallucination'.";

// Content-addressed store of backend responses under one run directory.
// The key covers the transcript and every decoding parameter that can change
// the answer. An empty directory keeps the cache in memory only.
class ResponseCache {
 public:
  explicit ResponseCache(fs::path dir = {});

  CompletionResponse complete(Backend& backend, const Transcript& transcript);

  static std::string key(const BackendConfig& config, const Transcript& transcript);

  std::size_t hits() const;
  std::size_t misses() const;

 private:
  fs::path dir_;
  mutable std::mutex mutex_;
  std::unordered_map<std::string, CompletionResponse> memory_;
  std::unordered_map<std::string, std::shared_future<CompletionResponse>> pending_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

struct LabelFailure {
  std::size_t id = 0;
  std::string error;
  std::string raw_response;
  int attempt_count = 0;
};

json to_json(const LabelFailure& failure);

// One line of labels.jsonl: either a label or a recorded failure.
struct LabelOutcome {
  std::size_t id = 0;
  std::optional<WeakLabeledPoint> labeled;
  std::optional<LabelFailure> failure;
};

json to_json(const LabelOutcome& outcome);
LabelOutcome label_outcome_from_json(const json& row);

// Renders, queries (through the cache) and interprets one point. A response
// that names no label gets one clarification turn before counting as failed.
// Never throws for item-level problems; they come back as a failure.
LabelOutcome label_point(const PromptConfig& config, const DataPoint& dp, Backend& backend, ResponseCache& cache);

struct RunCounts {
  std::size_t total = 0;
  std::size_t labeled = 0;
  std::size_t failed = 0;
};

struct RunManifest {
  std::string run_id;
  std::string dataset_digest;
  std::string dataset_path;
  json prompt_config;
  json backend;
  std::string started_at;
  std::optional<std::string> finished_at;
  RunCounts counts;

  bool finished() const noexcept { return finished_at.has_value(); }
};

json to_json(const RunManifest& manifest);
RunManifest run_manifest_from_json(const json& doc);

struct LabelOptions {
  bool resume = false;
  double failure_threshold = 0.2;       // abort once failed/total exceeds this
  std::optional<std::size_t> limit;     // label at most this many new items
};

struct LabelRunResult {
  std::vector<WeakLabeledPoint> labeled;  // every label in the file, id order
  std::vector<LabelFailure> failures;
  std::size_t processed = 0;              // items handled by this invocation
  RunManifest manifest;
};

// Writes run_dir/{manifest.json,labels.jsonl,cache/}. labels.jsonl is
// appended in id order as each item becomes final, so an interrupted run can
// be resumed. Throws DigestMismatch when resuming over a changed dataset and
// FailureRateExceeded once failures pass the threshold.
LabelRunResult generate_weak_labels(const Dataset& dataset, const PromptConfig& config, Backend& backend,
                                    const fs::path& run_dir, const LabelOptions& options = {});

struct EvalItem {
  std::size_t id = 0;
  Label gold = Label::Hallucination;
  std::optional<Label> predicted;
  std::optional<double> p_hallucination;
  bool correct = false;
  std::string raw_response;
  std::string error;
};

json to_json(const EvalItem& item);

struct EvalOutcome {
  double accuracy = 0.0;
  std::size_t n = 0;
  std::vector<EvalItem> items;
};

// Accuracy against gold labels; failed items count as wrong. Per-item
// records go to `audit_path` when given.
EvalOutcome evaluate_prompt(const PromptConfig& config, const Dataset& valset, Backend& backend, ResponseCache& cache,
                            const std::optional<fs::path>& audit_path = std::nullopt);

struct StageRow {
  std::string stage_name;
  json prompt_config;
  double validation_accuracy = 0.0;
  std::size_t n_examples = 0;
};

class StageLedger {
 public:
  // Throws InvalidConfig on a duplicate name or an accuracy outside [0,1].
  void add(StageRow row);

  const std::vector<StageRow>& rows() const noexcept { return rows_; }
  bool empty() const noexcept { return rows_.empty(); }
  std::size_t size() const noexcept { return rows_.size(); }

  // Highest accuracy, earliest row on ties. Throws NoCandidates when empty.
  std::size_t best_index() const;

  json to_json() const;
  static StageLedger from_json(const json& doc);

  // Aligned "stage / accuracy / n" table.
  void print(std::ostream& out) const;

 private:
  std::vector<StageRow> rows_;
};

struct OptimizeResult {
  PromptConfig best_config;
  std::size_t best_index = 0;
  StageLedger ledger;
};

// argmax over candidate system instructions with shots, template and seed
// held fixed. Ties go to the earliest candidate. Rows are "candidate-<i>".
OptimizeResult optimize_instruction(std::span<const std::string> candidates, const PromptConfig& base,
                                    const Dataset& valset, Backend& backend, ResponseCache& cache,
                                    const std::optional<fs::path>& run_dir = std::nullopt);

struct StageSpec {
  std::string name;
  std::string system_instruction{kDefaultSystemInstruction};
  std::size_t k = 0;
};

// Evaluates each stage in order; shots for k > 0 come from `shot_pool`.
// Throws NoCandidates when `stages` is empty.
StageLedger run_stages(const Dataset& valset, Backend& backend, ResponseCache& cache, std::span<const StageSpec> stages,
                       std::span<const DataPoint> shot_pool, const UserTemplate& user_template, std::uint64_t seed,
                       ShotStrategy strategy = ShotStrategy::Balanced,
                       const std::optional<fs::path>& run_dir = std::nullopt);

}  // namespace halo
