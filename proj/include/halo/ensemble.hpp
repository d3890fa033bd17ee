#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "halo/data_model.hpp"

namespace halo {

// Predictions of one checkpoint, sorted by id with unique ids.
struct PredictionSet {
  std::string model_tag;
  std::vector<PredictionRecord> records;

  // Sorts by id. Throws MisalignedIds on a duplicate id.
  static PredictionSet from_records(std::string model_tag, std::vector<PredictionRecord> records);
};

struct LoadedPredictions {
  PredictionSet set;
  std::vector<std::string> warnings;  // schema deviations, one per finding
};

// The tag comes from the rows' model_tag (which must agree) and falls back to
// the file stem when rows carry none.
LoadedPredictions load_prediction_set(const std::filesystem::path& path);
void write_prediction_set(const PredictionSet& set, const std::filesystem::path& path);

enum class TiePolicy {
  MeanConfidence,     // mean p_hallucination >= 0.5 decides; no confidences -> FlagHallucination
  FlagHallucination,  // ties are Hallucination
};

std::optional<TiePolicy> tie_policy_from_string(std::string_view text) noexcept;

struct Vote {
  std::size_t id = 0;
  Label final_label = Label::Hallucination;
  std::size_t votes_hallucination = 0;
  std::size_t votes_not = 0;
  bool tiebreak_used = false;
};

struct VoteResult {
  std::vector<Vote> votes;  // id order
  std::size_t n_models = 0;

  PredictionSet as_prediction_set(std::string model_tag = "ensemble") const;
};

// Throws NoSets for an empty input and MisalignedIds when
// the sets do not cover the same ids.
VoteResult majority_vote(std::span<const PredictionSet> sets, TiePolicy policy = TiePolicy::MeanConfidence);

// Positive class is Hallucination.
struct Confusion {
  std::size_t true_positive = 0;
  std::size_t false_positive = 0;
  std::size_t false_negative = 0;
  std::size_t true_negative = 0;

  std::size_t total() const noexcept { return true_positive + false_positive + false_negative + true_negative; }
};

struct TaskScore {
  double accuracy = 0.0;
  std::size_t n = 0;
};

struct EvalReport {
  double accuracy = 0.0;
  std::size_t n = 0;
  std::map<std::string, TaskScore> per_task;
  Confusion confusion;
  std::optional<std::vector<std::pair<std::string, double>>> member_accuracies;  // input order
  std::string model_tag;
};

EvalReport score(std::span<const std::pair<std::size_t, Label>> predictions, const Dataset& gold);
EvalReport score(const PredictionSet& predictions, const Dataset& gold);

json to_json(const EvalReport& report);

// Two-column "Model Variant / Accuracy" table. With member accuracies the
// members come first and the report itself is the closing "Ensemble Result".
void print_report_table(std::ostream& out, const EvalReport& report);

// Symmetric, unit diagonal; entry (i, j) is the fraction of ids on which sets
// i and j agree.
std::vector<std::vector<double>> pairwise_agreement(std::span<const PredictionSet> sets);

}  // namespace halo
