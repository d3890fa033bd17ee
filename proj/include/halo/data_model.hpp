#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace halo {

using json = nlohmann::json;

enum class Label { Hallucination, NotHallucination };

// "Hallucination" / "Not Hallucination", exactly.
std::string_view canonical_string(Label label) noexcept;

// Exact match against the canonical spellings only.
std::optional<Label> label_from_canonical(std::string_view text) noexcept;

// Lenient reading of free-form model output. The negated phrase is checked
// first because "not hallucination" contains "hallucination".
// Throws UnparseableLabel when neither phrase occurs.
Label parse_label_text(std::string_view raw);

// Which side of the record is the authoritative context.
enum class Reference { Src, Tgt, Either };

std::string_view to_string(Reference ref) noexcept;
std::optional<Reference> reference_from_string(std::string_view text) noexcept;

struct DataPoint {
  std::size_t id = 0;
  std::string hyp;
  std::optional<std::string> src;
  std::optional<std::string> tgt;
  Reference ref = Reference::Either;
  std::string task;
  std::optional<Label> gold_label;
  json extra = json::object();  // unknown input fields, kept verbatim

  bool has_src() const noexcept { return src.has_value() && !src->empty(); }
  bool has_tgt() const noexcept { return tgt.has_value() && !tgt->empty(); }
};

// Input-file shape of a point: known fields plus extras. The ordinal id is
// not written; it is re-derived from position on load.
json to_json(const DataPoint& dp);

// Validates one input record. `where` names the record in error messages.
DataPoint data_point_from_json(const json& record, std::size_t id, const std::string& where);

enum class DatasetFormat { JsonArray, JsonLines };

struct Dataset {
  std::vector<DataPoint> points;
  std::string digest;  // sha256 of the source file bytes
  std::filesystem::path source;

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }
  const DataPoint& at(std::size_t id) const { return points.at(id); }
};

Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format);

// Sniffs the format: a leading '[' means a JSON array, anything else JSON lines.
Dataset load_dataset(const std::filesystem::path& path);

void write_dataset_jsonl(const Dataset& dataset, const std::filesystem::path& path);

// Ties (p == 0.5) resolve to Hallucination.
Label label_for_probability(double p_hallucination) noexcept;

struct LabelDistribution {
  double p_hallucination = 0.5;
  double p_not_hallucination = 0.5;

  // Throws InvalidConfig when p is outside [0,1] or not finite.
  static LabelDistribution from_p_hallucination(double p);
  static LabelDistribution certain(Label label) noexcept;

  Label decide() const noexcept { return label_for_probability(p_hallucination); }
};

struct WeakLabeledPoint {
  std::size_t id = 0;
  Label predicted = Label::Hallucination;
  std::optional<LabelDistribution> distribution;
  std::string raw_response;
  int attempt_count = 1;
};

json to_json(const WeakLabeledPoint& point);
WeakLabeledPoint weak_labeled_point_from_json(const json& row);

struct PredictionRecord {
  std::size_t id = 0;
  Label predicted = Label::Hallucination;
  std::optional<double> p_hallucination;
  std::string model_tag;
};

json to_json(const PredictionRecord& record);

// Reads a prediction row. Keys outside the schema are reported through
// `unknown_keys` when given, otherwise ignored.
PredictionRecord prediction_record_from_json(const json& row,
                                             std::vector<std::string>* unknown_keys = nullptr);

}  // namespace halo
