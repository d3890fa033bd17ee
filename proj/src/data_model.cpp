#include "halo/data_model.hpp"

#include <cctype>
#include <cmath>

#include "halo/error.hpp"
#include "halo/io.hpp"

namespace halo {

namespace {

constexpr std::string_view kHallucination = "Hallucination";
constexpr std::string_view kNotHallucination = "Not Hallucination";

// Lowercase and collapse whitespace runs into single spaces.
std::string normalize(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  bool pending_space = false;
  for (unsigned char c : raw) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

bool contains(std::string_view haystack, std::string_view needle) {
  return haystack.find(needle) != std::string_view::npos;
}

std::optional<std::string> optional_text(const json& record, const char* key, const std::string& where) {
  auto it = record.find(key);
  if (it == record.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) {
    throw Error(ErrorCode::MalformedRecord, where + ": field \"" + key + "\" must be a string");
  }
  return it->get<std::string>();
}

}  // namespace

std::string_view canonical_string(Label label) noexcept {
  return label == Label::Hallucination ? kHallucination : kNotHallucination;
}

std::optional<Label> label_from_canonical(std::string_view text) noexcept {
  if (text == kHallucination) return Label::Hallucination;
  if (text == kNotHallucination) return Label::NotHallucination;
  return std::nullopt;
}

Label parse_label_text(std::string_view raw) {
  const std::string text = normalize(raw);
  if (contains(text, "not hallucination") || contains(text, "not hallucinated")) {
    return Label::NotHallucination;
  }
  if (contains(text, "hallucination") || contains(text, "hallucinated")) {
    return Label::Hallucination;
  }
  std::string excerpt(raw.substr(0, 120));
  throw Error(ErrorCode::UnparseableLabel, "\"" + excerpt + "\"");
}

std::string_view to_string(Reference ref) noexcept {
  switch (ref) {
    case Reference::Src: return "src";
    case Reference::Tgt: return "tgt";
    case Reference::Either: return "either";
  }
  return "either";
}

std::optional<Reference> reference_from_string(std::string_view text) noexcept {
  if (text == "src") return Reference::Src;
  if (text == "tgt") return Reference::Tgt;
  if (text == "either") return Reference::Either;
  return std::nullopt;
}

json to_json(const DataPoint& dp) {
  json out = dp.extra.is_object() ? dp.extra : json::object();
  out["hyp"] = dp.hyp;
  if (dp.src) out["src"] = *dp.src;
  if (dp.tgt) out["tgt"] = *dp.tgt;
  out["ref"] = std::string(to_string(dp.ref));
  out["task"] = dp.task;
  if (dp.gold_label) out["label"] = std::string(canonical_string(*dp.gold_label));
  return out;
}

DataPoint data_point_from_json(const json& record, std::size_t id, const std::string& where) {
  if (!record.is_object()) throw Error(ErrorCode::MalformedRecord, where + ": not a JSON object");

  DataPoint dp;
  dp.id = id;

  auto hyp = optional_text(record, "hyp", where);
  if (!hyp) throw Error(ErrorCode::MissingField, "hyp (" + where + ")");
  dp.hyp = std::move(*hyp);
  dp.src = optional_text(record, "src", where);
  dp.tgt = optional_text(record, "tgt", where);
  if (!dp.has_src() && !dp.has_tgt()) {
    throw Error(ErrorCode::MissingField, "src or tgt (" + where + ")");
  }

  if (auto ref = optional_text(record, "ref", where)) {
    auto parsed = reference_from_string(*ref);
    if (!parsed) throw Error(ErrorCode::MalformedRecord, where + ": unknown ref \"" + *ref + "\"");
    dp.ref = *parsed;
  }
  if (dp.ref == Reference::Tgt && !dp.has_tgt()) {
    throw Error(ErrorCode::MalformedRecord, where + ": ref is tgt but tgt is absent");
  }
  if (dp.ref == Reference::Src && !dp.has_src()) {
    throw Error(ErrorCode::MalformedRecord, where + ": ref is src but src is absent");
  }

  dp.task = optional_text(record, "task", where).value_or("");

  if (auto label = optional_text(record, "label", where)) {
    dp.gold_label = label_from_canonical(*label);
    if (!dp.gold_label) {
      throw Error(ErrorCode::MalformedRecord, where + ": label \"" + *label + "\" is not canonical");
    }
  }

  for (const auto& [key, value] : record.items()) {
    if (key == "hyp" || key == "src" || key == "tgt" || key == "ref" || key == "task" || key == "label") {
      continue;
    }
    dp.extra[key] = value;
  }
  return dp;
}

Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::IoError, "no such file: " + path.string());
  const std::string bytes = read_file(path);

  Dataset dataset;
  dataset.digest = sha256_hex(bytes);
  dataset.source = path;

  if (format == DatasetFormat::JsonArray) {
    json doc;
    try {
      doc = json::parse(bytes);
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::MalformedRecord, path.string() + ": " + e.what());
    }
    if (!doc.is_array()) throw Error(ErrorCode::MalformedRecord, path.string() + ": top level is not an array");
    for (std::size_t i = 0; i < doc.size(); ++i) {
      dataset.points.push_back(data_point_from_json(doc[i], i, path.string() + " index " + std::to_string(i)));
    }
  } else {
    for (auto& row : read_jsonl(path)) {
      const std::size_t id = dataset.points.size();
      dataset.points.push_back(
          data_point_from_json(row.value, id, path.string() + " line " + std::to_string(row.line)));
    }
  }

  if (dataset.points.empty()) throw Error(ErrorCode::EmptyDataset, path.string());
  return dataset;
}

Dataset load_dataset(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::IoError, "no such file: " + path.string());
  const std::string bytes = read_file(path);
  const auto first = bytes.find_first_not_of(" \t\r\n");
  const bool array = first != std::string::npos && bytes[first] == '[';
  return load_dataset(path, array ? DatasetFormat::JsonArray : DatasetFormat::JsonLines);
}

void write_dataset_jsonl(const Dataset& dataset, const std::filesystem::path& path) {
  std::vector<json> rows;
  rows.reserve(dataset.size());
  for (const auto& dp : dataset.points) rows.push_back(to_json(dp));
  write_file_atomic(path, dump_jsonl(rows));
}

Label label_for_probability(double p_hallucination) noexcept {
  return p_hallucination >= 0.5 ? Label::Hallucination : Label::NotHallucination;
}

LabelDistribution LabelDistribution::from_p_hallucination(double p) {
  if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
    throw Error(ErrorCode::InvalidConfig, "probability out of range: " + std::to_string(p));
  }
  return {p, 1.0 - p};
}

LabelDistribution LabelDistribution::certain(Label label) noexcept {
  return label == Label::Hallucination ? LabelDistribution{1.0, 0.0} : LabelDistribution{0.0, 1.0};
}

json to_json(const WeakLabeledPoint& point) {
  json out;
  out["id"] = point.id;
  out["predicted"] = std::string(canonical_string(point.predicted));
  if (point.distribution) out["p_hallucination"] = point.distribution->p_hallucination;
  out["raw_response"] = point.raw_response;
  out["attempt_count"] = point.attempt_count;
  return out;
}

WeakLabeledPoint weak_labeled_point_from_json(const json& row) {
  try {
    WeakLabeledPoint point;
    point.id = row.at("id").get<std::size_t>();
    auto label = label_from_canonical(row.at("predicted").get<std::string>());
    if (!label) throw Error(ErrorCode::MalformedRecord, "non-canonical predicted label");
    point.predicted = *label;
    if (auto it = row.find("p_hallucination"); it != row.end() && !it->is_null()) {
      point.distribution = LabelDistribution::from_p_hallucination(it->get<double>());
    }
    point.raw_response = row.value("raw_response", "");
    point.attempt_count = row.value("attempt_count", 1);
    return point;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, std::string("weak label row: ") + e.what());
  }
}

json to_json(const PredictionRecord& record) {
  json out;
  out["id"] = record.id;
  out["predicted"] = std::string(canonical_string(record.predicted));
  if (record.p_hallucination) out["p_hallucination"] = *record.p_hallucination;
  out["model_tag"] = record.model_tag;
  return out;
}

PredictionRecord prediction_record_from_json(const json& row, std::vector<std::string>* unknown_keys) {
  if (!row.is_object()) throw Error(ErrorCode::MalformedRecord, "prediction row is not an object");
  try {
    PredictionRecord record;
    const json& id = row.at("id");
    if (!id.is_number_unsigned() && !(id.is_number_integer() && id.get<long long>() >= 0)) {
      throw Error(ErrorCode::MalformedRecord, "prediction id must be a non-negative integer");
    }
    record.id = id.get<std::size_t>();
    auto label = label_from_canonical(row.at("predicted").get<std::string>());
    if (!label) throw Error(ErrorCode::MalformedRecord, "non-canonical predicted label");
    record.predicted = *label;
    if (auto it = row.find("p_hallucination"); it != row.end() && !it->is_null()) {
      const double p = it->get<double>();
      if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
        throw Error(ErrorCode::MalformedRecord, "p_hallucination out of [0,1]");
      }
      record.p_hallucination = p;
    }
    record.model_tag = row.value("model_tag", "");
    if (unknown_keys != nullptr) {
      for (const auto& [key, value] : row.items()) {
        if (key != "id" && key != "predicted" && key != "p_hallucination" && key != "model_tag") {
          unknown_keys->push_back(key);
        }
      }
    }
    return record;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, std::string("prediction row: ") + e.what());
  }
}

}  // namespace halo
