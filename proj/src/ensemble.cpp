#include "halo/ensemble.hpp"

#include <algorithm>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include "halo/error.hpp"
#include "halo/io.hpp"

namespace halo {

namespace {

std::string describe_ids(const std::vector<std::size_t>& ids) {
  std::ostringstream out;
  for (std::size_t i = 0; i < ids.size() && i < 8; ++i) out << (i ? "," : "") << ids[i];
  if (ids.size() > 8) out << ",... (" << ids.size() << " total)";
  return out.str();
}

// Every set must carry exactly the ids of the first one.
void check_alignment(std::span<const PredictionSet> sets) {
  const auto& reference = sets.front().records;
  for (std::size_t s = 1; s < sets.size(); ++s) {
    const auto& other = sets[s].records;
    std::vector<std::size_t> missing;
    std::vector<std::size_t> extra;
    std::size_t i = 0;
    std::size_t j = 0;
    while (i < reference.size() || j < other.size()) {
      if (j == other.size() || (i < reference.size() && reference[i].id < other[j].id)) {
        missing.push_back(reference[i++].id);
      } else if (i == reference.size() || other[j].id < reference[i].id) {
        extra.push_back(other[j++].id);
      } else {
        ++i;
        ++j;
      }
    }
    if (!missing.empty() || !extra.empty()) {
      std::string detail = "set \"" + sets[s].model_tag + "\" vs \"" + sets.front().model_tag + "\"";
      if (!missing.empty()) detail += " missing ids [" + describe_ids(missing) + "]";
      if (!extra.empty()) detail += " extra ids [" + describe_ids(extra) + "]";
      throw Error(ErrorCode::MisalignedIds, detail);
    }
  }
}

}  // namespace

PredictionSet PredictionSet::from_records(std::string model_tag, std::vector<PredictionRecord> records) {
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < records.size(); ++i) {
    if (records[i].id == records[i - 1].id) {
      throw Error(ErrorCode::MisalignedIds, "set \"" + model_tag + "\" repeats id " + std::to_string(records[i].id));
    }
  }
  return {std::move(model_tag), std::move(records)};
}

LoadedPredictions load_prediction_set(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::IoError, "no such file: " + path.string());
  LoadedPredictions loaded;
  std::vector<PredictionRecord> records;
  std::optional<std::string> tag;
  std::set<std::string> reported_keys;
  for (const auto& row : read_jsonl(path)) {
    std::vector<std::string> unknown;
    PredictionRecord record;
    try {
      record = prediction_record_from_json(row.value, &unknown);
    } catch (const Error& e) {
      throw Error(ErrorCode::MalformedRecord, path.string() + " line " + std::to_string(row.line) + ": " + e.detail());
    }
    for (const auto& key : unknown) {
      if (reported_keys.insert(key).second) loaded.warnings.push_back(path.string() + ": unknown field \"" + key + "\"");
    }
    if (record.model_tag.empty()) {
      if (reported_keys.insert("<no model_tag>").second) {
        loaded.warnings.push_back(path.string() + ": rows without model_tag");
      }
    } else if (!tag) {
      tag = record.model_tag;
    } else if (*tag != record.model_tag) {
      throw Error(ErrorCode::MalformedRecord, path.string() + " line " + std::to_string(row.line) +
                                                  ": model_tag \"" + record.model_tag + "\" differs from \"" + *tag +
                                                  "\"");
    }
    records.push_back(std::move(record));
  }
  const std::string model_tag = tag.value_or(path.stem().string());
  for (auto& record : records) record.model_tag = model_tag;
  try {
    loaded.set = PredictionSet::from_records(model_tag, std::move(records));
  } catch (const Error& e) {
    throw Error(ErrorCode::MisalignedIds, path.string() + ": " + e.detail());
  }
  return loaded;
}

void write_prediction_set(const PredictionSet& set, const std::filesystem::path& path) {
  std::vector<json> rows;
  rows.reserve(set.records.size());
  for (const auto& record : set.records) rows.push_back(to_json(record));
  write_file_atomic(path, dump_jsonl(rows));
}

std::optional<TiePolicy> tie_policy_from_string(std::string_view text) noexcept {
  if (text == "mean_confidence") return TiePolicy::MeanConfidence;
  if (text == "flag_hallucination") return TiePolicy::FlagHallucination;
  return std::nullopt;
}

PredictionSet VoteResult::as_prediction_set(std::string model_tag) const {
  PredictionSet set;
  set.model_tag = model_tag;
  set.records.reserve(votes.size());
  for (const auto& vote : votes) {
    const double share = n_models == 0 ? 0.0 : static_cast<double>(vote.votes_hallucination) / static_cast<double>(n_models);
    set.records.push_back({vote.id, vote.final_label, share, model_tag});
  }
  return set;
}

VoteResult majority_vote(std::span<const PredictionSet> sets, TiePolicy policy) {
  if (sets.empty()) throw Error(ErrorCode::NoSets, "majority vote needs at least one prediction set");
  check_alignment(sets);

  VoteResult result;
  result.n_models = sets.size();
  const std::size_t n_ids = sets.front().records.size();
  result.votes.reserve(n_ids);
  for (std::size_t row = 0; row < n_ids; ++row) {
    Vote vote;
    vote.id = sets.front().records[row].id;
    double confidence_sum = 0.0;
    std::size_t confidence_count = 0;
    for (const auto& set : sets) {
      const PredictionRecord& record = set.records[row];
      if (record.predicted == Label::Hallucination) {
        ++vote.votes_hallucination;
      } else {
        ++vote.votes_not;
      }
      if (record.p_hallucination) {
        confidence_sum += *record.p_hallucination;
        ++confidence_count;
      }
    }
    if (vote.votes_hallucination != vote.votes_not) {
      vote.final_label = vote.votes_hallucination > vote.votes_not ? Label::Hallucination : Label::NotHallucination;
    } else {
      vote.tiebreak_used = true;
      if (policy == TiePolicy::MeanConfidence && confidence_count > 0) {
        vote.final_label = label_for_probability(confidence_sum / static_cast<double>(confidence_count));
      } else {
        vote.final_label = Label::Hallucination;
      }
    }
    result.votes.push_back(vote);
  }
  return result;
}

EvalReport score(std::span<const std::pair<std::size_t, Label>> predictions, const Dataset& gold) {
  std::vector<std::pair<std::size_t, Label>> sorted(predictions.begin(), predictions.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

  std::vector<std::size_t> missing;
  std::vector<std::size_t> extra;
  std::size_t next_gold = 0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (i > 0 && sorted[i].first == sorted[i - 1].first) {
      throw Error(ErrorCode::MisalignedIds, "prediction id " + std::to_string(sorted[i].first) + " repeats");
    }
    if (sorted[i].first >= gold.size()) extra.push_back(sorted[i].first);
  }
  for (const auto& [id, label] : sorted) {
    while (next_gold < id && next_gold < gold.size()) missing.push_back(next_gold++);
    if (next_gold == id) ++next_gold;
  }
  while (next_gold < gold.size()) missing.push_back(next_gold++);
  if (!missing.empty() || !extra.empty()) {
    std::string detail = "predictions vs gold";
    if (!missing.empty()) detail += " missing ids [" + describe_ids(missing) + "]";
    if (!extra.empty()) detail += " extra ids [" + describe_ids(extra) + "]";
    throw Error(ErrorCode::MisalignedIds, detail);
  }

  EvalReport report;
  report.n = sorted.size();
  std::map<std::string, std::size_t> task_correct;
  std::size_t correct = 0;
  for (const auto& [id, predicted] : sorted) {
    const DataPoint& dp = gold.at(id);
    if (!dp.gold_label) throw Error(ErrorCode::MissingGold, "id " + std::to_string(id));
    const bool gold_h = *dp.gold_label == Label::Hallucination;
    const bool pred_h = predicted == Label::Hallucination;
    if (gold_h && pred_h) ++report.confusion.true_positive;
    if (!gold_h && pred_h) ++report.confusion.false_positive;
    if (gold_h && !pred_h) ++report.confusion.false_negative;
    if (!gold_h && !pred_h) ++report.confusion.true_negative;
    const bool hit = predicted == *dp.gold_label;
    correct += hit ? 1 : 0;
    task_correct[dp.task] += hit ? 1 : 0;
    ++report.per_task[dp.task].n;
  }
  report.accuracy = report.n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(report.n);
  for (auto& [task, entry] : report.per_task) {
    entry.accuracy = static_cast<double>(task_correct[task]) / static_cast<double>(entry.n);
  }
  return report;
}

EvalReport score(const PredictionSet& predictions, const Dataset& gold) {
  std::vector<std::pair<std::size_t, Label>> pairs;
  pairs.reserve(predictions.records.size());
  for (const auto& record : predictions.records) pairs.emplace_back(record.id, record.predicted);
  EvalReport report = score(pairs, gold);
  report.model_tag = predictions.model_tag;
  return report;
}

json to_json(const EvalReport& report) {
  json per_task = json::object();
  for (const auto& [task, entry] : report.per_task) per_task[task] = {{"accuracy", entry.accuracy}, {"n", entry.n}};
  json doc{{"model_tag", report.model_tag},
           {"accuracy", report.accuracy},
           {"n", report.n},
           {"per_task", std::move(per_task)},
           {"confusion",
            {{"true_positive", report.confusion.true_positive},
             {"false_positive", report.confusion.false_positive},
             {"false_negative", report.confusion.false_negative},
             {"true_negative", report.confusion.true_negative}}}};
  if (report.member_accuracies) {
    json members = json::array();
    for (const auto& [tag, accuracy] : *report.member_accuracies) {
      members.push_back({{"model_tag", tag}, {"accuracy", accuracy}});
    }
    doc["member_accuracies"] = std::move(members);
  }
  return doc;
}

void print_report_table(std::ostream& out, const EvalReport& report) {
  std::vector<std::pair<std::string, double>> rows;
  if (report.member_accuracies) {
    rows = *report.member_accuracies;
    rows.emplace_back("Ensemble Result", report.accuracy);
  } else {
    rows.emplace_back(report.model_tag.empty() ? std::string("predictions") : report.model_tag, report.accuracy);
  }
  std::size_t width = std::string_view("Model Variant").size();
  for (const auto& [name, accuracy] : rows) width = std::max(width, name.size());

  const auto flags = out.flags();
  const auto precision = out.precision();
  out << std::left << std::setw(static_cast<int>(width)) << "Model Variant" << "  " << std::right << std::setw(8)
      << "Accuracy" << "\n";
  for (const auto& [name, accuracy] : rows) {
    out << std::left << std::setw(static_cast<int>(width)) << name << "  " << std::right << std::setw(8) << std::fixed
        << std::setprecision(3) << accuracy << "\n";
  }
  out.flags(flags);
  out.precision(precision);
}

std::vector<std::vector<double>> pairwise_agreement(std::span<const PredictionSet> sets) {
  if (sets.empty()) return {};
  check_alignment(sets);
  const std::size_t n = sets.size();
  const std::size_t ids = sets.front().records.size();
  std::vector<std::vector<double>> matrix(n, std::vector<double>(n, 1.0));
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      std::size_t agree = 0;
      for (std::size_t row = 0; row < ids; ++row) {
        agree += sets[a].records[row].predicted == sets[b].records[row].predicted ? 1 : 0;
      }
      const double rate = ids == 0 ? 1.0 : static_cast<double>(agree) / static_cast<double>(ids);
      matrix[a][b] = rate;
      matrix[b][a] = rate;
    }
  }
  return matrix;
}

}  // namespace halo
