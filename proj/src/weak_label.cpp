#include "halo/weak_label.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <exception>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "halo/error.hpp"
#include "halo/io.hpp"

namespace halo {

namespace {

// Runs work(i) for i in [0, count) on up to `workers` threads and hands each
// result to `sink` strictly in index order. A false return from `sink` stops
// dispatch; results past that point are discarded.
template <typename Result>
void run_ordered(std::size_t count, std::size_t workers, const std::function<Result(std::size_t)>& work,
                 const std::function<bool(std::size_t, Result&&)>& sink) {
  if (count == 0) return;
  std::mutex mutex;
  std::condition_variable ready_cv;
  std::map<std::size_t, Result> ready;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::exception_ptr failure;

  auto worker = [&] {
    while (!stop.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) break;
      try {
        Result result = work(i);
        std::lock_guard lock(mutex);
        ready.emplace(i, std::move(result));
      } catch (...) {
        std::lock_guard lock(mutex);
        if (!failure) failure = std::current_exception();
        stop.store(true);
      }
      ready_cv.notify_all();
    }
  };

  std::vector<std::thread> threads;
  const std::size_t n_threads = std::clamp<std::size_t>(workers, 1, count);
  threads.reserve(n_threads);
  for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);

  std::exception_ptr sink_failure;
  for (std::size_t expected = 0; expected < count; ++expected) {
    Result result;
    {
      std::unique_lock lock(mutex);
      ready_cv.wait(lock, [&] { return ready.count(expected) > 0 || failure != nullptr; });
      if (ready.count(expected) == 0) break;
      result = std::move(ready.at(expected));
      ready.erase(expected);
    }
    bool keep_going = false;
    try {
      keep_going = sink(expected, std::move(result));
    } catch (...) {
      sink_failure = std::current_exception();
    }
    if (!keep_going) {
      stop.store(true);
      break;
    }
  }
  stop.store(true);
  for (auto& thread : threads) thread.join();
  if (sink_failure) std::rethrow_exception(sink_failure);
  if (failure) std::rethrow_exception(failure);
}

std::string safe_file_stem(const std::string& name) {
  std::string out;
  for (unsigned char c : name) {
    out.push_back(std::isalnum(c) || c == '-' || c == '_' || c == '.' ? static_cast<char>(c) : '_');
  }
  return out.empty() ? std::string("stage") : out;
}

struct Interpretation {
  Label label;
  std::optional<LabelDistribution> distribution;
};

Interpretation interpret(const CompletionResponse& response) {
  LabelDistribution dist = label_distribution(response);
  if (response.has_logprobs()) return {dist.decide(), dist};
  return {dist.decide(), std::nullopt};
}

bool is_label_problem(const Error& e) {
  return e.code() == ErrorCode::UnparseableLabel || e.code() == ErrorCode::UndecidableDistribution;
}

// Reads what a previous invocation wrote. A trailing line without a newline is
// the remnant of an interrupted write; it is cut off so appending resumes on a
// clean line boundary.
std::map<std::size_t, LabelOutcome> load_existing_outcomes(const fs::path& path, std::size_t dataset_size) {
  std::map<std::size_t, LabelOutcome> out;
  if (!fs::exists(path)) return out;
  const std::string text = read_file(path);
  const auto last_newline = text.rfind('\n');
  const std::size_t complete_bytes = last_newline == std::string::npos ? 0 : last_newline + 1;
  if (complete_bytes != text.size()) fs::resize_file(path, complete_bytes);

  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < complete_bytes) {
    const std::size_t end = text.find('\n', pos);
    ++line_no;
    const std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    LabelOutcome outcome;
    try {
      outcome = label_outcome_from_json(json::parse(line));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::MalformedRecord, path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
    if (outcome.id >= dataset_size) {
      throw Error(ErrorCode::MalformedRecord,
                  path.string() + " line " + std::to_string(line_no) + ": id beyond dataset");
    }
    out[outcome.id] = std::move(outcome);
  }
  return out;
}

void write_manifest(const fs::path& path, const RunManifest& manifest) {
  write_file_atomic(path, to_json(manifest).dump(2) + "\n");
}

}  // namespace

// --- ResponseCache ---------------------------------------------------------

ResponseCache::ResponseCache(fs::path dir) : dir_(std::move(dir)) {
  if (!dir_.empty()) fs::create_directories(dir_);
}

std::string ResponseCache::key(const BackendConfig& config, const Transcript& transcript) {
  json material{{"kind", config.kind == BackendKind::Mock ? "mock" : "http_chat"},
                {"base_url", config.base_url},
                {"model", config.model_name},
                {"temperature", config.temperature},
                {"max_tokens", config.max_tokens},
                {"logprobs", config.request_logprobs},
                {"top_logprobs", config.request_logprobs ? config.top_logprobs : 0},
                {"messages", to_json(transcript)}};
  return sha256_hex(material.dump(-1, ' ', false, json::error_handler_t::replace));
}

CompletionResponse ResponseCache::complete(Backend& backend, const Transcript& transcript) {
  const std::string k = key(backend.config(), transcript);
  const fs::path file = dir_.empty() ? fs::path{} : dir_ / (k + ".json");

  std::promise<CompletionResponse> promise;
  {
    std::unique_lock lock(mutex_);
    if (auto it = memory_.find(k); it != memory_.end()) {
      ++hits_;
      return it->second;
    }
    if (!file.empty() && fs::exists(file)) {
      CompletionResponse cached = completion_response_from_json(json::parse(read_file(file)));
      memory_.emplace(k, cached);
      ++hits_;
      return cached;
    }
    if (auto it = pending_.find(k); it != pending_.end()) {
      auto shared = it->second;
      ++hits_;
      lock.unlock();
      return shared.get();
    }
    ++misses_;
    pending_.emplace(k, promise.get_future().share());
  }

  try {
    CompletionResponse response = backend.complete(transcript);
    if (!file.empty()) write_file_atomic(file, to_json(response).dump() + "\n");
    std::lock_guard lock(mutex_);
    memory_.emplace(k, response);
    pending_.erase(k);
    promise.set_value(response);
    return response;
  } catch (...) {
    std::lock_guard lock(mutex_);
    pending_.erase(k);
    promise.set_exception(std::current_exception());
    throw;
  }
}

std::size_t ResponseCache::hits() const {
  std::lock_guard lock(mutex_);
  return hits_;
}

std::size_t ResponseCache::misses() const {
  std::lock_guard lock(mutex_);
  return misses_;
}

// --- per-item labeling -------------------------------------------------------

json to_json(const LabelFailure& failure) {
  return json{{"id", failure.id},
              {"failed", true},
              {"error", failure.error},
              {"raw_response", failure.raw_response},
              {"attempt_count", failure.attempt_count}};
}

json to_json(const LabelOutcome& outcome) {
  if (outcome.labeled) return to_json(*outcome.labeled);
  if (outcome.failure) return to_json(*outcome.failure);
  throw Error(ErrorCode::InvalidConfig, "label outcome holds neither a label nor a failure");
}

LabelOutcome label_outcome_from_json(const json& row) {
  LabelOutcome outcome;
  if (row.value("failed", false)) {
    LabelFailure failure;
    failure.id = row.at("id").get<std::size_t>();
    failure.error = row.value("error", "");
    failure.raw_response = row.value("raw_response", "");
    failure.attempt_count = row.value("attempt_count", 0);
    outcome.id = failure.id;
    outcome.failure = std::move(failure);
  } else {
    WeakLabeledPoint point = weak_labeled_point_from_json(row);
    outcome.id = point.id;
    outcome.labeled = std::move(point);
  }
  return outcome;
}

LabelOutcome label_point(const PromptConfig& config, const DataPoint& dp, Backend& backend, ResponseCache& cache) {
  LabelOutcome outcome;
  outcome.id = dp.id;
  auto fail = [&](std::string error, std::string raw, int attempts) {
    outcome.failure = LabelFailure{dp.id, std::move(error), std::move(raw), attempts};
    return outcome;
  };

  Transcript transcript;
  try {
    transcript = render_transcript(config, dp);
  } catch (const Error& e) {
    return fail(e.what(), "", 0);
  }

  int attempts = 0;
  std::string last_text;
  for (int round = 0; round < 2; ++round) {
    CompletionResponse response;
    try {
      ++attempts;
      response = cache.complete(backend, transcript);
    } catch (const Error& e) {
      return fail(std::string(to_string(ErrorCode::BackendFailure)) + "(" + std::to_string(dp.id) + "): " + e.what(),
                  last_text, attempts);
    }
    last_text = response.text;
    try {
      Interpretation reading = interpret(response);
      outcome.labeled = WeakLabeledPoint{dp.id, reading.label, reading.distribution, response.text, attempts};
      return outcome;
    } catch (const Error& e) {
      if (!is_label_problem(e)) throw;
      if (round == 1) return fail(e.what(), last_text, attempts);
    }
    transcript.push_back({Role::Assistant, response.text});
    transcript.push_back({Role::User, std::string(kClarificationMessage)});
  }
  return fail("unreachable", last_text, attempts);
}

// --- run manifest ------------------------------------------------------------

json to_json(const RunManifest& manifest) {
  return json{{"run_id", manifest.run_id},
              {"dataset_digest", manifest.dataset_digest},
              {"dataset_path", manifest.dataset_path},
              {"prompt_config", manifest.prompt_config},
              {"backend", manifest.backend},
              {"started_at", manifest.started_at},
              {"finished_at", manifest.finished_at ? json(*manifest.finished_at) : json(nullptr)},
              {"counts",
               {{"total", manifest.counts.total},
                {"labeled", manifest.counts.labeled},
                {"failed", manifest.counts.failed}}}};
}

RunManifest run_manifest_from_json(const json& doc) {
  try {
    RunManifest manifest;
    manifest.run_id = doc.at("run_id").get<std::string>();
    manifest.dataset_digest = doc.at("dataset_digest").get<std::string>();
    manifest.dataset_path = doc.value("dataset_path", "");
    manifest.prompt_config = doc.value("prompt_config", json::object());
    manifest.backend = doc.value("backend", json::object());
    manifest.started_at = doc.value("started_at", "");
    if (auto it = doc.find("finished_at"); it != doc.end() && it->is_string()) manifest.finished_at = it->get<std::string>();
    const json& counts = doc.at("counts");
    manifest.counts = {counts.at("total").get<std::size_t>(), counts.at("labeled").get<std::size_t>(),
                       counts.at("failed").get<std::size_t>()};
    return manifest;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, std::string("manifest.json: ") + e.what());
  }
}

// --- generate_weak_labels ------------------------------------------------------

LabelRunResult generate_weak_labels(const Dataset& dataset, const PromptConfig& config, Backend& backend,
                                    const fs::path& run_dir, const LabelOptions& options) {
  if (dataset.empty()) throw Error(ErrorCode::EmptyDataset, dataset.source.string());
  fs::create_directories(run_dir);
  const fs::path manifest_path = run_dir / "manifest.json";
  const fs::path labels_path = run_dir / "labels.jsonl";

  const json prompt_snapshot = to_json(config);
  const json backend_snapshot = to_json(backend.config());

  RunManifest manifest;
  std::map<std::size_t, LabelOutcome> outcomes;
  bool fresh = true;
  if (options.resume && fs::exists(manifest_path)) {
    json doc;
    try {
      doc = json::parse(read_file(manifest_path));
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::MalformedRecord, manifest_path.string() + ": " + e.what());
    }
    manifest = run_manifest_from_json(doc);
    if (manifest.dataset_digest != dataset.digest) {
      throw Error(ErrorCode::DigestMismatch, "run " + manifest.run_id + " was started on dataset " +
                                                 manifest.dataset_digest + ", now " + dataset.digest);
    }
    if (manifest.prompt_config != prompt_snapshot) {
      throw Error(ErrorCode::InvalidConfig, "prompt configuration differs from the run being resumed");
    }
    outcomes = load_existing_outcomes(labels_path, dataset.size());
    fresh = false;
  }
  if (fresh) {
    manifest.dataset_digest = dataset.digest;
    manifest.dataset_path = dataset.source.string();
    manifest.prompt_config = prompt_snapshot;
    manifest.run_id = sha256_hex(dataset.digest + prompt_snapshot.dump() + backend_snapshot.dump()).substr(0, 16);
    manifest.started_at = utc_timestamp();
  }
  manifest.backend = backend_snapshot;
  manifest.counts.total = dataset.size();
  manifest.finished_at.reset();
  write_manifest(manifest_path, manifest);

  std::vector<std::size_t> pending;
  for (const auto& dp : dataset.points) {
    if (outcomes.count(dp.id) == 0) pending.push_back(dp.id);
  }
  if (options.limit && pending.size() > *options.limit) pending.resize(*options.limit);

  std::size_t failed = 0;
  for (const auto& [id, outcome] : outcomes) failed += outcome.failure ? 1 : 0;
  const double allowed_failures = options.failure_threshold * static_cast<double>(dataset.size());

  ResponseCache cache(run_dir / "cache");
  JsonlAppender out(labels_path, fresh);
  bool aborted = false;
  std::size_t processed = 0;

  run_ordered<LabelOutcome>(
      pending.size(), backend.config().max_in_flight,
      [&](std::size_t i) { return label_point(config, dataset.at(pending[i]), backend, cache); },
      [&](std::size_t, LabelOutcome&& outcome) {
        out.append(to_json(outcome));
        ++processed;
        if (outcome.failure) {
          ++failed;
          std::cerr << "label: id " << outcome.id << " failed: " << outcome.failure->error << "\n";
        }
        outcomes[outcome.id] = std::move(outcome);
        if (static_cast<double>(failed) > allowed_failures) {
          aborted = true;
          return false;
        }
        return true;
      });

  LabelRunResult result;
  for (auto& [id, outcome] : outcomes) {
    if (outcome.labeled) result.labeled.push_back(*outcome.labeled);
    if (outcome.failure) result.failures.push_back(*outcome.failure);
  }
  manifest.counts.labeled = result.labeled.size();
  manifest.counts.failed = result.failures.size();
  if (!aborted && outcomes.size() == dataset.size()) manifest.finished_at = utc_timestamp();
  write_manifest(manifest_path, manifest);

  if (aborted) {
    std::ostringstream msg;
    msg << failed << " of " << dataset.size() << " items failed (threshold " << options.failure_threshold << ")";
    throw Error(ErrorCode::FailureRateExceeded, msg.str());
  }
  result.processed = processed;
  result.manifest = std::move(manifest);
  return result;
}

// --- evaluation ----------------------------------------------------------------

json to_json(const EvalItem& item) {
  json row{{"id", item.id},
           {"gold", std::string(canonical_string(item.gold))},
           {"predicted", item.predicted ? json(std::string(canonical_string(*item.predicted))) : json(nullptr)},
           {"correct", item.correct},
           {"raw_response", item.raw_response}};
  if (item.p_hallucination) row["p_hallucination"] = *item.p_hallucination;
  if (!item.error.empty()) row["error"] = item.error;
  return row;
}

EvalOutcome evaluate_prompt(const PromptConfig& config, const Dataset& valset, Backend& backend, ResponseCache& cache,
                            const std::optional<fs::path>& audit_path) {
  if (valset.empty()) throw Error(ErrorCode::EmptyDataset, "validation set");
  for (const auto& dp : valset.points) {
    if (!dp.gold_label) throw Error(ErrorCode::MissingGold, "id " + std::to_string(dp.id));
  }

  EvalOutcome result;
  result.n = valset.size();
  result.items.reserve(valset.size());
  std::size_t correct = 0;

  run_ordered<LabelOutcome>(
      valset.size(), backend.config().max_in_flight,
      [&](std::size_t i) { return label_point(config, valset.points[i], backend, cache); },
      [&](std::size_t i, LabelOutcome&& outcome) {
        EvalItem item;
        item.id = valset.points[i].id;
        item.gold = *valset.points[i].gold_label;
        if (outcome.labeled) {
          item.predicted = outcome.labeled->predicted;
          if (outcome.labeled->distribution) item.p_hallucination = outcome.labeled->distribution->p_hallucination;
          item.raw_response = outcome.labeled->raw_response;
          item.correct = item.predicted == item.gold;
        } else {
          item.raw_response = outcome.failure->raw_response;
          item.error = outcome.failure->error;
        }
        correct += item.correct ? 1 : 0;
        result.items.push_back(std::move(item));
        return true;
      });

  result.accuracy = static_cast<double>(correct) / static_cast<double>(result.n);
  if (audit_path) {
    std::vector<json> rows;
    rows.reserve(result.items.size());
    for (const auto& item : result.items) rows.push_back(to_json(item));
    write_file_atomic(*audit_path, dump_jsonl(rows));
  }
  return result;
}

// --- ledger --------------------------------------------------------------------

void StageLedger::add(StageRow row) {
  if (!(row.validation_accuracy >= 0.0 && row.validation_accuracy <= 1.0)) {
    throw Error(ErrorCode::InvalidConfig, "accuracy outside [0,1] for stage " + row.stage_name);
  }
  for (const auto& existing : rows_) {
    if (existing.stage_name == row.stage_name) {
      throw Error(ErrorCode::InvalidConfig, "duplicate stage name " + row.stage_name);
    }
  }
  rows_.push_back(std::move(row));
}

std::size_t StageLedger::best_index() const {
  if (rows_.empty()) throw Error(ErrorCode::NoCandidates, "ledger is empty");
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows_.size(); ++i) {
    if (rows_[i].validation_accuracy > rows_[best].validation_accuracy) best = i;
  }
  return best;
}

json StageLedger::to_json() const {
  json stages = json::array();
  for (const auto& row : rows_) {
    stages.push_back({{"stage", row.stage_name},
                      {"accuracy", row.validation_accuracy},
                      {"n_examples", row.n_examples},
                      {"prompt", row.prompt_config}});
  }
  json doc{{"stages", std::move(stages)}};
  if (!rows_.empty()) {
    const auto& best = rows_[best_index()];
    doc["best"] = {{"stage", best.stage_name}, {"accuracy", best.validation_accuracy}};
  }
  return doc;
}

StageLedger StageLedger::from_json(const json& doc) {
  StageLedger ledger;
  try {
    for (const auto& row : doc.at("stages")) {
      ledger.add({row.at("stage").get<std::string>(), row.value("prompt", json::object()),
                  row.at("accuracy").get<double>(), row.at("n_examples").get<std::size_t>()});
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, std::string("ledger: ") + e.what());
  }
  return ledger;
}

void StageLedger::print(std::ostream& out) const {
  std::size_t width = 5;
  for (const auto& row : rows_) width = std::max(width, row.stage_name.size());
  out << std::left << std::setw(static_cast<int>(width)) << "Stage" << "  " << std::right << std::setw(12)
      << "Accuracy (%)" << "  " << std::setw(6) << "n" << "\n";
  for (const auto& row : rows_) {
    out << std::left << std::setw(static_cast<int>(width)) << row.stage_name << "  " << std::right << std::setw(12)
        << std::fixed << std::setprecision(1) << row.validation_accuracy * 100.0 << "  " << std::setw(6)
        << row.n_examples << "\n";
  }
  out.unsetf(std::ios::floatfield);
  out << std::setprecision(6);
}

// --- search --------------------------------------------------------------------

OptimizeResult optimize_instruction(std::span<const std::string> candidates, const PromptConfig& base,
                                    const Dataset& valset, Backend& backend, ResponseCache& cache,
                                    const std::optional<fs::path>& run_dir) {
  if (candidates.empty()) throw Error(ErrorCode::NoCandidates, "no candidate instructions");
  OptimizeResult result;
  std::vector<PromptConfig> configs;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    PromptConfig config = base;
    config.system_instruction = candidates[i];
    const std::string name = "candidate-" + std::to_string(i);
    std::optional<fs::path> audit;
    if (run_dir) audit = *run_dir / "eval" / (name + ".jsonl");
    const EvalOutcome eval = evaluate_prompt(config, valset, backend, cache, audit);
    result.ledger.add({name, to_json(config), eval.accuracy, eval.n});
    configs.push_back(std::move(config));
  }
  result.best_index = result.ledger.best_index();
  result.best_config = configs[result.best_index];
  return result;
}

StageLedger run_stages(const Dataset& valset, Backend& backend, ResponseCache& cache, std::span<const StageSpec> stages,
                       std::span<const DataPoint> shot_pool, const UserTemplate& user_template, std::uint64_t seed,
                       ShotStrategy strategy, const std::optional<fs::path>& run_dir) {
  if (stages.empty()) throw Error(ErrorCode::NoCandidates, "no stages");
  StageLedger ledger;
  for (const auto& stage : stages) {
    PromptConfig config;
    config.system_instruction = stage.system_instruction;
    config.user_template = user_template;
    config.seed = seed;
    config.shots = select_shots(shot_pool, stage.k, seed, strategy);
    std::optional<fs::path> audit;
    if (run_dir) audit = *run_dir / "eval" / (safe_file_stem(stage.name) + ".jsonl");
    const EvalOutcome eval = evaluate_prompt(config, valset, backend, cache, audit);
    ledger.add({stage.name, to_json(config), eval.accuracy, eval.n});
  }
  return ledger;
}

}  // namespace halo
