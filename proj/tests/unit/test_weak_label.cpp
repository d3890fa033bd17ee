#include <gtest/gtest.h>

#include <random>
#include <sstream>
#include <thread>

#include "halo/data_model.hpp"
#include "halo/io.hpp"
#include "halo/llm_backend.hpp"
#include "halo/weak_label.hpp"
#include "test_support.hpp"

namespace halo {
namespace {

using testing::error_code_of;
using testing::fixture;
using testing::slurp;
using testing::spit;
using testing::TempDir;

// Test double whose answers come from a callback.
class ScriptedBackend final : public Backend {
 public:
  using Script = std::function<CompletionResponse(const Transcript&)>;
  ScriptedBackend(Script script, std::size_t in_flight = 4)
      : Backend([&] {
          BackendConfig c;
          c.model_name = "scripted";
          c.max_in_flight = in_flight;
          return c;
        }()),
        script_(std::move(script)) {}

  std::vector<Transcript> seen() const {
    std::lock_guard lock(mutex_);
    return seen_;
  }

 protected:
  CompletionResponse do_complete(const Transcript& t) override {
    {
      std::lock_guard lock(mutex_);
      seen_.push_back(t);
    }
    return script_(t);
  }

 private:
  Script script_;
  mutable std::mutex mutex_;
  std::vector<Transcript> seen_;
};

CompletionResponse text_response(std::string text) { return CompletionResponse{std::move(text), {}, {}, "stop", 1}; }

// Reads "Context: c Sentence: s Is..." back out of the default template.
std::pair<std::string, std::string> split_query(const std::string& user) {
  const auto c = user.find("Context: ") + 9;
  const auto s = user.find(" Sentence: ");
  const auto q = user.rfind(" Is the Sentence");
  return {user.substr(c, s - c), user.substr(s + 11, q - s - 11)};
}

MockBackend mock(std::size_t in_flight = 4) {
  BackendConfig c;
  c.max_in_flight = in_flight;
  return MockBackend(c);
}

std::vector<std::string> lines_of(const fs::path& path) {
  std::vector<std::string> out;
  std::istringstream in(slurp(path));
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

TEST(LabelPoint, ReferenceExampleWithMock) {
  const Dataset ds = load_dataset(fixture("weasel.json"));
  MockBackend backend = mock();
  ResponseCache cache;
  const LabelOutcome outcome = label_point(PromptConfig{}, ds.at(0), backend, cache);
  ASSERT_TRUE(outcome.labeled);
  EXPECT_EQ(outcome.labeled->id, 0u);
  EXPECT_EQ(outcome.labeled->predicted, Label::Hallucination);
  ASSERT_TRUE(outcome.labeled->distribution);
  EXPECT_NEAR(outcome.labeled->distribution->p_hallucination, 0.625, 1e-12);
  EXPECT_EQ(outcome.labeled->attempt_count, 1);
  EXPECT_EQ(outcome.labeled->raw_response, "Hallucination");
}

TEST(LabelPoint, ClarificationTurnRecoversLabel) {
  const Dataset ds = load_dataset(fixture("weasel.json"));
  ScriptedBackend backend([](const Transcript& t) {
    return text_response(t.back().content == kClarificationMessage ? "Not Hallucination" : "Hmm, unclear.");
  });
  ResponseCache cache;
  const LabelOutcome outcome = label_point(PromptConfig{}, ds.at(0), backend, cache);
  ASSERT_TRUE(outcome.labeled);
  EXPECT_EQ(outcome.labeled->predicted, Label::NotHallucination);
  EXPECT_FALSE(outcome.labeled->distribution);
  EXPECT_EQ(outcome.labeled->attempt_count, 2);
  const auto seen = backend.seen();
  ASSERT_EQ(seen.size(), 2u);
  ASSERT_EQ(seen[1].size(), 4u);
  EXPECT_EQ(seen[1][2], (ChatMessage{Role::Assistant, "Hmm, unclear."}));
  EXPECT_EQ(seen[1][3], (ChatMessage{Role::User, "Answer with exactly 'Hallucination' or 'Not Hallucination'."}));
}

TEST(LabelPoint, StillUnparseableIsFailure) {
  const Dataset ds = load_dataset(fixture("weasel.json"));
  ScriptedBackend backend([](const Transcript&) { return text_response("No comment."); });
  ResponseCache cache;
  const LabelOutcome outcome = label_point(PromptConfig{}, ds.at(0), backend, cache);
  ASSERT_TRUE(outcome.failure);
  EXPECT_EQ(outcome.failure->attempt_count, 2);
  EXPECT_EQ(outcome.failure->raw_response, "No comment.");
  EXPECT_EQ(backend.calls(), 2u);
  const json row = to_json(outcome);
  EXPECT_EQ(row.at("failed"), true);
  EXPECT_EQ(label_outcome_from_json(row).failure->attempt_count, 2);
}

TEST(LabelPoint, BackendErrorIsRecordedPerItem) {
  const Dataset ds = load_dataset(fixture("weasel.json"));
  ScriptedBackend backend([](const Transcript&) -> CompletionResponse {
    throw Error(ErrorCode::ExhaustedRetries, "4 attempts");
  });
  ResponseCache cache;
  const LabelOutcome outcome = label_point(PromptConfig{}, ds.at(0), backend, cache);
  ASSERT_TRUE(outcome.failure);
  EXPECT_EQ(outcome.failure->error.rfind("BackendFailure(0): ExhaustedRetries", 0), 0u) << outcome.failure->error;
}

TEST(LabelPoint, MissingContextCostsNoCall) {
  DataPoint dp;
  dp.hyp = "x";
  dp.src = "";
  dp.ref = Reference::Src;
  MockBackend backend = mock();
  ResponseCache cache;
  const LabelOutcome outcome = label_point(PromptConfig{}, dp, backend, cache);
  ASSERT_TRUE(outcome.failure);
  EXPECT_EQ(outcome.failure->attempt_count, 0);
  EXPECT_EQ(backend.calls(), 0u);
}

TEST(ResponseCache, ServesRepeatsWithoutCalls) {
  TempDir dir;
  MockBackend backend = mock();
  const Transcript t{{Role::System, "s"}, {Role::User, "Context: a b Sentence: a c"}};
  {
    ResponseCache cache(dir / "cache");
    const auto first = cache.complete(backend, t);
    const auto second = cache.complete(backend, t);
    EXPECT_EQ(to_json(first), to_json(second));
    EXPECT_EQ(backend.calls(), 1u);
    EXPECT_EQ(cache.hits(), 1u);
    EXPECT_EQ(cache.misses(), 1u);
  }
  ResponseCache reopened(dir / "cache");
  reopened.complete(backend, t);
  EXPECT_EQ(backend.calls(), 1u);
  EXPECT_EQ(reopened.hits(), 1u);
}

TEST(ResponseCache, KeyCoversDecodingParameters) {
  BackendConfig a;
  BackendConfig b = a;
  b.temperature = 0.7;
  BackendConfig c = a;
  c.request_logprobs = true;
  const Transcript t{{Role::System, "s"}, {Role::User, "u"}};
  EXPECT_NE(ResponseCache::key(a, t), ResponseCache::key(b, t));
  EXPECT_NE(ResponseCache::key(a, t), ResponseCache::key(c, t));
  EXPECT_NE(ResponseCache::key(a, t), ResponseCache::key(a, {{Role::System, "s"}, {Role::User, "v"}}));
  EXPECT_EQ(ResponseCache::key(a, t), ResponseCache::key(a, t));
  EXPECT_EQ(ResponseCache::key(a, t).size(), 64u);
}

TEST(ResponseCache, ConcurrentIdenticalRequestsShareOneCall) {
  ScriptedBackend backend([](const Transcript&) {
    std::this_thread::sleep_for(std::chrono::milliseconds(30));
    return text_response("Hallucination");
  }, 8);
  ResponseCache cache;
  const Transcript t{{Role::System, "s"}, {Role::User, "u"}};
  std::vector<std::thread> threads;
  for (int i = 0; i < 8; ++i) threads.emplace_back([&] { cache.complete(backend, t); });
  for (auto& th : threads) th.join();
  EXPECT_EQ(backend.calls(), 1u);
}

TEST(GenerateWeakLabels, ThreeItemsInOrder) {
  TempDir dir;
  const Dataset ds = load_dataset(fixture("three.jsonl"));
  MockBackend backend = mock();
  const LabelRunResult result = generate_weak_labels(ds, PromptConfig{}, backend, dir.path());
  EXPECT_EQ(result.labeled.size(), 3u);
  EXPECT_EQ(result.processed, 3u);
  const auto lines = lines_of(dir / "labels.jsonl");
  ASSERT_EQ(lines.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(json::parse(lines[i]).at("id"), i);
  EXPECT_EQ(json::parse(lines[0]).at("predicted"), "Not Hallucination");
  EXPECT_EQ(json::parse(lines[1]).at("predicted"), "Hallucination");

  const RunManifest m = run_manifest_from_json(json::parse(slurp(dir / "manifest.json")));
  EXPECT_TRUE(m.finished());
  EXPECT_EQ(m.counts.total, 3u);
  EXPECT_EQ(m.counts.labeled + m.counts.failed, m.counts.total);
  EXPECT_EQ(m.dataset_digest, ds.digest);
  EXPECT_EQ(m.run_id.size(), 16u);
  EXPECT_FALSE(m.backend.contains("api_key"));
}

TEST(GenerateWeakLabels, ResumeAfterTwoOfThreeMakesOneCall) {
  TempDir dir;
  const Dataset ds = load_dataset(fixture("three.jsonl"));
  {
    MockBackend backend = mock();
    LabelOptions options;
    options.limit = 2;
    generate_weak_labels(ds, PromptConfig{}, backend, dir.path(), options);
    EXPECT_EQ(backend.calls(), 2u);
    EXPECT_FALSE(run_manifest_from_json(json::parse(slurp(dir / "manifest.json"))).finished());
  }
  MockBackend backend = mock();
  LabelOptions options;
  options.resume = true;
  const LabelRunResult result = generate_weak_labels(ds, PromptConfig{}, backend, dir.path(), options);
  EXPECT_EQ(backend.calls(), 1u);
  EXPECT_EQ(result.processed, 1u);
  EXPECT_EQ(result.labeled.size(), 3u);
  EXPECT_EQ(lines_of(dir / "labels.jsonl").size(), 3u);

  MockBackend idle = mock();
  generate_weak_labels(ds, PromptConfig{}, idle, dir.path(), options);
  EXPECT_EQ(idle.calls(), 0u);
}

TEST(GenerateWeakLabels, ResumeTruncatesPartialTrailingLine) {
  TempDir reference_dir;
  TempDir dir;
  const Dataset ds = load_dataset(fixture("e2e/train.jsonl"));
  MockBackend full = mock();
  generate_weak_labels(ds, PromptConfig{}, full, reference_dir.path());
  const std::string reference = slurp(reference_dir / "labels.jsonl");

  MockBackend first = mock();
  LabelOptions options;
  options.limit = 57;
  generate_weak_labels(ds, PromptConfig{}, first, dir.path(), options);
  // Simulate a write cut off mid-line.
  std::string partial = slurp(dir / "labels.jsonl");
  partial += R"({"id":57,"predicted":"Hallu)";
  spit(dir / "labels.jsonl", partial);

  MockBackend second = mock();
  options.limit.reset();
  options.resume = true;
  generate_weak_labels(ds, PromptConfig{}, second, dir.path(), options);
  EXPECT_EQ(second.calls(), ds.size() - 57);
  EXPECT_EQ(slurp(dir / "labels.jsonl"), reference);
}

TEST(GenerateWeakLabels, DigestGuard) {
  TempDir dir;
  spit(dir / "data.jsonl", slurp(fixture("three.jsonl")));
  const Dataset before = load_dataset(dir / "data.jsonl");
  MockBackend backend = mock();
  LabelOptions options;
  options.limit = 1;
  generate_weak_labels(before, PromptConfig{}, backend, dir / "run", options);
  spit(dir / "data.jsonl", slurp(fixture("three.jsonl")) + R"({"hyp":"new","tgt":"row"})" + "\n");
  const Dataset after = load_dataset(dir / "data.jsonl");
  options.resume = true;
  EXPECT_EQ(error_code_of([&] { generate_weak_labels(after, PromptConfig{}, backend, dir / "run", options); }),
            ErrorCode::DigestMismatch);
}

TEST(GenerateWeakLabels, PromptChangeRefusesResume) {
  TempDir dir;
  const Dataset ds = load_dataset(fixture("three.jsonl"));
  MockBackend backend = mock();
  LabelOptions options;
  options.limit = 1;
  generate_weak_labels(ds, PromptConfig{}, backend, dir.path(), options);
  PromptConfig other;
  other.system_instruction = "Decide.";
  options.resume = true;
  EXPECT_EQ(error_code_of([&] { generate_weak_labels(ds, other, backend, dir.path(), options); }),
            ErrorCode::InvalidConfig);
}

TEST(GenerateWeakLabels, IdOrderUnderOutOfOrderCompletion) {
  TempDir dir;
  const Dataset ds = load_dataset(fixture("e2e/train.jsonl"));
  ScriptedBackend backend([](const Transcript& t) {
    const std::size_t h = std::hash<std::string>{}(t.back().content);
    std::this_thread::sleep_for(std::chrono::microseconds(h % 3000));
    return MockBackend::respond(t.back().content);
  }, 8);
  generate_weak_labels(ds, PromptConfig{}, backend, dir.path());
  const auto lines = lines_of(dir / "labels.jsonl");
  ASSERT_EQ(lines.size(), ds.size());
  for (std::size_t i = 0; i < lines.size(); ++i) EXPECT_EQ(json::parse(lines[i]).at("id"), i);

  TempDir serial;
  MockBackend one = mock(1);
  generate_weak_labels(ds, PromptConfig{}, one, serial.path());
  EXPECT_EQ(slurp(dir / "labels.jsonl"), slurp(serial / "labels.jsonl"));
}

TEST(GenerateWeakLabels, FailureThreshold) {
  TempDir dir;
  const Dataset ds = load_dataset(fixture("e2e/train.jsonl"));
  // Every third item is unanswerable.
  ScriptedBackend backend([](const Transcript& t) {
    const std::string& last = t.back().content;
    if (last == kClarificationMessage || std::hash<std::string>{}(last) % 3 == 0) return text_response("?");
    return MockBackend::respond(last);
  });
  LabelOptions options;
  options.failure_threshold = 0.2;
  EXPECT_EQ(error_code_of([&] { generate_weak_labels(ds, PromptConfig{}, backend, dir.path(), options); }),
            ErrorCode::FailureRateExceeded);
  const RunManifest m = run_manifest_from_json(json::parse(slurp(dir / "manifest.json")));
  EXPECT_FALSE(m.finished());
  EXPECT_GT(m.counts.failed, 40u);
  EXPECT_LE(m.counts.labeled + m.counts.failed, m.counts.total);

  TempDir tolerant;
  options.failure_threshold = 1.0;
  const LabelRunResult result = generate_weak_labels(ds, PromptConfig{}, backend, tolerant.path(), options);
  EXPECT_EQ(result.labeled.size() + result.failures.size(), ds.size());
  EXPECT_GT(result.failures.size(), 0u);
  EXPECT_EQ(lines_of(tolerant / "labels.jsonl").size(), ds.size());
}

TEST(EvaluatePrompt, FourItemFixture) {
  TempDir dir;
  const Dataset val = load_dataset(fixture("val4.jsonl"));
  MockBackend backend = mock();
  ResponseCache cache;
  const EvalOutcome outcome = evaluate_prompt(PromptConfig{}, val, backend, cache, dir / "audit.jsonl");
  EXPECT_EQ(outcome.accuracy, 0.75);
  EXPECT_EQ(outcome.n, 4u);
  ASSERT_EQ(outcome.items.size(), 4u);
  EXPECT_FALSE(outcome.items[3].correct);
  EXPECT_EQ(lines_of(dir / "audit.jsonl").size(), 4u);

  MockBackend again = mock();
  ResponseCache fresh;
  const EvalOutcome repeat = evaluate_prompt(PromptConfig{}, val, again, fresh);
  EXPECT_EQ(repeat.accuracy, outcome.accuracy);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(to_json(repeat.items[i]), to_json(outcome.items[i]));
}

TEST(EvaluatePrompt, PerfectAndFailedItems) {
  const Dataset val = load_dataset(fixture("val4.jsonl"));
  ScriptedBackend oracle([&](const Transcript& t) {
    const auto [context, sentence] = split_query(t.back().content);
    for (const auto& dp : val.points) {
      if (dp.hyp == sentence) return text_response(std::string(canonical_string(*dp.gold_label)));
    }
    return text_response("?");
  });
  ResponseCache cache;
  EXPECT_EQ(evaluate_prompt(PromptConfig{}, val, oracle, cache).accuracy, 1.0);

  ScriptedBackend silent([](const Transcript&) { return text_response("?"); });
  ResponseCache cache2;
  const EvalOutcome none = evaluate_prompt(PromptConfig{}, val, silent, cache2);
  EXPECT_EQ(none.accuracy, 0.0);
  EXPECT_FALSE(none.items[0].predicted);
  EXPECT_FALSE(none.items[0].error.empty());
}

TEST(EvaluatePrompt, RequiresGold) {
  const Dataset unlabeled = load_dataset(fixture("three.jsonl"));
  MockBackend backend = mock();
  ResponseCache cache;
  EXPECT_EQ(error_code_of([&] { evaluate_prompt(PromptConfig{}, unlabeled, backend, cache); }),
            ErrorCode::MissingGold);
}

// Instruction "strict" raises the overlap needed for a faithful verdict to
// 0.9. On the four-item fixture that loses items 2 (overlap 6/7) and keeps 3
// wrong: 2 of 4 correct.
ScriptedBackend instruction_sensitive() {
  return ScriptedBackend([](const Transcript& t) {
    if (t.front().content != "strict") return MockBackend::respond(t.back().content);
    const auto [context, sentence] = split_query(t.back().content);
    return text_response(token_jaccard(sentence, context) >= 0.9 ? "Not Hallucination" : "Hallucination");
  });
}

TEST(OptimizeInstruction, SingleCandidate) {
  const Dataset val = load_dataset(fixture("val4.jsonl"));
  MockBackend backend = mock();
  ResponseCache cache;
  const std::vector<std::string> candidates{"Only one."};
  const OptimizeResult r = optimize_instruction(candidates, PromptConfig{}, val, backend, cache);
  EXPECT_EQ(r.best_config.system_instruction, "Only one.");
  EXPECT_EQ(r.ledger.size(), 1u);
  EXPECT_EQ(r.best_index, 0u);
}

TEST(OptimizeInstruction, HigherScoreWinsAndIsRecorded) {
  const Dataset val = load_dataset(fixture("val4.jsonl"));
  ScriptedBackend backend = instruction_sensitive();
  ResponseCache cache;
  for (const auto& order : {std::vector<std::string>{"plain", "strict"}, std::vector<std::string>{"strict", "plain"}}) {
    const OptimizeResult r = optimize_instruction(order, PromptConfig{}, val, backend, cache);
    EXPECT_EQ(r.best_config.system_instruction, "plain");
    const auto& rows = r.ledger.rows();
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[order[0] == "plain" ? 0 : 1].validation_accuracy, 0.75);
    EXPECT_EQ(rows[order[0] == "plain" ? 1 : 0].validation_accuracy, 0.50);
    EXPECT_EQ(rows[r.best_index].validation_accuracy, 0.75);
    EXPECT_EQ(rows[0].stage_name, "candidate-0");
  }
}

TEST(OptimizeInstruction, TiesGoToEarliestAndRepeatsAreCached) {
  const Dataset val = load_dataset(fixture("val4.jsonl"));
  MockBackend backend = mock();
  ResponseCache cache;
  const std::vector<std::string> candidates{"first", "second", "first"};
  const OptimizeResult r = optimize_instruction(candidates, PromptConfig{}, val, backend, cache);
  EXPECT_EQ(r.best_index, 0u);
  EXPECT_EQ(r.best_config.system_instruction, "first");
  // "second" has different transcripts; the repeated "first" costs nothing.
  EXPECT_EQ(backend.calls(), 8u);
  EXPECT_EQ(error_code_of([&] { optimize_instruction({}, PromptConfig{}, val, backend, cache); }),
            ErrorCode::NoCandidates);
}

TEST(RunStages, ThreeStagesOnMock) {
  TempDir dir;
  const Dataset val = load_dataset(fixture("e2e/val.jsonl"));
  const Dataset pool = load_dataset(fixture("e2e/shots.jsonl"));
  MockBackend backend = mock();
  ResponseCache cache;
  const std::vector<StageSpec> stages{
      {"default", std::string(kDefaultSystemInstruction), 0},
      {"system instructions", "Decide whether the Sentence is supported by the Context.", 0},
      {"8-shot + system", "Decide whether the Sentence is supported by the Context.", 8}};
  const StageLedger ledger =
      run_stages(val, backend, cache, stages, pool.points, UserTemplate(), 42, ShotStrategy::Balanced, dir.path());
  ASSERT_EQ(ledger.size(), 3u);
  for (const auto& row : ledger.rows()) {
    EXPECT_EQ(row.validation_accuracy, 33.0 / 40.0);
    EXPECT_EQ(row.n_examples, 40u);
  }
  EXPECT_EQ(ledger.rows()[2].prompt_config.at("shots").size(), 8u);
  EXPECT_TRUE(fs::exists(dir / "eval/default.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "eval/8-shot___system.jsonl"));
  EXPECT_EQ(error_code_of([&] {
              run_stages(val, backend, cache, std::span<const StageSpec>{}, pool.points, UserTemplate(), 42);
            }),
            ErrorCode::NoCandidates);
}

TEST(StageLedger, InvariantsAndJson) {
  StageLedger ledger;
  ledger.add({"a", json::object(), 0.5, 10});
  ledger.add({"b", json::object(), 0.9, 10});
  ledger.add({"c", json::object(), 0.9, 10});
  EXPECT_EQ(error_code_of([&] { ledger.add({"a", json::object(), 0.1, 1}); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(error_code_of([&] { ledger.add({"d", json::object(), 1.5, 1}); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(ledger.best_index(), 1u);
  const json doc = ledger.to_json();
  EXPECT_EQ(doc.at("best").at("stage"), "b");
  const StageLedger back = StageLedger::from_json(doc);
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back.rows()[2].validation_accuracy, 0.9);
  EXPECT_EQ(error_code_of([] { StageLedger{}.best_index(); }), ErrorCode::NoCandidates);

  std::ostringstream out;
  ledger.print(out);
  EXPECT_NE(out.str().find("Accuracy (%)"), std::string::npos);
  EXPECT_NE(out.str().find("90.0"), std::string::npos) << out.str();
}

}  // namespace
}  // namespace halo
