#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "halo/data_model.hpp"
#include "halo/io.hpp"
#include "halo/reconstruct.hpp"
#include "test_support.hpp"

namespace halo {
namespace {

using testing::error_code_of;
using testing::fixture;
using testing::slurp;
using testing::TempDir;

const char* const kReferenceRecord =
    R"({"messages":[{"role":"system","content":"You are a model that decides if the Sentence is Hallucination or Not Hallucination."},)"
    R"({"role":"user","content":"Context: Resembling a weasel (in appearance). Sentence: Resembling or characteristic of a weasel. Is the Sentence hallucinated or not?"},)"
    R"({"role":"assistant","content":"Not Hallucination"}]})";

TEST(ChatRecord, ReferenceRecordExactly) {
  const Dataset ds = load_dataset(fixture("weasel.json"));
  const ReconstructResult r = to_chat_records({{ds.at(0), Label::NotHallucination}});
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_TRUE(r.skipped.empty());
  const ChatRecord& rec = r.records[0];
  EXPECT_EQ(rec.system().content, kDefaultSystemInstruction);
  EXPECT_EQ(rec.assistant().content, "Not Hallucination");
  EXPECT_EQ(training_line(rec), kReferenceRecord);
}

TEST(ChatRecord, Validation) {
  const ChatMessage sys{Role::System, std::string(kDefaultSystemInstruction)};
  const ChatMessage user{Role::User, "q"};
  EXPECT_EQ(error_code_of([&] { ChatRecord({sys, user}); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(error_code_of([&] { ChatRecord({sys, user, {Role::Assistant, "maybe"}}); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(error_code_of([&] { ChatRecord({{Role::System, "other"}, user, {Role::Assistant, "Hallucination"}}); }),
            ErrorCode::InvalidConfig);
  EXPECT_EQ(error_code_of([&] { ChatRecord({sys, {Role::Assistant, "Hallucination"}, user}); }),
            ErrorCode::InvalidConfig);
  EXPECT_EQ(ChatRecord({sys, user, {Role::Assistant, "Hallucination"}}).label(), Label::Hallucination);
}

TEST(ToChatRecords, EmptyAndSkips) {
  EXPECT_TRUE(to_chat_records({}).records.empty());
  const Dataset ds = load_dataset(fixture("three.jsonl"));
  DataPoint broken = ds.at(1);
  broken.id = 7;
  broken.src = "";
  const ReconstructResult r = to_chat_records({{ds.at(0), Label::NotHallucination}, {broken, Label::Hallucination}});
  EXPECT_EQ(r.records.size(), 1u);
  ASSERT_EQ(r.skipped.size(), 1u);
  EXPECT_EQ(r.skipped[0].id, 7u);
  EXPECT_NE(r.skipped[0].reason.find("MissingContext"), std::string::npos);
}

TEST(ToChatRecords, LabelsAreRecoverable) {
  const Dataset ds = load_dataset(fixture("e2e/train.jsonl"));
  std::vector<std::pair<DataPoint, Label>> input;
  for (const auto& dp : ds.points) {
    input.emplace_back(dp, dp.id % 3 == 0 ? Label::Hallucination : Label::NotHallucination);
  }
  const ReconstructResult r = to_chat_records(input);
  ASSERT_EQ(r.records.size(), input.size() - r.skipped.size());
  ASSERT_TRUE(r.skipped.empty());
  for (std::size_t i = 0; i < r.records.size(); ++i) {
    EXPECT_EQ(parse_label_text(r.records[i].assistant().content), input[i].second);
    EXPECT_EQ(r.records[i].user().content, render_user_turn(input[i].first, UserTemplate()));
  }
}

TEST(TrainingJsonl, RoundTripAndDeterminism) {
  TempDir dir;
  const Dataset ds = load_dataset(fixture("three.jsonl"));
  const ReconstructResult r = to_chat_records(
      {{ds.at(0), Label::NotHallucination}, {ds.at(1), Label::Hallucination}, {ds.at(2), Label::NotHallucination}});
  EXPECT_EQ(write_training_jsonl(r.records, dir / "a.jsonl"), 3u);
  EXPECT_EQ(write_training_jsonl(r.records, dir / "b.jsonl"), 3u);
  EXPECT_EQ(slurp(dir / "a.jsonl"), slurp(dir / "b.jsonl"));
  EXPECT_EQ(read_training_jsonl(dir / "a.jsonl"), r.records);
  const std::string text = slurp(dir / "a.jsonl");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);

  EXPECT_EQ(write_training_jsonl({}, dir / "empty.jsonl"), 0u);
  EXPECT_EQ(slurp(dir / "empty.jsonl"), "");

  const Dataset weasel = load_dataset(fixture("weasel.json"));
  write_training_jsonl(to_chat_records({{weasel.at(0), Label::NotHallucination}}).records, dir / "weasel.jsonl");
  EXPECT_NE(slurp(dir / "weasel.jsonl").find(
                "\"content\":\"You are a model that decides if the Sentence is Hallucination or Not Hallucination.\""),
            std::string::npos);
}

TEST(Manifest, DocumentedDefaults) {
  TempDir dir;
  TrainingManifest m;
  const fs::path out = emit_manifest(json::object(), dir / "train_chat.jsonl", &m);
  EXPECT_EQ(out, dir / "train_chat.manifest.json");
  const json doc = json::parse(slurp(out));
  EXPECT_EQ(doc.at("batch_size"), 8);
  EXPECT_EQ(doc.at("learning_rate"), 2e-5);
  EXPECT_EQ(doc.at("training_steps"), 500);
  EXPECT_EQ(doc.at("optimizer"), "AdamW");
  EXPECT_EQ(doc.at("adaptation"), "LoRA");
  EXPECT_EQ(doc.at("lora_rank"), 64);
  EXPECT_EQ(doc.at("base_model"), "Mistral-7B-Instruct-v0.3");
  EXPECT_EQ(doc.at("dataset_path"), "train_chat.jsonl");
  EXPECT_TRUE(doc.at("seed").is_number_integer());
  std::set<std::string> keys;
  for (const auto& [k, v] : doc.items()) keys.insert(k);
  EXPECT_EQ(keys, (std::set<std::string>{"dataset_path", "batch_size", "learning_rate", "training_steps", "optimizer",
                                         "adaptation", "lora_rank", "base_model", "seed"}));
}

TEST(Manifest, Overrides) {
  const TrainingManifest m = merge_manifest(json{{"training_steps", 50}}, "x.jsonl");
  EXPECT_EQ(m.training_steps, 50);
  EXPECT_EQ(m.batch_size, 8);
  EXPECT_EQ(m.learning_rate, 2e-5);
  EXPECT_EQ(merge_manifest(json{{"base_model", "tiny-model"}, {"seed", 7}}, "x").base_model, "tiny-model");
  for (const json& bad : {json{{"batch_size", 0}}, json{{"learning_rate", -1}}, json{{"lora_rank", 2.5}},
                          json{{"training_steps", "many"}}, json{{"warmup", 10}}, json{{"optimizer", ""}}}) {
    try {
      merge_manifest(bad, "x");
      ADD_FAILURE() << bad.dump();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::InvalidOverride);
      EXPECT_EQ(e.detail(), bad.items().begin().key());
    }
  }
}

}  // namespace
}  // namespace halo
