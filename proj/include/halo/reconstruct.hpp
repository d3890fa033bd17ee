#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "halo/data_model.hpp"
#include "halo/prompting.hpp"

namespace halo {

// One instruction-tuning conversation: System, User, Assistant.
class ChatRecord {
 public:
  // Throws InvalidConfig unless the roles are System/User/Assistant in that
  // order, the System text is the detector instruction and the Assistant
  // text is a canonical label.
  explicit ChatRecord(std::vector<ChatMessage> messages);

  static ChatRecord make(std::string user_content, Label label);

  const std::vector<ChatMessage>& messages() const noexcept { return messages_; }
  const ChatMessage& system() const noexcept { return messages_[0]; }
  const ChatMessage& user() const noexcept { return messages_[1]; }
  const ChatMessage& assistant() const noexcept { return messages_[2]; }
  Label label() const;

  friend bool operator==(const ChatRecord&, const ChatRecord&) = default;

 private:
  std::vector<ChatMessage> messages_;
};

json to_json(const ChatRecord& record);
ChatRecord chat_record_from_json(const json& row);

struct SkippedItem {
  std::size_t id = 0;
  std::string reason;
};

struct ReconstructResult {
  std::vector<ChatRecord> records;
  std::vector<SkippedItem> skipped;
};

// Order-preserving; items whose user turn cannot be rendered are skipped and
// reported rather than aborting the batch.
ReconstructResult to_chat_records(const std::vector<std::pair<DataPoint, Label>>& labeled);

// One line of the training file: {"messages":[{"role","content"} x3]} with
// keys in that order, no trailing newline.
std::string training_line(const ChatRecord& record);

std::size_t write_training_jsonl(const std::vector<ChatRecord>& records, const std::filesystem::path& path);
std::vector<ChatRecord> read_training_jsonl(const std::filesystem::path& path);

struct TrainingManifest {
  std::string dataset_path;
  std::int64_t batch_size = 8;
  double learning_rate = 2e-5;
  std::int64_t training_steps = 500;
  std::string optimizer = "AdamW";
  std::string adaptation = "LoRA";
  std::int64_t lora_rank = 64;
  std::string base_model = "Mistral-7B-Instruct-v0.3";
  std::int64_t seed = 42;
};

json to_json(const TrainingManifest& manifest);

// Applies overrides on top of the defaults. Throws InvalidOverride naming
// the field for unknown keys, wrong types or non-positive numbers.
TrainingManifest merge_manifest(const json& overrides, std::string dataset_path);

// Merges and writes `<dataset stem>.manifest.json` beside the training file;
// dataset_path is recorded relative to it (the bare file name).
// Returns the written path.
std::filesystem::path emit_manifest(const json& overrides, const std::filesystem::path& dataset_path,
                                    TrainingManifest* written = nullptr);

}  // namespace halo
