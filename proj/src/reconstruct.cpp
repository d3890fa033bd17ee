#include "halo/reconstruct.hpp"

#include <cmath>
#include <iostream>

#include "halo/error.hpp"
#include "halo/io.hpp"

namespace halo {

ChatRecord::ChatRecord(std::vector<ChatMessage> messages) : messages_(std::move(messages)) {
  if (messages_.size() != 3 || messages_[0].role != Role::System || messages_[1].role != Role::User ||
      messages_[2].role != Role::Assistant) {
    throw Error(ErrorCode::InvalidConfig, "chat record must be System, User, Assistant");
  }
  if (messages_[0].content != kDefaultSystemInstruction) {
    throw Error(ErrorCode::InvalidConfig, "chat record system message is not the detector instruction");
  }
  if (messages_[1].content.empty()) throw Error(ErrorCode::InvalidConfig, "chat record user message is empty");
  if (!label_from_canonical(messages_[2].content)) {
    throw Error(ErrorCode::InvalidConfig, "assistant content is not a canonical label: " + messages_[2].content);
  }
}

ChatRecord ChatRecord::make(std::string user_content, Label label) {
  return ChatRecord({{Role::System, std::string(kDefaultSystemInstruction)},
                     {Role::User, std::move(user_content)},
                     {Role::Assistant, std::string(canonical_string(label))}});
}

Label ChatRecord::label() const { return *label_from_canonical(assistant().content); }

json to_json(const ChatRecord& record) {
  json messages = json::array();
  for (const auto& message : record.messages()) messages.push_back(to_json(message));
  return json{{"messages", std::move(messages)}};
}

ChatRecord chat_record_from_json(const json& row) {
  if (!row.is_object() || !row.contains("messages") || !row["messages"].is_array()) {
    throw Error(ErrorCode::MalformedRecord, "training row needs a messages array");
  }
  std::vector<ChatMessage> messages;
  for (const auto& item : row["messages"]) messages.push_back(chat_message_from_json(item));
  try {
    return ChatRecord(std::move(messages));
  } catch (const Error& e) {
    throw Error(ErrorCode::MalformedRecord, e.detail());
  }
}

ReconstructResult to_chat_records(const std::vector<std::pair<DataPoint, Label>>& labeled) {
  ReconstructResult result;
  const UserTemplate tmpl;
  for (const auto& [dp, label] : labeled) {
    try {
      result.records.push_back(ChatRecord::make(render_user_turn(dp, tmpl), label));
    } catch (const Error& e) {
      std::cerr << "reconstruct: skipping id " << dp.id << ": " << e.what() << "\n";
      result.skipped.push_back({dp.id, e.what()});
    }
  }
  return result;
}

std::string training_line(const ChatRecord& record) {
  nlohmann::ordered_json messages = nlohmann::ordered_json::array();
  for (const auto& message : record.messages()) {
    messages.push_back({{"role", to_string(message.role)}, {"content", message.content}});
  }
  return nlohmann::ordered_json{{"messages", std::move(messages)}}.dump(-1, ' ', false, json::error_handler_t::replace);
}

std::size_t write_training_jsonl(const std::vector<ChatRecord>& records, const std::filesystem::path& path) {
  std::string text;
  for (const auto& record : records) text += training_line(record) + "\n";
  write_file_atomic(path, text);
  return records.size();
}

std::vector<ChatRecord> read_training_jsonl(const std::filesystem::path& path) {
  std::vector<ChatRecord> records;
  for (const auto& row : read_jsonl(path)) {
    try {
      records.push_back(chat_record_from_json(row.value));
    } catch (const Error& e) {
      throw Error(ErrorCode::MalformedRecord, path.string() + " line " + std::to_string(row.line) + ": " + e.detail());
    }
  }
  return records;
}

json to_json(const TrainingManifest& manifest) {
  return json{{"dataset_path", manifest.dataset_path},
              {"batch_size", manifest.batch_size},
              {"learning_rate", manifest.learning_rate},
              {"training_steps", manifest.training_steps},
              {"optimizer", manifest.optimizer},
              {"adaptation", manifest.adaptation},
              {"lora_rank", manifest.lora_rank},
              {"base_model", manifest.base_model},
              {"seed", manifest.seed}};
}

TrainingManifest merge_manifest(const json& overrides, std::string dataset_path) {
  TrainingManifest manifest;
  manifest.dataset_path = std::move(dataset_path);
  if (overrides.is_null()) return manifest;
  if (!overrides.is_object()) throw Error(ErrorCode::InvalidOverride, "overrides must be an object");

  auto positive_int = [](const std::string& key, const json& value) {
    if (!value.is_number_integer() || value.get<std::int64_t>() <= 0) throw Error(ErrorCode::InvalidOverride, key);
    return value.get<std::int64_t>();
  };
  auto text = [](const std::string& key, const json& value) {
    if (!value.is_string() || value.get<std::string>().empty()) throw Error(ErrorCode::InvalidOverride, key);
    return value.get<std::string>();
  };

  for (const auto& [key, value] : overrides.items()) {
    if (key == "batch_size") {
      manifest.batch_size = positive_int(key, value);
    } else if (key == "training_steps") {
      manifest.training_steps = positive_int(key, value);
    } else if (key == "lora_rank") {
      manifest.lora_rank = positive_int(key, value);
    } else if (key == "learning_rate") {
      if (!value.is_number() || !(value.get<double>() > 0.0) || !std::isfinite(value.get<double>())) {
        throw Error(ErrorCode::InvalidOverride, key);
      }
      manifest.learning_rate = value.get<double>();
    } else if (key == "seed") {
      if (!value.is_number_integer() || value.get<std::int64_t>() < 0) throw Error(ErrorCode::InvalidOverride, key);
      manifest.seed = value.get<std::int64_t>();
    } else if (key == "optimizer") {
      manifest.optimizer = text(key, value);
    } else if (key == "adaptation") {
      manifest.adaptation = text(key, value);
    } else if (key == "base_model") {
      manifest.base_model = text(key, value);
    } else if (key == "dataset_path") {
      manifest.dataset_path = text(key, value);
    } else {
      throw Error(ErrorCode::InvalidOverride, key);
    }
  }
  return manifest;
}

std::filesystem::path emit_manifest(const json& overrides, const std::filesystem::path& dataset_path,
                                    TrainingManifest* written) {
  TrainingManifest manifest = merge_manifest(overrides, dataset_path.filename().string());
  std::filesystem::path out = dataset_path;
  out.replace_extension(".manifest.json");
  write_file_atomic(out, to_json(manifest).dump(2) + "\n");
  if (written != nullptr) *written = std::move(manifest);
  return out;
}

}  // namespace halo
