#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "halo/data_model.hpp"

namespace halo {

enum class Role { System, User, Assistant };

std::string_view to_string(Role role) noexcept;
std::optional<Role> role_from_string(std::string_view text) noexcept;

struct ChatMessage {
  Role role = Role::User;
  std::string content;

  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

using Transcript = std::vector<ChatMessage>;

json to_json(const ChatMessage& message);
ChatMessage chat_message_from_json(const json& row);
json to_json(const Transcript& transcript);

inline constexpr std::string_view kDefaultSystemInstruction =
    "You are a model that decides if the Sentence is Hallucination or Not Hallucination.";
inline constexpr std::string_view kDefaultUserTemplate =
    "Context: {context} Sentence: {sentence} Is the Sentence hallucinated or not?";

// A user-turn template holding exactly one {context} and one {sentence}.
class UserTemplate {
 public:
  UserTemplate();
  explicit UserTemplate(std::string text);  // throws InvalidConfig

  const std::string& text() const noexcept { return text_; }

  // Single-pass substitution: placeholder-like text inside the values is
  // left alone.
  std::string render(std::string_view context, std::string_view sentence) const;

 private:
  std::string text_;
  std::size_t context_pos_ = 0;
  std::size_t sentence_pos_ = 0;
};

struct ShotExample {
  std::string context;
  std::string sentence;
  Label label = Label::Hallucination;
};

struct PromptConfig {
  std::string system_instruction{kDefaultSystemInstruction};
  std::vector<ShotExample> shots;
  UserTemplate user_template;
  std::uint64_t seed = 0;
};

json to_json(const PromptConfig& config);

// ref=Tgt -> tgt, ref=Src -> src, ref=Either -> tgt when present, else src.
// Throws MissingContext when the selected side is absent or empty.
std::string build_context(const DataPoint& dp);

std::string render_user_turn(const DataPoint& dp, const UserTemplate& tmpl);

// System, then one User/Assistant pair per shot, then the query: 2k+2 messages.
Transcript render_transcript(const PromptConfig& config, const DataPoint& dp);

enum class ShotStrategy {
  Balanced,  // ceil(k/2) Hallucination, floor(k/2) Not, alternating, H first
  Shuffled,  // first k of a seeded shuffle, no label balancing
};

// Pool entries without a gold label or a usable context are ignored.
// Throws InsufficientPool when a label cannot be filled.
std::vector<ShotExample> select_shots(std::span<const DataPoint> pool, std::size_t k, std::uint64_t seed,
                                      ShotStrategy strategy = ShotStrategy::Balanced);

// Declarative form of a prompt as it appears in a config document.
struct PromptSpec {
  std::string system_instruction{kDefaultSystemInstruction};
  std::string user_template{kDefaultUserTemplate};
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> shot_pool_path;
  ShotStrategy strategy = ShotStrategy::Balanced;
};

// Keys: system_instruction, user_template, k, seed, shot_pool_path,
// shot_strategy. Relative pool paths resolve against `base_dir`.
PromptSpec prompt_spec_from_json(const json& doc, const std::filesystem::path& base_dir);

// Loads the shot pool (when k > 0) and selects shots.
PromptConfig resolve_prompt(const PromptSpec& spec);

}  // namespace halo
