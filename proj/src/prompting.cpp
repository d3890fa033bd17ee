#include "halo/prompting.hpp"

#include <random>

#include "halo/error.hpp"

namespace halo {

namespace {

constexpr std::string_view kContextSlot = "{context}";
constexpr std::string_view kSentenceSlot = "{sentence}";

std::size_t count_occurrences(std::string_view text, std::string_view needle) {
  std::size_t count = 0;
  for (auto pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + needle.size())) {
    ++count;
  }
  return count;
}

// Fisher-Yates over mt19937_64 draws. std::shuffle is not specified
// bit-for-bit across standard libraries, this is.
template <typename T>
void seeded_shuffle(std::vector<T>& items, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace

std::string_view to_string(Role role) noexcept {
  switch (role) {
    case Role::System: return "system";
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
  }
  return "user";
}

std::optional<Role> role_from_string(std::string_view text) noexcept {
  if (text == "system") return Role::System;
  if (text == "user") return Role::User;
  if (text == "assistant") return Role::Assistant;
  return std::nullopt;
}

json to_json(const ChatMessage& message) {
  return json{{"role", std::string(to_string(message.role))}, {"content", message.content}};
}

ChatMessage chat_message_from_json(const json& row) {
  if (!row.is_object() || !row.contains("role") || !row.contains("content") || !row["role"].is_string() ||
      !row["content"].is_string()) {
    throw Error(ErrorCode::MalformedRecord, "chat message needs string role and content");
  }
  auto role = role_from_string(row["role"].get<std::string>());
  if (!role) throw Error(ErrorCode::MalformedRecord, "unknown role " + row["role"].dump());
  return {*role, row["content"].get<std::string>()};
}

json to_json(const Transcript& transcript) {
  json out = json::array();
  for (const auto& message : transcript) out.push_back(to_json(message));
  return out;
}

UserTemplate::UserTemplate() : UserTemplate(std::string(kDefaultUserTemplate)) {}

UserTemplate::UserTemplate(std::string text) : text_(std::move(text)) {
  if (count_occurrences(text_, kContextSlot) != 1 || count_occurrences(text_, kSentenceSlot) != 1) {
    throw Error(ErrorCode::InvalidConfig,
                "user_template must contain {context} and {sentence} exactly once: \"" + text_ + "\"");
  }
  context_pos_ = text_.find(kContextSlot);
  sentence_pos_ = text_.find(kSentenceSlot);
}

std::string UserTemplate::render(std::string_view context, std::string_view sentence) const {
  const bool context_first = context_pos_ < sentence_pos_;
  const std::size_t first_pos = context_first ? context_pos_ : sentence_pos_;
  const std::size_t first_len = context_first ? kContextSlot.size() : kSentenceSlot.size();
  const std::size_t second_pos = context_first ? sentence_pos_ : context_pos_;
  const std::size_t second_len = context_first ? kSentenceSlot.size() : kContextSlot.size();

  std::string out;
  out.reserve(text_.size() + context.size() + sentence.size());
  out.append(text_, 0, first_pos);
  out.append(context_first ? context : sentence);
  out.append(text_, first_pos + first_len, second_pos - first_pos - first_len);
  out.append(context_first ? sentence : context);
  out.append(text_, second_pos + second_len);
  return out;
}

json to_json(const PromptConfig& config) {
  json shots = json::array();
  for (const auto& shot : config.shots) {
    shots.push_back({{"context", shot.context},
                     {"sentence", shot.sentence},
                     {"label", std::string(canonical_string(shot.label))}});
  }
  return json{{"system_instruction", config.system_instruction},
              {"user_template", config.user_template.text()},
              {"k", config.shots.size()},
              {"seed", config.seed},
              {"shots", std::move(shots)}};
}

std::string build_context(const DataPoint& dp) {
  switch (dp.ref) {
    case Reference::Tgt:
      if (dp.has_tgt()) return *dp.tgt;
      break;
    case Reference::Src:
      if (dp.has_src()) return *dp.src;
      break;
    case Reference::Either:
      if (dp.has_tgt()) return *dp.tgt;
      if (dp.has_src()) return *dp.src;
      break;
  }
  throw Error(ErrorCode::MissingContext,
              "id " + std::to_string(dp.id) + " has no " + std::string(to_string(dp.ref)) + " context");
}

std::string render_user_turn(const DataPoint& dp, const UserTemplate& tmpl) {
  return tmpl.render(build_context(dp), dp.hyp);
}

Transcript render_transcript(const PromptConfig& config, const DataPoint& dp) {
  if (config.system_instruction.empty()) throw Error(ErrorCode::InvalidConfig, "empty system instruction");
  Transcript transcript;
  transcript.reserve(2 * config.shots.size() + 2);
  transcript.push_back({Role::System, config.system_instruction});
  for (const auto& shot : config.shots) {
    if (shot.context.empty() || shot.sentence.empty()) {
      throw Error(ErrorCode::InvalidConfig, "shot example with empty context or sentence");
    }
    transcript.push_back({Role::User, config.user_template.render(shot.context, shot.sentence)});
    transcript.push_back({Role::Assistant, std::string(canonical_string(shot.label))});
  }
  transcript.push_back({Role::User, render_user_turn(dp, config.user_template)});
  return transcript;
}

std::vector<ShotExample> select_shots(std::span<const DataPoint> pool, std::size_t k, std::uint64_t seed,
                                      ShotStrategy strategy) {
  if (k == 0) return {};

  std::vector<ShotExample> hallucinated;
  std::vector<ShotExample> faithful;
  std::vector<ShotExample> all;
  for (const auto& dp : pool) {
    if (!dp.gold_label || dp.hyp.empty()) continue;
    std::string context;
    try {
      context = build_context(dp);
    } catch (const Error&) {
      continue;
    }
    ShotExample shot{std::move(context), dp.hyp, *dp.gold_label};
    all.push_back(shot);
    (shot.label == Label::Hallucination ? hallucinated : faithful).push_back(std::move(shot));
  }

  if (strategy == ShotStrategy::Shuffled) {
    if (all.size() < k) {
      throw Error(ErrorCode::InsufficientPool,
                  "any label: needed " + std::to_string(k) + ", available " + std::to_string(all.size()));
    }
    seeded_shuffle(all, seed);
    all.resize(k);
    return all;
  }

  const std::size_t need_h = (k + 1) / 2;
  const std::size_t need_n = k / 2;
  if (hallucinated.size() < need_h) {
    throw Error(ErrorCode::InsufficientPool, "Hallucination: needed " + std::to_string(need_h) + ", available " +
                                                 std::to_string(hallucinated.size()));
  }
  if (faithful.size() < need_n) {
    throw Error(ErrorCode::InsufficientPool, "Not Hallucination: needed " + std::to_string(need_n) +
                                                 ", available " + std::to_string(faithful.size()));
  }
  seeded_shuffle(hallucinated, seed);
  seeded_shuffle(faithful, seed ^ 0x9E3779B97F4A7C15ULL);

  std::vector<ShotExample> shots;
  shots.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    shots.push_back(i % 2 == 0 ? hallucinated[i / 2] : faithful[i / 2]);
  }
  return shots;
}

PromptSpec prompt_spec_from_json(const json& doc, const std::filesystem::path& base_dir) {
  if (!doc.is_object()) throw Error(ErrorCode::InvalidConfig, "prompt section must be an object");
  PromptSpec spec;
  try {
    spec.system_instruction = doc.value("system_instruction", spec.system_instruction);
    spec.user_template = doc.value("user_template", spec.user_template);
    const long long k = doc.value("k", 0LL);
    if (k < 0) throw Error(ErrorCode::InvalidConfig, "prompt.k must be >= 0");
    spec.k = static_cast<std::size_t>(k);
    spec.seed = doc.value("seed", std::uint64_t{0});
    if (auto it = doc.find("shot_pool_path"); it != doc.end() && !it->is_null()) {
      std::filesystem::path pool = it->get<std::string>();
      spec.shot_pool_path = pool.is_absolute() ? pool : base_dir / pool;
    }
    const std::string strategy = doc.value("shot_strategy", "balanced");
    if (strategy == "balanced") {
      spec.strategy = ShotStrategy::Balanced;
    } else if (strategy == "shuffled") {
      spec.strategy = ShotStrategy::Shuffled;
    } else {
      throw Error(ErrorCode::InvalidConfig, "unknown shot_strategy \"" + strategy + "\"");
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("prompt section: ") + e.what());
  }
  // Fail early on a bad template rather than at first render.
  UserTemplate check(spec.user_template);
  return spec;
}

PromptConfig resolve_prompt(const PromptSpec& spec) {
  PromptConfig config;
  config.system_instruction = spec.system_instruction;
  config.user_template = UserTemplate(spec.user_template);
  config.seed = spec.seed;
  if (spec.k > 0) {
    if (!spec.shot_pool_path) throw Error(ErrorCode::InvalidConfig, "k > 0 requires shot_pool_path");
    const Dataset pool = load_dataset(*spec.shot_pool_path);
    config.shots = select_shots(pool.points, spec.k, spec.seed, spec.strategy);
  }
  return config;
}

}  // namespace halo
