#include "halo/llm_backend.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <random>
#include <set>
#include <thread>

#include <httplib.h>

#include "halo/error.hpp"

namespace halo {

namespace {

constexpr std::string_view kMockUnsure = "Unable to determine.";
// Stands in for log(0) so the value survives a JSON round trip.
constexpr double kLogZero = -1000.0;

double safe_log(double p) { return p > 0.0 ? std::log(p) : kLogZero; }

std::string lowercase(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

std::string_view trim(std::string_view text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = text.find_last_not_of(" \t\r\n");
  return text.substr(first, last - first + 1);
}

// Tokenizer word-boundary markers: "Ġ" (byte-level BPE) and "▁" (SentencePiece).
std::string_view strip_token_marker(std::string_view token) {
  token = trim(token);
  for (std::string_view marker : {std::string_view("\xC4\xA0"), std::string_view("\xE2\x96\x81")}) {
    if (token.substr(0, marker.size()) == marker) token.remove_prefix(marker.size());
  }
  return trim(token);
}

bool starts_with_ci(std::string_view token, std::string_view prefix) {
  return token.size() >= prefix.size() && lowercase(token.substr(0, prefix.size())) == prefix;
}

struct MockQuery {
  std::string context;
  std::string sentence;
};

// Locates the context and sentence inside a user turn laid out like the
// default template.
std::optional<MockQuery> parse_mock_query(std::string_view message) {
  constexpr std::string_view kContext = "Context:";
  constexpr std::string_view kSentence = "Sentence:";
  constexpr std::string_view kQuestion = "Is the Sentence hallucinated or not?";
  const auto c = message.find(kContext);
  if (c == std::string_view::npos) return std::nullopt;
  const auto s = message.find(kSentence, c + kContext.size());
  if (s == std::string_view::npos) return std::nullopt;
  std::string_view context = message.substr(c + kContext.size(), s - c - kContext.size());
  std::string_view sentence = message.substr(s + kSentence.size());
  if (const auto q = sentence.rfind(kQuestion); q != std::string_view::npos) sentence = sentence.substr(0, q);
  return MockQuery{std::string(trim(context)), std::string(trim(sentence))};
}

std::chrono::milliseconds backoff_delay(const BackendConfig& config, int retry_index) {
  thread_local std::mt19937_64 rng{std::random_device{}()};
  const double base = static_cast<double>(config.retry_base_delay.count()) * std::pow(config.retry_factor, retry_index);
  std::uniform_real_distribution<double> jitter(0.0, base * 0.25);
  return std::chrono::milliseconds(static_cast<long long>(base + jitter(rng)));
}

bool retryable_status(int status) { return status == 429 || (status >= 500 && status <= 599); }

BackendKind backend_kind_from_string(const std::string& text) {
  if (text == "mock") return BackendKind::Mock;
  if (text == "http_chat") return BackendKind::HttpChat;
  throw Error(ErrorCode::InvalidConfig, "unknown backend kind \"" + text + "\"");
}

}  // namespace

void validate(const BackendConfig& config) {
  if (config.kind == BackendKind::HttpChat) {
    if (config.base_url.empty()) throw Error(ErrorCode::InvalidConfig, "http_chat backend needs base_url");
    if (config.base_url.find("://") == std::string::npos) {
      throw Error(ErrorCode::InvalidConfig, "base_url needs a scheme: " + config.base_url);
    }
  }
  if (config.model_name.empty()) throw Error(ErrorCode::InvalidConfig, "backend needs model_name");
  if (!(config.temperature >= 0.0)) throw Error(ErrorCode::InvalidConfig, "temperature must be >= 0");
  if (config.max_tokens <= 0) throw Error(ErrorCode::InvalidConfig, "max_tokens must be positive");
  if (config.max_retries < 0) throw Error(ErrorCode::InvalidConfig, "max_retries must be >= 0");
  if (config.max_in_flight == 0 || config.max_in_flight > 1024) {
    throw Error(ErrorCode::InvalidConfig, "max_in_flight must be in [1, 1024]");
  }
  if (config.timeout.count() <= 0) throw Error(ErrorCode::InvalidConfig, "timeout must be positive");
}

json to_json(const BackendConfig& config) {
  return json{{"kind", config.kind == BackendKind::Mock ? "mock" : "http_chat"},
              {"base_url", config.base_url},
              {"model_name", config.model_name},
              {"temperature", config.temperature},
              {"max_tokens", config.max_tokens},
              {"request_logprobs", config.request_logprobs},
              {"top_logprobs", config.top_logprobs},
              {"timeout_ms", config.timeout.count()},
              {"max_retries", config.max_retries},
              {"api_key_env", config.api_key_env},
              {"max_in_flight", config.max_in_flight},
              {"retry_base_delay_ms", config.retry_base_delay.count()},
              {"retry_factor", config.retry_factor},
              {"mock_latency_ms", config.mock_latency.count()}};
}

BackendConfig backend_config_from_json(const json& doc) {
  if (!doc.is_object()) throw Error(ErrorCode::InvalidConfig, "backend section must be an object");
  BackendConfig config;
  try {
    config.kind = backend_kind_from_string(doc.value("kind", "mock"));
    config.base_url = doc.value("base_url", "");
    config.model_name = doc.value("model_name", config.kind == BackendKind::Mock ? "mock" : "");
    config.temperature = doc.value("temperature", 0.0);
    config.max_tokens = doc.value("max_tokens", 8);
    config.request_logprobs = doc.value("request_logprobs", false);
    config.top_logprobs = doc.value("top_logprobs", 5);
    config.timeout = std::chrono::milliseconds(doc.value("timeout_ms", 30000LL));
    config.max_retries = doc.value("max_retries", 3);
    config.api_key_env = doc.value("api_key_env", "");
    config.max_in_flight = doc.value("max_in_flight", std::size_t{4});
    config.retry_base_delay = std::chrono::milliseconds(doc.value("retry_base_delay_ms", 1000LL));
    config.retry_factor = doc.value("retry_factor", 2.0);
    config.mock_latency = std::chrono::milliseconds(doc.value("mock_latency_ms", 0LL));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("backend section: ") + e.what());
  }
  validate(config);
  return config;
}

json to_json(const CompletionResponse& response) {
  auto pairs = [](const std::vector<TokenLogprob>& items) {
    json out = json::array();
    for (const auto& item : items) out.push_back({{"token", item.token}, {"logprob", item.logprob}});
    return out;
  };
  return json{{"text", response.text},
              {"token_logprobs", pairs(response.token_logprobs)},
              {"first_token_alternatives", pairs(response.first_token_alternatives)},
              {"finish_reason", response.finish_reason},
              {"attempts", response.attempts}};
}

CompletionResponse completion_response_from_json(const json& doc) {
  auto pairs = [](const json& items) {
    std::vector<TokenLogprob> out;
    for (const auto& item : items) out.push_back({item.at("token").get<std::string>(), item.at("logprob").get<double>()});
    return out;
  };
  try {
    CompletionResponse response;
    response.text = doc.at("text").get<std::string>();
    response.token_logprobs = pairs(doc.value("token_logprobs", json::array()));
    response.first_token_alternatives = pairs(doc.value("first_token_alternatives", json::array()));
    response.finish_reason = doc.value("finish_reason", "");
    response.attempts = doc.value("attempts", 1);
    return response;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, std::string("cached response: ") + e.what());
  }
}

Backend::Backend(BackendConfig config)
    : config_(std::move(config)), in_flight_(static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(config_.max_in_flight, 1, 1024))) {
  validate(config_);
}

CompletionResponse Backend::complete(const Transcript& messages) {
  if (messages.empty() || messages.front().role != Role::System || messages.back().role != Role::User) {
    throw Error(ErrorCode::InvalidConfig, "transcript must start with System and end with User");
  }
  for (std::size_t i = 0; i < messages.size(); ++i) {
    if (i > 0 && messages[i].role == Role::System) throw Error(ErrorCode::InvalidConfig, "more than one System message");
    if (messages[i].content.empty()) throw Error(ErrorCode::InvalidConfig, "empty message content");
  }
  calls_.fetch_add(1);
  in_flight_.acquire();
  struct Release {
    std::counting_semaphore<1024>& sem;
    ~Release() { sem.release(); }
  } release{in_flight_};
  return do_complete(messages);
}

CompletionResponse MockBackend::respond(std::string_view final_user_message) {
  CompletionResponse response;
  response.finish_reason = "stop";
  const auto query = parse_mock_query(final_user_message);
  if (!query) {
    response.text = std::string(kMockUnsure);
    return response;
  }
  const double overlap = token_jaccard(query->sentence, query->context);
  const double p_hallucination = 1.0 - overlap;
  const bool faithful = overlap >= 0.5;
  response.text = faithful ? "Not Hallucination" : "Hallucination";
  response.token_logprobs.push_back({faithful ? "Not" : "Hall", safe_log(faithful ? overlap : p_hallucination)});
  response.first_token_alternatives = {{"Hall", safe_log(p_hallucination)}, {"Not", safe_log(overlap)}};
  return response;
}

CompletionResponse MockBackend::do_complete(const Transcript& messages) {
  if (config().mock_latency.count() > 0) std::this_thread::sleep_for(config().mock_latency);
  return respond(messages.back().content);
}

HttpChatBackend::HttpChatBackend(BackendConfig config) : Backend(std::move(config)) {
  std::string url = this->config().base_url;
  while (!url.empty() && url.back() == '/') url.pop_back();
  const auto scheme_end = url.find("://");
  const auto path_start = url.find('/', scheme_end + 3);
  scheme_host_port_ = url.substr(0, path_start);
  path_prefix_ = path_start == std::string::npos ? "" : url.substr(path_start);
}

CompletionResponse HttpChatBackend::do_complete(const Transcript& messages) {
  const BackendConfig& cfg = config();
  httplib::Headers headers;
  if (!cfg.api_key_env.empty()) {
    const char* key = std::getenv(cfg.api_key_env.c_str());
    if (key == nullptr || *key == '\0') throw Error(ErrorCode::MissingCredential, cfg.api_key_env);
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }
  const std::string body = build_request_body(cfg, messages).dump(-1, ' ', false, json::error_handler_t::replace);
  const std::string path = path_prefix_ + "/chat/completions";

  const auto seconds = std::chrono::duration_cast<std::chrono::seconds>(cfg.timeout);
  const auto micros = std::chrono::duration_cast<std::chrono::microseconds>(cfg.timeout - seconds);

  std::string last_failure;
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(backoff_delay(cfg, attempt - 1));

    httplib::Client client(scheme_host_port_);
    client.set_connection_timeout(seconds.count(), micros.count());
    client.set_read_timeout(seconds.count(), micros.count());
    client.set_write_timeout(seconds.count(), micros.count());

    auto result = client.Post(path, headers, body, "application/json");
    if (!result) {
      last_failure = "transport: " + httplib::to_string(result.error());
      continue;
    }
    if (retryable_status(result->status)) {
      last_failure = "HTTP " + std::to_string(result->status);
      continue;
    }
    if (result->status != 200) {
      throw Error(ErrorCode::HttpStatus, std::to_string(result->status) + " " + result->body.substr(0, 200));
    }
    json parsed;
    try {
      parsed = json::parse(result->body);
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::TransportError, std::string("response is not JSON: ") + e.what());
    }
    CompletionResponse response = parse_chat_response(parsed);
    response.attempts = attempt + 1;
    return response;
  }
  throw Error(ErrorCode::ExhaustedRetries,
              std::to_string(cfg.max_retries + 1) + " attempts, last failure " + last_failure);
}

std::unique_ptr<Backend> make_backend(const BackendConfig& config) {
  if (config.kind == BackendKind::Mock) return std::make_unique<MockBackend>(config);
  return std::make_unique<HttpChatBackend>(config);
}

json build_request_body(const BackendConfig& config, const Transcript& messages) {
  json body{{"model", config.model_name},
            {"messages", to_json(messages)},
            {"temperature", config.temperature},
            {"max_tokens", config.max_tokens},
            {"logprobs", config.request_logprobs}};
  if (config.request_logprobs) body["top_logprobs"] = config.top_logprobs;
  return body;
}

CompletionResponse parse_chat_response(const json& body) {
  try {
    const json& choice = body.at("choices").at(0);
    CompletionResponse response;
    const json& content = choice.at("message").at("content");
    response.text = content.is_string() ? content.get<std::string>() : "";
    if (response.text.empty()) throw Error(ErrorCode::BackendFailure, "empty completion text");
    if (auto it = choice.find("finish_reason"); it != choice.end() && it->is_string()) {
      response.finish_reason = it->get<std::string>();
    }
    if (auto lp = choice.find("logprobs"); lp != choice.end() && lp->is_object()) {
      if (auto items = lp->find("content"); items != lp->end() && items->is_array()) {
        for (const auto& item : *items) {
          response.token_logprobs.push_back({item.at("token").get<std::string>(), item.at("logprob").get<double>()});
        }
        if (!items->empty()) {
          const json& first = items->at(0);
          if (auto top = first.find("top_logprobs"); top != first.end() && top->is_array()) {
            for (const auto& alt : *top) {
              response.first_token_alternatives.push_back(
                  {alt.at("token").get<std::string>(), alt.at("logprob").get<double>()});
            }
          }
        }
      }
    }
    return response;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::TransportError, std::string("unexpected response shape: ") + e.what());
  }
}

std::vector<std::string> mock_tokens(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      if (!current.empty()) tokens.push_back(std::move(current));
      current.clear();
    } else if (c < 0x80 && std::ispunct(c)) {
      continue;
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

double token_jaccard(std::string_view a, std::string_view b) {
  const auto ta = mock_tokens(a);
  const auto tb = mock_tokens(b);
  const std::set<std::string> sa(ta.begin(), ta.end());
  const std::set<std::string> sb(tb.begin(), tb.end());
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t shared = 0;
  for (const auto& token : sa) shared += sb.count(token);
  const std::size_t total = sa.size() + sb.size() - shared;
  return static_cast<double>(shared) / static_cast<double>(total);
}

double softmax_hallucination(double z_hallucination, double z_not_hallucination) {
  if (std::isnan(z_hallucination) || std::isnan(z_not_hallucination)) {
    throw Error(ErrorCode::UndecidableDistribution, "NaN label score");
  }
  const double top = std::max(z_hallucination, z_not_hallucination);
  if (std::isinf(top) && top < 0) throw Error(ErrorCode::UndecidableDistribution, "both label scores are -inf");
  if (std::isinf(top)) {
    if (z_hallucination == z_not_hallucination) return 0.5;
    return z_hallucination > z_not_hallucination ? 1.0 : 0.0;
  }
  const double e_h = std::exp(z_hallucination - top);
  const double e_n = std::exp(z_not_hallucination - top);
  return e_h / (e_h + e_n);
}

LabelDistribution label_distribution(const CompletionResponse& response,
                                     std::optional<std::pair<double, double>> label_scores) {
  if (label_scores) {
    return LabelDistribution::from_p_hallucination(softmax_hallucination(label_scores->first, label_scores->second));
  }
  if (!response.has_logprobs()) return LabelDistribution::certain(parse_label_text(response.text));

  std::optional<double> z_h;
  std::optional<double> z_n;
  auto consider = [&](const TokenLogprob& item) {
    const std::string_view token = strip_token_marker(item.token);
    if (starts_with_ci(token, "hall")) z_h = z_h ? std::max(*z_h, item.logprob) : item.logprob;
    if (starts_with_ci(token, "not")) z_n = z_n ? std::max(*z_n, item.logprob) : item.logprob;
  };
  for (const auto& alt : response.first_token_alternatives) consider(alt);
  if (!response.token_logprobs.empty()) consider(response.token_logprobs.front());

  if (z_h && z_n) return LabelDistribution::from_p_hallucination(softmax_hallucination(*z_h, *z_n));
  if (z_h) return LabelDistribution::from_p_hallucination(std::clamp(std::exp(*z_h), 0.0, 1.0));
  if (z_n) return LabelDistribution::from_p_hallucination(1.0 - std::clamp(std::exp(*z_n), 0.0, 1.0));
  throw Error(ErrorCode::UndecidableDistribution, "first token matches neither label: \"" + response.text + "\"");
}

}  // namespace halo
