#pragma once

#include <atomic>
#include <chrono>
#include <cstddef>
#include <memory>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "halo/data_model.hpp"
#include "halo/prompting.hpp"

namespace halo {

enum class BackendKind { HttpChat, Mock };

struct BackendConfig {
  BackendKind kind = BackendKind::Mock;
  std::string base_url;  // e.g. https://api.example.com/v1
  std::string model_name = "mock";
  double temperature = 0.0;
  int max_tokens = 8;
  bool request_logprobs = false;
  int top_logprobs = 5;  // only sent when request_logprobs is set
  std::chrono::milliseconds timeout{30000};
  int max_retries = 3;
  std::string api_key_env;  // empty: no Authorization header
  std::size_t max_in_flight = 4;
  std::chrono::milliseconds retry_base_delay{1000};
  double retry_factor = 2.0;
  std::chrono::milliseconds mock_latency{0};
};

// Throws InvalidConfig.
void validate(const BackendConfig& config);

// Snapshot for manifests. Holds the variable name, never the credential.
json to_json(const BackendConfig& config);
BackendConfig backend_config_from_json(const json& doc);

struct TokenLogprob {
  std::string token;
  double logprob = 0.0;
};

struct CompletionResponse {
  std::string text;
  std::vector<TokenLogprob> token_logprobs;            // the generated tokens
  std::vector<TokenLogprob> first_token_alternatives;  // top candidates at position 0
  std::string finish_reason;
  int attempts = 1;

  bool has_logprobs() const noexcept { return !token_logprobs.empty() || !first_token_alternatives.empty(); }
};

json to_json(const CompletionResponse& response);
CompletionResponse completion_response_from_json(const json& doc);

// Shared front for every endpoint kind. complete() is safe to call from many
// threads; at most max_in_flight requests run at once per backend object.
class Backend {
 public:
  explicit Backend(BackendConfig config);
  virtual ~Backend() = default;
  Backend(const Backend&) = delete;
  Backend& operator=(const Backend&) = delete;

  // Checks transcript shape (one leading System message, trailing User
  // message, non-empty contents) and dispatches.
  CompletionResponse complete(const Transcript& messages);

  const BackendConfig& config() const noexcept { return config_; }
  std::size_t calls() const noexcept { return calls_.load(); }

 protected:
  virtual CompletionResponse do_complete(const Transcript& messages) = 0;

 private:
  BackendConfig config_;
  std::counting_semaphore<1024> in_flight_;
  std::atomic<std::size_t> calls_{0};
};

// Offline double: Jaccard overlap between the context and sentence found in
// the final User message. Overlap >= 0.5 answers "Not Hallucination".
// Reports p(Hallucination) = 1 - overlap through first-token logprobs.
class MockBackend final : public Backend {
 public:
  explicit MockBackend(BackendConfig config) : Backend(std::move(config)) {}

  static CompletionResponse respond(std::string_view final_user_message);

 protected:
  CompletionResponse do_complete(const Transcript& messages) override;
};

// OpenAI-compatible POST {base_url}/chat/completions with retry on transport
// failures, 429 and 5xx (exponential backoff with jitter).
class HttpChatBackend final : public Backend {
 public:
  explicit HttpChatBackend(BackendConfig config);

 protected:
  CompletionResponse do_complete(const Transcript& messages) override;

 private:
  std::string scheme_host_port_;
  std::string path_prefix_;
};

std::unique_ptr<Backend> make_backend(const BackendConfig& config);

json build_request_body(const BackendConfig& config, const Transcript& messages);
CompletionResponse parse_chat_response(const json& body);

// Lowercase, strip ASCII punctuation, split on whitespace.
std::vector<std::string> mock_tokens(std::string_view text);
// |A ∩ B| / |A ∪ B| over token sets; two empty sets count as identical.
double token_jaccard(std::string_view a, std::string_view b);

// Two-class softmax, max-subtracted before exponentiation.
double softmax_hallucination(double z_hallucination, double z_not_hallucination);

// With scores: softmax over them. Otherwise first-token logprobs matched by
// case-insensitive "Hall"/"Not" prefixes. Otherwise certainty on the parsed
// text. Throws UndecidableDistribution when logprobs exist but name neither
// label.
LabelDistribution label_distribution(const CompletionResponse& response,
                                     std::optional<std::pair<double, double>> label_scores = std::nullopt);

}  // namespace halo
