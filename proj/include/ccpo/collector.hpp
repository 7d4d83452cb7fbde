#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ccpo/trace.hpp"

namespace ccpo {

/// One chat-completions endpoint. `url` is the full request URL, e.g. http://localhost:8000/v1/chat/completions.
struct EndpointConfig {
  std::string url;
  std::string model;
  /// Name of the environment variable holding the bearer token; empty sends no Authorization header.
  std::string api_key_env;
};

enum class UncertaintyEstimator {
  /// 1 - probability of the guide's first reply token; falls back to Agreement without logprobs.
  Logprob,
  /// 0.2 if the guide agrees, 0.8 otherwise.
  Agreement,
};

struct CollectorConfig {
  EndpointConfig base;
  EndpointConfig guide;
  double timeout_seconds = 30.0;
  /// Extra attempts after the first failure of a call.
  int retries = 3;
  int retry_backoff_ms = 500;
  std::string questions_path;
  int horizon = 4;
  UncertaintyEstimator estimator = UncertaintyEstimator::Logprob;
  /// Questions processed concurrently (each question's rounds stay sequential).
  int max_in_flight = 4;
  /// Base-model sampling temperature after the first round (the first round decodes greedily).
  double base_temperature = 1.0;

  void validate() const;
};

/// Reads collector.* keys (see README); unknown collector keys raise ValidationError.
CollectorConfig collector_config_from(const std::vector<std::pair<std::string, std::string>>& kvs);

struct Question {
  std::string id;
  std::string question;
  std::string answer;
};

/// Newline-delimited objects with "id", "question", "answer".
std::vector<Question> load_questions(const std::filesystem::path& path);

/// Lowercase, drop punctuation and the articles a/an/the, collapse whitespace.
std::string normalize_answer(std::string_view text);

/// Normalized gold answers get ids 1..n in first-seen order; anything else maps to kEscapeAnswer.
class AnswerVocabulary {
 public:
  static constexpr AnswerId kEscapeAnswer = 0;

  explicit AnswerVocabulary(const std::vector<Question>& questions);
  AnswerId id(std::string_view text) const;
  /// Vocabulary size including the escape id.
  int size() const noexcept { return static_cast<int>(ids_.size()) + 1; }

 private:
  std::unordered_map<std::string, AnswerId> ids_;
};

struct GuideJudgment {
  bool agrees = false;
  std::string corrected;
};

/// "Yes..." or "No <answer>" (brackets and separators tolerated). Throws ParseError otherwise.
GuideJudgment parse_guide_reply(std::string_view reply);

std::string guide_prompt(std::string_view question, std::string_view answer);

/// Earlier rounds as shown to the base model.
struct BaseTurn {
  std::string answer;
  std::string guide_reply;
};

std::string base_prompt(std::string_view question, const std::vector<BaseTurn>& history);

/// Description of the base framing, stored in the trace header notes.
std::string base_framing_notes();

struct ChatRequest {
  std::string model;
  std::string prompt;
  double temperature = 0.0;
  bool logprobs = false;
};

struct ChatResponse {
  std::string content;
  long prompt_tokens = 0;
  long completion_tokens = 0;
  std::optional<double> first_token_logprob;
};

std::string chat_request_json(const ChatRequest& request);
/// Throws ParseError for bodies that lack choices[0].message.content or usage counts.
ChatResponse parse_chat_response(std::string_view body);

class ChatClient {
 public:
  virtual ~ChatClient() = default;
  /// One attempt. Throws std::runtime_error on transport, status, or parse failure.
  virtual ChatResponse complete(const EndpointConfig& endpoint, const ChatRequest& request) = 0;
};

/// cpp-httplib client; safe to call from several threads.
class HttpChatClient : public ChatClient {
 public:
  explicit HttpChatClient(double timeout_seconds) : timeout_seconds_(timeout_seconds) {}
  ChatResponse complete(const EndpointConfig& endpoint, const ChatRequest& request) override;

 private:
  double timeout_seconds_;
};

using CollectorLog = std::function<void(std::string_view)>;

struct CollectOutcome {
  std::optional<Trace> trace;
  std::string skip_reason;
};

/// Runs the T-round orchestration for one question. Failures after retries yield a skip reason instead of a trace.
CollectOutcome collect_trace(const Question& question, const AnswerVocabulary& vocab, const CollectorConfig& config,
                             ChatClient& client);

struct CollectSummary {
  TraceCorpus corpus;
  std::vector<std::pair<std::string, std::string>> skipped;
};

/// Collects every question with at most config.max_in_flight in flight; output keeps input order.
CollectSummary collect_corpus(const std::vector<Question>& questions, const CollectorConfig& config, ChatClient& client,
                              const CollectorLog& log = {});

}  // namespace ccpo
