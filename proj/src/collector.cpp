#include "ccpo/collector.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "ccpo/error.hpp"

namespace ccpo {

using nlohmann::json;

namespace {

bool well_formed_url(const std::string& url) {
  const auto p = url.find("://");
  if (p == std::string::npos) return false;
  const std::string scheme = url.substr(0, p);
  if (scheme != "http" && scheme != "https") return false;
  return url.size() > p + 3 && url[p + 3] != '/';
}

/// Splits "scheme://host[:port]/path" into the client origin and the request path.
std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto p = url.find("://");
  const auto slash = url.find('/', p + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

void CollectorConfig::validate() const {
  if (!well_formed_url(base.url)) throw ValidationError("collector.base_url", "expected an http(s) URL");
  if (!well_formed_url(guide.url)) throw ValidationError("collector.guide_url", "expected an http(s) URL");
  if (base.model.empty()) throw ValidationError("collector.base_model", "must be set");
  if (guide.model.empty()) throw ValidationError("collector.guide_model", "must be set");
  if (horizon < 1) throw ValidationError("collector.horizon", "must be >= 1");
  if (!(timeout_seconds > 0.0)) throw ValidationError("collector.timeout_seconds", "must be > 0");
  if (retries < 0) throw ValidationError("collector.retries", "must be >= 0");
  if (retry_backoff_ms < 0) throw ValidationError("collector.retry_backoff_ms", "must be >= 0");
  if (max_in_flight < 1) throw ValidationError("collector.max_in_flight", "must be >= 1");
  if (!(base_temperature >= 0.0)) throw ValidationError("collector.base_temperature", "must be >= 0");
}

CollectorConfig collector_config_from(const std::vector<std::pair<std::string, std::string>>& kvs) {
  CollectorConfig c;
  auto num = [](const std::string& k, const std::string& v) {
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size()) throw ValidationError(k, "expected a number, got '" + v + "'");
    return d;
  };
  auto integer = [&](const std::string& k, const std::string& v) {
    const double d = num(k, v);
    if (d != std::floor(d)) throw ValidationError(k, "expected an integer, got '" + v + "'");
    return static_cast<int>(d);
  };
  for (const auto& [k, v] : kvs) {
    if (k.rfind("collector.", 0) != 0) continue;
    if (k == "collector.base_url") c.base.url = v;
    else if (k == "collector.base_model") c.base.model = v;
    else if (k == "collector.base_api_key_env") c.base.api_key_env = v;
    else if (k == "collector.guide_url") c.guide.url = v;
    else if (k == "collector.guide_model") c.guide.model = v;
    else if (k == "collector.guide_api_key_env") c.guide.api_key_env = v;
    else if (k == "collector.timeout_seconds") c.timeout_seconds = num(k, v);
    else if (k == "collector.retries") c.retries = integer(k, v);
    else if (k == "collector.retry_backoff_ms") c.retry_backoff_ms = integer(k, v);
    else if (k == "collector.questions_path") c.questions_path = v;
    else if (k == "collector.horizon") c.horizon = integer(k, v);
    else if (k == "collector.max_in_flight") c.max_in_flight = integer(k, v);
    else if (k == "collector.base_temperature") c.base_temperature = num(k, v);
    else if (k == "collector.uncertainty") {
      if (v == "logprob") c.estimator = UncertaintyEstimator::Logprob;
      else if (v == "agreement") c.estimator = UncertaintyEstimator::Agreement;
      else throw ValidationError(k, "expected logprob or agreement, got '" + v + "'");
    } else {
      throw ValidationError(k, "unknown collector key");
    }
  }
  return c;
}

std::vector<Question> load_questions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open question file " + path.string());
  std::vector<Question> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const json j = json::parse(line);
      out.push_back(Question{j.at("id").get<std::string>(), j.at("question").get<std::string>(),
                             j.at("answer").get<std::string>()});
    } catch (const json::exception& e) {
      throw ParseError(line_no, e.what());
    }
  }
  return out;
}

std::string normalize_answer(std::string_view text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (unsigned char ch : text) {
    if (std::ispunct(ch)) {
      cleaned.push_back(' ');
    } else {
      cleaned.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  std::istringstream words(cleaned);
  std::string w;
  std::string out;
  while (words >> w) {
    if (w == "a" || w == "an" || w == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

AnswerVocabulary::AnswerVocabulary(const std::vector<Question>& questions) {
  for (const auto& q : questions) {
    const std::string key = normalize_answer(q.answer);
    if (!ids_.contains(key)) {
      const auto next = static_cast<AnswerId>(ids_.size() + 1);
      ids_.emplace(key, next);
    }
  }
}

AnswerId AnswerVocabulary::id(std::string_view text) const {
  const auto it = ids_.find(normalize_answer(text));
  return it == ids_.end() ? kEscapeAnswer : it->second;
}

GuideJudgment parse_guide_reply(std::string_view reply) {
  const std::string r = trim(reply);
  auto starts_with_word = [&](std::string_view word) {
    if (r.size() < word.size()) return false;
    for (std::size_t i = 0; i < word.size(); ++i)
      if (std::tolower(static_cast<unsigned char>(r[i])) != word[i]) return false;
    return r.size() == word.size() || !std::isalnum(static_cast<unsigned char>(r[word.size()]));
  };
  if (starts_with_word("yes")) return GuideJudgment{true, {}};
  if (starts_with_word("no")) {
    std::string rest = trim(std::string_view(r).substr(2));
    while (!rest.empty() && (rest.front() == ',' || rest.front() == ':' || rest.front() == '-' || rest.front() == '.'))
      rest = trim(std::string_view(rest).substr(1));
    if (rest.size() >= 2 && rest.front() == '[' && rest.back() == ']') rest = trim(std::string_view(rest).substr(1, rest.size() - 2));
    if (normalize_answer(rest).empty()) throw ParseError(1, "guide said No without a corrected answer");
    return GuideJudgment{false, rest};
  }
  throw ParseError(1, "guide reply is neither Yes nor No");
}

std::string guide_prompt(std::string_view question, std::string_view answer) {
  std::string p =
      "Evaluate the answer.\n"
      "- If correct, reply \"Yes\".\n"
      "- If incorrect, reply \"No [correct answer]\" (only the correct answer, nothing else).\n"
      "Q: ";
  p += question;
  p += "\nA: ";
  p += answer;
  p += "\nYour response:";
  return p;
}

std::string base_prompt(std::string_view question, const std::vector<BaseTurn>& history) {
  std::string p = "Answer the question. Reply with only the final answer.\nQ: ";
  p += question;
  p += '\n';
  for (std::size_t i = 0; i < history.size(); ++i) {
    p += "Attempt " + std::to_string(i + 1) + ": " + history[i].answer + "\n";
    p += "Reviewer: " + history[i].guide_reply + "\n";
  }
  if (!history.empty()) p += "Reconsider and answer again.\n";
  p += "A:";
  return p;
}

std::string base_framing_notes() {
  return "base prompt: 'Answer the question. Reply with only the final answer.\\nQ: {question}\\n' then, for each "
         "earlier round i, 'Attempt i: {base answer}\\nReviewer: {guide reply}\\n', then 'Reconsider and answer "
         "again.\\n' when there is history, then 'A:'. Temperature 0 at round 1, sampled afterward.";
}

std::string chat_request_json(const ChatRequest& request) {
  json j{{"model", request.model},
         {"messages", json::array({json{{"role", "user"}, {"content", request.prompt}}})},
         {"temperature", request.temperature}};
  if (request.logprobs) j["logprobs"] = true;
  return j.dump();
}

ChatResponse parse_chat_response(std::string_view body) {
  try {
    const json j = json::parse(body);
    ChatResponse r;
    const json& choice = j.at("choices").at(0);
    r.content = choice.at("message").at("content").get<std::string>();
    r.prompt_tokens = j.at("usage").at("prompt_tokens").get<long>();
    r.completion_tokens = j.at("usage").at("completion_tokens").get<long>();
    if (r.prompt_tokens < 0 || r.completion_tokens < 0) throw ParseError(1, "negative token usage");
    if (choice.contains("logprobs") && choice["logprobs"].is_object()) {
      const json& lp = choice["logprobs"];
      if (lp.contains("content") && lp["content"].is_array() && !lp["content"].empty())
        r.first_token_logprob = lp["content"][0].at("logprob").get<double>();
    }
    return r;
  } catch (const json::exception& e) {
    throw ParseError(1, std::string("chat response: ") + e.what());
  }
}

ChatResponse HttpChatClient::complete(const EndpointConfig& endpoint, const ChatRequest& request) {
  const auto [origin, path] = split_url(endpoint.url);
  httplib::Client client(origin);
  const auto secs = std::chrono::duration<double>(timeout_seconds_);
  client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
  client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
  client.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
  httplib::Headers headers;
  if (!endpoint.api_key_env.empty()) {
    const char* key = std::getenv(endpoint.api_key_env.c_str());
    if (key == nullptr || *key == '\0')
      throw std::runtime_error("environment variable " + endpoint.api_key_env + " is not set");
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }
  const auto res = client.Post(path, headers, chat_request_json(request), "application/json");
  if (!res) throw std::runtime_error("request to " + endpoint.url + " failed: " + httplib::to_string(res.error()));
  if (res->status != 200) throw std::runtime_error("request to " + endpoint.url + " returned HTTP " + std::to_string(res->status));
  return parse_chat_response(res->body);
}

namespace {

ChatResponse call_with_retries(ChatClient& client, const EndpointConfig& endpoint, const ChatRequest& request,
                               const CollectorConfig& config, std::string& last_error) {
  for (int attempt = 0;; ++attempt) {
    try {
      return client.complete(endpoint, request);
    } catch (const std::exception& e) {
      last_error = e.what();
      if (attempt >= config.retries) throw;
      if (config.retry_backoff_ms > 0)
        std::this_thread::sleep_for(std::chrono::milliseconds(config.retry_backoff_ms * (attempt + 1)));
    }
  }
}

struct GuideCall {
  ChatResponse response;
  GuideJudgment judgment;
};

}  // namespace

CollectOutcome collect_trace(const Question& question, const AnswerVocabulary& vocab, const CollectorConfig& config,
                             ChatClient& client) {
  CollectOutcome out;
  Trace trace;
  trace.question_id = question.id;
  trace.true_answer = vocab.id(question.answer);
  std::vector<BaseTurn> history;
  std::string last_error;
  try {
    for (int t = 1; t <= config.horizon; ++t) {
      ChatRequest base_req{config.base.model, base_prompt(question.question, history),
                           t == 1 ? 0.0 : config.base_temperature, false};
      const ChatResponse base = call_with_retries(client, config.base, base_req, config, last_error);
      const std::string base_answer = trim(base.content);

      ChatRequest guide_req{config.guide.model, guide_prompt(question.question, base_answer), 0.0,
                            config.estimator == UncertaintyEstimator::Logprob};
      // A reply that does not follow the template counts as a failed attempt.
      std::optional<GuideCall> guide;
      for (int attempt = 0; !guide; ++attempt) {
        const ChatResponse resp = call_with_retries(client, config.guide, guide_req, config, last_error);
        try {
          guide = GuideCall{resp, parse_guide_reply(resp.content)};
        } catch (const ParseError& e) {
          last_error = e.what();
          if (attempt >= config.retries) throw;
        }
      }

      RoundRecord r;
      r.base_answer = vocab.id(base_answer);
      r.guide_agrees = guide->judgment.agrees;
      r.guide_answer = r.guide_agrees ? r.base_answer : vocab.id(guide->judgment.corrected);
      if (config.estimator == UncertaintyEstimator::Logprob && guide->response.first_token_logprob) {
        r.guide_uncertainty = std::clamp(1.0 - std::exp(*guide->response.first_token_logprob), 0.0, 1.0);
      } else {
        r.guide_uncertainty = r.guide_agrees ? 0.2 : 0.8;
      }
      r.base_tokens_in = base.prompt_tokens;
      r.base_tokens_out = base.completion_tokens;
      r.guide_tokens_in = guide->response.prompt_tokens;
      r.guide_tokens_out = guide->response.completion_tokens;
      trace.rounds.push_back(r);
      history.push_back(BaseTurn{base_answer, trim(guide->response.content)});
    }
    TraceHeader header;
    header.horizon = config.horizon;
    header.answer_vocab_size = vocab.size();
    validate_trace(trace, header);
  } catch (const std::exception& e) {
    out.skip_reason = e.what();
    return out;
  }
  out.trace = std::move(trace);
  return out;
}

CollectSummary collect_corpus(const std::vector<Question>& questions, const CollectorConfig& config, ChatClient& client,
                              const CollectorLog& log) {
  config.validate();
  const AnswerVocabulary vocab(questions);
  std::vector<CollectOutcome> outcomes(questions.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= questions.size()) return;
      outcomes[i] = collect_trace(questions[i], vocab, config, client);
      if (log) {
        std::lock_guard lock(log_mutex);
        if (outcomes[i].trace) log("collected " + questions[i].id);
        else log("skipped " + questions[i].id + ": " + outcomes[i].skip_reason);
      }
    }
  };
  const std::size_t n_workers = std::min<std::size_t>(static_cast<std::size_t>(config.max_in_flight),
                                                      std::max<std::size_t>(questions.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  for (auto& th : pool) th.join();

  CollectSummary s;
  s.corpus.header.horizon = config.horizon;
  s.corpus.header.answer_vocab_size = vocab.size();
  s.corpus.header.notes = base_framing_notes();
  for (std::size_t i = 0; i < questions.size(); ++i) {
    if (outcomes[i].trace) s.corpus.traces.push_back(std::move(*outcomes[i].trace));
    else s.skipped.emplace_back(questions[i].id, outcomes[i].skip_reason);
  }
  return s;
}

}  // namespace ccpo
