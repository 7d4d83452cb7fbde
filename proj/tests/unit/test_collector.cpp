#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "ccpo/collector.hpp"
#include "ccpo/error.hpp"

using namespace ccpo;

namespace {

std::string reply_json(const std::string& content, long in, long out, std::optional<double> logprob = {}) {
  nlohmann::json j{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}},
                   {"usage", {{"prompt_tokens", in}, {"completion_tokens", out}}}};
  if (logprob) j["choices"][0]["logprobs"] = {{"content", {{{"token", "x"}, {"logprob", *logprob}}}}};
  return j.dump();
}

/// Answers base calls with a fixed answer and guide calls with a fixed reply; can fail the first few calls.
class ScriptedClient : public ChatClient {
 public:
  std::string base_answer = "Paris";
  std::string guide_reply = "Yes";
  std::optional<double> logprob;
  int fail_first = 0;
  std::atomic<int> calls{0};
  std::atomic<int> in_flight{0};
  std::atomic<int> max_in_flight{0};
  std::mutex mu;
  std::vector<ChatRequest> seen;

  ChatResponse complete(const EndpointConfig& endpoint, const ChatRequest& request) override {
    const int now = ++in_flight;
    int prev = max_in_flight.load();
    while (now > prev && !max_in_flight.compare_exchange_weak(prev, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
    struct Leave {
      std::atomic<int>& n;
      ~Leave() { --n; }
    } leave{in_flight};
    {
      std::lock_guard lock(mu);
      seen.push_back(request);
    }
    if (calls++ < fail_first) throw std::runtime_error("connection refused");
    if (endpoint.model == "guide") return parse_chat_response(reply_json(guide_reply, 40, 2, logprob));
    return parse_chat_response(reply_json(base_answer, 30, 3));
  }
};

CollectorConfig config_for_tests() {
  CollectorConfig c;
  c.base = EndpointConfig{"http://127.0.0.1:1/v1/chat/completions", "base", ""};
  c.guide = EndpointConfig{"http://127.0.0.1:1/v1/chat/completions", "guide", ""};
  c.retry_backoff_ms = 0;
  c.retries = 2;
  c.horizon = 3;
  return c;
}

const std::vector<Question> kQuestions{{"q1", "Capital of France?", "Paris"}, {"q2", "Capital of Italy?", "Rome"}};

}  // namespace

TEST_SUITE("collector") {
  TEST_CASE("answer normalization and vocabulary") {
    CHECK(normalize_answer("  The Eiffel-Tower! ") == "eiffel tower");
    CHECK(normalize_answer("An apple") == "apple");
    const AnswerVocabulary v(kQuestions);
    CHECK(v.size() == 3);
    CHECK(v.id("paris.") == 1);
    CHECK(v.id("ROME") == 2);
    CHECK(v.id("Berlin") == AnswerVocabulary::kEscapeAnswer);
  }

  TEST_CASE("guide replies") {
    CHECK(parse_guide_reply("Yes").agrees);
    CHECK(parse_guide_reply("yes, that is right").agrees);
    CHECK(parse_guide_reply("No [Rome]").corrected == "Rome");
    CHECK(parse_guide_reply("No: Rome").corrected == "Rome");
    CHECK_FALSE(parse_guide_reply("no Rome").agrees);
    CHECK_THROWS_AS(parse_guide_reply("Nope"), ParseError);
    CHECK_THROWS_AS(parse_guide_reply("No"), ParseError);
    CHECK_THROWS_AS(parse_guide_reply("Maybe"), ParseError);
  }

  TEST_CASE("prompt templates") {
    CHECK(guide_prompt("Q?", "A") ==
          "Evaluate the answer.\n- If correct, reply \"Yes\".\n- If incorrect, reply \"No [correct answer]\" (only "
          "the correct answer, nothing else).\nQ: Q?\nA: A\nYour response:");
    const std::string b = base_prompt("Q?", {{"x", "No [y]"}});
    CHECK(b.find("Attempt 1: x\nReviewer: No [y]\n") != std::string::npos);
    CHECK(base_prompt("Q?", {}).find("Attempt") == std::string::npos);
  }

  TEST_CASE("chat json") {
    const auto j = nlohmann::json::parse(chat_request_json(ChatRequest{"m", "hi", 0.5, true}));
    CHECK(j["model"] == "m");
    CHECK(j["messages"][0]["content"] == "hi");
    CHECK(j["logprobs"] == true);
    const ChatResponse r = parse_chat_response(reply_json("Yes", 10, 1, -0.1));
    CHECK(r.content == "Yes");
    CHECK(r.prompt_tokens == 10);
    CHECK(*r.first_token_logprob == doctest::Approx(-0.1));
    CHECK_THROWS_AS(parse_chat_response(R"({"choices":[{"message":{"content":"x"}}]})"), ParseError);
    CHECK_THROWS_AS(parse_chat_response("not json"), ParseError);
  }

  TEST_CASE("collector keys") {
    const CollectorConfig c = collector_config_from({{"collector.base_url", "http://h/v1/chat/completions"},
                                                     {"collector.retries", "5"},
                                                     {"collector.uncertainty", "agreement"},
                                                     {"alpha", "0.1"}});
    CHECK(c.retries == 5);
    CHECK(c.estimator == UncertaintyEstimator::Agreement);
    CHECK_THROWS_AS(collector_config_from({{"collector.colour", "x"}}), ValidationError);
    CHECK_THROWS_AS(collector_config_from({{"collector.retries", "1.5"}}), ValidationError);
    CHECK_THROWS_AS(c.validate(), ValidationError);
    CHECK_NOTHROW(config_for_tests().validate());
  }

  TEST_CASE("question file") {
    const auto path = std::filesystem::temp_directory_path() / "ccpo_questions.jsonl";
    std::ofstream(path) << R"({"id":"a","question":"q","answer":"x"})" << "\n\n" << R"({"id":"b"})" << "\n";
    try {
      load_questions(path);
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
    }
    std::filesystem::remove(path);
  }

  TEST_CASE("one question produces a valid trace") {
    ScriptedClient client;
    client.logprob = std::log(0.9);
    const AnswerVocabulary vocab(kQuestions);
    const CollectOutcome o = collect_trace(kQuestions[0], vocab, config_for_tests(), client);
    REQUIRE(o.trace.has_value());
    CHECK(o.trace->rounds.size() == 3);
    CHECK(o.trace->true_answer == 1);
    const RoundRecord& r = o.trace->rounds[0];
    CHECK(r.base_answer == 1);
    CHECK(r.guide_agrees);
    CHECK(r.guide_answer == 1);
    CHECK(r.guide_uncertainty == doctest::Approx(0.1));
    CHECK(r.base_tokens_in == 30);
    CHECK(r.guide_tokens_out == 2);
    // Greedy first round, sampled afterward; guide always greedy with logprobs.
    CHECK(client.seen[0].temperature == 0.0);
    CHECK(client.seen[1].logprobs);
    CHECK(client.seen[2].temperature == 1.0);
    CHECK(client.seen[2].prompt.find("Reviewer: Yes") != std::string::npos);
  }

  TEST_CASE("disagreement and the fallback uncertainty") {
    ScriptedClient client;
    client.guide_reply = "No [Rome]";
    CollectorConfig cfg = config_for_tests();
    const CollectOutcome o = collect_trace(kQuestions[1], AnswerVocabulary(kQuestions), cfg, client);
    REQUIRE(o.trace);
    CHECK_FALSE(o.trace->rounds[0].guide_agrees);
    CHECK(o.trace->rounds[0].guide_answer == 2);
    CHECK(o.trace->rounds[0].guide_uncertainty == 0.8);
  }

  TEST_CASE("transient failures are retried and persistent ones skip the question") {
    ScriptedClient flaky;
    flaky.fail_first = 2;
    CHECK(collect_trace(kQuestions[0], AnswerVocabulary(kQuestions), config_for_tests(), flaky).trace.has_value());

    ScriptedClient dead;
    dead.fail_first = 1000;
    const CollectOutcome o = collect_trace(kQuestions[0], AnswerVocabulary(kQuestions), config_for_tests(), dead);
    CHECK_FALSE(o.trace.has_value());
    CHECK(o.skip_reason.find("connection refused") != std::string::npos);
    CHECK(dead.calls == 3);

    ScriptedClient chatty;
    chatty.guide_reply = "I think so";
    const CollectOutcome p = collect_trace(kQuestions[0], AnswerVocabulary(kQuestions), config_for_tests(), chatty);
    CHECK_FALSE(p.trace.has_value());
    CHECK(chatty.calls == 1 + 3);
  }

  TEST_CASE("corpus keeps input order and bounds concurrency") {
    std::vector<Question> qs;
    for (int i = 0; i < 12; ++i) qs.push_back({"q" + std::to_string(i), "Capital?", i % 2 ? "Paris" : "Rome"});
    ScriptedClient client;
    CollectorConfig cfg = config_for_tests();
    cfg.max_in_flight = 3;
    std::vector<std::string> messages;
    const CollectSummary s = collect_corpus(qs, cfg, client, [&](std::string_view m) { messages.emplace_back(m); });
    REQUIRE(s.corpus.traces.size() == 12);
    for (int i = 0; i < 12; ++i) CHECK(s.corpus.traces[static_cast<std::size_t>(i)].question_id == "q" + std::to_string(i));
    CHECK(client.max_in_flight <= 3);
    CHECK(messages.size() == 12);
    CHECK(s.corpus.header.answer_vocab_size == 3);
    CHECK_FALSE(s.corpus.header.notes.empty());
  }

  TEST_CASE("http client talks to a chat endpoint") {
    httplib::Server server;
    std::string seen_auth;
    std::mutex mu;
    int hits = 0;
    server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mu);
      ++hits;
      seen_auth = req.get_header_value("Authorization");
      const auto body = nlohmann::json::parse(req.body);
      if (body["model"] == "broken") {
        res.status = 500;
        return;
      }
      res.set_content(reply_json("Yes", 11, 1, -0.05), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    ::setenv("CCPO_TEST_KEY", "sk-secret-123", 1);
    const std::string url = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
    HttpChatClient client(5.0);
    const ChatResponse r = client.complete(EndpointConfig{url, "guide", "CCPO_TEST_KEY"}, ChatRequest{"guide", "hi", 0.0, true});
    CHECK(r.content == "Yes");
    CHECK(r.prompt_tokens == 11);
    CHECK(seen_auth == "Bearer sk-secret-123");

    try {
      client.complete(EndpointConfig{url, "broken", "CCPO_TEST_KEY"}, ChatRequest{"broken", "hi", 0.0, false});
      FAIL("expected an HTTP error");
    } catch (const std::runtime_error& e) {
      const std::string what = e.what();
      CHECK(what.find("500") != std::string::npos);
      CHECK(what.find("sk-secret") == std::string::npos);
    }
    try {
      client.complete(EndpointConfig{url, "guide", "CCPO_UNSET_KEY_VAR"}, ChatRequest{"guide", "hi", 0.0, false});
      FAIL("expected a missing-key error");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("CCPO_UNSET_KEY_VAR") != std::string::npos);
    }

    // End to end through the collector with a skipped question.
    CollectorConfig cfg;
    cfg.base = EndpointConfig{url, "base", ""};
    cfg.guide = EndpointConfig{url, "guide", "CCPO_TEST_KEY"};
    cfg.retries = 1;
    cfg.retry_backoff_ms = 0;
    cfg.horizon = 2;
    const CollectSummary s = collect_corpus({{"q", "Is it?", "Yes"}}, cfg, client);
    CHECK(s.corpus.traces.size() == 1);
    cfg.base.model = "broken";
    const CollectSummary bad = collect_corpus({{"q", "Is it?", "Yes"}}, cfg, client);
    CHECK(bad.corpus.traces.empty());
    REQUIRE(bad.skipped.size() == 1);
    CHECK(bad.skipped[0].second.find("sk-secret") == std::string::npos);
    CHECK(hits >= 4);

    server.stop();
    th.join();
  }
}
