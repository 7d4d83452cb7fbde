#include "ccpo/trace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ccpo/error.hpp"

namespace ccpo {

using nlohmann::json;

namespace {

constexpr const char* kFormatTag = "ccpo-traces";
constexpr int kFormatVersion = 1;

void require_probability(const char* field, double value) {
  if (!(value >= 0.0 && value <= 1.0)) throw ValidationError(field, "must lie in [0,1]");
}

json round_to_json(const RoundRecord& r) {
  return json{{"base_answer", r.base_answer},         {"guide_agrees", r.guide_agrees},
              {"guide_answer", r.guide_answer},       {"guide_uncertainty", r.guide_uncertainty},
              {"base_tokens_in", r.base_tokens_in},   {"base_tokens_out", r.base_tokens_out},
              {"guide_tokens_in", r.guide_tokens_in}, {"guide_tokens_out", r.guide_tokens_out}};
}

json trace_to_json(const Trace& t) {
  json rounds = json::array();
  for (const auto& r : t.rounds) rounds.push_back(round_to_json(r));
  json j{{"question_id", t.question_id}, {"true_answer", t.true_answer}, {"rounds", std::move(rounds)}};
  j["solvable_hint"] = t.solvable_hint ? json(*t.solvable_hint) : json(nullptr);
  return j;
}

template <typename T>
T get_field(const json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(line, std::string("missing field '") + key + "'");
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (it->is_boolean()) return it->template get<bool>();
      if (it->is_number_integer()) {
        auto v = it->template get<std::int64_t>();
        if (v == 0 || v == 1) return v == 1;
      }
      throw ParseError(line, std::string("field '") + key + "' must be a bit");
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_integer()) throw ParseError(line, std::string("field '") + key + "' must be an integer");
      return it->template get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw ParseError(line, std::string("field '") + key + "' must be a number");
      return it->template get<T>();
    } else {
      if (!it->is_string()) throw ParseError(line, std::string("field '") + key + "' must be a string");
      return it->template get<T>();
    }
  } catch (const json::exception& e) {
    throw ParseError(line, std::string("field '") + key + "': " + e.what());
  }
}

Trace trace_from_json(const json& j, std::size_t line) {
  if (!j.is_object()) throw ParseError(line, "record is not an object");
  Trace t;
  auto qid = j.find("question_id");
  if (qid == j.end()) throw ParseError(line, "missing field 'question_id'");
  t.question_id = qid->is_string() ? qid->get<std::string>() : qid->dump();
  t.true_answer = get_field<AnswerId>(j, "true_answer", line);
  auto rounds = j.find("rounds");
  if (rounds == j.end() || !rounds->is_array()) throw ParseError(line, "field 'rounds' must be an array");
  for (const auto& r : *rounds) {
    if (!r.is_object()) throw ParseError(line, "round is not an object");
    RoundRecord rec;
    rec.base_answer = get_field<AnswerId>(r, "base_answer", line);
    rec.guide_agrees = get_field<bool>(r, "guide_agrees", line);
    rec.guide_answer = get_field<AnswerId>(r, "guide_answer", line);
    rec.guide_uncertainty = get_field<double>(r, "guide_uncertainty", line);
    rec.base_tokens_in = get_field<std::int64_t>(r, "base_tokens_in", line);
    rec.base_tokens_out = get_field<std::int64_t>(r, "base_tokens_out", line);
    rec.guide_tokens_in = get_field<std::int64_t>(r, "guide_tokens_in", line);
    rec.guide_tokens_out = get_field<std::int64_t>(r, "guide_tokens_out", line);
    t.rounds.push_back(rec);
  }
  auto hint = j.find("solvable_hint");
  if (hint != j.end() && !hint->is_null()) t.solvable_hint = get_field<bool>(j, "solvable_hint", line);
  return t;
}

TraceHeader header_from_json(const json& j, std::size_t line) {
  if (!j.is_object() || j.value("format", "") != kFormatTag)
    throw ParseError(line, std::string("expected a '") + kFormatTag + "' header record");
  if (get_field<int>(j, "version", line) != kFormatVersion) throw ParseError(line, "unsupported trace format version");
  TraceHeader h;
  h.horizon = get_field<int>(j, "horizon", line);
  h.answer_vocab_size = get_field<int>(j, "answer_vocab_size", line);
  if (auto it = j.find("notes"); it != j.end() && it->is_string()) h.notes = it->get<std::string>();
  if (h.horizon < 1) throw ValidationError("horizon", "must be >= 1");
  if (h.answer_vocab_size < 1) throw ValidationError("answer_vocab_size", "must be >= 1");
  return h;
}

}  // namespace

void PriceTable::validate() const {
  auto check = [](const char* field, double v) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError(field, "price must be finite and >= 0");
  };
  check("base_in", base_in);
  check("base_out", base_out);
  check("guide_in", guide_in);
  check("guide_out", guide_out);
}

double step_cost(const RoundRecord& record, CallSet calls, const PriceTable& prices) {
  double cost = 0.0;
  if (calls.base)
    cost += static_cast<double>(record.base_tokens_in) * prices.base_in +
            static_cast<double>(record.base_tokens_out) * prices.base_out;
  if (calls.guide)
    cost += static_cast<double>(record.guide_tokens_in) * prices.guide_in +
            static_cast<double>(record.guide_tokens_out) * prices.guide_out;
  return cost;
}

void validate_trace(const Trace& trace, const TraceHeader& header) {
  if (trace.horizon() != header.horizon)
    throw ValidationError("rounds", "expected " + std::to_string(header.horizon) + " rounds, found " +
                                        std::to_string(trace.horizon()));
  auto in_vocab = [&](AnswerId a) { return a >= 0 && a < header.answer_vocab_size; };
  if (!in_vocab(trace.true_answer)) throw ValidationError("true_answer", "answer id outside vocabulary");
  for (std::size_t i = 0; i < trace.rounds.size(); ++i) {
    const auto& r = trace.rounds[i];
    const std::string where = "rounds[" + std::to_string(i) + "].";
    if (!in_vocab(r.base_answer)) throw ValidationError(where + "base_answer", "answer id outside vocabulary");
    if (!in_vocab(r.guide_answer)) throw ValidationError(where + "guide_answer", "answer id outside vocabulary");
    if (!(r.guide_uncertainty >= 0.0 && r.guide_uncertainty <= 1.0))
      throw ValidationError(where + "guide_uncertainty", "must lie in [0,1]");
    if (r.guide_agrees && r.guide_answer != r.base_answer)
      throw ValidationError(where + "guide_answer", "must equal base_answer when guide_agrees");
    if (r.base_tokens_in < 0) throw ValidationError(where + "base_tokens_in", "must be >= 0");
    if (r.base_tokens_out < 0) throw ValidationError(where + "base_tokens_out", "must be >= 0");
    if (r.guide_tokens_in < 0) throw ValidationError(where + "guide_tokens_in", "must be >= 0");
    if (r.guide_tokens_out < 0) throw ValidationError(where + "guide_tokens_out", "must be >= 0");
  }
}

TraceCorpus parse_traces(std::string_view text) {
  TraceCorpus corpus;
  bool have_header = false;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
      if (end == text.size()) break;
      continue;
    }
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(line_no, std::string("malformed record: ") + e.what());
    }
    if (!have_header) {
      corpus.header = header_from_json(j, line_no);
      have_header = true;
      continue;
    }
    Trace t = trace_from_json(j, line_no);
    try {
      validate_trace(t, corpus.header);
    } catch (const ValidationError& e) {
      throw ValidationError(e.field(), std::string("line ") + std::to_string(line_no) + ": " + e.what());
    }
    corpus.traces.push_back(std::move(t));
    if (end == text.size()) break;
  }
  if (!have_header) throw ParseError(line_no == 0 ? 1 : line_no, "missing header record");
  return corpus;
}

TraceCorpus load_traces(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open trace file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_traces(buf.str());
}

std::string serialize_traces(const TraceCorpus& corpus) {
  std::string out;
  json header{{"format", kFormatTag},
              {"version", kFormatVersion},
              {"horizon", corpus.header.horizon},
              {"answer_vocab_size", corpus.header.answer_vocab_size}};
  if (!corpus.header.notes.empty()) header["notes"] = corpus.header.notes;
  out += header.dump();
  out += '\n';
  for (const auto& t : corpus.traces) {
    out += trace_to_json(t).dump();
    out += '\n';
  }
  return out;
}

void save_traces(const std::filesystem::path& path, const TraceCorpus& corpus) {
  for (const auto& t : corpus.traces) validate_trace(t, corpus.header);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write trace file " + path.string());
  out << serialize_traces(corpus);
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void SyntheticConfig::validate() const {
  if (num_traces < 0) throw ValidationError("num_traces", "must be >= 0");
  if (horizon < 1) throw ValidationError("horizon", "must be >= 1");
  if (distractors < 1) throw ValidationError("distractors", "must be >= 1");
  if (answer_vocab_size < distractors + 1)
    throw ValidationError("answer_vocab_size", "must exceed the distractor count");
  if (!(difficulty_alpha > 0.0)) throw ValidationError("difficulty_alpha", "must be > 0");
  if (!(difficulty_beta > 0.0)) throw ValidationError("difficulty_beta", "must be > 0");
  require_probability("base_initial", base_initial);
  if (!(base_gain >= 0.0)) throw ValidationError("base_gain", "must be >= 0 (correctness is nondecreasing in t)");
  require_probability("base_difficulty_weight", base_difficulty_weight);
  require_probability("guide_correct_prob", guide_correct_prob);
  require_probability("guide_difficulty_weight", guide_difficulty_weight);
  require_probability("guide_judgment_accuracy", guide_judgment_accuracy);
  require_probability("unsolvable_fraction", unsolvable_fraction);
  if (!(uncertainty_noise >= 0.0)) throw ValidationError("uncertainty_noise", "must be >= 0");
  for (double v : {question_tokens_mean, base_prompt_tokens, base_context_growth, base_tokens_out_mean,
                   guide_prompt_tokens, guide_tokens_out_agree, guide_tokens_out_disagree})
    if (!(v >= 0.0)) throw ValidationError("tokens", "token means must be >= 0");
}

namespace {

struct QuestionDraw {
  std::vector<RoundRecord> rounds;
  bool contains_truth = false;
};

class SyntheticSampler {
 public:
  explicit SyntheticSampler(const SyntheticConfig& c) : c_(c), rng_(c.seed) {}

  Trace next(int index) {
    Trace t;
    t.question_id = "synth-" + std::to_string(index);
    t.true_answer = uniform_int(0, c_.answer_vocab_size - 1);
    const std::vector<AnswerId> pool = distractor_pool(t.true_answer);
    const double d = beta(c_.difficulty_alpha, c_.difficulty_beta);
    const bool solvable = !bernoulli(c_.unsolvable_fraction);
    const std::int64_t question_tokens = poisson(c_.question_tokens_mean);

    // Solvable questions are conditioned on the truth showing up in some round.
    QuestionDraw draw;
    for (int attempt = 0; attempt < 64; ++attempt) {
      draw = draw_rounds(t.true_answer, pool, d, solvable, question_tokens);
      if (!solvable || draw.contains_truth) break;
    }
    if (solvable && !draw.contains_truth) {
      auto& last = draw.rounds.back();
      last.guide_agrees = false;
      last.guide_answer = t.true_answer;
    }
    t.rounds = std::move(draw.rounds);
    t.solvable_hint = solvable;
    return t;
  }

 private:
  QuestionDraw draw_rounds(AnswerId truth, const std::vector<AnswerId>& pool, double d, bool solvable,
                           std::int64_t question_tokens) {
    QuestionDraw out;
    std::int64_t context = 0;
    for (int t = 1; t <= c_.horizon; ++t) {
      RoundRecord r;
      const double p_base = std::min(1.0, c_.base_initial + c_.base_gain * (t - 1)) *
                            (1.0 - c_.base_difficulty_weight * d);
      const bool base_correct = solvable && bernoulli(p_base);
      r.base_answer = base_correct ? truth : pick(pool);

      const bool judged_right = bernoulli(c_.guide_judgment_accuracy);
      r.guide_agrees = judged_right ? base_correct : !base_correct;
      if (r.guide_agrees) {
        r.guide_answer = r.base_answer;
      } else {
        const double p_fix = c_.guide_correct_prob * (1.0 - c_.guide_difficulty_weight * d);
        if (solvable && !base_correct && bernoulli(p_fix)) {
          r.guide_answer = truth;
        } else {
          r.guide_answer = pick_other(pool, r.base_answer);
        }
      }
      const bool guide_correct = r.guide_answer == truth;
      const double centre = (guide_correct ? 0.25 : 0.6) + 0.2 * d;
      r.guide_uncertainty = std::clamp(centre + c_.uncertainty_noise * normal(), 0.0, 1.0);

      r.base_tokens_in = static_cast<std::int64_t>(c_.base_prompt_tokens) + question_tokens + context;
      r.base_tokens_out = poisson(c_.base_tokens_out_mean);
      r.guide_tokens_in = static_cast<std::int64_t>(c_.guide_prompt_tokens) + question_tokens + r.base_tokens_out;
      r.guide_tokens_out = poisson(r.guide_agrees ? c_.guide_tokens_out_agree : c_.guide_tokens_out_disagree);
      context += poisson(c_.base_context_growth);

      out.contains_truth = out.contains_truth || r.base_answer == truth || r.guide_answer == truth;
      out.rounds.push_back(r);
    }
    return out;
  }

  std::vector<AnswerId> distractor_pool(AnswerId truth) {
    std::vector<AnswerId> pool;
    while (static_cast<int>(pool.size()) < c_.distractors) {
      AnswerId a = uniform_int(0, c_.answer_vocab_size - 1);
      if (a != truth && std::find(pool.begin(), pool.end(), a) == pool.end()) pool.push_back(a);
    }
    return pool;
  }

  AnswerId pick(const std::vector<AnswerId>& pool) {
    return pool[static_cast<std::size_t>(uniform_int(0, static_cast<int>(pool.size()) - 1))];
  }
  AnswerId pick_other(const std::vector<AnswerId>& pool, AnswerId avoid) {
    if (pool.size() == 1) return pool.front();
    for (;;) {
      AnswerId a = pick(pool);
      if (a != avoid) return a;
    }
  }

  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  bool bernoulli(double p) { return std::bernoulli_distribution(p)(rng_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(rng_); }
  std::int64_t poisson(double mean) {
    if (mean <= 0.0) return 0;
    return std::poisson_distribution<std::int64_t>(mean)(rng_);
  }
  double beta(double a, double b) {
    const double x = std::gamma_distribution<double>(a, 1.0)(rng_);
    const double y = std::gamma_distribution<double>(b, 1.0)(rng_);
    return x + y > 0.0 ? x / (x + y) : 0.5;
  }

  const SyntheticConfig& c_;
  std::mt19937_64 rng_;
};

}  // namespace

TraceCorpus generate_synthetic(const SyntheticConfig& config) {
  config.validate();
  TraceCorpus corpus;
  corpus.header.horizon = config.horizon;
  corpus.header.answer_vocab_size = config.answer_vocab_size;
  corpus.traces.reserve(static_cast<std::size_t>(config.num_traces));
  SyntheticSampler sampler(config);
  for (int i = 0; i < config.num_traces; ++i) corpus.traces.push_back(sampler.next(i));
  return corpus;
}

}  // namespace ccpo
