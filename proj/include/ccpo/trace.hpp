#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ccpo {

/// Integer token over a finite answer vocabulary.
using AnswerId = std::int32_t;

/// One round of a pre-materialized interaction: both agents' outputs and their token usage.
struct RoundRecord {
  AnswerId base_answer = 0;
  bool guide_agrees = false;
  AnswerId guide_answer = 0;
  double guide_uncertainty = 0.0;
  std::int64_t base_tokens_in = 0;
  std::int64_t base_tokens_out = 0;
  std::int64_t guide_tokens_in = 0;
  std::int64_t guide_tokens_out = 0;

  bool operator==(const RoundRecord&) const = default;
};

/// A question's full replay record. `solvable_hint` is diagnostic only and never reaches a policy.
struct Trace {
  std::string question_id;
  AnswerId true_answer = 0;
  std::vector<RoundRecord> rounds;
  std::optional<bool> solvable_hint;

  int horizon() const noexcept { return static_cast<int>(rounds.size()); }
  bool operator==(const Trace&) const = default;
};

/// Corpus-wide declarations carried by the header line of a trace file.
struct TraceHeader {
  int horizon = 4;
  int answer_vocab_size = 2;
  /// Free-form provenance text (the collector stores its base-model framing here).
  std::string notes;

  bool operator==(const TraceHeader&) const = default;
};

struct TraceCorpus {
  TraceHeader header;
  std::vector<Trace> traces;
};

/// Per-token prices in cents.
struct PriceTable {
  double base_in = 0.0;
  double base_out = 0.0;
  double guide_in = 0.0;
  double guide_out = 0.0;

  void validate() const;
};

/// Which model calls were issued during a step.
struct CallSet {
  bool base = true;
  bool guide = true;
};

/// API cost in cents of the calls made during one round.
double step_cost(const RoundRecord& record, CallSet calls, const PriceTable& prices);

/// Throws ValidationError naming the first field that breaks an invariant.
void validate_trace(const Trace& trace, const TraceHeader& header);

/// Reads a newline-delimited trace file (header line first). Order is preserved.
TraceCorpus load_traces(const std::filesystem::path& path);
TraceCorpus parse_traces(std::string_view text);

void save_traces(const std::filesystem::path& path, const TraceCorpus& corpus);
std::string serialize_traces(const TraceCorpus& corpus);

/// Knobs of the synthetic corpus generator. Probabilities live in [0,1].
struct SyntheticConfig {
  int num_traces = 1000;
  int horizon = 4;
  int answer_vocab_size = 64;
  /// Question difficulty ~ Beta(difficulty_alpha, difficulty_beta).
  double difficulty_alpha = 2.0;
  double difficulty_beta = 2.0;
  /// P(base correct at round t) = min(1, base_initial + base_gain (t-1)) * (1 - base_difficulty_weight d).
  double base_initial = 0.45;
  double base_gain = 0.10;
  double base_difficulty_weight = 0.8;
  /// P(guide's corrected answer is right | it rejects a wrong base answer), scaled by (1 - guide_difficulty_weight d).
  double guide_correct_prob = 0.85;
  double guide_difficulty_weight = 0.5;
  /// P(guide's yes/no judgment matches base correctness).
  double guide_judgment_accuracy = 0.85;
  /// Std-dev of the Gaussian noise added to the guide uncertainty score.
  double uncertainty_noise = 0.15;
  double unsolvable_fraction = 0.1;
  /// Wrong answers for a question are drawn from this many per-question distractors.
  int distractors = 3;
  double question_tokens_mean = 40.0;
  double base_prompt_tokens = 120.0;
  double base_context_growth = 110.0;
  double base_tokens_out_mean = 90.0;
  double guide_prompt_tokens = 60.0;
  double guide_tokens_out_agree = 2.0;
  double guide_tokens_out_disagree = 6.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Deterministic given `config.seed`.
TraceCorpus generate_synthetic(const SyntheticConfig& config);

}  // namespace ccpo
