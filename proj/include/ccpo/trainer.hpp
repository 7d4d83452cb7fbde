#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ccpo/calibrator.hpp"
#include "ccpo/conformal.hpp"
#include "ccpo/cpo.hpp"
#include "ccpo/trace.hpp"
#include "ccpo/vtrace.hpp"

namespace ccpo {

enum class Method { Ccpo, Random, FixedThreshold, Cpo, CpoBatch, CpoOnline };

std::string_view to_string(Method m) noexcept;
Method method_from_string(std::string_view s);

/// How evaluation charges conformal policies.
enum class CostAccounting {
  /// Every visited round's calls, i.e. what executing all branches costs.
  AllBranches,
  /// One path drawn uniformly from the sets at each round.
  SampledPath,
};

std::string_view to_string(CostAccounting c) noexcept;
CostAccounting cost_accounting_from_string(std::string_view s);

/// Guide prices in the ballpark of a large hosted model; the base model is free.
inline PriceTable default_prices() { return PriceTable{0.0, 0.0, 2.5e-4, 1e-3}; }

struct RunConfig {
  Method method = Method::Ccpo;
  double alpha = 0.1;
  double lambda = 0.0;
  int horizon = 4;
  double epsilon = 0.01;
  double xi = 0.1;
  double eta0 = 0.05;
  double kappa0 = 0.3;
  double rho_bar = 1.0;
  double critic_lr = 1e-3;
  int width = 64;
  int depth = 3;
  int batch_size = 10;
  int iterations = 1500;
  std::uint64_t seed = 0;
  double token_scale = kDefaultTokenScale;
  PriceTable prices = default_prices();
  CalibratorMode calibrator_mode = CalibratorMode::SetEnlarging;
  BoundMode bound_mode = BoundMode::Union;
  double calibration_granularity = 1e-6;
  TrustRegionConfig trust_region;
  CostAccounting cost_accounting = CostAccounting::AllBranches;
  /// Fixed-threshold cutoffs on guide uncertainty; negative means grid-search them on the calibration split.
  double fixed_lo = -1.0;
  double fixed_hi = -1.0;
  double fixed_grid = 0.05;

  void validate() const;
};

struct MetricsRecord {
  /// Total cost over the evaluated episodes, in cents.
  double cost_cents = 0.0;
  double coverage = 0.0;
  double avg_len = 0.0;
  double set_size = 0.0;
  long n_episodes = 0;

  bool operator==(const MetricsRecord&) const = default;
};

struct IterationLog {
  int iteration = 0;
  double mean_cost = 0.0;
  double objective = 0.0;
  /// Hard bound estimate on the batch (pointwise coverage for the Score target).
  double jbar = 0.0;
  double slack = 0.0;
  double soft_coverage_before = 0.0;
  double soft_coverage_after = 0.0;
  double kl = 0.0;
  double score_kl = 0.0;
  double step_norm = 0.0;
  StepCase step_case = StepCase::Inactive;
  int backtracks = 0;
  bool accepted = false;
  double kappa = 0.0;
  double eta = 0.0;
  double batch_coverage = 0.0;
  double mean_set_size = 0.0;
  double value_loss = 0.0;
  double constraint_loss = 0.0;
};

/// One JSON object, no trailing newline. Stable byte output for identical inputs.
std::string to_json_line(const IterationLog& log);

/// Everything needed to continue training exactly where it stopped.
struct TrainerState {
  Method method = Method::Ccpo;
  FlatParams policy;
  CriticPair critics;
  /// Online threshold (CCPO's training kappa, or the CPO-online kappa).
  CalibratorState calibrator;
  std::mt19937_64 rng;
  /// Completed iterations.
  int iteration = 0;
};

TrainerState init_state(const RunConfig& config);

using LogSink = std::function<void(const IterationLog&)>;

/// Runs one iteration of the loop on `train` and advances `state`. Throws NumericError carrying the iteration.
IterationLog train_iteration(TrainerState& state, const RunConfig& config, std::span<const Trace> train);

/// Iterates until state.iteration == config.iterations.
std::vector<IterationLog> train_until(TrainerState& state, const RunConfig& config, std::span<const Trace> train,
                                      const LogSink& sink = {});

struct FixedThresholdRule {
  double lo = 0.0;
  double hi = 1.0;
};

/// u < lo: base answer; lo <= u <= hi: guide answer; u > hi: next round (guide answer at the horizon).
Action fixed_threshold_action(const FixedThresholdRule& rule, const Observation& obs);

/// Grid search for the cheapest cutoffs reaching 1 - alpha on `traces`; falls back to the best coverage.
FixedThresholdRule tune_fixed_threshold(std::span<const Trace> traces, const RunConfig& config);

/// Output of a training run: the score network and the thresholds each derived method uses.
struct TrainResult {
  TrainerState state;
  std::vector<IterationLog> logs;
  /// Batch-calibrated final threshold (CCPO and cpo-batch).
  double kappa = 0.0;
  CalibrationReport calibration;
  /// Online threshold at the end of training (cpo-online).
  double online_kappa = 0.0;
  std::optional<FixedThresholdRule> fixed_rule;
};

/// Conformal training loop followed by batch calibration of the final threshold.
TrainResult run_ccpo(const RunConfig& config, std::span<const Trace> train, std::span<const Trace> calibration,
                     const LogSink& sink = {});

/// random, fixed-threshold, or the pointwise CPO run (which also yields the cpo-batch and cpo-online thresholds).
TrainResult run_baseline(Method kind, const RunConfig& config, std::span<const Trace> train,
                         std::span<const Trace> calibration, const LogSink& sink = {});

/// Continues `state` to config.iterations and finalizes like run_ccpo/run_baseline.
TrainResult resume(TrainerState state, const RunConfig& config, std::span<const Trace> train,
                   std::span<const Trace> calibration, const LogSink& sink = {});

/// Set-valued rule evaluated by branch enumeration.
MetricsRecord evaluate(const ConformalSetFn& rule, std::span<const Trace> traces, const PriceTable& prices,
                       double token_scale = kDefaultTokenScale, CostAccounting accounting = CostAccounting::AllBranches,
                       std::mt19937_64* rng = nullptr);

/// Conformal policy with score network `score` and threshold `kappa`.
MetricsRecord evaluate_conformal(const FlatParams& score, double kappa, std::span<const Trace> traces,
                                 const RunConfig& config);

/// The method's decision rule as a set function. `rng` backs the random baseline and must outlive the function.
ConformalSetFn method_rule(Method method, const TrainResult& result, std::mt19937_64& rng);

MetricsRecord evaluate_method(Method method, const TrainResult& result, std::span<const Trace> traces,
                              const RunConfig& config);

/// Contiguous train / calibration / test split: test takes the tail, calibration the block before it.
struct DataSplit {
  std::vector<Trace> train;
  std::vector<Trace> calibration;
  std::vector<Trace> test;
};

DataSplit split_corpus(const std::vector<Trace>& traces, std::size_t calibration_size, std::size_t test_size);

/// CSV header and row used by the evaluation output.
std::string csv_header();
std::string csv_row(Method method, const RunConfig& config, const MetricsRecord& m);

}  // namespace ccpo
