#include "ccpo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "ccpo/error.hpp"

namespace ccpo {

std::string_view to_string(Method m) noexcept {
  switch (m) {
    case Method::Ccpo: return "ccpo";
    case Method::Random: return "random";
    case Method::FixedThreshold: return "fixed-threshold";
    case Method::Cpo: return "cpo";
    case Method::CpoBatch: return "cpo-batch";
    case Method::CpoOnline: return "cpo-online";
  }
  return "?";
}

Method method_from_string(std::string_view s) {
  for (Method m : {Method::Ccpo, Method::Random, Method::FixedThreshold, Method::Cpo, Method::CpoBatch, Method::CpoOnline})
    if (to_string(m) == s) return m;
  throw UsageError("unknown method '" + std::string(s) + "'");
}

std::string_view to_string(CostAccounting c) noexcept {
  return c == CostAccounting::AllBranches ? "all-branches" : "sampled-path";
}

CostAccounting cost_accounting_from_string(std::string_view s) {
  if (s == "all-branches") return CostAccounting::AllBranches;
  if (s == "sampled-path") return CostAccounting::SampledPath;
  throw ValidationError("cost_accounting", "expected all-branches or sampled-path, got '" + std::string(s) + "'");
}

void RunConfig::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha", "must lie in (0,1)");
  if (!(lambda >= 0.0)) throw ValidationError("lambda", "must be >= 0");
  if (horizon < 1) throw ValidationError("horizon", "must be >= 1");
  if (!(epsilon > 0.0)) throw ValidationError("epsilon", "must be > 0");
  if (!(xi > 0.0 && xi < 0.5)) throw ValidationError("xi", "must lie in (0,1/2)");
  if (!(eta0 > 0.0)) throw ValidationError("eta0", "must be > 0");
  if (!(kappa0 >= 0.0 && kappa0 <= 1.0)) throw ValidationError("kappa0", "must lie in [0,1]");
  if (!(rho_bar > 0.0)) throw ValidationError("rho_bar", "must be > 0");
  if (!(critic_lr >= 0.0)) throw ValidationError("critic_lr", "must be >= 0");
  if (width < 1) throw ValidationError("width", "must be >= 1");
  if (depth < 1) throw ValidationError("depth", "must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size", "must be >= 1");
  if (iterations < 0) throw ValidationError("iterations", "must be >= 0");
  if (!(token_scale > 0.0)) throw ValidationError("token_scale", "must be > 0");
  if (!(calibration_granularity > 0.0 && calibration_granularity <= 1.0))
    throw ValidationError("calibration_granularity", "must lie in (0,1]");
  if (!(fixed_grid > 0.0 && fixed_grid <= 1.0)) throw ValidationError("fixed_grid", "must lie in (0,1]");
  const bool tuned = fixed_lo < 0.0 && fixed_hi < 0.0;
  if (!tuned && !(fixed_lo >= 0.0 && fixed_lo <= fixed_hi && fixed_hi <= 1.0))
    throw ValidationError("fixed_lo", "cutoffs must satisfy 0 <= lo <= hi <= 1 (or both negative)");
  prices.validate();
  trust_region.validate();
}

std::string to_json_line(const IterationLog& l) {
  nlohmann::ordered_json j;
  j["iteration"] = l.iteration;
  j["mean_cost"] = l.mean_cost;
  j["objective"] = l.objective;
  j["jbar"] = l.jbar;
  j["slack"] = l.slack;
  j["soft_coverage_before"] = l.soft_coverage_before;
  j["soft_coverage_after"] = l.soft_coverage_after;
  j["kl"] = l.kl;
  j["score_kl"] = l.score_kl;
  j["step_norm"] = l.step_norm;
  j["case"] = std::string(to_string(l.step_case));
  j["backtracks"] = l.backtracks;
  j["accepted"] = l.accepted;
  j["kappa"] = l.kappa;
  j["eta"] = l.eta;
  j["batch_coverage"] = l.batch_coverage;
  j["mean_set_size"] = l.mean_set_size;
  j["value_loss"] = l.value_loss;
  j["constraint_loss"] = l.constraint_loss;
  return j.dump();
}

TrainerState init_state(const RunConfig& config) {
  config.validate();
  TrainerState s;
  s.method = config.method;
  s.rng.seed(config.seed);
  s.policy = init_params(policy_shape(kObservationDim, config.width, config.depth), s.rng);
  s.critics = init_critics(kObservationDim, config.width, config.depth, s.rng);
  s.calibrator.kappa = config.kappa0;
  s.calibrator.eta0 = config.eta0;
  s.calibrator.xi = config.xi;
  s.calibrator.alpha = config.alpha;
  s.calibrator.mode = config.calibrator_mode;
  s.calibrator.validate();
  return s;
}

namespace {

void check_horizon(std::span<const Trace> traces, const RunConfig& config) {
  for (const auto& t : traces)
    if (t.horizon() != config.horizon)
      throw ValidationError("horizon", "trace '" + t.question_id + "' has " + std::to_string(t.horizon()) +
                                           " rounds, config expects " + std::to_string(config.horizon));
}

bool is_conformal_training(Method m) { return m == Method::Ccpo; }

ConformalSetFn threshold_fn(const FlatParams& score, double kappa) {
  return [&score, kappa](const Observation& o) { return conformal_set(policy_forward(score, o.span(), o.legal), kappa); };
}

bool covered_under(const FlatParams& score, double kappa, const Trace& trace, const RunConfig& config) {
  const RolloutTree tree = enumerate_branches(trace, threshold_fn(score, kappa), config.prices, config.token_scale);
  return coverage_indicator(prediction_set(tree), answer_universe(trace), trace.true_answer) == 1;
}

Trajectory rollout(const Trace& trace, std::size_t index, const FlatParams& params, double kappa, bool conformal,
                   const RunConfig& config, std::mt19937_64& rng) {
  Trajectory tr;
  tr.trace_index = index;
  const AnswerSet universe = answer_universe(trace);
  tr.solvable = universe.contains(trace.true_answer);
  int pred_size = 1;
  if (conformal) {
    const RolloutTree tree = enumerate_branches(trace, threshold_fn(params, kappa), config.prices, config.token_scale);
    const AnswerSet pred = prediction_set(tree);
    pred_size = pred.size();
    tr.covered = coverage_indicator(pred, universe, trace.true_answer);
  }
  EpisodeState s = EpisodeState::start(trace);
  while (!s.terminated) {
    const Observation obs = observe(s, config.token_scale);
    const Categorical p = policy_forward(params, obs.span(), obs.legal);
    const Action a = sample_action(p, rng);
    const int ai = index_of(a);
    double target = p[ai];
    int set_size = 1;
    if (conformal) {
      const ActionSet c = conformal_set(p, kappa);
      target = stochastic_conformal(p, kappa)[ai];
      set_size = c.size();
    }
    tr.episode_cost += step_cost(trace.rounds[static_cast<std::size_t>(s.round - 1)], CallSet{}, config.prices);
    const StepResult res = step(s, a, config.prices, config.lambda, pred_size);
    tr.steps.push_back(Transition{obs, a, p[ai], res.reward, 0.0, res.done});
    tr.target_probs.push_back(target);
    tr.rho.push_back(truncated_weight(target, p[ai], config.rho_bar));
    tr.set_sizes.push_back(set_size);
    s = res.state;
  }
  tr.answer_correct = s.chosen_answer == trace.true_answer;
  if (!conformal) tr.covered = (tr.answer_correct || !tr.solvable) ? 1 : 0;
  tr.prediction_set_size = pred_size;
  tr.steps.back().constraint = static_cast<double>(tr.covered);
  return tr;
}

}  // namespace

IterationLog train_iteration(TrainerState& state, const RunConfig& config, std::span<const Trace> train) {
  if (train.empty()) throw UsageError("train_iteration: no training traces");
  if (state.method != Method::Ccpo && state.method != Method::Cpo)
    throw UsageError("train_iteration: method has no training loop");
  IterationLog log;
  log.iteration = state.iteration + 1;
  const bool conformal = is_conformal_training(state.method);
  try {
    const double kappa = state.calibrator.kappa;
    VTraceBatch batch;
    batch.reserve(static_cast<std::size_t>(config.batch_size));
    for (int e = 0; e < config.batch_size; ++e) {
      const std::size_t idx = std::uniform_int_distribution<std::size_t>(0, train.size() - 1)(state.rng);
      batch.push_back(rollout(train[idx], idx, state.policy, kappa, conformal, config, state.rng));
    }
    double covered = 0.0;
    double set_size = 0.0;
    for (const auto& t : batch) {
      log.mean_cost += t.episode_cost;
      covered += t.covered;
      set_size += t.prediction_set_size;
    }
    const double n = static_cast<double>(batch.size());
    log.mean_cost /= n;
    log.batch_coverage = covered / n;
    log.mean_set_size = set_size / n;

    compute_targets(batch, state.critics);
    state.critics = critic_update(state.critics, batch, config.critic_lr);
    compute_targets(batch, state.critics);
    std::tie(log.value_loss, log.constraint_loss) = critic_losses(state.critics, batch);

    SurrogateContext ctx;
    ctx.target = conformal ? TargetKind::SoftConformal : TargetKind::Score;
    ctx.bound = config.bound_mode;
    ctx.kappa = kappa;
    ctx.epsilon = config.epsilon;
    ctx.alpha = config.alpha;
    const SurrogateGradients grads = surrogate_gradients(state.policy, batch, ctx);
    log.objective = grads.objective;
    log.jbar = grads.coverage;
    log.slack = grads.c_slack;

    const FisherOperator fisher = build_fisher(state.policy, batch, ctx, config.trust_region.damping,
                                                config.trust_region.score_kl_weight);
    const LinearOperator fvp = [&fisher](const Eigen::VectorXd& v) { return fisher.apply(v); };
    const TrustRegionStep tr = trust_region_step(grads, fvp, config.trust_region);
    log.step_case = tr.step_case;
    const LineSearchResult ls = line_search(state.policy, tr.delta, batch, ctx, config.trust_region,
                                            tr.step_case != StepCase::Recovery);
    log.accepted = ls.accepted;
    log.backtracks = ls.backtracks;
    log.kl = ls.kl;
    log.score_kl = ls.score_kl;
    log.soft_coverage_before = ls.coverage_before;
    log.soft_coverage_after = ls.coverage_after;
    log.step_norm = (ls.params.values - state.policy.values).norm();
    state.policy = ls.params;

    // Threshold updates, one per episode in batch order, using the updated score network.
    log.eta = step_size(state.calibrator.k, state.calibrator.eta0, state.calibrator.xi);
    for (const auto& t : batch)
      state.calibrator = online_update(state.calibrator, covered_under(state.policy, state.calibrator.kappa,
                                                                       train[t.trace_index], config));
    log.kappa = state.calibrator.kappa;
  } catch (const NumericError& e) {
    throw NumericError(log.iteration, std::string("iteration failed: ") + e.what());
  }
  state.iteration = log.iteration;
  return log;
}

std::vector<IterationLog> train_until(TrainerState& state, const RunConfig& config, std::span<const Trace> train,
                                      const LogSink& sink) {
  check_horizon(train, config);
  std::vector<IterationLog> logs;
  while (state.iteration < config.iterations) {
    logs.push_back(train_iteration(state, config, train));
    if (sink) sink(logs.back());
  }
  return logs;
}

Action fixed_threshold_action(const FixedThresholdRule& rule, const Observation& obs) {
  const double u = obs.guide_uncertainty();
  if (u < rule.lo) return Action::BaseAnswer;
  if (u <= rule.hi || !obs.legal.contains(Action::NextRound)) return Action::GuideAnswer;
  return Action::NextRound;
}

namespace {

ConformalSetFn fixed_fn(FixedThresholdRule rule) {
  return [rule](const Observation& o) { return ActionSet{fixed_threshold_action(rule, o)}; };
}

}  // namespace

FixedThresholdRule tune_fixed_threshold(std::span<const Trace> traces, const RunConfig& config) {
  if (traces.empty()) throw UsageError("tune_fixed_threshold: no traces");
  const int steps = static_cast<int>(std::lround(1.0 / config.fixed_grid));
  FixedThresholdRule best{0.0, 1.0};
  MetricsRecord best_m;
  bool have = false;
  auto better = [&](const MetricsRecord& m) {
    const bool ok = m.coverage >= 1.0 - config.alpha;
    const bool best_ok = best_m.coverage >= 1.0 - config.alpha;
    if (ok != best_ok) return ok;
    if (ok) return m.cost_cents < best_m.cost_cents || (m.cost_cents == best_m.cost_cents && m.coverage > best_m.coverage);
    return m.coverage > best_m.coverage || (m.coverage == best_m.coverage && m.cost_cents < best_m.cost_cents);
  };
  for (int i = 0; i <= steps; ++i) {
    for (int j = i; j <= steps; ++j) {
      const FixedThresholdRule rule{std::min(1.0, i * config.fixed_grid), std::min(1.0, j * config.fixed_grid)};
      const MetricsRecord m = evaluate(fixed_fn(rule), traces, config.prices, config.token_scale);
      if (!have || better(m)) {
        best = rule;
        best_m = m;
        have = true;
      }
    }
  }
  return best;
}

namespace {

TrainResult finalize(TrainerState state, std::vector<IterationLog> logs, const RunConfig& config,
                     std::span<const Trace> calibration) {
  TrainResult r;
  check_horizon(calibration, config);
  r.calibration = batch_calibrate(state.policy, calibration, config.alpha, config.calibration_granularity,
                                  config.token_scale);
  r.kappa = r.calibration.kappa;
  r.online_kappa = state.calibrator.kappa;
  r.state = std::move(state);
  r.logs = std::move(logs);
  return r;
}

}  // namespace

TrainResult run_ccpo(const RunConfig& config, std::span<const Trace> train, std::span<const Trace> calibration,
                     const LogSink& sink) {
  RunConfig c = config;
  c.method = Method::Ccpo;
  TrainerState state = init_state(c);
  auto logs = train_until(state, c, train, sink);
  return finalize(std::move(state), std::move(logs), c, calibration);
}

TrainResult run_baseline(Method kind, const RunConfig& config, std::span<const Trace> train,
                         std::span<const Trace> calibration, const LogSink& sink) {
  RunConfig c = config;
  switch (kind) {
    case Method::Random: {
      c.method = Method::Random;
      TrainResult r;
      r.state = init_state(c);
      return r;
    }
    case Method::FixedThreshold: {
      c.method = Method::FixedThreshold;
      TrainResult r;
      r.state = init_state(c);
      if (c.fixed_lo >= 0.0) {
        r.fixed_rule = FixedThresholdRule{c.fixed_lo, c.fixed_hi};
      } else {
        check_horizon(calibration, c);
        r.fixed_rule = tune_fixed_threshold(calibration, c);
      }
      return r;
    }
    case Method::Cpo:
    case Method::CpoBatch:
    case Method::CpoOnline: {
      c.method = Method::Cpo;
      TrainerState state = init_state(c);
      auto logs = train_until(state, c, train, sink);
      return finalize(std::move(state), std::move(logs), c, calibration);
    }
    case Method::Ccpo:
      return run_ccpo(config, train, calibration, sink);
  }
  throw UsageError("run_baseline: unknown method");
}

TrainResult resume(TrainerState state, const RunConfig& config, std::span<const Trace> train,
                   std::span<const Trace> calibration, const LogSink& sink) {
  if (state.method != Method::Ccpo && state.method != Method::Cpo)
    throw UsageError("resume: only trained methods can be resumed");
  auto logs = train_until(state, config, train, sink);
  return finalize(std::move(state), std::move(logs), config, calibration);
}

MetricsRecord evaluate(const ConformalSetFn& rule, std::span<const Trace> traces, const PriceTable& prices,
                       double token_scale, CostAccounting accounting, std::mt19937_64* rng) {
  if (accounting == CostAccounting::SampledPath && rng == nullptr)
    throw UsageError("evaluate: sampled-path accounting needs an rng");
  MetricsRecord m;
  for (const auto& trace : traces) {
    const RolloutTree tree = enumerate_branches(trace, rule, prices, token_scale);
    const AnswerSet pred = prediction_set(tree);
    m.coverage += coverage_indicator(pred, answer_universe(trace), trace.true_answer);
    m.avg_len += tree.max_length();
    m.set_size += pred.size();
    if (accounting == CostAccounting::AllBranches) {
      m.cost_cents += tree.executed_cost();
    } else {
      for (const auto& node : tree.nodes) {
        m.cost_cents += node.step_cost;
        std::vector<Action> choices;
        for (Action a : kAllActions)
          if (node.actions.contains(a)) choices.push_back(a);
        const Action pick = choices[std::uniform_int_distribution<std::size_t>(0, choices.size() - 1)(*rng)];
        if (is_answer(pick)) break;
      }
    }
    ++m.n_episodes;
  }
  if (m.n_episodes > 0) {
    const double n = static_cast<double>(m.n_episodes);
    m.coverage /= n;
    m.avg_len /= n;
    m.set_size /= n;
  }
  return m;
}

namespace {

std::mt19937_64 eval_rng(const RunConfig& config) { return std::mt19937_64(config.seed ^ 0x9e3779b97f4a7c15ULL); }

}  // namespace

MetricsRecord evaluate_conformal(const FlatParams& score, double kappa, std::span<const Trace> traces,
                                 const RunConfig& config) {
  check_horizon(traces, config);
  std::mt19937_64 rng = eval_rng(config);
  return evaluate(threshold_fn(score, kappa), traces, config.prices, config.token_scale, config.cost_accounting, &rng);
}

ConformalSetFn method_rule(Method method, const TrainResult& result, std::mt19937_64& rng) {
  const FlatParams& score = result.state.policy;
  switch (method) {
    case Method::Ccpo:
    case Method::CpoBatch:
      return threshold_fn(score, result.kappa);
    case Method::CpoOnline:
      return threshold_fn(score, result.online_kappa);
    case Method::Cpo:
      // kappa = 1 leaves only the argmax fallback.
      return threshold_fn(score, 1.0);
    case Method::Random:
      return [&rng](const Observation& o) {
        std::vector<Action> legal;
        for (Action a : kAllActions)
          if (o.legal.contains(a)) legal.push_back(a);
        return ActionSet{legal[std::uniform_int_distribution<std::size_t>(0, legal.size() - 1)(rng)]};
      };
    case Method::FixedThreshold:
      if (!result.fixed_rule) throw UsageError("method_rule: fixed-threshold result has no cutoffs");
      return fixed_fn(*result.fixed_rule);
  }
  throw UsageError("method_rule: unknown method");
}

MetricsRecord evaluate_method(Method method, const TrainResult& result, std::span<const Trace> traces,
                              const RunConfig& config) {
  check_horizon(traces, config);
  if (traces.empty()) throw UsageError("evaluate_method: empty test set");
  std::mt19937_64 rule_rng(config.seed + 0x5eedULL);
  std::mt19937_64 path_rng = eval_rng(config);
  return evaluate(method_rule(method, result, rule_rng), traces, config.prices, config.token_scale,
                  config.cost_accounting, &path_rng);
}

DataSplit split_corpus(const std::vector<Trace>& traces, std::size_t calibration_size, std::size_t test_size) {
  if (calibration_size + test_size >= traces.size())
    throw UsageError("split_corpus: corpus of " + std::to_string(traces.size()) + " traces leaves no training data");
  DataSplit s;
  const std::size_t train_end = traces.size() - calibration_size - test_size;
  s.train.assign(traces.begin(), traces.begin() + static_cast<std::ptrdiff_t>(train_end));
  s.calibration.assign(traces.begin() + static_cast<std::ptrdiff_t>(train_end),
                       traces.begin() + static_cast<std::ptrdiff_t>(train_end + calibration_size));
  s.test.assign(traces.begin() + static_cast<std::ptrdiff_t>(train_end + calibration_size), traces.end());
  return s;
}

std::string csv_header() { return "method,alpha,lambda,seed,cost_cents,coverage,avg_len,set_size,n_episodes"; }

std::string csv_row(Method method, const RunConfig& config, const MetricsRecord& m) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%llu,%.17g,%.17g,%.17g,%.17g,%ld", std::string(to_string(method)).c_str(),
                config.alpha, config.lambda, static_cast<unsigned long long>(config.seed), m.cost_cents, m.coverage,
                m.avg_len, m.set_size, m.n_episodes);
  return buf;
}

}  // namespace ccpo
