#include "ccpo/calibrator.hpp"

#include <algorithm>
#include <cmath>

#include "ccpo/error.hpp"

namespace ccpo {

std::string_view to_string(CalibratorMode m) noexcept {
  return m == CalibratorMode::SetEnlarging ? "set-enlarging" : "paper-literal";
}

CalibratorMode calibrator_mode_from_string(std::string_view s) {
  if (s == "set-enlarging") return CalibratorMode::SetEnlarging;
  if (s == "paper-literal") return CalibratorMode::PaperLiteral;
  throw ValidationError("calibrator_mode", "expected set-enlarging or paper-literal, got '" + std::string(s) + "'");
}

void CalibratorState::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha", "must lie in (0,1)");
  if (!(xi > 0.0 && xi < 0.5)) throw ValidationError("xi", "must lie in (0,1/2)");
  if (!(eta0 > 0.0)) throw ValidationError("eta0", "must be > 0");
  if (!(kappa >= 0.0 && kappa <= 1.0)) throw ValidationError("kappa", "must lie in [0,1]");
  if (k < 1) throw ValidationError("k", "must be >= 1");
}

double step_size(long k, double eta0, double xi) {
  if (k < 1) throw UsageError("step_size: k must be >= 1");
  return eta0 * std::pow(static_cast<double>(k), step_size_exponent(xi));
}

CalibratorState online_update(const CalibratorState& state, bool covered) {
  CalibratorState next = state;
  const double eta = step_size(state.k, state.eta0, state.xi);
  const double err = (covered ? 0.0 : 1.0) - state.alpha;
  const double move = state.mode == CalibratorMode::SetEnlarging ? -eta * err : eta * err;
  next.kappa = std::clamp(state.kappa + move, 0.0, 1.0);
  ++next.k;
  return next;
}

namespace {

struct CachedRounds {
  std::vector<Observation> obs;
  std::vector<Categorical> dist;
};

CachedRounds cache_rounds(const FlatParams& score, const Trace& trace, double token_scale) {
  CachedRounds c;
  for (int t = 1; t <= trace.horizon(); ++t) {
    c.obs.push_back(observe_round(trace, t, token_scale));
    c.dist.push_back(policy_forward(score, c.obs.back().span(), c.obs.back().legal));
  }
  return c;
}

bool covered_at(const CachedRounds& c, const Trace& trace, double kappa, const AnswerSet& universe) {
  const auto fn = [&](const Observation& o) { return conformal_set(c.dist.at(static_cast<std::size_t>(o.round - 1)), kappa); };
  const RolloutTree tree = enumerate_branches(trace, fn, PriceTable{});
  return coverage_indicator(prediction_set(tree), universe, trace.true_answer) == 1;
}

}  // namespace

double max_covering_kappa(const FlatParams& score, const Trace& trace, double token_scale) {
  const CachedRounds c = cache_rounds(score, trace, token_scale);
  const AnswerSet universe = answer_universe(trace);
  // Sets only change at the probabilities themselves; just above a candidate they equal the sets at the next one up.
  std::vector<double> candidates{1.0};
  for (const auto& d : c.dist)
    for (double p : d)
      if (p > 0.0) candidates.push_back(p);
  std::sort(candidates.begin(), candidates.end(), std::greater<>());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  for (double kappa : candidates)
    if (covered_at(c, trace, kappa, universe)) return kappa;
  // Every legal action clears the smallest candidate, so this is unreachable for valid traces.
  return 0.0;
}

CalibrationReport batch_calibrate(const FlatParams& score, std::span<const Trace> traces, double alpha,
                                  double granularity, double token_scale) {
  if (traces.empty()) throw UsageError("batch_calibrate: empty calibration set");
  if (!(alpha > 0.0 && alpha < 1.0)) throw UsageError("batch_calibrate: alpha must lie in (0,1)");
  if (!(granularity > 0.0 && granularity <= 1.0)) throw UsageError("batch_calibrate: granularity must lie in (0,1]");
  CalibrationReport rep;
  rep.granularity = granularity;
  rep.n = static_cast<int>(traces.size());
  const long last = static_cast<long>(std::floor(1.0 / granularity + 1e-9));
  rep.grid_size = last + 1;
  rep.required = static_cast<long>(std::ceil((rep.n + 1) * (1.0 - alpha) - 1e-12));

  std::vector<double> c;
  c.reserve(traces.size());
  for (const auto& t : traces) c.push_back(max_covering_kappa(score, t, token_scale));
  std::sort(c.begin(), c.end(), std::greater<>());

  auto grid = [&](long j) { return std::max(0.0, 1.0 - static_cast<double>(j) * granularity); };
  if (rep.required > rep.n) {
    rep.kappa = 0.0;
  } else {
    const double bound = c[static_cast<std::size_t>(rep.required - 1)];
    long j = static_cast<long>(std::ceil((1.0 - bound) / granularity));
    j = std::clamp(j, 0L, last);
    while (j > 0 && grid(j - 1) <= bound) --j;
    while (j <= last && grid(j) > bound) ++j;
    rep.kappa = j <= last ? grid(j) : 0.0;
  }
  long count = 0;
  for (double ci : c) count += rep.kappa <= ci ? 1 : 0;
  rep.coverage = static_cast<double>(count) / rep.n;
  return rep;
}

double empirical_coverage(const FlatParams& score, double kappa, std::span<const Trace> traces, double token_scale) {
  if (traces.empty()) throw UsageError("empirical_coverage: no traces");
  long hits = 0;
  for (const auto& t : traces) {
    const CachedRounds c = cache_rounds(score, t, token_scale);
    hits += covered_at(c, t, kappa, answer_universe(t)) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(traces.size());
}

}  // namespace ccpo
