#include "ccpo/cpo.hpp"

#include <cmath>
#include <limits>

#include "ccpo/error.hpp"

namespace ccpo {

namespace {

double solvable_rate(const VTraceBatch& batch, const SurrogateContext& ctx) {
  if (ctx.solvable_rate) return *ctx.solvable_rate;
  double n = 0.0;
  for (const auto& t : batch) n += t.solvable ? 1.0 : 0.0;
  return n / static_cast<double>(batch.size());
}

double bound_offset(const VTraceBatch& batch, const SurrogateContext& ctx) {
  const double p = solvable_rate(batch, ctx);
  return ctx.bound == BoundMode::Union ? 1.0 - p : -p;
}

void require_nonempty(const VTraceBatch& batch, const char* who) {
  if (batch.empty()) throw UsageError(std::string(who) + ": empty batch");
}

/// d (log target(a)) / d probs for the chosen action.
Eigen::Vector3d dlog_target_dprobs(const Categorical& p, Action action, const SurrogateContext& ctx) {
  Eigen::Vector3d d = Eigen::Vector3d::Zero();
  const int a = index_of(action);
  if (ctx.target == TargetKind::Score) {
    d[a] = 1.0 / p[a];
    return d;
  }
  const Categorical s = soft_stochastic_conformal(p, ctx.kappa, ctx.epsilon);
  for (int c = 0; c < kNumActions; ++c) {
    if (p[c] <= 0.0) continue;
    const double slope = sigmoid(-(p[c] - ctx.kappa) / ctx.epsilon) / ctx.epsilon;
    d[c] = slope * ((a == c ? 1.0 : 0.0) - s[c]);
  }
  return d;
}

/// Accumulates scale * d log target(a|o) / d params into grad.
void accumulate_grad_log_target(const FlatParams& params, const Observation& obs, Action action,
                                const SurrogateContext& ctx, double scale, Eigen::Ref<Eigen::VectorXd> grad) {
  PolicyTape tape;
  const Categorical p = policy_forward(params, obs.span(), obs.legal, &tape);
  policy_backward(params, tape, dlog_target_dprobs(p, action, ctx), grad, scale);
}

Eigen::Matrix<double, Eigen::Dynamic, 3> target_jacobian(const FlatParams& params, const Observation& obs,
                                                         const SurrogateContext& ctx) {
  if (ctx.target == TargetKind::Score) return grad_log_score(params, obs);
  return grad_log_soft_conformal(params, obs, ctx.kappa, ctx.epsilon);
}

/// log of prod_t w(a_t|o_t) / behavior(a_t|o_t) along the sampled path.
double log_soft_product(const FlatParams& params, const Trajectory& traj, const SurrogateContext& ctx) {
  double lp = 0.0;
  for (const auto& s : traj.steps) {
    const Categorical p = policy_forward(params, s.observation.span(), s.observation.legal);
    const int a = index_of(s.action);
    lp += log_sigmoid((p[a] - ctx.kappa) / ctx.epsilon) - std::log(s.behavior_prob);
  }
  return lp;
}

std::vector<Observation> batch_observations(const VTraceBatch& batch) {
  std::vector<Observation> obs;
  for (const auto& t : batch)
    for (const auto& s : t.steps) obs.push_back(s.observation);
  return obs;
}

}  // namespace

Categorical target_distribution(const FlatParams& params, const Observation& obs, const SurrogateContext& ctx) {
  const Categorical p = policy_forward(params, obs.span(), obs.legal);
  if (ctx.target == TargetKind::Score) return p;
  return soft_stochastic_conformal(p, ctx.kappa, ctx.epsilon);
}

double coverage_product_term(const Trajectory& traj) {
  if (traj.rho.size() != traj.steps.size() || traj.set_sizes.size() != traj.steps.size())
    throw UsageError("coverage_product_term: per-step data not aligned");
  if (!traj.answer_correct) return 0.0;
  double prod = 1.0;
  for (std::size_t t = 0; t < traj.steps.size(); ++t) prod *= traj.rho[t] * static_cast<double>(traj.set_sizes[t]);
  return prod;
}

double coverage_surrogate(const VTraceBatch& batch, const SurrogateContext& ctx) {
  require_nonempty(batch, "coverage_surrogate");
  double sum = 0.0;
  if (ctx.target == TargetKind::Score) {
    for (const auto& t : batch) sum += static_cast<double>(t.covered);
    return sum / static_cast<double>(batch.size());
  }
  for (const auto& t : batch) {
    const double term = coverage_product_term(t);
    if (!std::isfinite(term)) throw UsageError("coverage_surrogate: non-finite product term");
    sum += term;
  }
  return sum / static_cast<double>(batch.size()) + bound_offset(batch, ctx);
}

double soft_coverage_surrogate(const FlatParams& params, const VTraceBatch& batch, const SurrogateContext& ctx) {
  require_nonempty(batch, "soft_coverage_surrogate");
  const double n = static_cast<double>(batch.size());
  double sum = 0.0;
  if (ctx.target == TargetKind::Score) {
    for (const auto& t : batch) {
      for (std::size_t i = 0; i < t.steps.size(); ++i) {
        const auto& s = t.steps[i];
        const Categorical p = policy_forward(params, s.observation.span(), s.observation.legal);
        sum += (p[index_of(s.action)] / s.behavior_prob - 1.0) * t.constraint_advantages.at(i);
      }
    }
    return coverage_surrogate(batch, ctx) + sum / n;
  }
  for (const auto& t : batch) {
    if (!t.answer_correct) continue;
    sum += std::exp(log_soft_product(params, t, ctx));
  }
  return sum / n + bound_offset(batch, ctx);
}

double objective_surrogate(const FlatParams& params, const FlatParams& old_params, const VTraceBatch& batch,
                           const SurrogateContext& ctx) {
  require_nonempty(batch, "objective_surrogate");
  double sum = 0.0;
  for (const auto& t : batch) {
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
      if (t.rho.at(i) == 0.0) continue;
      const auto& s = t.steps[i];
      const int a = index_of(s.action);
      const double now = target_distribution(params, s.observation, ctx)[a];
      const double before = target_distribution(old_params, s.observation, ctx)[a];
      sum += t.rho[i] * t.advantages.at(i) * now / before;
    }
  }
  return sum / static_cast<double>(batch.size());
}

SurrogateGradients surrogate_gradients(const FlatParams& params, const VTraceBatch& batch, const SurrogateContext& ctx) {
  require_nonempty(batch, "surrogate_gradients");
  const Eigen::Index n = params.values.size();
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  SurrogateGradients out;
  out.g = Eigen::VectorXd::Zero(n);
  out.b = Eigen::VectorXd::Zero(n);

  for (std::size_t e = 0; e < batch.size(); ++e) {
    const Trajectory& t = batch[e];
    if (t.advantages.size() != t.steps.size() || t.constraint_advantages.size() != t.steps.size())
      throw UsageError("surrogate_gradients: advantages not computed");
    Eigen::VectorXd ge = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd be = Eigen::VectorXd::Zero(n);

    // Objective: clipped weights on the cost advantages.
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
      const double w = t.rho[i] * t.advantages[i];
      ++out.provenance.objective_clipped_terms;
      out.objective += w * inv_n;
      if (w != 0.0) accumulate_grad_log_target(params, t.steps[i].observation, t.steps[i].action, ctx, w, ge);
    }

    // Constraint: raw ratios only.
    if (ctx.target == TargetKind::Score) {
      for (std::size_t i = 0; i < t.steps.size(); ++i) {
        ++out.provenance.constraint_unclipped_terms;
        const double w = t.constraint_advantages[i];
        if (w != 0.0) accumulate_grad_log_target(params, t.steps[i].observation, t.steps[i].action, ctx, w, be);
      }
    } else if (t.answer_correct) {
      const double product = std::exp(log_soft_product(params, t, ctx));
      for (const auto& s : t.steps) {
        ++out.provenance.constraint_unclipped_terms;
        PolicyTape tape;
        const Categorical p = policy_forward(params, s.observation.span(), s.observation.legal, &tape);
        Eigen::Vector3d d = Eigen::Vector3d::Zero();
        const int a = index_of(s.action);
        d[a] = sigmoid(-(p[a] - ctx.kappa) / ctx.epsilon) / ctx.epsilon;
        policy_backward(params, tape, d, be, product);
      }
    }
    if (!ge.allFinite() || !be.allFinite())
      throw NumericError(static_cast<long>(e), "surrogate_gradients: non-finite gradient in episode");
    out.g += inv_n * ge;
    out.b += inv_n * be;
  }
  out.coverage = coverage_surrogate(batch, ctx);
  out.c_slack = (1.0 - ctx.alpha) - out.coverage;
  return out;
}

double mean_kl(const FlatParams& new_params, const FlatParams& old_params, const VTraceBatch& batch,
               const SurrogateContext& ctx) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& t : batch) {
    for (const auto& s : t.steps) {
      sum += kl_categorical(target_distribution(new_params, s.observation, ctx),
                            target_distribution(old_params, s.observation, ctx));
      ++count;
    }
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

FisherOperator build_fisher(const FlatParams& params, std::span<const Observation> observations,
                            const SurrogateContext& ctx, double damping) {
  FisherOperator op(static_cast<std::size_t>(params.values.size()), damping);
  for (const auto& obs : observations) op.add_sample(target_distribution(params, obs, ctx), target_jacobian(params, obs, ctx));
  return op;
}

FisherOperator build_fisher(const FlatParams& params, const VTraceBatch& batch, const SurrogateContext& ctx,
                            double damping, double score_weight) {
  const auto obs = batch_observations(batch);
  if (score_weight <= 0.0 || ctx.target == TargetKind::Score) return build_fisher(params, obs, ctx, damping);
  FisherOperator op(static_cast<std::size_t>(params.values.size()), damping);
  for (const auto& o : obs) {
    op.add_sample(target_distribution(params, o, ctx), target_jacobian(params, o, ctx));
    op.add_to_last(policy_forward(params, o.span(), o.legal), grad_log_score(params, o), score_weight);
  }
  return op;
}

Eigen::VectorXd fisher_vector_product(const FlatParams& params, std::span<const Observation> observations,
                                      const SurrogateContext& ctx, const Eigen::VectorXd& v, double damping) {
  if (v.size() != params.values.size()) throw UsageError("fisher_vector_product: vector has wrong dimension");
  return build_fisher(params, observations, ctx, damping).apply(v);
}

Eigen::VectorXd kl_gradient(const FlatParams& params, const FlatParams& frozen, std::span<const Observation> observations,
                            const SurrogateContext& ctx) {
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(params.values.size());
  if (observations.empty()) return grad;
  for (const auto& obs : observations) {
    const Categorical p = target_distribution(params, obs, ctx);
    const Categorical q = target_distribution(frozen, obs, ctx);
    const auto jac = target_jacobian(params, obs, ctx);
    for (int a = 0; a < kNumActions; ++a)
      if (p[a] > 0.0) grad += p[a] * std::log(p[a] / q[a]) * jac.col(a);
  }
  return grad / static_cast<double>(observations.size());
}

void TrustRegionConfig::validate() const {
  if (!(delta > 0.0)) throw ValidationError("delta", "must be > 0");
  if (cg_iters < 1) throw ValidationError("cg_iters", "must be >= 1");
  if (!(damping >= 0.0)) throw ValidationError("damping", "must be >= 0");
  if (!(backtrack_factor > 0.0 && backtrack_factor < 1.0)) throw ValidationError("backtrack_factor", "must lie in (0,1)");
  if (backtrack_steps < 0) throw ValidationError("backtrack_steps", "must be >= 0");
  if (!(score_kl_weight >= 0.0)) throw ValidationError("score_kl_weight", "must be >= 0");
  if (!(recovery_scale > 0.0 && recovery_scale <= 1.0)) throw ValidationError("recovery_scale", "must lie in (0,1]");
}

std::string_view to_string(StepCase c) noexcept {
  switch (c) {
    case StepCase::Inactive: return "inactive";
    case StepCase::Active: return "active";
    case StepCase::Recovery: return "recovery";
  }
  return "?";
}

TrustRegionStep trust_region_step(const SurrogateGradients& grads, const LinearOperator& fvp,
                                  const TrustRegionConfig& config) {
  config.validate();
  const double delta = config.delta;
  TrustRegionStep out;
  out.delta = Eigen::VectorXd::Zero(grads.g.size());
  if (grads.b.size() != grads.g.size()) throw UsageError("trust_region_step: gradient sizes differ");

  // Work in the "cost <= 0" form: minimize g.x subject to c + d.x <= 0 with d = -b.
  // Both problems are invariant to positive rescaling, so normalize for conditioning.
  Eigen::VectorXd g = grads.g;
  Eigen::VectorXd d = -grads.b;
  double c = grads.c_slack;
  if (!g.allFinite() || !d.allFinite() || !std::isfinite(c)) throw NumericError(0, "trust_region_step: non-finite input");
  const double g_norm = g.norm();
  const double d_norm = d.norm();
  if (g_norm > 0.0) g /= g_norm;
  if (d_norm > 0.0) {
    d /= d_norm;
    c /= d_norm;
  }

  auto solve = [&](const Eigen::VectorXd& rhs) {
    CgResult r = conjugate_gradient(fvp, rhs, config.cg_iters, config.cg_tol);
    out.cg_iterations += r.iterations;
    return r.x;
  };

  constexpr double kTiny = 1e-14;
  const bool has_objective = g_norm > 0.0;
  const Eigen::VectorXd v = has_objective ? solve(g) : Eigen::VectorXd::Zero(g.size());
  const double q = g.dot(v);
  const bool has_constraint = d_norm > 0.0;

  auto finish = [&](Eigen::VectorXd step, StepCase sc) {
    out.delta = std::move(step);
    out.step_case = sc;
    out.model_kl = 0.5 * out.delta.dot(fvp(out.delta));
    return out;
  };

  if (!has_constraint) {
    if (q <= kTiny) return finish(Eigen::VectorXd::Zero(g.size()), StepCase::Inactive);
    out.lambda = std::sqrt(q / (2.0 * delta));
    return finish(-v / out.lambda, StepCase::Inactive);
  }

  const Eigen::VectorXd w = solve(d);
  const double r = g.dot(w);
  const double s = d.dot(w);
  if (s <= kTiny) {
    if (q <= kTiny) return finish(Eigen::VectorXd::Zero(g.size()), StepCase::Inactive);
    out.lambda = std::sqrt(q / (2.0 * delta));
    return finish(-v / out.lambda, StepCase::Inactive);
  }
  // Exactly on the boundary counts as feasible.
  if (c == 0.0) c = -std::numeric_limits<double>::min();
  const double big_b = 2.0 * delta - c * c / s;

  if (c > 0.0 && big_b < 0.0) {
    // The whole ball is infeasible: move as far toward feasibility as the ball allows.
    out.nu = std::sqrt(2.0 * delta / s);
    return finish(-config.recovery_scale * out.nu * w, StepCase::Recovery);
  }
  if (c < 0.0 && big_b < 0.0) {
    if (q <= kTiny) return finish(Eigen::VectorXd::Zero(g.size()), StepCase::Inactive);
    out.lambda = std::sqrt(q / (2.0 * delta));
    return finish(-v / out.lambda, StepCase::Inactive);
  }
  if (q <= kTiny) {
    if (c < 0.0) return finish(Eigen::VectorXd::Zero(g.size()), StepCase::Inactive);
    // No objective: the smallest step that reaches the constraint boundary.
    out.nu = c / s;
    return finish(-(c / s) * w, StepCase::Active);
  }

  // Boundary intersects the ball: maximize the dual over lambda in the two regimes.
  const double big_a = std::max(q - r * r / s, 0.0);
  const double lam_mid = r / c;
  auto project = [](double x, double lo, double hi) { return std::max(lo, std::min(hi, x)); };
  const double inf = std::numeric_limits<double>::infinity();
  double a_lo = 0.0, a_hi = std::max(lam_mid, 0.0), b_lo = std::max(lam_mid, 0.0), b_hi = inf;
  if (c > 0.0) {
    a_lo = std::max(lam_mid, 0.0);
    a_hi = inf;
    b_lo = 0.0;
    b_hi = std::max(lam_mid, 0.0);
  }
  const double lam_a = project(big_b > 0.0 ? std::sqrt(big_a / big_b) : inf, a_lo, a_hi);
  const double lam_b = project(std::sqrt(q / (2.0 * delta)), b_lo, b_hi);
  auto ratio = [](double num, double lam) {
    if (lam > 0.0) return num / lam;
    return num > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
  };
  auto f_a = [&](double lam) {
    if (!std::isfinite(lam)) return -inf;
    return -0.5 * (ratio(big_a, lam) + big_b * lam) - r * c / s;
  };
  auto f_b = [&](double lam) {
    if (!std::isfinite(lam)) return -inf;
    return -0.5 * (ratio(q, lam) + 2.0 * delta * lam);
  };
  const double lam = f_a(lam_a) >= f_b(lam_b) ? lam_a : lam_b;
  if (!(lam > 0.0) || !std::isfinite(lam)) {
    // Degenerate dual (objective parallel to the constraint normal): take the boundary-feasible step.
    out.nu = std::max(c, 0.0) / s;
    return finish(-out.nu * w, StepCase::Active);
  }
  out.lambda = lam;
  out.nu = std::max(0.0, lam * c - r) / s;
  return finish(-(v + out.nu * w) / lam, out.nu > 0.0 ? StepCase::Active : StepCase::Inactive);
}

LineSearchResult line_search(const FlatParams& old_params, const Eigen::VectorXd& delta, const VTraceBatch& batch,
                             const SurrogateContext& ctx, const TrustRegionConfig& config, bool require_descent) {
  LineSearchResult out;
  out.params = old_params;
  if (!delta.allFinite()) throw UsageError("line_search: non-finite step");
  out.coverage_before = soft_coverage_surrogate(old_params, batch, ctx);
  const double floor = std::min(out.coverage_before, 1.0 - ctx.alpha) - config.coverage_tolerance;
  const double objective_before = require_descent ? objective_surrogate(old_params, old_params, batch, ctx) : 0.0;
  const bool anchored = ctx.target == TargetKind::SoftConformal && config.score_kl_weight > 0.0;
  SurrogateContext score_ctx = ctx;
  score_ctx.target = TargetKind::Score;
  double scale = 1.0;
  for (int j = 0; j <= config.backtrack_steps; ++j, scale *= config.backtrack_factor) {
    FlatParams candidate = old_params;
    candidate.values += scale * delta;
    const double kl = mean_kl(candidate, old_params, batch, ctx);
    const double score_kl = anchored ? mean_kl(candidate, old_params, batch, score_ctx) : kl;
    const double budget = anchored ? kl + config.score_kl_weight * score_kl : kl;
    const double cov = soft_coverage_surrogate(candidate, batch, ctx);
    const bool descends =
        !require_descent || objective_surrogate(candidate, old_params, batch, ctx) <= objective_before;
    if (std::isfinite(budget) && budget <= config.delta && std::isfinite(cov) && cov >= floor && descends) {
      out.params = std::move(candidate);
      out.accepted = true;
      out.backtracks = j;
      out.kl = kl;
      out.score_kl = score_kl;
      out.coverage_after = cov;
      return out;
    }
  }
  out.backtracks = config.backtrack_steps + 1;
  out.coverage_after = out.coverage_before;
  return out;
}

}  // namespace ccpo
