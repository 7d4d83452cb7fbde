#include "ccpo/vtrace.hpp"

#include <cmath>

#include "ccpo/error.hpp"

namespace ccpo {

CriticPair init_critics(int input_dim, int width, int depth, std::mt19937_64& rng) {
  const MlpShape shape = value_shape(input_dim, width, depth);
  CriticPair c{init_params(shape, rng), init_params(shape, rng)};
  return c;
}

double truncated_weight(double target_prob, double behavior_prob, double rho_bar) {
  if (!(behavior_prob > 0.0)) throw NumericError(0, "truncated_weight: behavior probability must be positive");
  return std::min(rho_bar, target_prob / behavior_prob);
}

std::vector<double> importance_weights(std::span<const Categorical> behavior, std::span<const Categorical> target,
                                       std::span<const Action> actions, double rho_bar) {
  if (behavior.size() != actions.size() || target.size() != actions.size())
    throw UsageError("importance_weights: misaligned inputs");
  std::vector<double> rho(actions.size());
  for (std::size_t t = 0; t < actions.size(); ++t) {
    const int a = index_of(actions[t]);
    if (!(behavior[t][a] > 0.0)) throw NumericError(static_cast<long>(t), "importance_weights: zero behavior probability");
    rho[t] = std::min(rho_bar, target[t][a] / behavior[t][a]);
  }
  return rho;
}

std::vector<double> vtrace_targets(std::span<const double> values, std::span<const double> rewards,
                                   std::span<const double> rho) {
  if (values.size() != rewards.size() || rho.size() != rewards.size())
    throw UsageError("vtrace_targets: misaligned lengths");
  const std::size_t n = rewards.size();
  std::vector<double> v(n);
  double v_next = 0.0;
  double value_next = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    const double delta = rho[t] * (rewards[t] + value_next - values[t]);
    v[t] = values[t] + delta + rho[t] * (v_next - value_next);
    v_next = v[t];
    value_next = values[t];
  }
  return v;
}

std::vector<double> advantage_estimates(std::span<const double> rewards, std::span<const double> targets,
                                        std::span<const double> values) {
  if (targets.size() != rewards.size() || values.size() != rewards.size())
    throw UsageError("advantage_estimates: misaligned lengths");
  std::vector<double> adv(rewards.size());
  for (std::size_t t = 0; t < rewards.size(); ++t) {
    const double v_next = t + 1 < targets.size() ? targets[t + 1] : 0.0;
    adv[t] = rewards[t] + v_next - values[t];
  }
  return adv;
}

std::vector<double> Trajectory::rewards() const {
  std::vector<double> r;
  r.reserve(steps.size());
  for (const auto& s : steps) r.push_back(s.reward);
  return r;
}

std::vector<double> Trajectory::constraints() const {
  std::vector<double> c;
  c.reserve(steps.size());
  for (const auto& s : steps) c.push_back(s.constraint);
  return c;
}

void compute_targets(VTraceBatch& batch, const CriticPair& critics) {
  for (auto& traj : batch) {
    if (traj.rho.size() != traj.steps.size()) throw UsageError("compute_targets: rho not aligned with steps");
    std::vector<double> values;
    std::vector<double> cvalues;
    for (const auto& s : traj.steps) {
      values.push_back(value_forward(critics.value, s.observation.span()));
      cvalues.push_back(value_forward(critics.constraint, s.observation.span()));
    }
    const auto r = traj.rewards();
    const auto c = traj.constraints();
    traj.value_targets = vtrace_targets(values, r, traj.rho);
    traj.constraint_targets = vtrace_targets(cvalues, c, traj.rho);
    traj.advantages = advantage_estimates(r, traj.value_targets, values);
    traj.constraint_advantages = advantage_estimates(c, traj.constraint_targets, cvalues);
  }
}

namespace {

Eigen::VectorXd critic_gradient(const FlatParams& params, const VTraceBatch& batch, bool constraint_head) {
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(params.values.size());
  ForwardTape tape;
  for (const auto& traj : batch) {
    const auto& targets = constraint_head ? traj.constraint_targets : traj.value_targets;
    if (targets.size() != traj.steps.size()) throw UsageError("critic_update: batch targets not computed");
    for (std::size_t t = 0; t < traj.steps.size(); ++t) {
      const double v = value_forward(params, traj.steps[t].observation.span(), &tape);
      value_backward(params, tape, v - targets[t], grad);
    }
  }
  return grad;
}

}  // namespace

CriticPair critic_update(const CriticPair& critics, const VTraceBatch& batch, double lr) {
  CriticPair out = critics;
  const Eigen::VectorXd gv = critic_gradient(critics.value, batch, false);
  const Eigen::VectorXd gc = critic_gradient(critics.constraint, batch, true);
  if (!gv.allFinite()) throw NumericError(0, "critic_update: non-finite value gradient");
  if (!gc.allFinite()) throw NumericError(0, "critic_update: non-finite constraint gradient");
  out.value.values -= lr * gv;
  out.constraint.values -= lr * gc;
  return out;
}

std::pair<double, double> critic_losses(const CriticPair& critics, const VTraceBatch& batch) {
  double lv = 0.0;
  double lc = 0.0;
  for (const auto& traj : batch) {
    for (std::size_t t = 0; t < traj.steps.size(); ++t) {
      const auto x = traj.steps[t].observation.span();
      const double dv = value_forward(critics.value, x) - traj.value_targets[t];
      const double dc = value_forward(critics.constraint, x) - traj.constraint_targets[t];
      lv += 0.5 * dv * dv;
      lc += 0.5 * dc * dc;
    }
  }
  return {lv, lc};
}

}  // namespace ccpo
