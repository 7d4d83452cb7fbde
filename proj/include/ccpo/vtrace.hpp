#pragma once

#include <span>
#include <vector>

#include "ccpo/env.hpp"
#include "ccpo/numerics.hpp"

namespace ccpo {

/// Reward critic V and constraint critic V_C. Same architecture, independent parameters.
struct CriticPair {
  FlatParams value;
  FlatParams constraint;
};

CriticPair init_critics(int input_dim, int width, int depth, std::mt19937_64& rng);

/// min(rho_bar, target / behavior). Throws NumericError when behavior_prob is not positive.
double truncated_weight(double target_prob, double behavior_prob, double rho_bar);

/// Per-step truncated weights for the sampled actions.
std::vector<double> importance_weights(std::span<const Categorical> behavior, std::span<const Categorical> target,
                                       std::span<const Action> actions, double rho_bar);

/// Backward V-trace recursion with no discount:
///   v_t = V_t + rho_t (r_t + V_{t+1} - V_t) + rho_t (v_{t+1} - V_{t+1}),
/// where V and v past the final step are 0. `values` has one entry per step.
std::vector<double> vtrace_targets(std::span<const double> values, std::span<const double> rewards,
                                   std::span<const double> rho);

/// A_t = r_t + v_{t+1} - V_t with v past the final step equal to 0.
std::vector<double> advantage_estimates(std::span<const double> rewards, std::span<const double> targets,
                                        std::span<const double> values);

/// One sampled episode and everything derived from it for the critic and policy updates.
struct Trajectory {
  std::size_t trace_index = 0;
  std::vector<Transition> steps;
  /// Target-policy probability of each sampled action (hard stochastic conformal, or the score itself).
  std::vector<double> target_probs;
  /// Clipped weights used by the reward path and both critics.
  std::vector<double> rho;
  /// |C(o_t)| of the hard conformal set at each visited observation.
  std::vector<int> set_sizes;
  /// The sampled path's answer equals the true answer.
  bool answer_correct = false;
  /// True answer lies in the answer universe.
  bool solvable = true;
  int covered = 0;
  int prediction_set_size = 0;
  double episode_cost = 0.0;

  std::vector<double> value_targets;
  std::vector<double> constraint_targets;
  std::vector<double> advantages;
  std::vector<double> constraint_advantages;

  std::vector<double> rewards() const;
  std::vector<double> constraints() const;
};

using VTraceBatch = std::vector<Trajectory>;

/// Fills value/constraint targets and both advantage lists using the given critics.
void compute_targets(VTraceBatch& batch, const CriticPair& critics);

/// One gradient step on each critic: theta <- theta - lr * sum_t (V(o_t) - v_t) grad V(o_t).
/// Throws NumericError if a gradient is non-finite.
CriticPair critic_update(const CriticPair& critics, const VTraceBatch& batch, double lr);

/// Sum over steps of (V(o_t) - v_t)^2 / 2 for each critic.
std::pair<double, double> critic_losses(const CriticPair& critics, const VTraceBatch& batch);

}  // namespace ccpo
