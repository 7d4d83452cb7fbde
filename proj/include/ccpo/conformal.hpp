#pragma once

#include <random>

#include <Eigen/Dense>

#include "ccpo/env.hpp"
#include "ccpo/numerics.hpp"

namespace ccpo {

/// Score network plus threshold. The set-valued policy is {a : score(a|o) >= kappa}.
struct ConformalPolicy {
  FlatParams score;
  double kappa = 0.0;
  /// Softmask temperature.
  double epsilon = 0.01;

  void validate() const;
};

/// Masked, floored action distribution of the score network.
Categorical score(const ConformalPolicy& policy, const Observation& obs, PolicyTape* tape = nullptr);

/// {a : dist(a) > 0 and dist(a) >= kappa}; falls back to {argmax} when nothing clears the threshold.
ActionSet conformal_set(const Categorical& dist, double kappa);

/// Uniform over conformal_set(dist, kappa).
Categorical stochastic_conformal(const Categorical& dist, double kappa);

/// sigmoid((dist(a) - kappa) / epsilon) for every action.
std::array<double, kNumActions> softmask(const Categorical& dist, double kappa, double epsilon);

/// Softmask weights restricted to the support of dist, normalized to sum to one.
Categorical soft_stochastic_conformal(const Categorical& dist, double kappa, double epsilon);

/// Draws from dist; zero-probability actions are never returned.
Action sample_action(const Categorical& dist, std::mt19937_64& rng);

/// Hard conformal sets of `policy`, suitable for enumerate_branches.
ConformalSetFn conformal_set_fn(const ConformalPolicy& policy);

/// Jacobian columns d log S~(a|o) / d params for each action (zero column off support).
Eigen::Matrix<double, Eigen::Dynamic, 3> grad_log_soft_conformal(const FlatParams& params, const Observation& obs,
                                                                 double kappa, double epsilon);

/// d log softmask(a) / d params.
Eigen::VectorXd grad_log_softmask(const FlatParams& params, const Observation& obs, Action action, double kappa,
                                  double epsilon);

/// Jacobian columns d log score(a|o) / d params (zero column for illegal actions).
Eigen::Matrix<double, Eigen::Dynamic, 3> grad_log_score(const FlatParams& params, const Observation& obs);

double sigmoid(double z) noexcept;
double log_sigmoid(double z) noexcept;

}  // namespace ccpo
