#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string_view>

#include <Eigen/Dense>

#include "ccpo/conformal.hpp"
#include "ccpo/vtrace.hpp"

namespace ccpo {

/// Which distribution the optimizer treats as the target policy.
enum class TargetKind {
  /// Softmasked stochastic conformal policy (the conformal method).
  SoftConformal,
  /// The score distribution itself (pointwise constrained policy optimization).
  Score,
};

/// How the coverage upper bound folds in the solvable rate.
enum class BoundMode {
  /// J = J0 + (1 - P[solvable]): a valid union bound.
  Union,
  /// J = J0 - P[solvable], as the formula is sometimes printed.
  Literal,
};

struct SurrogateContext {
  TargetKind target = TargetKind::SoftConformal;
  BoundMode bound = BoundMode::Union;
  double kappa = 0.3;
  double epsilon = 0.01;
  double alpha = 0.1;
  /// Pr[Y* in universe]; estimated from the batch when absent.
  std::optional<double> solvable_rate;
};

/// Target distribution used in the surrogates, KL and Fisher products.
Categorical target_distribution(const FlatParams& params, const Observation& obs, const SurrogateContext& ctx);

/// Per-episode term of the coverage upper bound along the sampled path: prod_t rho_t |C(o_t)| * 1{answer correct}.
double coverage_product_term(const Trajectory& traj);

/// Coverage estimate from the batch as collected (clipped weights, hard sets). For the Score target this is
/// the empirical pointwise coverage.
double coverage_surrogate(const VTraceBatch& batch, const SurrogateContext& ctx);

/// Differentiable coverage estimate at `params`: softmask memberships and unclipped ratios over the sampled
/// paths (Score target: first-order importance-weighted constraint surrogate).
double soft_coverage_surrogate(const FlatParams& params, const VTraceBatch& batch, const SurrogateContext& ctx);

/// mean_e sum_t rho_t A_t target(a_t|o_t; params) / target(a_t|o_t; old_params).
double objective_surrogate(const FlatParams& params, const FlatParams& old_params, const VTraceBatch& batch,
                           const SurrogateContext& ctx);

/// Which ratio kind fed each accumulated term. Lets tests assert the clipping split structurally.
struct GradientProvenance {
  long objective_clipped_terms = 0;
  long objective_unclipped_terms = 0;
  long constraint_clipped_terms = 0;
  long constraint_unclipped_terms = 0;
};

struct SurrogateGradients {
  /// Gradient of the cost objective (to be descended).
  Eigen::VectorXd g;
  /// Gradient of the coverage estimate (to be kept >= 1 - alpha).
  Eigen::VectorXd b;
  /// (1 - alpha) - coverage estimate; positive means infeasible.
  double c_slack = 0.0;
  double coverage = 0.0;
  double objective = 0.0;
  GradientProvenance provenance;
};

/// Throws NumericError naming the episode index if any contribution is non-finite.
SurrogateGradients surrogate_gradients(const FlatParams& params, const VTraceBatch& batch, const SurrogateContext& ctx);

/// Mean over the batch observations of KL(target(new) || target(old)).
double mean_kl(const FlatParams& new_params, const FlatParams& old_params, const VTraceBatch& batch,
               const SurrogateContext& ctx);

/// Fisher operator of the target distribution over all observations in the batch, plus damping. With the
/// soft-conformal target, score_weight > 0 adds that multiple of the score network's own Fisher.
FisherOperator build_fisher(const FlatParams& params, const VTraceBatch& batch, const SurrogateContext& ctx,
                            double damping, double score_weight = 0.0);
FisherOperator build_fisher(const FlatParams& params, std::span<const Observation> observations,
                            const SurrogateContext& ctx, double damping);

/// H v for the mean-KL Hessian at `params` (plus damping).
Eigen::VectorXd fisher_vector_product(const FlatParams& params, std::span<const Observation> observations,
                                      const SurrogateContext& ctx, const Eigen::VectorXd& v, double damping);

/// Gradient of mean KL(target(params) || target(frozen)) with respect to params.
Eigen::VectorXd kl_gradient(const FlatParams& params, const FlatParams& frozen, std::span<const Observation> observations,
                            const SurrogateContext& ctx);

struct TrustRegionConfig {
  double delta = 0.01;
  int cg_iters = 10;
  double cg_tol = 1e-10;
  double damping = 1e-4;
  double backtrack_factor = 0.8;
  int backtrack_steps = 10;
  /// Multiplies the infeasible-recovery step (1 reaches the trust-region boundary).
  double recovery_scale = 1.0;
  /// Allowed drop of the coverage surrogate during line search.
  double coverage_tolerance = 0.0;
  /// The soft-conformal target is flat wherever no action crosses kappa, so its KL alone does not bound how
  /// far the sampling policy moves. The trust region uses KL(target) + score_kl_weight * KL(score); 0 disables.
  double score_kl_weight = 0.0;

  void validate() const;
};

enum class StepCase { Inactive, Active, Recovery };
std::string_view to_string(StepCase c) noexcept;

struct TrustRegionStep {
  Eigen::VectorXd delta;
  StepCase step_case = StepCase::Inactive;
  double lambda = 0.0;
  double nu = 0.0;
  /// 1/2 delta^T H delta under the (damped) quadratic model.
  double model_kl = 0.0;
  int cg_iterations = 0;
};

using LinearOperator = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

/// Solves min g^T x s.t. coverage + b^T x >= 1 - alpha and x^T H x / 2 <= delta in closed form over the two
/// dual multipliers; when the constraint cannot be met inside the ball, steps along H^-1 b to the boundary.
TrustRegionStep trust_region_step(const SurrogateGradients& grads, const LinearOperator& fvp,
                                  const TrustRegionConfig& config);

struct LineSearchResult {
  FlatParams params;
  bool accepted = false;
  int backtracks = 0;
  double kl = 0.0;
  /// Mean KL of the score network itself (equal to kl for the Score target).
  double score_kl = 0.0;
  double coverage_before = 0.0;
  double coverage_after = 0.0;
};

/// Backtracks until the realized mean KL (plus score_kl_weight times the score KL for the soft target) <= delta and the soft coverage surrogate has not dropped below
/// min(previous, 1 - alpha) - tolerance. Returns the old parameters if every candidate fails.
/// With require_descent, a candidate must also not raise the objective surrogate (off for recovery steps).
LineSearchResult line_search(const FlatParams& old_params, const Eigen::VectorXd& delta, const VTraceBatch& batch,
                             const SurrogateContext& ctx, const TrustRegionConfig& config,
                             bool require_descent = false);

}  // namespace ccpo
