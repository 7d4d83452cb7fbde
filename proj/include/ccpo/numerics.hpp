#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "ccpo/action.hpp"

namespace ccpo {

/// Probability vector over the three actions.
using Categorical = std::array<double, kNumActions>;

/// Softmax outputs are floored here, then renormalized, so ratios and KL stay finite.
inline constexpr double kProbabilityFloor = 1e-6;

/// Layer widths, input first, head last. The default policy net is {in, 64, 64, 64, 3}.
struct MlpShape {
  std::vector<int> layers;

  std::size_t param_count() const;
  int input_dim() const { return layers.front(); }
  int output_dim() const { return layers.back(); }
  bool operator==(const MlpShape&) const = default;
};

MlpShape policy_shape(int input_dim, int width = 64, int depth = 3);
MlpShape value_shape(int input_dim, int width = 64, int depth = 3);

/// Contiguous parameters for one MLP: per layer, a column-major (out x in) weight block then the bias.
struct FlatParams {
  MlpShape shape;
  Eigen::VectorXd values;

  void validate() const;
};

/// Weights ~ N(0, 1/fan_in), biases zero.
FlatParams init_params(const MlpShape& shape, std::mt19937_64& rng);
FlatParams zero_params(const MlpShape& shape);

/// Activations kept for the backward pass.
struct ForwardTape {
  std::vector<Eigen::VectorXd> activations;
};

/// Raw head output (tanh hidden layers, linear head).
Eigen::VectorXd mlp_forward(const FlatParams& params, std::span<const double> input, ForwardTape* tape = nullptr);

/// grad += scale * (d head / d params)^T upstream.
void mlp_backward(const FlatParams& params, const ForwardTape& tape, const Eigen::Ref<const Eigen::VectorXd>& upstream,
                  Eigen::Ref<Eigen::VectorXd> grad, double scale = 1.0);

/// Intermediate values of the masked, floored softmax.
struct SoftmaxCache {
  Categorical softmax{};
  Categorical probs{};
  double floor_sum = 1.0;
  ActionSet legal;
};

/// Softmax over legal actions, floored at kProbabilityFloor and renormalized. Illegal actions get exactly 0.
Categorical masked_softmax(const Eigen::Ref<const Eigen::VectorXd>& logits, ActionSet legal,
                           SoftmaxCache* cache = nullptr);

/// Chain rule from d/d(probs) to d/d(logits).
Eigen::Vector3d masked_softmax_backward(const SoftmaxCache& cache, const Eigen::Vector3d& dprobs);

struct PolicyTape {
  ForwardTape mlp;
  SoftmaxCache softmax;
};

/// Policy head: masked softmax of the network logits.
Categorical policy_forward(const FlatParams& params, std::span<const double> input, ActionSet legal,
                           PolicyTape* tape = nullptr);
void policy_backward(const FlatParams& params, const PolicyTape& tape, const Eigen::Vector3d& dprobs,
                     Eigen::Ref<Eigen::VectorXd> grad, double scale = 1.0);

/// Value head: single raw scalar.
double value_forward(const FlatParams& params, std::span<const double> input, ForwardTape* tape = nullptr);
void value_backward(const FlatParams& params, const ForwardTape& tape, double upstream,
                    Eigen::Ref<Eigen::VectorXd> grad, double scale = 1.0);

/// KL(p || q). Throws UsageError if q lacks support where p has mass.
double kl_categorical(const Categorical& p, const Categorical& q);

/// Sample covariance of score vectors: v -> mean_i sum_a p_a g_a (g_a . v) + damping v,
/// where g_a is the gradient of log p_a. At the frozen point this is the Hessian of the mean KL.
class FisherOperator {
 public:
  FisherOperator(std::size_t dim, double damping) : dim_(dim), damping_(damping) {}

  /// `grad_log_probs` holds one column per action; columns of zero-probability actions are ignored.
  void add_sample(const Categorical& probs, const Eigen::Ref<const Eigen::Matrix<double, Eigen::Dynamic, 3>>& grad_log_probs);
  /// Adds weight * (Fisher of a second distribution) at the observation of the last add_sample.
  void add_to_last(const Categorical& probs, const Eigen::Ref<const Eigen::Matrix<double, Eigen::Dynamic, 3>>& grad_log_probs,
                   double weight);

  Eigen::VectorXd apply(const Eigen::VectorXd& v) const;
  std::size_t dim() const noexcept { return dim_; }
  std::size_t samples() const noexcept { return samples_; }
  double damping() const noexcept { return damping_; }

 private:
  void finalize() const;

  std::size_t dim_;
  double damping_;
  std::size_t samples_ = 0;
  std::vector<Eigen::VectorXd> columns_;  // sqrt(p_a) g_a
  mutable Eigen::MatrixXd packed_;
  mutable bool dirty_ = true;
};

struct CgResult {
  Eigen::VectorXd x;
  int iterations = 0;
  double residual_norm = 0.0;
  bool converged = false;
};

/// Solves A x = b for symmetric PSD A given as an operator. Stops when ||A x - b|| <= tol ||b||.
/// Throws NumericError carrying the iteration index on a non-finite intermediate.
CgResult conjugate_gradient(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& apply_a,
                            const Eigen::VectorXd& b, int max_iters, double tol);

}  // namespace ccpo
