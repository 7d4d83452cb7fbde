#include "ccpo/conformal.hpp"

#include <cmath>

#include "ccpo/error.hpp"

namespace ccpo {

double sigmoid(double z) noexcept {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double log_sigmoid(double z) noexcept {
  if (z >= 0.0) return -std::log1p(std::exp(-z));
  return z - std::log1p(std::exp(z));
}

void ConformalPolicy::validate() const {
  score.validate();
  if (score.shape.output_dim() != kNumActions) throw ValidationError("score", "head must produce 3 logits");
  if (!(kappa >= 0.0 && kappa <= 1.0)) throw ValidationError("kappa", "must lie in [0,1]");
  if (!(epsilon > 0.0)) throw ValidationError("epsilon", "must be > 0");
}

Categorical score(const ConformalPolicy& policy, const Observation& obs, PolicyTape* tape) {
  return policy_forward(policy.score, obs.span(), obs.legal, tape);
}

namespace {

int argmax_supported(const Categorical& dist) {
  int best = -1;
  for (int i = 0; i < kNumActions; ++i)
    if (dist[i] > 0.0 && (best < 0 || dist[i] > dist[best])) best = i;
  return best;
}

}  // namespace

ActionSet conformal_set(const Categorical& dist, double kappa) {
  ActionSet s;
  for (Action a : kAllActions) {
    const double p = dist[index_of(a)];
    if (p > 0.0 && p >= kappa) s.insert(a);
  }
  if (s.empty()) {
    const int best = argmax_supported(dist);
    if (best < 0) throw UsageError("conformal_set: distribution has no support");
    s.insert(static_cast<Action>(best));
  }
  return s;
}

Categorical stochastic_conformal(const Categorical& dist, double kappa) {
  const ActionSet s = conformal_set(dist, kappa);
  Categorical out{};
  const double mass = 1.0 / static_cast<double>(s.size());
  for (Action a : kAllActions)
    if (s.contains(a)) out[index_of(a)] = mass;
  return out;
}

std::array<double, kNumActions> softmask(const Categorical& dist, double kappa, double epsilon) {
  if (!(epsilon > 0.0)) throw UsageError("softmask: epsilon must be > 0");
  std::array<double, kNumActions> w{};
  for (int i = 0; i < kNumActions; ++i) w[i] = sigmoid((dist[i] - kappa) / epsilon);
  return w;
}

Categorical soft_stochastic_conformal(const Categorical& dist, double kappa, double epsilon) {
  if (!(epsilon > 0.0)) throw UsageError("soft_stochastic_conformal: epsilon must be > 0");
  std::array<double, kNumActions> log_w{};
  double max_lw = -INFINITY;
  for (int i = 0; i < kNumActions; ++i) {
    if (dist[i] <= 0.0) continue;
    log_w[i] = log_sigmoid((dist[i] - kappa) / epsilon);
    max_lw = std::max(max_lw, log_w[i]);
  }
  if (!std::isfinite(max_lw)) throw UsageError("soft_stochastic_conformal: distribution has no support");
  Categorical out{};
  double z = 0.0;
  for (int i = 0; i < kNumActions; ++i) {
    if (dist[i] <= 0.0) continue;
    out[i] = std::exp(log_w[i] - max_lw);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

Action sample_action(const Categorical& dist, std::mt19937_64& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  int last = -1;
  for (int i = 0; i < kNumActions; ++i) {
    if (dist[i] <= 0.0) continue;
    last = i;
    acc += dist[i];
    if (u < acc) return static_cast<Action>(i);
  }
  if (last < 0) throw UsageError("sample_action: distribution has no support");
  return static_cast<Action>(last);
}

ConformalSetFn conformal_set_fn(const ConformalPolicy& policy) {
  return [&policy](const Observation& obs) { return conformal_set(score(policy, obs), policy.kappa); };
}

Eigen::Matrix<double, Eigen::Dynamic, 3> grad_log_soft_conformal(const FlatParams& params, const Observation& obs,
                                                                 double kappa, double epsilon) {
  PolicyTape tape;
  const Categorical p = policy_forward(params, obs.span(), obs.legal, &tape);
  const Categorical s = soft_stochastic_conformal(p, kappa, epsilon);
  // d log S~_a / d p_c = (1 - w_c)/eps * (delta_ac - S~_c) on the support.
  std::array<double, kNumActions> slope{};
  for (int c = 0; c < kNumActions; ++c)
    if (p[c] > 0.0) slope[c] = sigmoid(-(p[c] - kappa) / epsilon) / epsilon;
  Eigen::Matrix<double, Eigen::Dynamic, 3> jac =
      Eigen::Matrix<double, Eigen::Dynamic, 3>::Zero(params.values.size(), 3);
  for (int a = 0; a < kNumActions; ++a) {
    if (p[a] <= 0.0) continue;
    Eigen::Vector3d dprobs;
    for (int c = 0; c < kNumActions; ++c) dprobs[c] = slope[c] * ((a == c ? 1.0 : 0.0) - s[c]);
    policy_backward(params, tape, dprobs, jac.col(a));
  }
  return jac;
}

Eigen::VectorXd grad_log_softmask(const FlatParams& params, const Observation& obs, Action action, double kappa,
                                  double epsilon) {
  PolicyTape tape;
  const Categorical p = policy_forward(params, obs.span(), obs.legal, &tape);
  Eigen::Vector3d dprobs = Eigen::Vector3d::Zero();
  const int a = index_of(action);
  dprobs[a] = sigmoid(-(p[a] - kappa) / epsilon) / epsilon;
  Eigen::VectorXd g = Eigen::VectorXd::Zero(params.values.size());
  policy_backward(params, tape, dprobs, g);
  return g;
}

Eigen::Matrix<double, Eigen::Dynamic, 3> grad_log_score(const FlatParams& params, const Observation& obs) {
  PolicyTape tape;
  const Categorical p = policy_forward(params, obs.span(), obs.legal, &tape);
  Eigen::Matrix<double, Eigen::Dynamic, 3> jac =
      Eigen::Matrix<double, Eigen::Dynamic, 3>::Zero(params.values.size(), 3);
  for (int a = 0; a < kNumActions; ++a) {
    if (p[a] <= 0.0) continue;
    Eigen::Vector3d dprobs = Eigen::Vector3d::Zero();
    dprobs[a] = 1.0 / p[a];
    policy_backward(params, tape, dprobs, jac.col(a));
  }
  return jac;
}

}  // namespace ccpo
