#include "ccpo/numerics.hpp"

#include <cmath>
#include <string>

#include "ccpo/error.hpp"

namespace ccpo {

std::size_t MlpShape::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < layers.size(); ++l)
    n += static_cast<std::size_t>(layers[l]) * static_cast<std::size_t>(layers[l + 1]) +
         static_cast<std::size_t>(layers[l + 1]);
  return n;
}

MlpShape policy_shape(int input_dim, int width, int depth) {
  MlpShape s;
  s.layers.push_back(input_dim);
  for (int i = 0; i < depth; ++i) s.layers.push_back(width);
  s.layers.push_back(kNumActions);
  return s;
}

MlpShape value_shape(int input_dim, int width, int depth) {
  MlpShape s = policy_shape(input_dim, width, depth);
  s.layers.back() = 1;
  return s;
}

void FlatParams::validate() const {
  if (shape.layers.size() < 2) throw ValidationError("shape", "needs at least input and output layers");
  for (int w : shape.layers)
    if (w < 1) throw ValidationError("shape", "layer widths must be >= 1");
  if (static_cast<std::size_t>(values.size()) != shape.param_count())
    throw ValidationError("values", "length " + std::to_string(values.size()) + " does not match shape (" +
                                        std::to_string(shape.param_count()) + ")");
  if (!values.allFinite()) throw ValidationError("values", "non-finite parameter");
}

FlatParams zero_params(const MlpShape& shape) {
  FlatParams p{shape, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(shape.param_count()))};
  p.validate();
  return p;
}

FlatParams init_params(const MlpShape& shape, std::mt19937_64& rng) {
  FlatParams p = zero_params(shape);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::Index offset = 0;
  for (std::size_t l = 0; l + 1 < shape.layers.size(); ++l) {
    const int in = shape.layers[l];
    const int out = shape.layers[l + 1];
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(in) * out; ++i) p.values[offset + i] = normal(rng) * scale;
    offset += static_cast<Eigen::Index>(in) * out + out;
  }
  return p;
}

Eigen::VectorXd mlp_forward(const FlatParams& params, std::span<const double> input, ForwardTape* tape) {
  const auto& layers = params.shape.layers;
  if (static_cast<int>(input.size()) != layers.front())
    throw UsageError("mlp_forward: input has " + std::to_string(input.size()) + " features, network expects " +
                     std::to_string(layers.front()));
  Eigen::VectorXd a = Eigen::Map<const Eigen::VectorXd>(input.data(), static_cast<Eigen::Index>(input.size()));
  if (tape) {
    tape->activations.clear();
    tape->activations.push_back(a);
  }
  Eigen::Index offset = 0;
  const std::size_t n_layers = layers.size() - 1;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const int in = layers[l];
    const int out = layers[l + 1];
    Eigen::Map<const Eigen::MatrixXd> w(params.values.data() + offset, out, in);
    Eigen::Map<const Eigen::VectorXd> b(params.values.data() + offset + static_cast<Eigen::Index>(in) * out, out);
    offset += static_cast<Eigen::Index>(in) * out + out;
    Eigen::VectorXd h = w * a + b;
    if (l + 1 < n_layers) h = h.array().tanh();
    a = std::move(h);
    if (tape) tape->activations.push_back(a);
  }
  return a;
}

void mlp_backward(const FlatParams& params, const ForwardTape& tape, const Eigen::Ref<const Eigen::VectorXd>& upstream,
                  Eigen::Ref<Eigen::VectorXd> grad, double scale) {
  const auto& layers = params.shape.layers;
  const std::size_t n_layers = layers.size() - 1;
  if (tape.activations.size() != n_layers + 1) throw UsageError("mlp_backward: tape does not match network");
  if (upstream.size() != layers.back()) throw UsageError("mlp_backward: upstream has wrong dimension");
  if (grad.size() != params.values.size()) throw UsageError("mlp_backward: gradient buffer has wrong dimension");

  std::vector<Eigen::Index> offsets(n_layers);
  Eigen::Index offset = 0;
  for (std::size_t l = 0; l < n_layers; ++l) {
    offsets[l] = offset;
    offset += static_cast<Eigen::Index>(layers[l]) * layers[l + 1] + layers[l + 1];
  }

  Eigen::VectorXd delta = scale * upstream;
  for (std::size_t l = n_layers; l-- > 0;) {
    const int in = layers[l];
    const int out = layers[l + 1];
    const Eigen::VectorXd& a_in = tape.activations[l];
    Eigen::Map<Eigen::MatrixXd> gw(grad.data() + offsets[l], out, in);
    Eigen::Map<Eigen::VectorXd> gb(grad.data() + offsets[l] + static_cast<Eigen::Index>(in) * out, out);
    gw.noalias() += delta * a_in.transpose();
    gb += delta;
    if (l == 0) break;
    Eigen::Map<const Eigen::MatrixXd> w(params.values.data() + offsets[l], out, in);
    Eigen::VectorXd back = w.transpose() * delta;
    delta = back.array() * (1.0 - a_in.array().square());
  }
}

Categorical masked_softmax(const Eigen::Ref<const Eigen::VectorXd>& logits, ActionSet legal, SoftmaxCache* cache) {
  if (logits.size() != kNumActions) throw UsageError("masked_softmax: expected 3 logits");
  if (legal.empty()) throw UsageError("masked_softmax: no legal action");
  double max_logit = -INFINITY;
  for (Action a : kAllActions)
    if (legal.contains(a)) max_logit = std::max(max_logit, logits[index_of(a)]);
  Categorical s{};
  double z = 0.0;
  for (Action a : kAllActions) {
    if (!legal.contains(a)) continue;
    s[index_of(a)] = std::exp(logits[index_of(a)] - max_logit);
    z += s[index_of(a)];
  }
  Categorical p{};
  double fsum = 0.0;
  for (Action a : kAllActions) {
    if (!legal.contains(a)) continue;
    s[index_of(a)] /= z;
    p[index_of(a)] = std::max(s[index_of(a)], kProbabilityFloor);
    fsum += p[index_of(a)];
  }
  for (double& v : p) v /= fsum;
  if (cache) *cache = SoftmaxCache{s, p, fsum, legal};
  return p;
}

Eigen::Vector3d masked_softmax_backward(const SoftmaxCache& c, const Eigen::Vector3d& dprobs) {
  // p = f / sum(f), f = max(s, floor), s = softmax over legal logits.
  double dot = 0.0;
  for (int i = 0; i < kNumActions; ++i) dot += c.probs[i] * dprobs[i];
  Eigen::Vector3d ds = Eigen::Vector3d::Zero();
  for (Action a : kAllActions) {
    const int i = index_of(a);
    if (!c.legal.contains(a) || c.softmax[i] <= kProbabilityFloor) continue;
    ds[i] = (dprobs[i] - dot) / c.floor_sum;
  }
  double sdot = 0.0;
  for (int i = 0; i < kNumActions; ++i) sdot += c.softmax[i] * ds[i];
  Eigen::Vector3d dlogits = Eigen::Vector3d::Zero();
  for (Action a : kAllActions) {
    const int i = index_of(a);
    if (c.legal.contains(a)) dlogits[i] = c.softmax[i] * (ds[i] - sdot);
  }
  return dlogits;
}

Categorical policy_forward(const FlatParams& params, std::span<const double> input, ActionSet legal, PolicyTape* tape) {
  if (params.shape.output_dim() != kNumActions) throw UsageError("policy_forward: network head is not 3 logits");
  Eigen::VectorXd logits = mlp_forward(params, input, tape ? &tape->mlp : nullptr);
  return masked_softmax(logits, legal, tape ? &tape->softmax : nullptr);
}

void policy_backward(const FlatParams& params, const PolicyTape& tape, const Eigen::Vector3d& dprobs,
                     Eigen::Ref<Eigen::VectorXd> grad, double scale) {
  Eigen::VectorXd dlogits = masked_softmax_backward(tape.softmax, dprobs);
  mlp_backward(params, tape.mlp, dlogits, grad, scale);
}

double value_forward(const FlatParams& params, std::span<const double> input, ForwardTape* tape) {
  if (params.shape.output_dim() != 1) throw UsageError("value_forward: network head is not scalar");
  return mlp_forward(params, input, tape)[0];
}

void value_backward(const FlatParams& params, const ForwardTape& tape, double upstream, Eigen::Ref<Eigen::VectorXd> grad,
                    double scale) {
  Eigen::VectorXd u(1);
  u[0] = upstream;
  mlp_backward(params, tape, u, grad, scale);
}

double kl_categorical(const Categorical& p, const Categorical& q) {
  double kl = 0.0;
  for (int i = 0; i < kNumActions; ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) throw UsageError("kl_categorical: q has no support where p has mass");
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(kl, 0.0);
}

void FisherOperator::add_sample(const Categorical& probs,
                                const Eigen::Ref<const Eigen::Matrix<double, Eigen::Dynamic, 3>>& grad_log_probs) {
  if (static_cast<std::size_t>(grad_log_probs.rows()) != dim_) throw UsageError("FisherOperator: dimension mismatch");
  for (int a = 0; a < kNumActions; ++a) {
    if (probs[a] <= 0.0) continue;
    columns_.push_back(std::sqrt(probs[a]) * grad_log_probs.col(a));
  }
  ++samples_;
  dirty_ = true;
}

void FisherOperator::add_to_last(const Categorical& probs,
                                 const Eigen::Ref<const Eigen::Matrix<double, Eigen::Dynamic, 3>>& grad_log_probs,
                                 double weight) {
  if (static_cast<std::size_t>(grad_log_probs.rows()) != dim_) throw UsageError("FisherOperator: dimension mismatch");
  if (samples_ == 0) throw UsageError("FisherOperator: add_to_last before any sample");
  if (!(weight >= 0.0)) throw UsageError("FisherOperator: negative weight");
  for (int a = 0; a < kNumActions; ++a) {
    if (probs[a] <= 0.0) continue;
    columns_.push_back(std::sqrt(weight * probs[a]) * grad_log_probs.col(a));
  }
  dirty_ = true;
}

void FisherOperator::finalize() const {
  if (!dirty_) return;
  packed_.resize(static_cast<Eigen::Index>(dim_), static_cast<Eigen::Index>(columns_.size()));
  for (std::size_t j = 0; j < columns_.size(); ++j) packed_.col(static_cast<Eigen::Index>(j)) = columns_[j];
  dirty_ = false;
}

Eigen::VectorXd FisherOperator::apply(const Eigen::VectorXd& v) const {
  if (static_cast<std::size_t>(v.size()) != dim_) throw UsageError("FisherOperator: dimension mismatch");
  Eigen::VectorXd out = damping_ * v;
  if (samples_ == 0) return out;
  finalize();
  const Eigen::VectorXd proj = packed_.transpose() * v;
  out.noalias() += (packed_ * proj) / static_cast<double>(samples_);
  return out;
}

CgResult conjugate_gradient(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& apply_a,
                            const Eigen::VectorXd& b, int max_iters, double tol) {
  CgResult result;
  result.x = Eigen::VectorXd::Zero(b.size());
  const double b_norm = b.norm();
  if (!std::isfinite(b_norm)) throw NumericError(0, "conjugate_gradient: non-finite right-hand side");
  if (b_norm == 0.0) {
    result.converged = true;
    return result;
  }
  Eigen::VectorXd r = b;
  Eigen::VectorXd p = r;
  double rr = r.squaredNorm();
  for (int it = 1; it <= max_iters; ++it) {
    const Eigen::VectorXd ap = apply_a(p);
    const double pap = p.dot(ap);
    if (!std::isfinite(pap)) throw NumericError(it, "conjugate_gradient: non-finite curvature");
    if (pap <= 0.0) {
      result.iterations = it - 1;
      break;
    }
    const double alpha = rr / pap;
    result.x += alpha * p;
    r -= alpha * ap;
    const double rr_new = r.squaredNorm();
    if (!std::isfinite(rr_new)) throw NumericError(it, "conjugate_gradient: non-finite residual");
    result.iterations = it;
    if (std::sqrt(rr_new) <= tol * b_norm) {
      rr = rr_new;
      result.converged = true;
      break;
    }
    p = r + (rr_new / rr) * p;
    rr = rr_new;
  }
  // Report the true residual rather than the recursive one.
  result.residual_norm = (apply_a(result.x) - b).norm();
  if (!std::isfinite(result.residual_norm)) throw NumericError(result.iterations, "conjugate_gradient: non-finite solution");
  result.converged = result.converged || result.residual_norm <= tol * b_norm;
  return result;
}

}  // namespace ccpo
