#include <doctest.h>

#include <limits>

#include "ccpo/cpo.hpp"
#include "ccpo/error.hpp"
#include "test_support.hpp"

using namespace ccpo;
using namespace ccpo::testing;

namespace {

/// Samples one episode per trace from the hard conformal policy (soft target) or the score (score target).
VTraceBatch rollout(const FlatParams& params, const std::vector<Trace>& traces, const SurrogateContext& ctx,
                    std::mt19937_64& rng, const CriticPair& critics) {
  const PriceTable prices{0.0, 0.0, 2.5e-4, 1e-3};
  VTraceBatch batch;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const Trace& tr = traces[i];
    Trajectory traj;
    traj.trace_index = i;
    EpisodeState s = EpisodeState::start(tr);
    while (!s.terminated) {
      const Observation o = observe(s);
      const Categorical p = policy_forward(params, o.span(), o.legal);
      const ActionSet set = conformal_set(p, ctx.kappa);
      const Categorical behavior = ctx.target == TargetKind::Score ? p : stochastic_conformal(p, ctx.kappa);
      const Categorical target = target_distribution(params, o, ctx);
      const Action a = sample_action(behavior, rng);
      StepResult res = step(s, a, prices, 0.0, 1);
      Transition t;
      t.observation = o;
      t.action = a;
      t.behavior_prob = behavior[index_of(a)];
      t.reward = res.reward;
      t.done = res.done;
      traj.steps.push_back(t);
      traj.target_probs.push_back(target[index_of(a)]);
      traj.rho.push_back(truncated_weight(target[index_of(a)], t.behavior_prob, 1.0));
      traj.set_sizes.push_back(set.size());
      s = res.state;
    }
    traj.answer_correct = s.chosen_answer == tr.true_answer;
    traj.solvable = answer_universe(tr).contains(tr.true_answer);
    traj.covered = traj.answer_correct || !traj.solvable ? 1 : 0;
    traj.steps.back().constraint = traj.covered;
    batch.push_back(std::move(traj));
  }
  compute_targets(batch, critics);
  return batch;
}

struct Fixture {
  std::mt19937_64 rng{11};
  FlatParams params;
  CriticPair critics;
  std::vector<Trace> traces;

  Fixture() {
    params = small_policy(rng);
    critics = init_critics(kObservationDim, 4, 1, rng);
    SyntheticConfig cfg;
    cfg.num_traces = 12;
    cfg.seed = 8;
    traces = generate_synthetic(cfg).traces;
  }
};

Trajectory hand_trajectory(std::vector<double> rho, std::vector<int> sizes, bool correct, bool solvable = true) {
  Trajectory t;
  t.steps.resize(rho.size());
  t.rho = std::move(rho);
  t.set_sizes = std::move(sizes);
  t.answer_correct = correct;
  t.solvable = solvable;
  return t;
}

Eigen::MatrixXd spd(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::MatrixXd m = Eigen::MatrixXd::NullaryExpr(n, n, [&]() { return nd(rng); });
  return m * m.transpose() + 0.5 * Eigen::MatrixXd::Identity(n, n);
}

LinearOperator matrix_operator(const Eigen::MatrixXd& h) {
  return [h](const Eigen::VectorXd& v) -> Eigen::VectorXd { return h * v; };
}

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) { return a.dot(b) / (a.norm() * b.norm()); }

}  // namespace

TEST_SUITE("cpo") {
  TEST_CASE("coverage product term examples") {
    CHECK(coverage_product_term(hand_trajectory({1.0, 0.5}, {2, 3}, true)) == doctest::Approx(3.0));
    CHECK(coverage_product_term(hand_trajectory({1.0, 0.5}, {2, 3}, false)) == 0.0);
    CHECK(coverage_product_term(hand_trajectory({0.0}, {2}, true)) == 0.0);
    CHECK_THROWS_AS(coverage_product_term(hand_trajectory({1.0}, {}, true)), UsageError);
  }

  TEST_CASE("coverage surrogate is the mean term plus the solvability offset") {
    VTraceBatch batch{hand_trajectory({1.0, 0.5}, {2, 3}, true), hand_trajectory({1.0}, {2}, false),
                      hand_trajectory({1.0, 1.0, 1.0}, {1, 1, 1}, true, false)};
    SurrogateContext ctx;
    CHECK(coverage_surrogate(batch, ctx) == doctest::Approx(4.0 / 3.0 + 1.0 / 3.0));
    ctx.bound = BoundMode::Literal;
    CHECK(coverage_surrogate(batch, ctx) == doctest::Approx(4.0 / 3.0 - 2.0 / 3.0));
    ctx.solvable_rate = 0.9;
    CHECK(coverage_surrogate(batch, ctx) == doctest::Approx(4.0 / 3.0 - 0.9));
    CHECK_THROWS_AS(coverage_surrogate(VTraceBatch{}, ctx), UsageError);
  }

  TEST_CASE("zero advantages give a zero objective gradient") {
    Fixture f;
    SurrogateContext ctx;
    ctx.kappa = 0.3;
    ctx.epsilon = 0.05;
    VTraceBatch batch = rollout(f.params, f.traces, ctx, f.rng, f.critics);
    for (auto& t : batch) std::fill(t.advantages.begin(), t.advantages.end(), 0.0);
    const SurrogateGradients g = surrogate_gradients(f.params, batch, ctx);
    CHECK(g.g.isZero());
    CHECK(g.objective == 0.0);
  }

  TEST_CASE("surrogate gradients match finite differences") {
    for (TargetKind kind : {TargetKind::SoftConformal, TargetKind::Score}) {
      Fixture f;
      SurrogateContext ctx;
      ctx.target = kind;
      ctx.kappa = 0.3;
      ctx.epsilon = 0.05;
      VTraceBatch batch = rollout(f.params, f.traces, ctx, f.rng, f.critics);
      const SurrogateGradients grads = surrogate_gradients(f.params, batch, ctx);
      const Eigen::VectorXd fd_g = finite_difference(
          f.params, [&](const FlatParams& p) { return objective_surrogate(p, f.params, batch, ctx); });
      const Eigen::VectorXd fd_b =
          finite_difference(f.params, [&](const FlatParams& p) { return soft_coverage_surrogate(p, batch, ctx); });
      CHECK(relative_error(grads.g, fd_g) < 1e-5);
      CHECK(relative_error(grads.b, fd_b) < 1e-5);
      CHECK(grads.objective == doctest::Approx(objective_surrogate(f.params, f.params, batch, ctx)));
      CHECK(grads.c_slack == doctest::Approx(0.9 - coverage_surrogate(batch, ctx)));
    }
  }

  TEST_CASE("score target constraint gradient is the advantage-weighted score") {
    Fixture f;
    SurrogateContext ctx;
    ctx.target = TargetKind::Score;
    VTraceBatch batch = rollout(f.params, f.traces, ctx, f.rng, f.critics);
    Eigen::VectorXd expected = Eigen::VectorXd::Zero(f.params.values.size());
    for (const auto& t : batch)
      for (std::size_t i = 0; i < t.steps.size(); ++i)
        expected += t.constraint_advantages[i] * grad_log_score(f.params, t.steps[i].observation).col(index_of(t.steps[i].action));
    expected /= static_cast<double>(batch.size());
    CHECK(relative_error(surrogate_gradients(f.params, batch, ctx).b, expected) < 1e-10);
    CHECK(soft_coverage_surrogate(f.params, batch, ctx) == doctest::Approx(coverage_surrogate(batch, ctx)));
  }

  TEST_CASE("objective uses clipped weights and the constraint uses raw ratios") {
    Fixture f;
    SurrogateContext ctx;
    VTraceBatch batch = rollout(f.params, f.traces, ctx, f.rng, f.critics);
    long steps = 0, correct_steps = 0;
    for (const auto& t : batch) {
      steps += static_cast<long>(t.steps.size());
      if (t.answer_correct) correct_steps += static_cast<long>(t.steps.size());
    }
    const GradientProvenance p = surrogate_gradients(f.params, batch, ctx).provenance;
    CHECK(p.objective_clipped_terms == steps);
    CHECK(p.objective_unclipped_terms == 0);
    CHECK(p.constraint_clipped_terms == 0);
    CHECK(p.constraint_unclipped_terms == correct_steps);
  }

  TEST_CASE("non-finite contributions name the episode") {
    Fixture f;
    SurrogateContext ctx;
    VTraceBatch batch = rollout(f.params, f.traces, ctx, f.rng, f.critics);
    batch[3].advantages[0] = std::numeric_limits<double>::quiet_NaN();
    batch[3].rho[0] = 1.0;
    try {
      surrogate_gradients(f.params, batch, ctx);
      FAIL("expected a numeric error");
    } catch (const NumericError& e) {
      CHECK(e.index() == 3);
    }
  }

  TEST_CASE("fisher products and KL gradient match finite differences of the mean KL") {
    Fixture f;
    SurrogateContext ctx;
    ctx.kappa = 0.3;
    ctx.epsilon = 0.05;
    std::vector<Observation> obs;
    for (int i = 0; i < 8; ++i) obs.push_back(random_observation(f.rng));
    auto kl_at = [&](const FlatParams& p, const FlatParams& q) {
      double s = 0;
      for (const auto& o : obs) s += kl_categorical(target_distribution(p, o, ctx), target_distribution(q, o, ctx));
      return s / static_cast<double>(obs.size());
    };
    std::normal_distribution<double> nd(0.0, 1.0);
    Eigen::VectorXd v = Eigen::VectorXd::NullaryExpr(f.params.values.size(), [&]() { return nd(f.rng); });
    v.normalize();
    const double h = 1e-4;
    FlatParams up = f.params, down = f.params;
    up.values += h * v;
    down.values -= h * v;
    const double curvature = (kl_at(up, f.params) + kl_at(down, f.params)) / (h * h);
    CHECK(v.dot(fisher_vector_product(f.params, obs, ctx, v, 0.0)) == doctest::Approx(curvature).epsilon(1e-3));

    FlatParams moved = f.params;
    moved.values += 0.05 * v;
    const Eigen::VectorXd fd = finite_difference(moved, [&](const FlatParams& p) { return kl_at(p, f.params); });
    CHECK(relative_error(kl_gradient(moved, f.params, obs, ctx), fd) < 1e-5);
    CHECK_THROWS_AS(fisher_vector_product(f.params, obs, ctx, Eigen::VectorXd::Ones(2), 0.0), UsageError);
  }

  TEST_CASE("feasible step with a slack constraint is the scaled natural gradient") {
    std::mt19937_64 rng(1);
    const Eigen::MatrixXd h = spd(6, rng);
    std::normal_distribution<double> nd(0.0, 1.0);
    SurrogateGradients grads;
    grads.g = Eigen::VectorXd::NullaryExpr(6, [&]() { return nd(rng); });
    grads.b = Eigen::VectorXd::NullaryExpr(6, [&]() { return nd(rng); });
    grads.c_slack = -5.0;
    TrustRegionConfig cfg;
    cfg.cg_iters = 50;
    const TrustRegionStep s = trust_region_step(grads, matrix_operator(h), cfg);
    const Eigen::VectorXd natural = -h.ldlt().solve(grads.g);
    CHECK(s.step_case == StepCase::Inactive);
    CHECK(cosine(s.delta, natural) >= 0.999);
    CHECK(s.model_kl == doctest::Approx(cfg.delta).epsilon(1e-6));
  }

  TEST_CASE("infeasible ball gives the recovery step along H^-1 b") {
    std::mt19937_64 rng(2);
    const Eigen::MatrixXd h = spd(5, rng);
    SurrogateGradients grads;
    grads.g = Eigen::VectorXd::Ones(5);
    grads.b = Eigen::VectorXd::Unit(5, 2) * 0.01;
    grads.c_slack = 0.5;
    TrustRegionConfig cfg;
    cfg.cg_iters = 50;
    const TrustRegionStep s = trust_region_step(grads, matrix_operator(h), cfg);
    CHECK(s.step_case == StepCase::Recovery);
    const Eigen::VectorXd dir = h.ldlt().solve(grads.b);
    CHECK(cosine(s.delta, dir) >= 0.999999);
    const double expected_scale = std::sqrt(2.0 * cfg.delta / grads.b.dot(dir));
    CHECK(s.delta.norm() == doctest::Approx(expected_scale * dir.norm()).epsilon(1e-6));
    cfg.recovery_scale = 0.5;
    CHECK(trust_region_step(grads, matrix_operator(h), cfg).delta.norm() ==
          doctest::Approx(0.5 * expected_scale * dir.norm()).epsilon(1e-6));
  }

  TEST_CASE("two-parameter problems agree with a brute-force search") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    TrustRegionConfig cfg;
    cfg.delta = 0.02;
    cfg.cg_iters = 20;
    const double radius = std::sqrt(2.0 * cfg.delta);
    int checked = 0;
    for (int trial = 0; trial < 60; ++trial) {
      SurrogateGradients grads;
      grads.g = Eigen::Vector2d(u(rng), u(rng));
      grads.b = Eigen::Vector2d(u(rng), u(rng));
      grads.c_slack = 0.3 * u(rng);
      // H = I: feasible region is the disc of radius sqrt(2 delta) with b.x >= c.
      // Linear objective, so the optimum is on the circle or on the chord.
      double best = std::numeric_limits<double>::infinity();
      bool any = false;
      const int n = 200000;
      for (int i = 0; i < n; ++i) {
        const double th = 2.0 * M_PI * i / n;
        const Eigen::Vector2d x(radius * std::cos(th), radius * std::sin(th));
        if (grads.b.dot(x) >= grads.c_slack) {
          best = std::min(best, grads.g.dot(x));
          any = true;
        }
      }
      const Eigen::Vector2d bn = grads.b.normalized();
      const double dist = grads.c_slack / grads.b.norm();
      if (std::abs(dist) <= radius) {
        const double half = std::sqrt(radius * radius - dist * dist);
        const Eigen::Vector2d perp(-bn.y(), bn.x());
        for (double sgn : {-1.0, 1.0}) {
          best = std::min(best, grads.g.dot(Eigen::Vector2d(dist * bn + sgn * half * perp)));
          any = true;
        }
      }
      const TrustRegionStep s = trust_region_step(grads, matrix_operator(Eigen::Matrix2d::Identity()), cfg);
      if (!any) {
        CHECK(s.step_case == StepCase::Recovery);
        continue;
      }
      CHECK(s.step_case != StepCase::Recovery);
      CHECK(grads.g.dot(s.delta) == doctest::Approx(best).epsilon(1e-3));
      CHECK(0.5 * s.delta.squaredNorm() <= cfg.delta * (1.0 + 1e-8));
      CHECK(grads.b.dot(s.delta) >= grads.c_slack - 1e-8);
      ++checked;
    }
    CHECK(checked > 20);
  }

  TEST_CASE("line search accepts small steps and rejects hopeless ones") {
    Fixture f;
    SurrogateContext ctx;
    ctx.kappa = 0.3;
    ctx.epsilon = 0.05;
    VTraceBatch batch = rollout(f.params, f.traces, ctx, f.rng, f.critics);
    TrustRegionConfig cfg;
    cfg.coverage_tolerance = 1e9;
    const LineSearchResult zero = line_search(f.params, Eigen::VectorXd::Zero(f.params.values.size()), batch, ctx, cfg);
    CHECK(zero.accepted);
    CHECK(zero.backtracks == 0);

    const Eigen::VectorXd huge = Eigen::VectorXd::Constant(f.params.values.size(), 1e4);
    const LineSearchResult no = line_search(f.params, huge, batch, ctx, cfg);
    CHECK_FALSE(no.accepted);
    CHECK(no.backtracks == cfg.backtrack_steps + 1);
    CHECK(no.params.values == f.params.values);

    std::normal_distribution<double> nd(0.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
      const double scale = std::exp(nd(f.rng) * 2.0 - 3.0);
      const Eigen::VectorXd d = scale * Eigen::VectorXd::NullaryExpr(f.params.values.size(), [&]() { return nd(f.rng); });
      const LineSearchResult r = line_search(f.params, d, batch, ctx, cfg);
      if (r.accepted) {
        CHECK(mean_kl(r.params, f.params, batch, ctx) <= cfg.delta);
        CHECK(r.kl <= cfg.delta);
      }
    }
  }

  TEST_CASE("line search enforces the coverage floor") {
    Fixture f;
    SurrogateContext ctx;
    ctx.kappa = 0.3;
    ctx.epsilon = 0.05;
    VTraceBatch batch = rollout(f.params, f.traces, ctx, f.rng, f.critics);
    const SurrogateGradients grads = surrogate_gradients(f.params, batch, ctx);
    REQUIRE(grads.b.norm() > 0.0);
    TrustRegionConfig cfg;
    cfg.delta = 1.0;
    // Straight down the coverage gradient: coverage must drop, so a large enough step is refused.
    const LineSearchResult r = line_search(f.params, -10.0 * grads.b / grads.b.norm(), batch, ctx, cfg);
    if (r.accepted) CHECK(r.coverage_after >= std::min(r.coverage_before, 0.9));
    else CHECK(r.params.values == f.params.values);
  }

  TEST_CASE("trust region config validation") {
    TrustRegionConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.backtrack_factor = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = TrustRegionConfig{};
    cfg.delta = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    CHECK(to_string(StepCase::Recovery) == "recovery");
  }
}
