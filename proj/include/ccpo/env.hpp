#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "ccpo/action.hpp"
#include "ccpo/trace.hpp"

namespace ccpo {

inline constexpr int kObservationDim = 6;
inline constexpr double kDefaultTokenScale = 1000.0;

/// Policy input at one round. Features are, in order: guide_agrees, guide_uncertainty,
/// round_index_normalized (t/T), cumulative_guide_tokens_normalized (prior rounds / scale),
/// base_answer_repeat, and a constant bias of 1.
struct Observation {
  std::array<double, kObservationDim> features{};
  /// Actions allowed at this round (NextRound is illegal at the horizon).
  ActionSet legal = ActionSet::all();
  int round = 1;

  std::span<const double> span() const noexcept { return features; }
  double guide_agrees() const noexcept { return features[0]; }
  double guide_uncertainty() const noexcept { return features[1]; }
  double round_index_normalized() const noexcept { return features[2]; }
  double cumulative_guide_tokens_normalized() const noexcept { return features[3]; }
  double base_answer_repeat() const noexcept { return features[4]; }
};

/// Single-owner cursor through one trace.
struct EpisodeState {
  const Trace* trace = nullptr;
  int round = 1;
  std::int64_t cumulative_guide_tokens = 0;
  bool terminated = false;
  std::optional<AnswerId> chosen_answer;

  static EpisodeState start(const Trace& trace);
};

/// Feature encoding of the current round. Throws UsageError on a terminated state.
Observation observe(const EpisodeState& state, double token_scale = kDefaultTokenScale);

/// Observation at `round` of the linear path through `trace`; identical to observing after round-1 NextRound steps.
Observation observe_round(const Trace& trace, int round, double token_scale = kDefaultTokenScale);

struct StepResult {
  EpisodeState state;
  /// API cost of this round's calls, plus lambda * set size on termination.
  double reward = 0.0;
  /// Finalized by the trainer from coverage_indicator once the prediction set is known.
  double constraint = 0.0;
  bool done = false;
};

/// Applies `action` at the current round. Both agents are called every round (the observation needs
/// the guide's judgment), so the round's full token usage is charged.
StepResult step(const EpisodeState& state, Action action, const PriceTable& prices, double lambda,
                int set_size_at_termination);

/// One rollout step as consumed by the critics and the optimizer.
struct Transition {
  Observation observation;
  Action action = Action::GuideAnswer;
  double behavior_prob = 1.0;
  double reward = 0.0;
  double constraint = 0.0;
  bool done = false;
};

/// Small ordered set of answer ids (at most 2T members in practice).
class AnswerSet {
 public:
  AnswerSet() = default;
  AnswerSet(std::initializer_list<AnswerId> ids) {
    for (AnswerId a : ids) insert(a);
  }

  void insert(AnswerId a);
  bool contains(AnswerId a) const;
  bool subset_of(const AnswerSet& other) const;
  int size() const noexcept { return static_cast<int>(ids_.size()); }
  bool empty() const noexcept { return ids_.empty(); }
  const std::vector<AnswerId>& ids() const noexcept { return ids_; }
  bool operator==(const AnswerSet&) const = default;

 private:
  std::vector<AnswerId> ids_;
};

struct TreeNode {
  int round = 1;
  ActionSet actions;
  double step_cost = 0.0;
};

struct TreeLeaf {
  AnswerId answer = 0;
  Action action = Action::GuideAnswer;
  /// Depth of the branch: the round on which the answer was taken.
  int length = 1;
  /// Sum of step costs along the branch's path.
  double branch_cost = 0.0;
};

/// Result of expanding every action of every visited conformal set. Visited nodes form a single path
/// because only NextRound continues.
struct RolloutTree {
  std::vector<TreeNode> nodes;
  std::vector<TreeLeaf> leaves;

  int max_length() const;
  /// Realized spend: each visited round's calls are issued once.
  double executed_cost() const;
};

using ConformalSetFn = std::function<ActionSet(const Observation&)>;

/// Expands all branches. The set function's output is intersected with the legal actions;
/// an empty result is a usage error.
RolloutTree enumerate_branches(const Trace& trace, const ConformalSetFn& set_fn, const PriceTable& prices,
                               double token_scale = kDefaultTokenScale);

/// Every answer any action sequence can produce: all base and guide answers over the T rounds.
AnswerSet answer_universe(const Trace& trace);

/// Answers at the tree's leaves.
AnswerSet prediction_set(const RolloutTree& tree);

/// 1 iff y_star is in the prediction set or outside the universe. Requires pred to be a subset of universe.
int coverage_indicator(const AnswerSet& pred, const AnswerSet& universe, AnswerId y_star);

}  // namespace ccpo
