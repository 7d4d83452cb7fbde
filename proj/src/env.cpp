#include "ccpo/env.hpp"

#include <algorithm>

#include "ccpo/error.hpp"

namespace ccpo {

EpisodeState EpisodeState::start(const Trace& trace) {
  if (trace.rounds.empty()) throw UsageError("EpisodeState::start: trace has no rounds");
  EpisodeState s;
  s.trace = &trace;
  return s;
}

Observation observe(const EpisodeState& state, double token_scale) {
  if (state.trace == nullptr) throw UsageError("observe: state has no trace");
  if (state.terminated) throw UsageError("observe: episode already terminated");
  const Trace& trace = *state.trace;
  const int horizon = trace.horizon();
  if (state.round < 1 || state.round > horizon) throw UsageError("observe: round outside 1..T");
  if (!(token_scale > 0.0)) throw UsageError("observe: token scale must be positive");

  const RoundRecord& r = trace.rounds[static_cast<std::size_t>(state.round - 1)];
  Observation o;
  o.round = state.round;
  o.legal = ActionSet::legal_at(state.round, horizon);
  o.features[0] = r.guide_agrees ? 1.0 : 0.0;
  o.features[1] = r.guide_uncertainty;
  o.features[2] = static_cast<double>(state.round) / static_cast<double>(horizon);
  o.features[3] = static_cast<double>(state.cumulative_guide_tokens) / token_scale;
  o.features[4] =
      state.round > 1 && trace.rounds[static_cast<std::size_t>(state.round - 2)].base_answer == r.base_answer ? 1.0
                                                                                                             : 0.0;
  o.features[5] = 1.0;
  return o;
}

Observation observe_round(const Trace& trace, int round, double token_scale) {
  EpisodeState s = EpisodeState::start(trace);
  if (round < 1 || round > trace.horizon()) throw UsageError("observe_round: round outside 1..T");
  for (int t = 1; t < round; ++t) {
    const auto& r = trace.rounds[static_cast<std::size_t>(t - 1)];
    s.cumulative_guide_tokens += r.guide_tokens_in + r.guide_tokens_out;
  }
  s.round = round;
  return observe(s, token_scale);
}

StepResult step(const EpisodeState& state, Action action, const PriceTable& prices, double lambda,
                int set_size_at_termination) {
  if (state.trace == nullptr) throw UsageError("step: state has no trace");
  if (state.terminated) throw UsageError("step: episode already terminated");
  const Trace& trace = *state.trace;
  const int horizon = trace.horizon();
  if (!ActionSet::legal_at(state.round, horizon).contains(action))
    throw UsageError("step: NextRound is illegal at the final round");

  const RoundRecord& r = trace.rounds[static_cast<std::size_t>(state.round - 1)];
  StepResult out;
  out.state = state;
  out.reward = step_cost(r, CallSet{}, prices);
  switch (action) {
    case Action::GuideAnswer:
      out.state.chosen_answer = r.guide_answer;
      break;
    case Action::BaseAnswer:
      out.state.chosen_answer = r.base_answer;
      break;
    case Action::NextRound:
      out.state.cumulative_guide_tokens += r.guide_tokens_in + r.guide_tokens_out;
      out.state.round += 1;
      break;
  }
  if (is_answer(action)) {
    out.state.terminated = true;
    out.done = true;
    out.reward += lambda * static_cast<double>(set_size_at_termination);
  }
  return out;
}

void AnswerSet::insert(AnswerId a) {
  auto it = std::lower_bound(ids_.begin(), ids_.end(), a);
  if (it == ids_.end() || *it != a) ids_.insert(it, a);
}

bool AnswerSet::contains(AnswerId a) const { return std::binary_search(ids_.begin(), ids_.end(), a); }

bool AnswerSet::subset_of(const AnswerSet& other) const {
  return std::includes(other.ids_.begin(), other.ids_.end(), ids_.begin(), ids_.end());
}

int RolloutTree::max_length() const {
  int m = 0;
  for (const auto& l : leaves) m = std::max(m, l.length);
  return m;
}

double RolloutTree::executed_cost() const {
  double c = 0.0;
  for (const auto& n : nodes) c += n.step_cost;
  return c;
}

RolloutTree enumerate_branches(const Trace& trace, const ConformalSetFn& set_fn, const PriceTable& prices,
                               double token_scale) {
  RolloutTree tree;
  EpisodeState state = EpisodeState::start(trace);
  double path_cost = 0.0;
  for (;;) {
    const Observation obs = observe(state, token_scale);
    const ActionSet actions = set_fn(obs).intersect(obs.legal);
    if (actions.empty()) throw UsageError("enumerate_branches: conformal set is empty at round " + std::to_string(obs.round));
    const RoundRecord& r = trace.rounds[static_cast<std::size_t>(state.round - 1)];
    const double cost = step_cost(r, CallSet{}, prices);
    path_cost += cost;
    tree.nodes.push_back(TreeNode{state.round, actions, cost});
    if (actions.contains(Action::GuideAnswer))
      tree.leaves.push_back(TreeLeaf{r.guide_answer, Action::GuideAnswer, state.round, path_cost});
    if (actions.contains(Action::BaseAnswer))
      tree.leaves.push_back(TreeLeaf{r.base_answer, Action::BaseAnswer, state.round, path_cost});
    if (!actions.contains(Action::NextRound)) break;
    state.cumulative_guide_tokens += r.guide_tokens_in + r.guide_tokens_out;
    state.round += 1;
  }
  return tree;
}

AnswerSet answer_universe(const Trace& trace) {
  AnswerSet u;
  for (const auto& r : trace.rounds) {
    u.insert(r.base_answer);
    u.insert(r.guide_answer);
  }
  return u;
}

AnswerSet prediction_set(const RolloutTree& tree) {
  AnswerSet s;
  for (const auto& l : tree.leaves) s.insert(l.answer);
  return s;
}

int coverage_indicator(const AnswerSet& pred, const AnswerSet& universe, AnswerId y_star) {
  if (!pred.subset_of(universe)) throw UsageError("coverage_indicator: prediction set is not inside the answer universe");
  return (pred.contains(y_star) || !universe.contains(y_star)) ? 1 : 0;
}

}  // namespace ccpo
