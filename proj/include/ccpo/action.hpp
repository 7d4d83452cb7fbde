#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace ccpo {

enum class Action : std::uint8_t { GuideAnswer = 0, BaseAnswer = 1, NextRound = 2 };

inline constexpr int kNumActions = 3;
inline constexpr std::array<Action, kNumActions> kAllActions{Action::GuideAnswer, Action::BaseAnswer,
                                                            Action::NextRound};

constexpr int index_of(Action a) noexcept { return static_cast<int>(a); }

constexpr std::string_view to_string(Action a) noexcept {
  switch (a) {
    case Action::GuideAnswer: return "guide_answer";
    case Action::BaseAnswer: return "base_answer";
    case Action::NextRound: return "next_round";
  }
  return "?";
}

constexpr bool is_answer(Action a) noexcept { return a != Action::NextRound; }

/// Small bitset over the three actions. Also used as a legality mask.
class ActionSet {
 public:
  constexpr ActionSet() = default;
  constexpr ActionSet(std::initializer_list<Action> actions) {
    for (Action a : actions) insert(a);
  }

  static constexpr ActionSet all() { return ActionSet{Action::GuideAnswer, Action::BaseAnswer, Action::NextRound}; }
  static constexpr ActionSet legal_at(int round, int horizon) {
    return round >= horizon ? ActionSet{Action::GuideAnswer, Action::BaseAnswer} : all();
  }

  constexpr void insert(Action a) noexcept { bits_ |= bit(a); }
  constexpr void erase(Action a) noexcept { bits_ &= static_cast<std::uint8_t>(~bit(a)); }
  constexpr bool contains(Action a) const noexcept { return (bits_ & bit(a)) != 0; }
  constexpr bool empty() const noexcept { return bits_ == 0; }
  constexpr int size() const noexcept { return ((bits_ >> 0) & 1) + ((bits_ >> 1) & 1) + ((bits_ >> 2) & 1); }
  constexpr bool subset_of(ActionSet other) const noexcept { return (bits_ & ~other.bits_) == 0; }
  constexpr ActionSet intersect(ActionSet other) const noexcept { return from_bits(bits_ & other.bits_); }
  constexpr std::uint8_t bits() const noexcept { return bits_; }
  static constexpr ActionSet from_bits(unsigned b) noexcept {
    ActionSet s;
    s.bits_ = static_cast<std::uint8_t>(b & 0x7u);
    return s;
  }

  constexpr bool operator==(const ActionSet&) const = default;

 private:
  static constexpr std::uint8_t bit(Action a) noexcept { return static_cast<std::uint8_t>(1u << index_of(a)); }
  std::uint8_t bits_ = 0;
};

}  // namespace ccpo
