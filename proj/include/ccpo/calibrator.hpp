#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "ccpo/conformal.hpp"
#include "ccpo/env.hpp"

namespace ccpo {

enum class CalibratorMode {
  /// A miss lowers kappa, which enlarges the sets.
  SetEnlarging,
  /// A miss raises kappa (the update as literally printed).
  PaperLiteral,
};

std::string_view to_string(CalibratorMode m) noexcept;
CalibratorMode calibrator_mode_from_string(std::string_view s);

struct CalibratorState {
  double kappa = 0.3;
  /// 1-based index of the next episode.
  long k = 1;
  double eta0 = 0.05;
  double xi = 0.1;
  double alpha = 0.1;
  CalibratorMode mode = CalibratorMode::SetEnlarging;

  void validate() const;
};

/// eta0 * k^(-1/2 - xi). Throws UsageError for k < 1.
double step_size(long k, double eta0, double xi);

/// Exponent of the schedule, -1/2 - xi.
constexpr double step_size_exponent(double xi) noexcept { return -0.5 - xi; }

/// One episode's update; kappa is clamped to [0,1] and k advances.
CalibratorState online_update(const CalibratorState& state, bool covered);

struct CalibrationReport {
  double kappa = 0.0;
  double granularity = 1e-6;
  long grid_size = 0;
  int n = 0;
  /// ceil((n+1)(1-alpha)): covered traces needed at the chosen kappa.
  long required = 0;
  /// Empirical coverage of C at the chosen kappa.
  double coverage = 0.0;
};

/// Largest kappa (over all real thresholds) at which the trace is still covered. Coverage is monotone in kappa
/// because the per-round distributions of a fixed trace do not depend on the threshold.
double max_covering_kappa(const FlatParams& score, const Trace& trace, double token_scale = kDefaultTokenScale);

/// Scans the grid 1, 1-g, 1-2g, ... for the largest kappa whose calibration coverage reaches
/// ceil((n+1)(1-alpha))/n; returns 0 when no grid point qualifies. Exact: it agrees with evaluating
/// every grid point by branch enumeration.
CalibrationReport batch_calibrate(const FlatParams& score, std::span<const Trace> traces, double alpha,
                                  double granularity = 1e-6, double token_scale = kDefaultTokenScale);

/// Coverage of C_{score,kappa} on the traces by branch enumeration.
double empirical_coverage(const FlatParams& score, double kappa, std::span<const Trace> traces,
                          double token_scale = kDefaultTokenScale);

}  // namespace ccpo
