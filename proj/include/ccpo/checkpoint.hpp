#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "ccpo/trainer.hpp"

namespace ccpo {

inline constexpr int kCheckpointVersion = 1;

/// A finished (or paused) run: trainer state, derived thresholds, and the run settings that evaluation
/// must agree with.
struct Checkpoint {
  TrainResult result;
  double alpha = 0.1;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  int horizon = 4;
  int feature_dim = kObservationDim;
  double token_scale = kDefaultTokenScale;
  /// False for a mid-run snapshot whose thresholds are not calibrated yet.
  bool finalized = true;
};

Checkpoint make_checkpoint(const TrainResult& result, const RunConfig& config, bool finalized = true);

std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Throws ParseError (line 1) for malformed JSON and ValidationError for a wrong format, version or shape.
Checkpoint parse_checkpoint(std::string_view text);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Throws ValidationError when the checkpoint cannot be evaluated under `config` (horizon, feature dimension).
void check_compatible(const Checkpoint& ckpt, const RunConfig& config);

std::string calibration_report_json(const CalibrationReport& report);

}  // namespace ccpo
