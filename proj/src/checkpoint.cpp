#include "ccpo/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ccpo/error.hpp"

namespace ccpo {

using nlohmann::json;

namespace {

json params_to_json(const FlatParams& p) {
  return json{{"layers", p.shape.layers}, {"values", std::vector<double>(p.values.data(), p.values.data() + p.values.size())}};
}

FlatParams params_from_json(const json& j, const char* field) {
  FlatParams p;
  p.shape.layers = j.at("layers").get<std::vector<int>>();
  const auto v = j.at("values").get<std::vector<double>>();
  p.values = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  try {
    p.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(field, e.what());
  }
  return p;
}

json report_to_json(const CalibrationReport& r) {
  return json{{"kappa", r.kappa}, {"granularity", r.granularity}, {"grid_size", r.grid_size},
              {"n", r.n},         {"required", r.required},       {"coverage", r.coverage}};
}

CalibrationReport report_from_json(const json& j) {
  CalibrationReport r;
  r.kappa = j.at("kappa").get<double>();
  r.granularity = j.at("granularity").get<double>();
  r.grid_size = j.at("grid_size").get<long>();
  r.n = j.at("n").get<int>();
  r.required = j.at("required").get<long>();
  r.coverage = j.at("coverage").get<double>();
  return r;
}

}  // namespace

Checkpoint make_checkpoint(const TrainResult& result, const RunConfig& config, bool finalized) {
  Checkpoint c;
  c.result = result;
  c.result.logs.clear();
  c.alpha = config.alpha;
  c.lambda = config.lambda;
  c.seed = config.seed;
  c.horizon = config.horizon;
  c.token_scale = config.token_scale;
  c.finalized = finalized;
  return c;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  const TrainResult& r = ckpt.result;
  const TrainerState& s = r.state;
  std::ostringstream rng;
  rng << s.rng;
  nlohmann::ordered_json j;
  j["format"] = "ccpo-checkpoint";
  j["version"] = kCheckpointVersion;
  j["method"] = std::string(to_string(s.method));
  j["finalized"] = ckpt.finalized;
  j["iteration"] = s.iteration;
  j["alpha"] = ckpt.alpha;
  j["lambda"] = ckpt.lambda;
  j["seed"] = ckpt.seed;
  j["horizon"] = ckpt.horizon;
  j["feature_dim"] = ckpt.feature_dim;
  j["token_scale"] = ckpt.token_scale;
  j["kappa"] = r.kappa;
  j["online_kappa"] = r.online_kappa;
  j["calibration"] = report_to_json(r.calibration);
  j["fixed_rule"] = r.fixed_rule ? json{{"lo", r.fixed_rule->lo}, {"hi", r.fixed_rule->hi}} : json(nullptr);
  j["calibrator"] = json{{"kappa", s.calibrator.kappa},
                         {"k", s.calibrator.k},
                         {"eta0", s.calibrator.eta0},
                         {"xi", s.calibrator.xi},
                         {"alpha", s.calibrator.alpha},
                         {"mode", std::string(to_string(s.calibrator.mode))}};
  j["rng"] = rng.str();
  j["policy"] = params_to_json(s.policy);
  j["critics"] = json{{"value", params_to_json(s.critics.value)}, {"constraint", params_to_json(s.critics.constraint)}};
  return j.dump();
}

Checkpoint parse_checkpoint(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(1, std::string("checkpoint: ") + e.what());
  }
  if (!j.is_object() || j.value("format", "") != "ccpo-checkpoint") throw ValidationError("format", "not a checkpoint");
  if (j.value("version", -1) != kCheckpointVersion)
    throw ValidationError("version", "unsupported checkpoint version");
  Checkpoint c;
  try {
    TrainResult& r = c.result;
    TrainerState& s = r.state;
    s.method = method_from_string(j.at("method").get<std::string>());
    c.finalized = j.at("finalized").get<bool>();
    s.iteration = j.at("iteration").get<int>();
    c.alpha = j.at("alpha").get<double>();
    c.lambda = j.at("lambda").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.horizon = j.at("horizon").get<int>();
    c.feature_dim = j.at("feature_dim").get<int>();
    c.token_scale = j.at("token_scale").get<double>();
    r.kappa = j.at("kappa").get<double>();
    r.online_kappa = j.at("online_kappa").get<double>();
    r.calibration = report_from_json(j.at("calibration"));
    if (!j.at("fixed_rule").is_null())
      r.fixed_rule = FixedThresholdRule{j["fixed_rule"].at("lo").get<double>(), j["fixed_rule"].at("hi").get<double>()};
    const json& cal = j.at("calibrator");
    s.calibrator.kappa = cal.at("kappa").get<double>();
    s.calibrator.k = cal.at("k").get<long>();
    s.calibrator.eta0 = cal.at("eta0").get<double>();
    s.calibrator.xi = cal.at("xi").get<double>();
    s.calibrator.alpha = cal.at("alpha").get<double>();
    s.calibrator.mode = calibrator_mode_from_string(cal.at("mode").get<std::string>());
    std::istringstream rng(j.at("rng").get<std::string>());
    rng >> s.rng;
    if (!rng) throw ValidationError("rng", "unreadable generator state");
    s.policy = params_from_json(j.at("policy"), "policy");
    s.critics.value = params_from_json(j.at("critics").at("value"), "critics.value");
    s.critics.constraint = params_from_json(j.at("critics").at("constraint"), "critics.constraint");
  } catch (const json::exception& e) {
    throw ValidationError("checkpoint", e.what());
  } catch (const UsageError& e) {
    throw ValidationError("method", e.what());
  }
  if (c.result.state.policy.shape.input_dim() != c.feature_dim)
    throw ValidationError("policy", "input dimension disagrees with feature_dim");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << serialize_checkpoint(ckpt) << '\n';
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

void check_compatible(const Checkpoint& ckpt, const RunConfig& config) {
  if (ckpt.horizon != config.horizon)
    throw ValidationError("horizon", "checkpoint trained with T=" + std::to_string(ckpt.horizon) +
                                         ", traces/config use T=" + std::to_string(config.horizon));
  if (ckpt.feature_dim != kObservationDim)
    throw ValidationError("feature_dim", "checkpoint expects " + std::to_string(ckpt.feature_dim) + " features");
}

std::string calibration_report_json(const CalibrationReport& report) { return report_to_json(report).dump(); }

}  // namespace ccpo
