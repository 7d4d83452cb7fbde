#include "ccpo/config.hpp"

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "ccpo/error.hpp"

namespace ccpo {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double to_double(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE) throw ValidationError(key, "expected a number, got '" + v + "'");
  return d;
}

long long to_int(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const long long i = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE) throw ValidationError(key, "expected an integer, got '" + v + "'");
  return i;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  if (!v.empty() && v[0] == '-') throw ValidationError(key, "expected a non-negative integer");
  errno = 0;
  char* end = nullptr;
  const unsigned long long u = std::strtoull(v.c_str(), &end, 10);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE) throw ValidationError(key, "expected an integer, got '" + v + "'");
  return u;
}

using Setter = std::function<void(AppConfig&, const std::string&, const std::string&)>;

Setter dbl(double RunConfig::*m) {
  return [m](AppConfig& c, const std::string& k, const std::string& v) { c.run.*m = to_double(k, v); };
}
Setter integer(int RunConfig::*m) {
  return [m](AppConfig& c, const std::string& k, const std::string& v) { c.run.*m = static_cast<int>(to_int(k, v)); };
}
Setter tr_dbl(double TrustRegionConfig::*m) {
  return [m](AppConfig& c, const std::string& k, const std::string& v) { c.run.trust_region.*m = to_double(k, v); };
}
Setter tr_int(int TrustRegionConfig::*m) {
  return [m](AppConfig& c, const std::string& k, const std::string& v) {
    c.run.trust_region.*m = static_cast<int>(to_int(k, v));
  };
}
Setter price(double PriceTable::*m) {
  return [m](AppConfig& c, const std::string& k, const std::string& v) { c.run.prices.*m = to_double(k, v); };
}
Setter syn_dbl(double SyntheticConfig::*m) {
  return [m](AppConfig& c, const std::string& k, const std::string& v) { c.data.synthetic.*m = to_double(k, v); };
}
Setter syn_int(int SyntheticConfig::*m) {
  return [m](AppConfig& c, const std::string& k, const std::string& v) {
    c.data.synthetic.*m = static_cast<int>(to_int(k, v));
  };
}

const std::vector<std::pair<std::string, Setter>>& setters() {
  static const std::vector<std::pair<std::string, Setter>> table = {
      {"method", [](AppConfig& c, const std::string& k, const std::string& v) {
         try {
           c.run.method = method_from_string(v);
         } catch (const UsageError& e) {
           throw ValidationError(k, e.what());
         }
       }},
      {"alpha", dbl(&RunConfig::alpha)},
      {"lambda", dbl(&RunConfig::lambda)},
      {"horizon", [](AppConfig& c, const std::string& k, const std::string& v) {
         c.run.horizon = static_cast<int>(to_int(k, v));
         c.data.synthetic.horizon = c.run.horizon;
       }},
      {"epsilon", dbl(&RunConfig::epsilon)},
      {"xi", dbl(&RunConfig::xi)},
      {"eta0", dbl(&RunConfig::eta0)},
      {"kappa0", dbl(&RunConfig::kappa0)},
      {"rho_bar", dbl(&RunConfig::rho_bar)},
      {"critic_lr", dbl(&RunConfig::critic_lr)},
      {"width", integer(&RunConfig::width)},
      {"depth", integer(&RunConfig::depth)},
      {"batch_size", integer(&RunConfig::batch_size)},
      {"iterations", integer(&RunConfig::iterations)},
      {"seed", [](AppConfig& c, const std::string& k, const std::string& v) { c.run.seed = to_uint(k, v); }},
      {"token_scale", dbl(&RunConfig::token_scale)},
      {"price_base_in", price(&PriceTable::base_in)},
      {"price_base_out", price(&PriceTable::base_out)},
      {"price_guide_in", price(&PriceTable::guide_in)},
      {"price_guide_out", price(&PriceTable::guide_out)},
      {"calibrator_mode", [](AppConfig& c, const std::string&, const std::string& v) {
         c.run.calibrator_mode = calibrator_mode_from_string(v);
       }},
      {"bound_mode", [](AppConfig& c, const std::string& k, const std::string& v) {
         if (v == "union") c.run.bound_mode = BoundMode::Union;
         else if (v == "literal") c.run.bound_mode = BoundMode::Literal;
         else throw ValidationError(k, "expected union or literal, got '" + v + "'");
       }},
      {"calibration_granularity", dbl(&RunConfig::calibration_granularity)},
      {"delta", tr_dbl(&TrustRegionConfig::delta)},
      {"cg_iters", tr_int(&TrustRegionConfig::cg_iters)},
      {"cg_tol", tr_dbl(&TrustRegionConfig::cg_tol)},
      {"damping", tr_dbl(&TrustRegionConfig::damping)},
      {"backtrack_factor", tr_dbl(&TrustRegionConfig::backtrack_factor)},
      {"backtrack_steps", tr_int(&TrustRegionConfig::backtrack_steps)},
      {"recovery_scale", tr_dbl(&TrustRegionConfig::recovery_scale)},
      {"coverage_tolerance", tr_dbl(&TrustRegionConfig::coverage_tolerance)},
      {"score_kl_weight", tr_dbl(&TrustRegionConfig::score_kl_weight)},
      {"cost_accounting", [](AppConfig& c, const std::string&, const std::string& v) {
         c.run.cost_accounting = cost_accounting_from_string(v);
       }},
      {"fixed_lo", dbl(&RunConfig::fixed_lo)},
      {"fixed_hi", dbl(&RunConfig::fixed_hi)},
      {"fixed_grid", dbl(&RunConfig::fixed_grid)},
      {"trace_path", [](AppConfig& c, const std::string&, const std::string& v) { c.data.trace_path = v; }},
      {"calibration_size", [](AppConfig& c, const std::string& k, const std::string& v) {
         c.data.calibration_size = to_uint(k, v);
       }},
      {"test_size", [](AppConfig& c, const std::string& k, const std::string& v) { c.data.test_size = to_uint(k, v); }},
      {"output_dir", [](AppConfig& c, const std::string&, const std::string& v) { c.output_dir = v; }},
      {"synthetic.num_traces", syn_int(&SyntheticConfig::num_traces)},
      {"synthetic.answer_vocab_size", syn_int(&SyntheticConfig::answer_vocab_size)},
      {"synthetic.difficulty_alpha", syn_dbl(&SyntheticConfig::difficulty_alpha)},
      {"synthetic.difficulty_beta", syn_dbl(&SyntheticConfig::difficulty_beta)},
      {"synthetic.base_initial", syn_dbl(&SyntheticConfig::base_initial)},
      {"synthetic.base_gain", syn_dbl(&SyntheticConfig::base_gain)},
      {"synthetic.base_difficulty_weight", syn_dbl(&SyntheticConfig::base_difficulty_weight)},
      {"synthetic.guide_correct_prob", syn_dbl(&SyntheticConfig::guide_correct_prob)},
      {"synthetic.guide_difficulty_weight", syn_dbl(&SyntheticConfig::guide_difficulty_weight)},
      {"synthetic.guide_judgment_accuracy", syn_dbl(&SyntheticConfig::guide_judgment_accuracy)},
      {"synthetic.uncertainty_noise", syn_dbl(&SyntheticConfig::uncertainty_noise)},
      {"synthetic.unsolvable_fraction", syn_dbl(&SyntheticConfig::unsolvable_fraction)},
      {"synthetic.distractors", syn_int(&SyntheticConfig::distractors)},
      {"synthetic.question_tokens_mean", syn_dbl(&SyntheticConfig::question_tokens_mean)},
      {"synthetic.base_prompt_tokens", syn_dbl(&SyntheticConfig::base_prompt_tokens)},
      {"synthetic.base_context_growth", syn_dbl(&SyntheticConfig::base_context_growth)},
      {"synthetic.base_tokens_out_mean", syn_dbl(&SyntheticConfig::base_tokens_out_mean)},
      {"synthetic.guide_prompt_tokens", syn_dbl(&SyntheticConfig::guide_prompt_tokens)},
      {"synthetic.guide_tokens_out_agree", syn_dbl(&SyntheticConfig::guide_tokens_out_agree)},
      {"synthetic.guide_tokens_out_disagree", syn_dbl(&SyntheticConfig::guide_tokens_out_disagree)},
      {"synthetic.seed", [](AppConfig& c, const std::string& k, const std::string& v) {
         c.data.synthetic.seed = to_uint(k, v);
       }},
  };
  return table;
}

}  // namespace

KeyValues parse_key_values(std::string_view text) {
  KeyValues out;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ParseError(line_no, "expected key = value");
    std::string key = trim(std::string_view(body).substr(0, eq));
    std::string value = trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw ParseError(line_no, "empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

void apply_setting(AppConfig& config, const std::string& key, const std::string& value) {
  for (const auto& [name, set] : setters()) {
    if (name == key) {
      set(config, key, value);
      return;
    }
  }
  throw ValidationError(key, "unknown configuration key");
}

std::pair<std::string, std::string> split_override(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ValidationError(text, "override must look like key=value");
  return {trim(std::string_view(text).substr(0, eq)), trim(std::string_view(text).substr(eq + 1))};
}

void validate(const AppConfig& config) {
  config.run.validate();
  if (config.data.trace_path.empty()) {
    config.data.synthetic.validate();
    if (config.data.synthetic.horizon != config.run.horizon)
      throw ValidationError("horizon", "synthetic horizon differs from run horizon");
  }
}

AppConfig load_config(const std::filesystem::path& path, const KeyValues& overrides) {
  AppConfig config;
  bool synthetic_seed_set = false;
  auto apply_all = [&](const KeyValues& kvs) {
    for (const auto& [k, v] : kvs) {
      apply_setting(config, k, v);
      if (k == "synthetic.seed") synthetic_seed_set = true;
    }
  };
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    apply_all(parse_key_values(ss.str()));
  }
  apply_all(overrides);
  // The corpus follows the run seed unless pinned separately.
  if (!synthetic_seed_set) config.data.synthetic.seed = config.run.seed;
  validate(config);
  return config;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [name, set] : setters()) keys.push_back(name);
  return keys;
}

TraceCorpus load_corpus(const AppConfig& config) {
  if (!config.data.trace_path.empty()) return load_traces(config.data.trace_path);
  return generate_synthetic(config.data.synthetic);
}

}  // namespace ccpo
