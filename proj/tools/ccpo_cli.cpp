#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ccpo/checkpoint.hpp"
#include "ccpo/collector.hpp"
#include "ccpo/config.hpp"
#include "ccpo/error.hpp"
#include "ccpo/trainer.hpp"

namespace fs = std::filesystem;
using namespace ccpo;

namespace {

KeyValues overrides_from(const std::vector<std::string>& sets) {
  KeyValues kvs;
  for (const auto& s : sets) kvs.push_back(split_override(s));
  return kvs;
}

KeyValues read_key_values(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

/// Collector keys live in the same file as run keys; split them out before the run parser sees them.
KeyValues without_collector(const KeyValues& kvs) {
  KeyValues out;
  for (const auto& kv : kvs)
    if (kv.first.rfind("collector.", 0) != 0) out.push_back(kv);
  return out;
}

AppConfig app_config(const std::string& path, const std::vector<std::string>& sets) {
  KeyValues all = without_collector(read_key_values(path));
  for (const auto& kv : without_collector(overrides_from(sets))) all.push_back(kv);
  return load_config({}, all);
}

int cmd_generate(const std::string& config_path, const std::vector<std::string>& sets, const std::string& output) {
  const AppConfig cfg = app_config(config_path, sets);
  const TraceCorpus corpus = generate_synthetic(cfg.data.synthetic);
  save_traces(output, corpus);
  long unsolvable = 0;
  for (const auto& t : corpus.traces) unsolvable += answer_universe(t).contains(t.true_answer) ? 0 : 1;
  std::printf("traces=%zu horizon=%d unsolvable_rate=%.4f output=%s\n", corpus.traces.size(), corpus.header.horizon,
              corpus.traces.empty() ? 0.0 : static_cast<double>(unsolvable) / static_cast<double>(corpus.traces.size()),
              output.c_str());
  return 0;
}

DataSplit data_split(AppConfig& cfg) {
  const TraceCorpus corpus = load_corpus(cfg);
  if (corpus.header.horizon != cfg.run.horizon)
    throw ValidationError("horizon", "trace file declares T=" + std::to_string(corpus.header.horizon) +
                                         " but the config uses T=" + std::to_string(cfg.run.horizon));
  return split_corpus(corpus.traces, cfg.data.calibration_size, cfg.data.test_size);
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets, const std::string& output_dir,
              const std::string& resume_path) {
  AppConfig cfg = app_config(config_path, sets);
  if (!output_dir.empty()) cfg.output_dir = output_dir;
  const DataSplit split = data_split(cfg);
  fs::create_directories(cfg.output_dir);
  const fs::path dir(cfg.output_dir);

  std::ofstream log_file(dir / "iterations.jsonl", resume_path.empty() ? std::ios::trunc : std::ios::app);
  if (!log_file) throw std::runtime_error("cannot write " + (dir / "iterations.jsonl").string());
  const LogSink sink = [&](const IterationLog& l) { log_file << to_json_line(l) << '\n' << std::flush; };

  TrainResult result;
  if (!resume_path.empty()) {
    Checkpoint ck = load_checkpoint(resume_path);
    check_compatible(ck, cfg.run);
    cfg.run.method = ck.result.state.method;
    result = resume(std::move(ck.result.state), cfg.run, split.train, split.calibration, sink);
  } else if (cfg.run.method == Method::Ccpo) {
    result = run_ccpo(cfg.run, split.train, split.calibration, sink);
  } else {
    result = run_baseline(cfg.run.method, cfg.run, split.train, split.calibration, sink);
  }
  save_checkpoint(dir / "checkpoint.json", make_checkpoint(result, cfg.run));
  std::ofstream(dir / "calibration.json") << calibration_report_json(result.calibration) << '\n';
  std::printf("method=%s iterations=%d kappa=%.6f online_kappa=%.6f output=%s\n",
              std::string(to_string(result.state.method)).c_str(), result.state.iteration, result.kappa,
              result.online_kappa, cfg.output_dir.c_str());
  return 0;
}

std::vector<Method> methods_of(Method trained) {
  switch (trained) {
    case Method::Cpo:
    case Method::CpoBatch:
    case Method::CpoOnline:
      return {Method::Cpo, Method::CpoBatch, Method::CpoOnline};
    default:
      return {trained};
  }
}

int cmd_eval(const std::string& config_path, const std::vector<std::string>& sets,
             const std::vector<std::string>& checkpoints, const std::string& traces_path, const std::string& output,
             const std::vector<std::string>& only) {
  AppConfig cfg = app_config(config_path, sets);
  std::vector<Trace> test;
  if (!traces_path.empty()) {
    TraceCorpus corpus = load_traces(traces_path);
    cfg.run.horizon = corpus.header.horizon;
    test = std::move(corpus.traces);
  } else {
    test = data_split(cfg).test;
  }
  if (test.empty()) throw UsageError("empty test set");

  std::ofstream out(output, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + output);
  out << csv_header() << '\n';
  for (const auto& path : checkpoints) {
    const Checkpoint ck = load_checkpoint(path);
    check_compatible(ck, cfg.run);
    RunConfig rc = cfg.run;
    rc.alpha = ck.alpha;
    rc.lambda = ck.lambda;
    rc.seed = ck.seed;
    rc.token_scale = ck.token_scale;
    for (Method m : methods_of(ck.result.state.method)) {
      if (!only.empty() && std::find(only.begin(), only.end(), std::string(to_string(m))) == only.end()) continue;
      const MetricsRecord rec = evaluate_method(m, ck.result, test, rc);
      out << csv_row(m, rc, rec) << '\n';
      std::printf("%s\n", csv_row(m, rc, rec).c_str());
    }
  }
  return 0;
}

int cmd_collect(const std::string& config_path, const std::vector<std::string>& sets, const std::string& questions,
                const std::string& output) {
  KeyValues kvs = read_key_values(config_path);
  for (const auto& kv : overrides_from(sets)) kvs.push_back(kv);
  CollectorConfig cc = collector_config_from(kvs);
  if (!questions.empty()) cc.questions_path = questions;
  cc.validate();
  if (cc.questions_path.empty()) throw ValidationError("collector.questions_path", "must be set");
  const auto qs = load_questions(cc.questions_path);
  HttpChatClient client(cc.timeout_seconds);
  const CollectSummary s = collect_corpus(qs, cc, client, [](std::string_view msg) { std::cerr << msg << '\n'; });
  save_traces(output, s.corpus);
  std::printf("collected=%zu skipped=%zu output=%s\n", s.corpus.traces.size(), s.skipped.size(), output.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conformal constrained policy optimization: corpus generation, training, evaluation, collection"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "key = value config file");
    sub->add_option("--set", sets, "override a config key (key=value); repeatable")->take_all();
  };

  std::string gen_output;
  auto* gen = app.add_subcommand("generate", "write a synthetic trace corpus");
  add_common(gen);
  gen->add_option("-o,--output", gen_output, "trace file to write")->required();

  std::string train_dir;
  std::string resume_path;
  auto* train = app.add_subcommand("train", "train a policy (or fit a baseline)");
  add_common(train);
  train->add_option("-o,--output-dir", train_dir, "directory for checkpoint and logs (overrides output_dir)");
  train->add_option("--resume", resume_path, "checkpoint to continue from");

  std::vector<std::string> checkpoints;
  std::string eval_traces;
  std::string eval_output;
  std::vector<std::string> eval_methods;
  auto* eval = app.add_subcommand("eval", "evaluate checkpoints on a test split");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoints, "checkpoint file; repeatable")->required();
  eval->add_option("--traces", eval_traces, "test trace file (default: test split of the configured corpus)");
  eval->add_option("-o,--output", eval_output, "CSV to write")->required();
  eval->add_option("--methods", eval_methods, "restrict rows to these methods");

  std::string questions;
  std::string collect_output;
  auto* collect = app.add_subcommand("collect", "build a trace corpus from two chat-completion endpoints");
  add_common(collect);
  collect->add_option("--questions", questions, "question file (overrides collector.questions_path)");
  collect->add_option("-o,--output", collect_output, "trace file to write")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate(config_path, sets, gen_output);
    if (train->parsed()) return cmd_train(config_path, sets, train_dir, resume_path);
    if (eval->parsed()) return cmd_eval(config_path, sets, checkpoints, eval_traces, eval_output, eval_methods);
    if (collect->parsed()) return cmd_collect(config_path, sets, questions, collect_output);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
