#include "cbx/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cbx/bench.hpp"
#include "cbx/error.hpp"
#include "cbx/eval.hpp"
#include "cbx/experiment.hpp"
#include "cbx/format.hpp"
#include "cbx/synthenv.hpp"
#include "cbx/trainers.hpp"

namespace cbx {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << text;
  f.close();
  if (!f) throw IoError("write failed: " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string epoch_name(std::size_t e) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%03zu.json", e);
  return buf;
}

// --- options shared by train and benchmark ---------------------------------

struct TrainOptions {
  std::string data_dir;
  std::string benchmark = "global";
  std::string init;  // default: <data>/logging.json
  std::string name;  // default: benchmark name
  std::vector<std::uint64_t> seeds{1};
  std::size_t epochs = 32;
  std::size_t batch_size = 512;
  std::size_t log_every = 10;
  double lr = 1e-3;
  std::string optimizer = "adam";
  double w = 10.0;
  MinimaxConfig minimax;
  double eta_inner = 0.01;
  double lambda = 1.0;
  double uv_lr = 0.01;
  std::string uv_optimizer = "adam";

  TrainConfig train_config(std::uint64_t seed) const {
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.seed = seed;
    c.log_every = log_every;
    c.theta_optimizer.kind = parse_optimizer_kind(optimizer);
    c.theta_optimizer.lr = lr;
    c.validate();
    return c;
  }

  MethodConfig method_config(Method m) const {
    MethodConfig c;
    c.method = m;
    c.w = w;
    c.minimax = minimax;
    c.metagrad.eta_inner = eta_inner;
    c.metagrad.lambda = lambda;
    c.metagrad.uv_optimizer.kind = parse_optimizer_kind(uv_optimizer);
    c.metagrad.uv_optimizer.lr = uv_lr;
    c.validate();
    return c;
  }
};

void add_data_options(CLI::App* cmd, TrainOptions& o) {
  cmd->add_option("--data", o.data_dir, "Directory written by gen-data")->required();
  cmd->add_option("--benchmark", o.benchmark, "Builtin benchmark name or benchmark file")->capture_default_str();
  cmd->add_option("--init", o.init, "Initial policy checkpoint (default: <data>/logging.json)");
  cmd->add_option("--name", o.name, "Run name under <output-root>/runs (default: benchmark name)");
}

void add_train_options(CLI::App* cmd, TrainOptions& o) {
  add_data_options(cmd, o);
  cmd->add_option("--seeds", o.seeds, "Training seeds")->capture_default_str();
  cmd->add_option("--epochs", o.epochs, "Epoch cap")->capture_default_str();
  cmd->add_option("--batch-size", o.batch_size, "Minibatch size")->capture_default_str();
  cmd->add_option("--log-every", o.log_every, "Trace interval in iterations")->capture_default_str();
  cmd->add_option("--lr", o.lr, "Policy learning rate")->capture_default_str();
  cmd->add_option("--optimizer", o.optimizer, "Policy optimizer (adam or sgd)")->capture_default_str();
  cmd->add_option("--w", o.w, "Quadratic penalty weight")->capture_default_str();
  cmd->add_option("--eta", o.minimax.eta, "Minimax max-player learning rate")->capture_default_str();
  cmd->add_option("--gamma", o.minimax.gamma, "Minimax learning-rate decay")->capture_default_str();
  cmd->add_option("--tau", o.minimax.tau, "Minimax max update period")->capture_default_str();
  cmd->add_option("--xi", o.minimax.xi, "Minimax period decay")->capture_default_str();
  cmd->add_option("--eta-inner", o.eta_inner, "Meta-gradient inner step size")->capture_default_str();
  cmd->add_option("--lambda", o.lambda, "Meta-gradient balance weight")->capture_default_str();
  cmd->add_option("--uv-lr", o.uv_lr, "Meta-gradient u/v learning rate")->capture_default_str();
  cmd->add_option("--uv-optimizer", o.uv_optimizer, "Meta-gradient u/v optimizer")->capture_default_str();
}

struct LoadedData {
  ExperimentData data;
  std::string fingerprint;
};

DatasetSplits load_splits(const fs::path& dir) {
  DatasetSplits s;
  s.train = load_dataset(dir / "train.jsonl");
  s.validation = load_dataset(dir / "validation.jsonl");
  s.test = load_dataset(dir / "test.jsonl");
  if (s.validation.fingerprint != s.train.fingerprint || s.test.fingerprint != s.train.fingerprint) {
    throw ValidationError("dataset splits in " + dir.string() + " come from different environments");
  }
  return s;
}

LoadedData load_experiment(const TrainOptions& o) {
  const fs::path dir(o.data_dir);
  DatasetSplits splits = load_splits(dir);
  const fs::path init = o.init.empty() ? dir / "logging.json" : fs::path(o.init);
  PolicyCheckpoint ckpt = load_policy(init);
  std::string fp = splits.train.fingerprint;
  return {prepare_experiment(std::move(splits), std::move(ckpt.params), find_benchmark(o.benchmark)), fp};
}

fs::path runs_dir(const std::string& root, const std::string& name) { return fs::path(root) / "runs" / name; }

ordered_json method_json(const MethodConfig& c) {
  ordered_json j;
  j["method"] = to_string(c.method);
  j["label"] = c.label();
  switch (c.method) {
    case Method::kIps: break;
    case Method::kQuadratic: j["w"] = c.w; break;
    case Method::kMinimax:
      j["eta"] = c.minimax.eta;
      j["gamma"] = c.minimax.gamma;
      j["tau"] = c.minimax.tau;
      j["xi"] = c.minimax.xi;
      break;
    case Method::kMetaGrad:
      j["eta_inner"] = c.metagrad.eta_inner;
      j["lambda"] = c.metagrad.lambda;
      j["uv_optimizer"] = to_string(c.metagrad.uv_optimizer.kind);
      j["uv_lr"] = c.metagrad.uv_optimizer.lr;
      break;
  }
  return j;
}

// Writes runs/<name>/<method>/<seed>/ for one finished run.
void write_run(const fs::path& dir, const RunOutcome& run, const ExperimentData& data, const TrainConfig& tc,
               const std::string& fingerprint) {
  fs::create_directories(dir / "checkpoints");
  for (std::size_t e = 0; e < run.train.epoch_checkpoints.size(); ++e) {
    save_policy(dir / "checkpoints" / epoch_name(e), {run.train.epoch_checkpoints[e], fingerprint});
  }
  save_policy(dir / "best.json", {run.best(), fingerprint});
  write_file(dir / "trace.csv", train_report_csv(run.train.report));

  ordered_json m;
  m["format"] = "cbx-run";
  m["version"] = 1;
  m["config"] = method_json(run.config);
  m["seed"] = run.seed;
  m["benchmark"] = data.benchmark.name;
  m["env_fingerprint"] = fingerprint;
  m["epochs"] = tc.epochs;
  m["batch_size"] = tc.batch_size;
  m["lr"] = tc.theta_optimizer.lr;
  m["optimizer"] = to_string(tc.theta_optimizer.kind);
  m["log_every"] = tc.log_every;
  m["iterations"] = run.train.report.iterations;
  m["best_epoch"] = run.best_epoch;
  m["best_checkpoint"] = "best.json";
  m["trace"] = "trace.csv";
  m["validation"] = ordered_json::parse(eval_result_json(run.validation, data.train.domain_names));
  m["test"] = ordered_json::parse(eval_result_json(run.test, data.train.domain_names));
  m["status"] = "complete";
  write_file(dir / "manifest.json", m.dump(2) + "\n");
}

std::vector<std::string> method_order(const std::map<std::string, std::vector<EvalResult>>& results) {
  std::vector<std::string> order;
  for (Method m : all_methods()) {
    if (results.count(to_string(m))) order.push_back(to_string(m));
  }
  for (const auto& [name, runs] : results) {
    if (std::find(order.begin(), order.end(), name) == order.end()) order.push_back(name);
  }
  return order;
}

struct Failure {
  std::string method;
  std::uint64_t seed;
  std::string message;
};

std::string failures_text(const std::vector<Failure>& failures) {
  std::ostringstream os;
  for (const auto& f : failures) os << "FAILED " << f.method << " seed " << f.seed << ": " << f.message << "\n";
  return os.str();
}

void write_report(const fs::path& dir, const ComparisonReport& report, const std::vector<Failure>& failures,
                  std::ostream& out) {
  const std::string table = comparison_table(report) + failures_text(failures);
  write_file(dir / "report.csv", comparison_csv(report));
  write_file(dir / "report.txt", table);
  out << table;
}

// --- subcommands ----------------------------------------------------------

struct GenOptions {
  std::uint64_t seed = 1;
  std::size_t samples = 200000;
  std::string out;
  std::string env_spec;
  std::optional<std::size_t> domains;
  std::optional<double> zipf;
  std::optional<double> temperature;
};

int cmd_gen_data(const GenOptions& o, const std::string& root, std::ostream& out) {
  EnvSpec spec;
  if (!o.env_spec.empty()) spec = parse_env_spec(read_file(o.env_spec));
  spec.seed = o.seed;
  if (o.domains) spec.num_domains = *o.domains;
  if (o.zipf) spec.zipf_exponent = *o.zipf;
  if (o.temperature) spec.temperature = *o.temperature;
  spec.validate();

  const fs::path dir = o.out.empty() ? fs::path(root) / "data" / ("seed_" + std::to_string(o.seed)) : fs::path(o.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  const Environment env = gen_env(spec);
  const DatasetSplits d = gen_dataset(env, o.samples);
  save_dataset(dir / "train.jsonl", d.train);
  save_dataset(dir / "validation.jsonl", d.validation);
  save_dataset(dir / "test.jsonl", d.test);
  save_policy(dir / "logging.json", {env.logging, env.fingerprint});
  ordered_json e;
  e["fingerprint"] = env.fingerprint;
  e["spec"] = ordered_json::parse(env_spec_json(spec));
  e["domains"] = env.domain_names;
  e["prior"] = env.prior;
  e["samples"] = {{"train", d.train.samples.size()},
                  {"validation", d.validation.samples.size()},
                  {"test", d.test.samples.size()}};
  write_file(dir / "env.json", e.dump(2) + "\n");
  out << "wrote " << d.train.samples.size() << "/" << d.validation.samples.size() << "/" << d.test.samples.size()
      << " samples to " << dir.string() << " (env " << env.fingerprint << ")\n";
  return kExitOk;
}

int cmd_train(const TrainOptions& o, const std::string& method, const std::string& root, std::ostream& out) {
  const LoadedData loaded = load_experiment(o);
  const MethodConfig mc = o.method_config(parse_method(method));
  const fs::path base = runs_dir(root, o.name.empty() ? loaded.data.benchmark.name : o.name);
  for (std::uint64_t seed : o.seeds) {
    const TrainConfig tc = o.train_config(seed);
    const RunOutcome run = run_method(loaded.data, mc, tc);
    const fs::path dir = base / method / std::to_string(seed);
    write_run(dir, run, loaded.data, tc, loaded.fingerprint);
    out << mc.label() << " seed " << seed << ": best epoch " << run.best_epoch << ", validation macro "
        << format_double(run.validation.violations.macro) << ", reward " << format_double(run.validation.reward.mean)
        << " -> " << dir.string() << "\n";
  }
  return kExitOk;
}

struct EvalOptions {
  std::string checkpoint;
  std::string data_dir;
  std::string split = "test";
  std::string benchmark = "global";
  std::string out;
};

int cmd_eval(const EvalOptions& o, std::ostream& out) {
  const PolicyCheckpoint ckpt = load_policy(o.checkpoint);
  const Split split = parse_split(o.split);
  Dataset d = load_dataset(fs::path(o.data_dir) / (to_string(split) + ".jsonl"));
  const ConstraintBenchmark bench = find_benchmark(o.benchmark);
  apply_benchmark(bench, d.samples, d.domain_names);
  const EvalResult r = evaluate(d.samples, ckpt.params, d.num_domains());

  ordered_json j = ordered_json::parse(eval_result_json(r, d.domain_names));
  j["benchmark"] = bench.name;
  j["split"] = to_string(split);
  j["data_fingerprint"] = d.fingerprint;
  j["checkpoint_fingerprint"] = ckpt.env_fingerprint;
  j["fingerprint_mismatch"] = ckpt.env_fingerprint != d.fingerprint;
  const std::string text = j.dump(2) + "\n";
  if (o.out.empty()) {
    out << text;
  } else {
    write_file(o.out, text);
  }
  return kExitOk;
}

struct BenchmarkOptions {
  std::vector<std::string> methods{"ips", "quadratic", "minimax", "metagrad"};
  bool sweep = false;
  double max_reward_drop = 0.02;
};

int cmd_benchmark(const TrainOptions& o, const BenchmarkOptions& b, const std::string& root, std::ostream& out,
                  std::ostream& err) {
  const LoadedData loaded = load_experiment(o);
  const ExperimentData& data = loaded.data;
  const fs::path base = runs_dir(root, o.name.empty() ? data.benchmark.name : o.name);
  std::vector<Method> methods;
  for (const auto& m : b.methods) methods.push_back(parse_method(m));
  if (std::find(methods.begin(), methods.end(), Method::kIps) == methods.end()) {
    throw ConfigError("benchmark needs the ips baseline in --methods");
  }

  std::map<Method, MethodConfig> configs;
  for (Method m : methods) configs[m] = o.method_config(m);

  BenchmarkResults results;
  std::vector<Failure> failures;
  std::map<std::uint64_t, RunOutcome> ips_runs;

  const auto run_and_record = [&](Method m, std::uint64_t seed) -> std::optional<RunOutcome> {
    const TrainConfig tc = o.train_config(seed);
    try {
      RunOutcome run = run_method(data, configs[m], tc);
      write_run(base / to_string(m) / std::to_string(seed), run, data, tc, loaded.fingerprint);
      results[to_string(m)].push_back(run.test);
      out << configs[m].label() << " seed " << seed << ": test macro " << format_double(run.test.violations.macro)
          << ", reward " << format_double(run.test.reward.mean) << "\n";
      return run;
    } catch (const Error& e) {
      failures.push_back({to_string(m), seed, e.what()});
      err << "run failed: " << configs[m].label() << " seed " << seed << ": " << e.what() << "\n";
      return std::nullopt;
    }
  };

  for (std::uint64_t seed : o.seeds) {
    if (auto r = run_and_record(Method::kIps, seed)) ips_runs.emplace(seed, std::move(*r));
  }
  if (ips_runs.empty()) {
    write_file(base / "report.txt", failures_text(failures));
    err << "every baseline run failed\n";
    return kExitPartial;
  }

  if (b.sweep) {
    const auto& [sweep_seed, baseline] = *ips_runs.begin();
    std::ostringstream csv;
    csv << "label,selected,validation_reward,validation_macro,test_reward,test_macro\n";
    for (Method m : methods) {
      std::vector<MethodConfig> grid;
      if (m == Method::kQuadratic) grid = quadratic_grid();
      if (m == Method::kMinimax) grid = minimax_grid();
      if (grid.empty()) continue;
      const SweepResult s = sweep(data, grid, o.train_config(sweep_seed), baseline.validation, b.max_reward_drop);
      configs[m] = s.runs[s.best].config;
      for (std::size_t i = 0; i < s.runs.size(); ++i) {
        const auto& r = s.runs[i];
        csv << '"' << r.config.label() << "\"," << (i == s.best ? 1 : 0) << ',' << format_double(r.validation.reward.mean)
            << ',' << format_double(r.validation.violations.macro) << ',' << format_double(r.test.reward.mean) << ','
            << format_double(r.test.violations.macro) << "\n";
      }
      out << "sweep " << to_string(m) << ": selected " << configs[m].label() << "\n";
    }
    write_file(base / "sweep.csv", csv.str());
  }

  for (Method m : methods) {
    if (m == Method::kIps) continue;
    for (std::uint64_t seed : o.seeds) run_and_record(m, seed);
  }

  const auto order = method_order(results);
  const ComparisonReport report = compare(results, "ips", order);
  write_report(base, report, failures, out);
  return failures.empty() ? kExitOk : kExitPartial;
}

int cmd_report(const std::string& name, const std::string& root, const std::string& runs, const std::string& baseline,
               std::ostream& out) {
  const fs::path dir = runs.empty() ? runs_dir(root, name) : fs::path(runs);
  if (!fs::is_directory(dir)) throw ReportError("no run directory " + dir.string());
  BenchmarkResults results;
  std::vector<fs::path> manifests;
  for (const auto& method_dir : fs::directory_iterator(dir)) {
    if (!method_dir.is_directory()) continue;
    for (const auto& seed_dir : fs::directory_iterator(method_dir.path())) {
      const fs::path m = seed_dir.path() / "manifest.json";
      if (fs::is_regular_file(m)) manifests.push_back(m);
    }
  }
  std::sort(manifests.begin(), manifests.end());
  for (const auto& path : manifests) {
    const auto j = nlohmann::json::parse(read_file(path), nullptr, false);
    if (j.is_discarded() || j.value("status", "") != "complete") continue;
    results[j.at("config").at("method").get<std::string>()].push_back(
        parse_eval_result_json(j.at("test").dump()));
  }
  if (!results.count(baseline)) throw ReportError("baseline '" + baseline + "' has no completed runs in " + dir.string());
  const ComparisonReport report = compare(results, baseline, method_order(results));
  write_report(dir, report, {}, out);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Constrained off-policy bandit training"};
  app.require_subcommand(1);
  app.set_config("--config", "", "INI or TOML file with option values; command-line flags take precedence");
  std::string root = ".";
  app.add_option("--output-root", root, "Root for data/ and runs/")->envname("CBX_OUTPUT_ROOT")->capture_default_str();

  GenOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic logged dataset");
  gen_cmd->add_option("--seed", gen.seed, "Environment seed")->capture_default_str();
  gen_cmd->add_option("--samples", gen.samples, "Total samples over all splits")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output directory (default: <output-root>/data/seed_<seed>)");
  gen_cmd->add_option("--env-spec", gen.env_spec, "JSON environment spec");
  gen_cmd->add_option("--domains", gen.domains, "Domain count");
  gen_cmd->add_option("--zipf", gen.zipf, "Zipf exponent of the domain prior");
  gen_cmd->add_option("--temperature", gen.temperature, "Logging-policy temperature");

  TrainOptions train;
  std::string method;
  auto* train_cmd = app.add_subcommand("train", "Train one method for each seed");
  add_train_options(train_cmd, train);
  train_cmd->add_option("--method", method, "ips, quadratic, minimax or metagrad")->required();

  EvalOptions ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Policy checkpoint")->required();
  eval_cmd->add_option("--data", ev.data_dir, "Directory written by gen-data")->required();
  eval_cmd->add_option("--split", ev.split, "train, validation or test")->capture_default_str();
  eval_cmd->add_option("--benchmark", ev.benchmark, "Builtin benchmark name or file")->capture_default_str();
  eval_cmd->add_option("--out", ev.out, "Output file (default: stdout)");

  TrainOptions bench_train;
  bench_train.seeds = {1, 2, 3, 4};
  BenchmarkOptions bench;
  auto* bench_cmd = app.add_subcommand("benchmark", "Train and compare methods against the IPS baseline");
  add_train_options(bench_cmd, bench_train);
  bench_cmd->add_option("--methods", bench.methods, "Methods to run")->capture_default_str();
  bench_cmd->add_flag("--sweep", bench.sweep, "Select quadratic w and minimax eta/gamma by grid search on the first seed");
  bench_cmd->add_option("--max-reward-drop", bench.max_reward_drop, "Sweep reward tolerance vs IPS (relative)")
      ->capture_default_str();

  std::string report_name, report_runs, baseline = "ips";
  auto* report_cmd = app.add_subcommand("report", "Rebuild the comparison report from completed runs");
  report_cmd->add_option("--name", report_name, "Run name under <output-root>/runs");
  report_cmd->add_option("--runs", report_runs, "Run directory (overrides --name)");
  report_cmd->add_option("--baseline", baseline, "Baseline method")->capture_default_str();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen, root, out);
    if (*train_cmd) return cmd_train(train, method, root, out);
    if (*eval_cmd) return cmd_eval(ev, out);
    if (*bench_cmd) return cmd_benchmark(bench_train, bench, root, out, err);
    if (*report_cmd) {
      if (report_name.empty() && report_runs.empty()) throw ConfigError("report needs --name or --runs");
      return cmd_report(report_name, root, report_runs, baseline, out);
    }
  } catch (const DivergenceError& e) {
    err << "error: training diverged at iteration " << e.iteration() << ": " << e.what() << "\n";
    return kExitDiverged;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitUsage;
}

}  // namespace cbx
