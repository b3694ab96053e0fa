#include "cbx/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <utility>

#include "cbx/error.hpp"
#include "cbx/format.hpp"

namespace cbx {

std::string to_string(Method m) {
  switch (m) {
    case Method::kIps: return "ips";
    case Method::kQuadratic: return "quadratic";
    case Method::kMinimax: return "minimax";
    case Method::kMetaGrad: return "metagrad";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  for (Method m : all_methods()) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown method '" + name + "' (expected ips, quadratic, minimax or metagrad)");
}

std::vector<Method> all_methods() { return {Method::kIps, Method::kQuadratic, Method::kMinimax, Method::kMetaGrad}; }

void MethodConfig::validate() const {
  switch (method) {
    case Method::kIps: break;
    case Method::kQuadratic:
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("quadratic penalty weight must be finite and >= 0");
      break;
    case Method::kMinimax: minimax.validate(); break;
    case Method::kMetaGrad: metagrad.validate(); break;
  }
}

std::string MethodConfig::label() const {
  std::ostringstream os;
  os << to_string(method);
  switch (method) {
    case Method::kIps: break;
    case Method::kQuadratic: os << "(w=" << format_double(w) << ")"; break;
    case Method::kMinimax:
      os << "(eta=" << format_double(minimax.eta) << ",gamma=" << format_double(minimax.gamma) << ")";
      break;
    case Method::kMetaGrad: os << "(lambda=" << format_double(metagrad.lambda) << ")"; break;
  }
  return os.str();
}

ExperimentData prepare_experiment(DatasetSplits splits, PolicyParams init, const ConstraintBenchmark& bench) {
  bench.validate();
  init.validate();
  ExperimentData d{std::move(splits.train), std::move(splits.validation), std::move(splits.test), std::move(init),
                   bench};
  for (Dataset* ds : {&d.train, &d.validation, &d.test}) {
    if (ds->domain_names != d.train.domain_names) throw ValidationError("dataset splits disagree on domain names");
    apply_benchmark(bench, ds->samples, ds->domain_names);
  }
  return d;
}

RunOutcome run_method(const ExperimentData& data, const MethodConfig& config, const TrainConfig& train) {
  config.validate();
  if (data.validation.samples.empty()) throw ContractError("model selection needs validation samples");
  const TrainData td{data.train.samples, data.num_domains()};
  RunOutcome out;
  out.config = config;
  out.seed = train.seed;
  switch (config.method) {
    case Method::kIps: out.train = train_ips(td, data.init, train); break;
    case Method::kQuadratic: out.train = train_quadratic(td, data.init, train, config.w); break;
    case Method::kMinimax: out.train = train_minimax(td, data.init, train, config.minimax); break;
    case Method::kMetaGrad:
      out.train = train_metagrad(td, data.init, train, config.metagrad,
                                 DomainPrior::from_samples(data.train.samples, data.num_domains()));
      break;
  }
  return finish_run(data, config, train.seed, std::move(out.train));
}

RunOutcome finish_run(const ExperimentData& data, const MethodConfig& config, std::uint64_t seed, TrainResult train) {
  if (data.validation.samples.empty()) throw ContractError("model selection needs validation samples");
  RunOutcome out;
  out.config = config;
  out.seed = seed;
  out.train = std::move(train);
  out.best_epoch = select_best(out.train.epoch_checkpoints, data.validation.samples, data.num_domains());
  out.validation = evaluate(data.validation.samples, out.best(), data.num_domains());
  out.test = evaluate(data.test.samples, out.best(), data.num_domains());
  return out;
}

std::vector<MethodConfig> quadratic_grid() {
  std::vector<MethodConfig> grid;
  for (double w : {0.1, 1.0, 10.0, 100.0, 1000.0}) {
    MethodConfig c;
    c.method = Method::kQuadratic;
    c.w = w;
    grid.push_back(c);
  }
  return grid;
}

std::vector<MethodConfig> minimax_grid() {
  std::vector<MethodConfig> grid;
  for (double eta : {1.0, 0.1, 0.01}) {
    for (double gamma : {1.0, 0.999, 0.995}) {
      MethodConfig c;
      c.method = Method::kMinimax;
      c.minimax.eta = eta;
      c.minimax.gamma = gamma;
      grid.push_back(c);
    }
  }
  return grid;
}

std::size_t pick_sweep_best(std::span<const RunOutcome> runs, const EvalResult& baseline_validation,
                            double max_reward_drop) {
  if (runs.empty()) throw ContractError("sweep has no runs");
  const double floor = baseline_validation.reward.mean * (1.0 - max_reward_drop);
  const auto pick = [&](bool need_reward) -> std::optional<std::size_t> {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < runs.size(); ++i) {
      if (need_reward && runs[i].validation.reward.mean < floor) continue;
      if (!best || runs[i].validation.violations.macro < runs[*best].validation.violations.macro) best = i;
    }
    return best;
  };
  if (auto b = pick(true)) return *b;
  return *pick(false);
}

SweepResult sweep(const ExperimentData& data, std::span<const MethodConfig> grid, const TrainConfig& train,
                  const EvalResult& baseline_validation, double max_reward_drop) {
  SweepResult out;
  for (const auto& config : grid) out.runs.push_back(run_method(data, config, train));
  out.best = pick_sweep_best(out.runs, baseline_validation, max_reward_drop);
  return out;
}

}  // namespace cbx
