#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cbx/bench.hpp"
#include "cbx/eval.hpp"
#include "cbx/synthenv.hpp"
#include "cbx/trainers.hpp"

namespace cbx {

enum class Method { kIps, kQuadratic, kMinimax, kMetaGrad };

std::string to_string(Method m);
Method parse_method(const std::string& name);  // ips, quadratic, minimax, metagrad
std::vector<Method> all_methods();

struct MethodConfig {
  Method method = Method::kIps;
  double w = 10.0;  // quadratic penalty weight
  MinimaxConfig minimax;
  MetaGradConfig metagrad;

  void validate() const;
  // Short tag naming the method and its tuned values, e.g. "minimax(eta=0.1,gamma=0.999)".
  std::string label() const;
};

// Splits with bounds resolved against one benchmark, plus the policy that
// every trainer starts from.
struct ExperimentData {
  Dataset train;
  Dataset validation;
  Dataset test;
  PolicyParams init;
  ConstraintBenchmark benchmark;

  std::size_t num_domains() const { return train.num_domains(); }
};

ExperimentData prepare_experiment(DatasetSplits splits, PolicyParams init, const ConstraintBenchmark& bench);

struct RunOutcome {
  MethodConfig config;
  std::uint64_t seed = 0;
  TrainResult train;
  std::size_t best_epoch = 0;  // index into train.epoch_checkpoints
  EvalResult validation;
  EvalResult test;

  const PolicyParams& best() const { return train.epoch_checkpoints.at(best_epoch); }
};

// Trains, keeps the epoch checkpoint with the lowest validation macro
// violation rate, and evaluates it on validation and test.
RunOutcome run_method(const ExperimentData& data, const MethodConfig& config, const TrainConfig& train);

// Model selection and evaluation of an already trained run against data's
// bounds. IPS ignores bounds, so one IPS run can be scored on several benchmarks.
RunOutcome finish_run(const ExperimentData& data, const MethodConfig& config, std::uint64_t seed, TrainResult train);

// w in {0.1, 1, 10, 100, 1000}.
std::vector<MethodConfig> quadratic_grid();
// eta in {1, 0.1, 0.01} x gamma in {1, 0.999, 0.995}.
std::vector<MethodConfig> minimax_grid();

struct SweepResult {
  std::vector<RunOutcome> runs;
  std::size_t best = 0;
};

// Among runs whose validation reward is within max_reward_drop (relative) of
// the baseline's, the lowest validation macro violation rate wins; when none
// qualifies, the lowest macro rate overall. Ties go to the earlier run.
std::size_t pick_sweep_best(std::span<const RunOutcome> runs, const EvalResult& baseline_validation,
                            double max_reward_drop = 0.02);

SweepResult sweep(const ExperimentData& data, std::span<const MethodConfig> grid, const TrainConfig& train,
                  const EvalResult& baseline_validation, double max_reward_drop = 0.02);

// Test-split results of every (method, seed); keys are method names.
using BenchmarkResults = std::map<std::string, std::vector<EvalResult>>;

}  // namespace cbx
