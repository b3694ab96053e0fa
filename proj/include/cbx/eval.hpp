#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cbx/objectives.hpp"
#include "cbx/policy.hpp"

namespace cbx {

struct ViolationRates {
  double micro = 0.0;
  double macro = 0.0;
  std::vector<double> per_domain;         // NaN for domains with no samples
  std::vector<std::size_t> domain_counts;
};

struct RewardEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};

struct EvalResult {
  RewardEstimate reward;
  ViolationRates violations;
  double replication = 0.0;
  std::size_t samples = 0;
};

// True when R lies strictly outside [c_min, c_max]; boundary values are feasible.
inline bool violates(double replication_value, const Bounds& b) {
  return replication_value < b.c_min || replication_value > b.c_max;
}

// Sample i violates when replication(pi_theta(x_i), p0_i) is outside its
// cached bounds. Macro averages over domains that have samples.
ViolationRates violation_rates(std::span<const LoggedSample> data, const PolicyParams& params,
                               std::size_t num_domains);
// Mean of r * pi_theta(a|x) / p0(a|x) with its standard error.
RewardEstimate expected_reward(std::span<const LoggedSample> data, const PolicyParams& params);
// Mean replication against the logged propensities.
double replication_rate(std::span<const LoggedSample> data, const PolicyParams& params);

// All of the above in one pass over the data.
EvalResult evaluate(std::span<const LoggedSample> data, const PolicyParams& params, std::size_t num_domains);

// Per-sample propensity vectors, evaluated in fixed-size chunks.
void for_each_propensity(std::span<const LoggedSample> data, const PolicyParams& params,
                         const std::function<void(std::size_t, std::span<const double>)>& fn);

// ---------------------------------------------------------------------------

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
};
MeanStd mean_std(std::span<const double> values);

// 100 * (1 - rate / baseline); empty when the baseline rate is 0.
std::optional<double> violation_reduction(double rate, double baseline_rate);

struct MethodSummary {
  std::string method;
  std::size_t runs = 0;
  MeanStd reward;
  MeanStd micro;
  MeanStd macro;
  MeanStd replication;
  // Per-run reductions against the baseline's mean rates, aggregated.
  std::optional<MeanStd> micro_reduction;
  std::optional<MeanStd> macro_reduction;
  MeanStd reward_change;  // percent relative to the baseline mean reward
};

struct ComparisonReport {
  std::string baseline;
  std::vector<MethodSummary> methods;  // in input order

  const MethodSummary& at(const std::string& method) const;
};

// results: method name -> one EvalResult per seed. Methods are listed in the
// order given by `order` (or map order when empty).
ComparisonReport compare(const std::map<std::string, std::vector<EvalResult>>& results, const std::string& baseline,
                         std::span<const std::string> order = {});

// Column order: method,runs,reward_mean,reward_std,reward_change_mean,
// reward_change_std,micro_mean,micro_std,macro_mean,macro_std,
// micro_reduction_mean,micro_reduction_std,macro_reduction_mean,
// macro_reduction_std,replication_mean,replication_std. "n/a" marks an
// undefined reduction.
std::string comparison_csv(const ComparisonReport& report);
std::string comparison_table(const ComparisonReport& report);

std::string eval_result_json(const EvalResult& r, std::span<const std::string> domain_names);
EvalResult parse_eval_result_json(const std::string& text);

}  // namespace cbx
