#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cbx/objectives.hpp"
#include "cbx/policy.hpp"

namespace cbx {

// Parameters of the synthetic logged-bandit world.
struct EnvSpec {
  std::uint64_t seed = 1;
  std::size_t num_domains = 8;
  double zipf_exponent = 1.1;
  std::size_t context_dim = 16;
  std::size_t candidate_dim = 8;
  std::size_t min_candidates = 2;
  std::size_t max_candidates = 8;
  // Logging-policy logits are the scorer output divided by this.
  double temperature = 0.65;
  // Std of the per-domain offset added to context features.
  double domain_shift = 1.0;
  // Success logit = alignment * logging logit + hidden_scale * hidden score + bias.
  double reward_alignment = 0.1;
  double reward_hidden_scale = 0.05;
  double reward_bias = 0.0;
  std::size_t reward_hidden_units = 16;

  void validate() const;
};

std::string env_spec_json(const EnvSpec& spec);
EnvSpec parse_env_spec(const std::string& text);

enum class Split { kTrain, kValidation, kTest };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct Environment {
  EnvSpec spec;
  std::vector<double> prior;           // Zipfian domain prior
  std::vector<std::string> domain_names;
  Matrix domain_offsets;               // M x context_dim
  PolicyParams logging;                // logging policy, temperature folded in
  PolicyParams reward_model;           // hidden success-logit component
  std::string fingerprint;

  // Draws a fresh decision point for domain k.
  CandidateSet draw_context(std::size_t domain, Rng& rng) const;
  std::size_t draw_domain(Rng& rng) const;
  // Bernoulli success probability of every candidate.
  std::vector<double> success_probabilities(const CandidateSet& cs) const;
};

Environment gen_env(const EnvSpec& spec);

// Names used for the first domains; later ones are domain_<k>.
std::vector<std::string> default_domain_names(std::size_t num_domains);

struct Dataset {
  std::vector<LoggedSample> samples;
  Split split = Split::kTrain;
  std::string fingerprint;
  std::vector<std::string> domain_names;

  std::size_t num_domains() const { return domain_names.size(); }
};

struct DatasetSplits {
  Dataset train;
  Dataset validation;
  Dataset test;
};

struct SplitFractions {
  double train = 0.85;
  double validation = 0.10;
  double test = 0.05;
};

// Sample i depends only on (env seed, i); samples are assigned to splits in
// index order. Throws ConfigError if a logged propensity falls below the floor.
DatasetSplits gen_dataset(const Environment& env, std::size_t n, SplitFractions fractions = {});
LoggedSample gen_sample(const Environment& env, std::size_t index);

struct PolicyValue {
  double mean = 0.0;
  double std_error = 0.0;
};

// Monte Carlo over fresh contexts; for each context the value is the exact
// expectation of the success probability under params' action distribution.
PolicyValue true_policy_value(const Environment& env, const PolicyParams& params, std::size_t n_mc);

struct ReplicationProfile {
  std::vector<double> mean;  // per domain, NaN when never drawn
  std::vector<double> std_error;
  std::vector<std::size_t> counts;
};
ReplicationProfile true_replication_profile(const Environment& env, const PolicyParams& params, std::size_t n_mc);

// Line-delimited JSON. The first line is a header with the env fingerprint,
// split and domain names; each further line is one sample.
std::string serialize_dataset(const Dataset& d);
Dataset parse_dataset(const std::string& text);
void save_dataset(const std::filesystem::path& path, const Dataset& d);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace cbx
