#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cbx/matrix.hpp"
#include "cbx/policy.hpp"
#include "cbx/tape.hpp"

namespace cbx {

// Smallest logged propensity accepted for the chosen action. Samples below it
// are rejected when a dataset is loaded; they are never clipped.
inline constexpr double kPropensityFloor = 1e-4;
// Range the penalty weights u, v are clamped to after every update.
inline constexpr double kPenaltyWeightLimit = 30.0;

// Replication range [c_min, c_max] that applies to one sample.
struct Bounds {
  double c_min = 0.0;
  double c_max = 1.0;
  friend bool operator==(const Bounds&, const Bounds&) = default;
};

void validate_bounds(const Bounds& b);

struct LoggedSample {
  CandidateSet cs;
  std::vector<double> p0;  // logging-policy propensities over cs
  std::size_t action = 0;
  double reward = 0.0;     // in [0, 1]
  std::size_t domain = 0;  // in [0, M)
  Bounds bounds;           // resolved from a benchmark when data is loaded

  double logged_propensity() const { return p0[action]; }
};

// Throws on any broken sample invariant; PropensityFloorError when the
// chosen action's logged propensity is below kPropensityFloor.
void validate_sample(const LoggedSample& s, std::size_t num_domains);

// Per-domain penalty multipliers are exp(u_k) and exp(v_k).
struct PenaltyWeights {
  Matrix u;  // M x 1
  Matrix v;  // M x 1

  PenaltyWeights() = default;
  explicit PenaltyWeights(std::size_t num_domains) : u(num_domains, 1), v(num_domains, 1) {}
  std::size_t num_domains() const { return u.rows(); }
  void clamp();
};

struct DomainPrior {
  std::vector<double> p;

  // Empirical domain frequencies of a sample list (with num_domains slots).
  static DomainPrior from_samples(std::span<const LoggedSample> samples, std::size_t num_domains);
  void validate() const;
};

// 1 - |p_theta - p_0|_1 / 2
double replication(std::span<const double> p_theta, std::span<const double> p_0);

// -r * p_theta(a) / p_0(a)
double ips_loss(const LoggedSample& sample, std::span<const double> p_theta);

struct HingePenalties {
  double pen_min = 0.0;  // max(0, c_min - R)
  double pen_max = 0.0;  // max(0, R - c_max)
};
HingePenalties hinge_penalties(double replication_value, double c_min, double c_max);

using Batch = std::span<const LoggedSample* const>;

// Per-sample quantities of a batch recorded on a tape. Column vectors have
// one row per sample.
struct BatchTerms {
  PolicyVars policy;
  Var propensities;  // B x width
  Var replication;   // B x 1
  Var ips;           // B x 1, per-sample IPS loss
  Var pen_min;       // B x 1
  Var pen_max;       // B x 1
};

BatchTerms batch_terms(Tape& tape, Batch batch, const PolicyParams& params, bool params_trainable = true);

struct PenalizedLoss {
  BatchTerms terms;
  Var u;  // M x 1
  Var v;  // M x 1
  Var loss;
};

// mean_i [ips_i + exp(u_k) pen_min_i + exp(v_k) pen_max_i]; differentiable in
// both the policy parameters and the penalty weights.
PenalizedLoss inner_loss(Tape& tape, Batch batch, const PolicyParams& params, const PenaltyWeights& pw);

// The same expression with the policy held fixed; only u and v are variables.
PenalizedLoss max_player_loss(Tape& tape, Batch batch, const PolicyParams& params, const PenaltyWeights& pw);

struct ScalarLoss {
  BatchTerms terms;
  Var loss;
};

// (1 - lambda) mean(ips) + lambda mean((pen_min + pen_max) / p(k))
ScalarLoss meta_loss(Tape& tape, Batch batch, const PolicyParams& params, const DomainPrior& prior, double lambda);

// mean_i [ips_i + w (pen_min_i^2 + pen_max_i^2)]
ScalarLoss quadratic_loss(Tape& tape, Batch batch, const PolicyParams& params, double w);

// mean(ips) alone.
ScalarLoss ips_objective(Tape& tape, Batch batch, const PolicyParams& params);

// sum over samples of domain k of pen, divided by the full batch size.
// 1x1; a constant zero when no sample of the batch belongs to domain k.
Var domain_mean_penalty(const Var& pen, Batch batch, std::size_t domain);

}  // namespace cbx
