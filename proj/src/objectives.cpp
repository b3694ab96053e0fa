#include "cbx/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "cbx/error.hpp"

namespace cbx {

void validate_bounds(const Bounds& b) {
  if (!(0.0 <= b.c_min && b.c_min <= b.c_max && b.c_max <= 1.0)) {
    throw ConfigError("replication bounds must satisfy 0 <= c_min <= c_max <= 1, got [" + std::to_string(b.c_min) +
                      ", " + std::to_string(b.c_max) + "]");
  }
}

void validate_sample(const LoggedSample& s, std::size_t num_domains) {
  s.cs.validate();
  if (s.p0.size() != s.cs.size()) throw ShapeError("logged propensity vector length does not match candidates");
  double total = 0.0;
  for (double p : s.p0) {
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("logged propensity outside [0, 1]");
    total += p;
  }
  if (std::fabs(total - 1.0) > 1e-9) throw DomainError("logged propensities do not sum to 1");
  if (s.action >= s.cs.size()) throw ShapeError("chosen action index out of range");
  if (!(s.reward >= 0.0 && s.reward <= 1.0)) throw DomainError("reward outside [0, 1]");
  if (s.domain >= num_domains) throw DomainError("domain id " + std::to_string(s.domain) + " out of range");
  if (s.p0[s.action] < kPropensityFloor) {
    throw PropensityFloorError("logged propensity " + std::to_string(s.p0[s.action]) + " of the chosen action is below " +
                               std::to_string(kPropensityFloor));
  }
  validate_bounds(s.bounds);
}

void PenaltyWeights::clamp() {
  for (Matrix* m : {&u, &v}) {
    for (double& x : m->values()) x = std::clamp(x, -kPenaltyWeightLimit, kPenaltyWeightLimit);
  }
}

DomainPrior DomainPrior::from_samples(std::span<const LoggedSample> samples, std::size_t num_domains) {
  DomainPrior prior;
  prior.p.assign(num_domains, 0.0);
  for (const auto& s : samples) prior.p.at(s.domain) += 1.0;
  for (double& x : prior.p) x /= static_cast<double>(samples.size());
  return prior;
}

void DomainPrior::validate() const {
  if (p.empty()) throw ConfigError("empty domain prior");
  double total = 0.0;
  for (double x : p) {
    if (!(x > 0.0)) throw ConfigError("domain prior entries must be positive");
    total += x;
  }
  if (std::fabs(total - 1.0) > 1e-9) throw ConfigError("domain prior does not sum to 1");
}

double replication(std::span<const double> p_theta, std::span<const double> p_0) {
  if (p_theta.size() != p_0.size()) {
    throw ShapeError("replication of vectors with lengths " + std::to_string(p_theta.size()) + " and " +
                     std::to_string(p_0.size()));
  }
  double l1 = 0.0;
  for (std::size_t i = 0; i < p_theta.size(); ++i) l1 += std::fabs(p_theta[i] - p_0[i]);
  return 1.0 - 0.5 * l1;
}

double ips_loss(const LoggedSample& sample, std::span<const double> p_theta) {
  const double p0 = sample.p0.at(sample.action);
  if (p0 < kPropensityFloor) throw PropensityFloorError("logged propensity below floor");
  return -sample.reward * p_theta[sample.action] / p0;
}

HingePenalties hinge_penalties(double replication_value, double c_min, double c_max) {
  validate_bounds({c_min, c_max});
  return {std::max(0.0, c_min - replication_value), std::max(0.0, replication_value - c_max)};
}

namespace {

void require_nonempty(Batch batch) {
  if (batch.empty()) throw ContractError("loss over an empty batch");
}

Var column(Tape& tape, Batch batch, auto&& f) {
  Matrix m(batch.size(), 1);
  for (std::size_t i = 0; i < batch.size(); ++i) m[i] = f(*batch[i]);
  return tape.constant(std::move(m));
}

std::vector<std::size_t> domain_index(Batch batch) {
  std::vector<std::size_t> idx(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) idx[i] = batch[i]->domain;
  return idx;
}

PenalizedLoss penalized(Tape& tape, Batch batch, const PolicyParams& params, const PenaltyWeights& pw,
                        bool params_trainable, bool pw_trainable) {
  require_nonempty(batch);
  PenalizedLoss out;
  out.terms = batch_terms(tape, batch, params, params_trainable);
  out.u = pw_trainable ? tape.variable(pw.u) : tape.constant(pw.u);
  out.v = pw_trainable ? tape.variable(pw.v) : tape.constant(pw.v);
  for (const LoggedSample* s : batch) {
    if (s->domain >= pw.num_domains()) throw ShapeError("sample domain exceeds penalty weight count");
  }
  const auto idx = domain_index(batch);
  const Var mult_min = ad::exp(ad::gather(out.u, batch.size(), 1, idx));
  const Var mult_max = ad::exp(ad::gather(out.v, batch.size(), 1, idx));
  const Var per_sample = out.terms.ips + mult_min * out.terms.pen_min + mult_max * out.terms.pen_max;
  out.loss = ad::mean_all(per_sample);
  return out;
}

}  // namespace

BatchTerms batch_terms(Tape& tape, Batch batch, const PolicyParams& params, bool params_trainable) {
  require_nonempty(batch);
  std::vector<const CandidateSet*> sets;
  sets.reserve(batch.size());
  for (const LoggedSample* s : batch) sets.push_back(&s->cs);
  const BatchLayout layout = make_layout(sets);

  BatchTerms t;
  t.policy = bind_policy(tape, params, params_trainable);
  t.propensities = batch_propensities(t.policy, layout);

  const std::size_t b = batch.size();
  const std::size_t w = layout.width;
  Matrix p0(b, w);
  std::vector<std::size_t> chosen(b);
  for (std::size_t i = 0; i < b; ++i) {
    const LoggedSample& s = *batch[i];
    std::copy(s.p0.begin(), s.p0.end(), p0.row_span(i).begin());
    chosen[i] = i * w + s.action;
  }
  const Var diff = ad::abs(t.propensities - tape.constant(std::move(p0)));
  t.replication = tape.constant(Matrix::scalar(1.0)) - ad::scale(ad::sum_rows(diff), 0.5);

  const Var p_chosen = ad::gather(t.propensities, b, 1, std::move(chosen));
  t.ips = p_chosen * column(tape, batch, [](const LoggedSample& s) { return -s.reward / s.logged_propensity(); });
  t.pen_min = ad::max0(column(tape, batch, [](const LoggedSample& s) { return s.bounds.c_min; }) - t.replication);
  t.pen_max = ad::max0(t.replication - column(tape, batch, [](const LoggedSample& s) { return s.bounds.c_max; }));
  return t;
}

PenalizedLoss inner_loss(Tape& tape, Batch batch, const PolicyParams& params, const PenaltyWeights& pw) {
  return penalized(tape, batch, params, pw, true, true);
}

PenalizedLoss max_player_loss(Tape& tape, Batch batch, const PolicyParams& params, const PenaltyWeights& pw) {
  return penalized(tape, batch, params, pw, false, true);
}

ScalarLoss meta_loss(Tape& tape, Batch batch, const PolicyParams& params, const DomainPrior& prior, double lambda) {
  require_nonempty(batch);
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("meta lambda must lie in [0, 1]");
  for (const LoggedSample* s : batch) {
    if (s->domain >= prior.p.size() || !(prior.p[s->domain] > 0.0)) {
      throw ConfigError("domain prior has no positive entry for domain " + std::to_string(s->domain));
    }
  }
  ScalarLoss out;
  out.terms = batch_terms(tape, batch, params, true);
  const Var inv_prior = column(tape, batch, [&](const LoggedSample& s) { return 1.0 / prior.p[s.domain]; });
  const Var violation = ad::mean_all((out.terms.pen_min + out.terms.pen_max) * inv_prior);
  if (lambda == 1.0) {
    out.loss = violation;
  } else {
    out.loss = ad::scale(ad::mean_all(out.terms.ips), 1.0 - lambda) + ad::scale(violation, lambda);
  }
  return out;
}

ScalarLoss quadratic_loss(Tape& tape, Batch batch, const PolicyParams& params, double w) {
  if (!(w >= 0.0)) throw ConfigError("quadratic penalty weight must be non-negative");
  ScalarLoss out;
  out.terms = batch_terms(tape, batch, params, true);
  if (w == 0.0) {
    out.loss = ad::mean_all(out.terms.ips);
  } else {
    const Var sq = out.terms.pen_min * out.terms.pen_min + out.terms.pen_max * out.terms.pen_max;
    out.loss = ad::mean_all(out.terms.ips + ad::scale(sq, w));
  }
  return out;
}

ScalarLoss ips_objective(Tape& tape, Batch batch, const PolicyParams& params) {
  ScalarLoss out;
  out.terms = batch_terms(tape, batch, params, true);
  out.loss = ad::mean_all(out.terms.ips);
  return out;
}

Var domain_mean_penalty(const Var& pen, Batch batch, std::size_t domain) {
  Tape& tape = pen.tape();
  Matrix selector(1, batch.size());
  bool any = false;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i]->domain == domain) {
      selector[i] = inv;
      any = true;
    }
  }
  if (!any) return tape.constant(Matrix::scalar(0.0));
  return ad::matmul(tape.constant(std::move(selector)), pen);
}

}  // namespace cbx
