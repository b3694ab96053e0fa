#include "cbx/trainers.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cbx/error.hpp"
#include "cbx/eval.hpp"
#include "cbx/format.hpp"
#include "cbx/rng.hpp"

namespace cbx {

namespace {

constexpr std::uint64_t kStreamShuffle = 31;
constexpr double kParamLimit = 1e6;

void shuffle_epoch(std::vector<std::size_t>& perm, std::uint64_t seed, std::size_t epoch) {
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng = Rng::keyed(seed, kStreamShuffle, epoch);
  for (std::size_t i = perm.size(); i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(perm[i - 1], perm[j]);
  }
}

std::vector<const LoggedSample*> make_batch(const TrainData& data, const std::vector<std::size_t>& perm,
                                            std::size_t begin, std::size_t end) {
  std::vector<const LoggedSample*> batch;
  batch.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) batch.push_back(&data.samples[perm[i]]);
  return batch;
}

void check_data(const TrainData& data) {
  if (data.samples.empty()) throw ContractError("training data is empty");
  for (const auto& s : data.samples) {
    if (s.domain >= data.num_domains) throw DomainError("sample domain exceeds the domain count");
  }
}

std::vector<double> column_values(const Matrix& m) { return {m.values().begin(), m.values().end()}; }

TrainRecord make_record(long iteration, double loss, Batch batch, const BatchTerms& terms, const PenaltyWeights& pw,
                        std::size_t num_domains) {
  TrainRecord r;
  r.iteration = iteration;
  r.loss = loss;
  const Matrix& ips = terms.ips.value();
  const Matrix& rep = terms.replication.value();
  std::vector<std::size_t> count(num_domains, 0), viol(num_domains, 0);
  double reward = 0.0;
  std::size_t total_viol = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    reward -= ips[i];
    const bool v = violates(rep[i], batch[i]->bounds);
    ++count[batch[i]->domain];
    if (v) {
      ++viol[batch[i]->domain];
      ++total_viol;
    }
  }
  const double n = static_cast<double>(batch.size());
  r.reward = reward / n;
  r.micro_viol = static_cast<double>(total_viol) / n;
  double macro = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < num_domains; ++k) {
    if (count[k] == 0) continue;
    macro += static_cast<double>(viol[k]) / static_cast<double>(count[k]);
    ++present;
  }
  r.macro_viol = macro / static_cast<double>(present);
  r.u = column_values(pw.u);
  r.v = column_values(pw.v);
  return r;
}

void guard(double loss, const PolicyParams& params, long iteration) {
  if (!std::isfinite(loss)) throw DivergenceError("non-finite loss", iteration);
  for (const auto* t : params.tensors()) {
    if (!t->all_finite() || t->max_abs() > kParamLimit) {
      throw DivergenceError("policy parameters exceeded " + format_double(kParamLimit), iteration);
    }
  }
}

void check_gradients(const std::vector<Matrix>& grads, long iteration) {
  for (const auto& g : grads) {
    if (!g.all_finite()) throw DivergenceError("non-finite gradient", iteration);
  }
}

struct StepOutcome {
  double loss;
  BatchTerms terms;
};

// Shared minibatch loop for the trainers that consume one batch per iteration.
// step(batch, params, pw, iteration) updates params and pw in place.
template <class Step>
TrainResult run_single_batch(const TrainData& data, const PolicyParams& init, const TrainConfig& cfg, Step&& step) {
  check_data(data);
  cfg.validate();
  init.validate();
  TrainResult result;
  result.params = init;
  result.penalty_weights = PenaltyWeights(data.num_domains);
  result.report.seed = cfg.seed;
  result.report.num_domains = data.num_domains;

  std::vector<std::size_t> perm(data.samples.size());
  long t = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_epoch(perm, cfg.seed, epoch);
    for (std::size_t begin = 0; begin < perm.size(); begin += cfg.batch_size) {
      const auto batch = make_batch(data, perm, begin, std::min(perm.size(), begin + cfg.batch_size));
      Tape tape;
      const StepOutcome out = step(tape, batch, result.params, result.penalty_weights, t);
      guard(out.loss, result.params, t);
      if (t % static_cast<long>(cfg.log_every) == 0) {
        result.report.records.push_back(
            make_record(t, out.loss, batch, out.terms, result.penalty_weights, data.num_domains));
      }
      ++t;
    }
    result.epoch_checkpoints.push_back(result.params);
  }
  result.report.iterations = t;
  return result;
}

void descend(Optimizer& opt, PolicyParams& params, const std::vector<Matrix>& grads, long t) {
  check_gradients(grads, t);
  const auto tensors = params.tensors();
  opt.step(tensors, grads);
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (log_every < 1) throw ConfigError("log interval must be at least 1");
  theta_optimizer.validate();
}

void MinimaxConfig::validate() const {
  if (!(eta > 0.0)) throw ConfigError("minimax eta must be positive");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("minimax gamma must lie in (0, 1]");
  if (!(xi > 0.0 && xi <= 1.0)) throw ConfigError("minimax xi must lie in (0, 1]");
  if (!(tau >= 1.0)) throw ConfigError("minimax tau must be at least 1");
}

void MetaGradConfig::validate() const {
  if (!(eta_inner > 0.0)) throw ConfigError("meta-gradient inner step size must be positive");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("meta-gradient lambda must lie in [0, 1]");
  uv_optimizer.validate();
}

std::string train_report_csv(const TrainReport& report) {
  std::ostringstream os;
  os << "iteration,loss,reward,micro_viol,macro_viol";
  for (std::size_t k = 0; k < report.num_domains; ++k) os << ",u_" << k;
  for (std::size_t k = 0; k < report.num_domains; ++k) os << ",v_" << k;
  os << '\n';
  for (const auto& r : report.records) {
    os << r.iteration << ',' << format_double(r.loss) << ',' << format_double(r.reward) << ','
       << format_double(r.micro_viol) << ',' << format_double(r.macro_viol);
    for (double x : r.u) os << ',' << format_double(x);
    for (double x : r.v) os << ',' << format_double(x);
    os << '\n';
  }
  return os.str();
}

TrainResult train_ips(const TrainData& data, const PolicyParams& init, const TrainConfig& cfg) {
  Optimizer opt(cfg.theta_optimizer);
  return run_single_batch(data, init, cfg, [&](Tape& tape, Batch batch, PolicyParams& params, PenaltyWeights&, long t) {
    ScalarLoss l = ips_objective(tape, batch, params);
    descend(opt, params, policy_gradients(backward(l.loss), l.terms.policy), t);
    return StepOutcome{l.loss.value().item(), l.terms};
  });
}

TrainResult train_quadratic(const TrainData& data, const PolicyParams& init, const TrainConfig& cfg, double w) {
  if (!(w >= 0.0)) throw ConfigError("quadratic penalty weight must be non-negative");
  Optimizer opt(cfg.theta_optimizer);
  return run_single_batch(data, init, cfg, [&](Tape& tape, Batch batch, PolicyParams& params, PenaltyWeights&, long t) {
    ScalarLoss l = quadratic_loss(tape, batch, params, w);
    descend(opt, params, policy_gradients(backward(l.loss), l.terms.policy), t);
    return StepOutcome{l.loss.value().item(), l.terms};
  });
}

TrainResult train_minimax(const TrainData& data, const PolicyParams& init, const TrainConfig& cfg,
                          const MinimaxConfig& mm) {
  mm.validate();
  Optimizer opt(cfg.theta_optimizer);
  double eta = mm.eta;
  double tau = mm.tau;
  return run_single_batch(data, init, cfg, [&](Tape& tape, Batch batch, PolicyParams& params, PenaltyWeights& pw, long t) {
    PenalizedLoss l = inner_loss(tape, batch, params, pw);
    const Gradients g = backward(l.loss);
    const long period = std::max(1L, std::lround(tau));
    if (t % period == 0) {
      // ascent for the max player
      axpy(eta, g.grad(l.u), pw.u);
      axpy(eta, g.grad(l.v), pw.v);
      pw.clamp();
      eta *= mm.gamma;
      tau *= mm.xi;
    }
    descend(opt, params, policy_gradients(g, l.terms.policy), t);
    return StepOutcome{l.loss.value().item(), l.terms};
  });
}

UvGradient metagrad_uv_gradient(Batch inner_batch, Batch meta_batch, const PolicyParams& params,
                                const PenaltyWeights& pw, const MetaGradConfig& cfg, const DomainPrior& prior) {
  cfg.validate();
  const std::size_t m = pw.num_domains();
  UvGradient out{Matrix(m, 1), Matrix(m, 1)};

  Tape inner_tape;
  const PenalizedLoss inner = inner_loss(inner_tape, inner_batch, params, pw);
  const std::vector<Matrix> inner_grad = policy_gradients(backward(inner.loss), inner.terms.policy);
  check_gradients(inner_grad, 0);

  PolicyParams stepped = params;
  {
    const auto tensors = stepped.tensors();
    for (std::size_t i = 0; i < tensors.size(); ++i) axpy(-cfg.eta_inner, inner_grad[i], *tensors[i]);
  }

  Tape meta_tape;
  const ScalarLoss meta = meta_loss(meta_tape, meta_batch, stepped, prior, cfg.lambda);
  const std::vector<Matrix> meta_grad = policy_gradients(backward(meta.loss), meta.terms.policy);
  check_gradients(meta_grad, 0);
  const bool meta_flat = std::all_of(meta_grad.begin(), meta_grad.end(), [](const Matrix& g) { return g.max_abs() == 0.0; });
  if (meta_flat) return out;

  // per-domain penalty gradients on tapes holding only that domain's rows
  std::vector<std::vector<const LoggedSample*>> by_domain(m);
  for (const LoggedSample* s : inner_batch) by_domain.at(s->domain).push_back(s);
  const double inv_batch = 1.0 / static_cast<double>(inner_batch.size());

  const auto project = [&](const Var& domain_pen, const PolicyVars& vars, double log_weight) {
    const std::vector<Matrix> g = policy_gradients(backward(domain_pen), vars);
    double inner_product = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) inner_product += dot(meta_grad[i], g[i]);
    return -cfg.eta_inner * std::exp(log_weight) * inner_product;
  };

  for (std::size_t k = 0; k < m; ++k) {
    if (by_domain[k].empty()) continue;
    // an inactive hinge has zero subgradient, so the backward can be skipped
    const bool min_active = domain_mean_penalty(inner.terms.pen_min, inner_batch, k).value().item() > 0.0;
    const bool max_active = domain_mean_penalty(inner.terms.pen_max, inner_batch, k).value().item() > 0.0;
    if (!min_active && !max_active) continue;
    Tape tape;
    const BatchTerms terms = batch_terms(tape, by_domain[k], params);
    if (min_active) out.u[k] = project(ad::scale(ad::sum_all(terms.pen_min), inv_batch), terms.policy, pw.u[k]);
    if (max_active) out.v[k] = project(ad::scale(ad::sum_all(terms.pen_max), inv_batch), terms.policy, pw.v[k]);
  }
  if (!out.u.all_finite() || !out.v.all_finite()) throw DivergenceError("non-finite meta-gradient", 0);
  return out;
}

TrainResult train_metagrad(const TrainData& data, const PolicyParams& init, const TrainConfig& cfg,
                           const MetaGradConfig& mg, const DomainPrior& prior) {
  check_data(data);
  cfg.validate();
  mg.validate();
  prior.validate();
  init.validate();
  if (prior.p.size() != data.num_domains) throw ConfigError("domain prior size does not match the domain count");
  if (data.samples.size() < 2) throw ContractError("meta-gradient training needs at least two samples");

  Optimizer theta_opt(cfg.theta_optimizer);
  Optimizer uv_opt(mg.uv_optimizer);
  TrainResult result;
  result.params = init;
  result.penalty_weights = PenaltyWeights(data.num_domains);
  result.report.seed = cfg.seed;
  result.report.num_domains = data.num_domains;
  PolicyParams& params = result.params;
  PenaltyWeights& pw = result.penalty_weights;

  // Paired disjoint batches: chunk 2j is the inner batch, chunk 2j+1 the meta
  // batch. A trailing unpaired chunk is skipped for the epoch.
  const std::size_t n = data.samples.size();
  const std::size_t bs = std::min(cfg.batch_size, n / 2);
  std::vector<std::size_t> perm(n);
  long t = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_epoch(perm, cfg.seed, epoch);
    for (std::size_t begin = 0; begin + bs < n; begin += 2 * bs) {
      const auto inner_batch = make_batch(data, perm, begin, begin + bs);
      const auto meta_batch = make_batch(data, perm, begin + bs, std::min(n, begin + 2 * bs));

      UvGradient g;
      try {
        g = metagrad_uv_gradient(inner_batch, meta_batch, params, pw, mg, prior);
      } catch (const DivergenceError& e) {
        throw DivergenceError("meta-gradient step failed", t);
      }
      const std::array<Matrix*, 2> uv = {&pw.u, &pw.v};
      const std::array<Matrix, 2> uv_grad = {std::move(g.u), std::move(g.v)};
      uv_opt.step(uv, uv_grad);
      pw.clamp();

      Tape tape;
      const PenalizedLoss l = inner_loss(tape, inner_batch, params, pw);
      descend(theta_opt, params, policy_gradients(backward(l.loss), l.terms.policy), t);
      const double loss = l.loss.value().item();
      guard(loss, params, t);
      if (t % static_cast<long>(cfg.log_every) == 0) {
        result.report.records.push_back(make_record(t, loss, inner_batch, l.terms, pw, data.num_domains));
      }
      ++t;
    }
    result.epoch_checkpoints.push_back(params);
  }
  result.report.iterations = t;
  return result;
}

std::size_t select_best(std::span<const PolicyParams> checkpoints, std::span<const LoggedSample> validation,
                        std::size_t num_domains) {
  if (checkpoints.empty()) throw ContractError("select_best needs at least one checkpoint");
  if (validation.empty()) throw ContractError("select_best needs validation data");
  std::size_t best = 0;
  double best_macro = 0.0, best_reward = 0.0;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    const EvalResult r = evaluate(validation, checkpoints[i], num_domains);
    const double macro = r.violations.macro;
    const double reward = r.reward.mean;
    if (i == 0 || macro < best_macro || (macro == best_macro && reward > best_reward)) {
      best = i;
      best_macro = macro;
      best_reward = reward;
    }
  }
  return best;
}

}  // namespace cbx
