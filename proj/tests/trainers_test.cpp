#include <doctest.h>

#include <cmath>
#include <sstream>

#include "cbx/error.hpp"
#include "cbx/eval.hpp"
#include "cbx/trainers.hpp"
#include "support.hpp"

using namespace cbx;
using namespace cbx::testing;

namespace {

OptimizerConfig sgd(double lr) { return {OptimizerKind::kSgd, lr}; }

TrainConfig small_config(std::size_t epochs, std::size_t batch, OptimizerConfig opt = {}) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = batch;
  c.log_every = 1;
  c.theta_optimizer = opt;
  return c;
}

// Candidate 0 always pays 1, candidate 1 never pays; logging is uniform.
std::vector<LoggedSample> two_arm_data(std::size_t n) {
  Rng rng(4);
  std::vector<LoggedSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    LoggedSample s;
    s.cs.context = {rng.normal()};
    s.cs.candidates = Matrix{{1.0, 0.0}, {0.0, 1.0}};
    s.p0 = {0.5, 0.5};
    s.action = rng.below(2);
    s.reward = s.action == 0 ? 1.0 : 0.0;
    s.bounds = {0.0, 1.0};
    out.push_back(std::move(s));
  }
  return out;
}

double first_arm_probability(const PolicyParams& p, const std::vector<LoggedSample>& data) {
  double s = 0.0;
  for (const auto& x : data) s += propensities(p, x.cs)[0];
  return s / static_cast<double>(data.size());
}

double meta_after_step(const World& w, Batch inner, Batch meta, const PenaltyWeights& pw, const MetaGradConfig& cfg,
                       const DomainPrior& prior) {
  Tape t1;
  const PenalizedLoss l = inner_loss(t1, inner, w.params, pw);
  const auto g = policy_gradients(backward(l.loss), l.terms.policy);
  PolicyParams stepped = w.params;
  const auto tensors = stepped.tensors();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    for (std::size_t j = 0; j < tensors[i]->size(); ++j) tensors[i]->values()[j] -= cfg.eta_inner * g[i].values()[j];
  }
  Tape t2;
  return meta_loss(t2, meta, stepped, prior, cfg.lambda).loss.value().item();
}

// Mean of exp(u_k) * hinge over the batch, differentiated in u_k by hand.
std::vector<double> domain_penalty_means(const std::vector<LoggedSample>& data, const PolicyParams& p,
                                         std::size_t m, bool lower) {
  std::vector<double> out(m, 0.0);
  for (const auto& s : data) {
    const double r = replication(propensities(p, s.cs), s.p0);
    out[s.domain] += lower ? std::max(0.0, s.bounds.c_min - r) : std::max(0.0, r - s.bounds.c_max);
  }
  for (double& x : out) x /= static_cast<double>(data.size());
  return out;
}

}  // namespace

TEST_CASE("sgd and adam match hand-computed updates") {
  Matrix x{{1.0, -2.0}};
  std::vector<Matrix*> params{&x};
  Optimizer s(sgd(0.1));
  s.step(params, std::vector<Matrix>{Matrix{{0.5, -1.0}}});
  CHECK(x[0] == doctest::Approx(0.95));
  CHECK(x[1] == doctest::Approx(-1.9));

  Matrix y{{1.0}};
  std::vector<Matrix*> py{&y};
  Optimizer a(OptimizerConfig{});
  const double g1 = 0.2, g2 = -0.6;
  a.step(py, std::vector<Matrix>{Matrix{{g1}}});
  // bias-corrected moments after one step are g and g^2
  double expected = 1.0 - 1e-3 * g1 / (std::fabs(g1) + 1e-8);
  CHECK(y[0] == doctest::Approx(expected).epsilon(1e-14));
  a.step(py, std::vector<Matrix>{Matrix{{g2}}});
  const double m = 0.9 * 0.1 * g1 + 0.1 * g2;
  const double v = 0.999 * 0.001 * g1 * g1 + 0.001 * g2 * g2;
  const double mhat = m / (1.0 - 0.81), vhat = v / (1.0 - 0.999 * 0.999);
  expected -= 1e-3 * mhat / (std::sqrt(vhat) + 1e-8);
  CHECK(y[0] == doctest::Approx(expected).epsilon(1e-13));
  CHECK(a.steps() == 2);
  CHECK_THROWS_AS(Optimizer(sgd(0.0)).step(py, std::vector<Matrix>{Matrix{{1.0}}}), ConfigError);
}

TEST_CASE("ips with zero rewards leaves the policy unchanged") {
  World w = random_world(3, 30);
  for (auto& s : w.samples) s.reward = 0.0;
  const TrainData data{w.samples, w.num_domains};
  for (const auto& opt : {sgd(0.5), OptimizerConfig{}}) {
    const TrainResult r = train_ips(data, w.params, small_config(3, 7, opt));
    CHECK(r.params == w.params);
    CHECK(r.epoch_checkpoints.size() == 3);
    CHECK(r.report.iterations == 15);
  }
}

TEST_CASE("ips on two arms moves probability to the paying arm every epoch") {
  const auto data = two_arm_data(400);
  const PolicyParams init = init_policy(8, {3, 4, 1});
  const TrainResult r = train_ips({data, 1}, init, small_config(6, 32, sgd(0.5)));
  double prev = first_arm_probability(init, data);
  for (const auto& ckpt : r.epoch_checkpoints) {
    const double p = first_arm_probability(ckpt, data);
    CHECK(p > prev);
    prev = p;
  }
  CHECK(prev > 0.9);
}

TEST_CASE("training is deterministic in the seed") {
  World w = random_world(11, 40);
  const TrainData data{w.samples, w.num_domains};
  auto cfg = small_config(2, 8);
  const auto a = train_ips(data, w.params, cfg), b = train_ips(data, w.params, cfg);
  CHECK(a.params == b.params);
  CHECK(train_report_csv(a.report) == train_report_csv(b.report));
  cfg.seed = 2;
  CHECK_FALSE(train_ips(data, w.params, cfg).params == a.params);

  const DomainPrior prior = DomainPrior::from_samples(w.samples, w.num_domains);
  const auto m1 = train_metagrad(data, w.params, small_config(2, 8), MetaGradConfig{}, prior);
  const auto m2 = train_metagrad(data, w.params, small_config(2, 8), MetaGradConfig{}, prior);
  CHECK(m1.params == m2.params);
  CHECK(m1.penalty_weights.u == m2.penalty_weights.u);
}

TEST_CASE("quadratic with w = 0 follows the ips trajectory") {
  World w = random_world(12, 40);
  const TrainData data{w.samples, w.num_domains};
  const auto cfg = small_config(3, 9);
  const auto ips = train_ips(data, w.params, cfg);
  const auto quad = train_quadratic(data, w.params, cfg, 0.0);
  for (std::size_t e = 0; e < 3; ++e) {
    const auto a = ips.epoch_checkpoints[e].tensors();
    const auto b = quad.epoch_checkpoints[e].tensors();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(worst_mismatch(*a[i], *b[i], 1e-12, 1e-15) == 0.0);
  }
  CHECK_THROWS_AS(train_quadratic(data, w.params, cfg, -1.0), ConfigError);
}

TEST_CASE("minimax penalty weights never decrease") {
  for (std::uint64_t seed = 20; seed < 25; ++seed) {
    World w = random_world(seed, 36);
    MinimaxConfig mm;
    mm.eta = 1.0;
    const auto r = train_minimax({w.samples, w.num_domains}, w.params, small_config(4, 6), mm);
    for (std::size_t i = 1; i < r.report.records.size(); ++i) {
      for (std::size_t k = 0; k < w.num_domains; ++k) {
        CHECK(r.report.records[i].u[k] >= r.report.records[i - 1].u[k]);
        CHECK(r.report.records[i].v[k] >= r.report.records[i - 1].v[k]);
      }
    }
    CHECK(r.penalty_weights.u.max_abs() > 0.0);
  }
}

TEST_CASE("minimax with no violations keeps zero weights") {
  World w = random_world(26, 30);
  for (auto& s : w.samples) s.bounds = {0.0, 1.0};
  const auto r = train_minimax({w.samples, w.num_domains}, w.params, small_config(3, 5), MinimaxConfig{});
  CHECK(r.penalty_weights.u.max_abs() == 0.0);
  CHECK(r.penalty_weights.v.max_abs() == 0.0);
}

TEST_CASE("minimax ascent schedule: eta decays by gamma, period by xi") {
  World w = random_world(27, 24);
  // a vanishing policy step keeps the hinge values fixed across iterations
  const auto cfg = small_config(6, w.samples.size(), sgd(1e-300));
  const auto pmin = domain_penalty_means(w.samples, w.params, w.num_domains, true);
  const auto pmax = domain_penalty_means(w.samples, w.params, w.num_domains, false);

  struct Case {
    double eta, gamma, tau, xi;
  };
  for (const Case c : {Case{0.5, 0.9, 1.0, 1.0}, Case{0.5, 1.0, 2.0, 1.0}, Case{0.3, 0.8, 4.0, 0.5}}) {
    CAPTURE(c.tau);
    MinimaxConfig mm{c.eta, c.gamma, c.tau, c.xi};
    const auto r = train_minimax({w.samples, w.num_domains}, w.params, cfg, mm);

    std::vector<double> u(w.num_domains, 0.0), v(w.num_domains, 0.0);
    double eta = c.eta, tau = c.tau;
    for (long t = 0; t < 6; ++t) {
      const long period = std::max(1L, std::lround(tau));
      if (t % period == 0) {
        for (std::size_t k = 0; k < w.num_domains; ++k) {
          u[k] += eta * std::exp(u[k]) * pmin[k];
          v[k] += eta * std::exp(v[k]) * pmax[k];
        }
        eta *= c.gamma;
        tau *= c.xi;
      }
    }
    for (std::size_t k = 0; k < w.num_domains; ++k) {
      CHECK(r.penalty_weights.u[k] == doctest::Approx(u[k]).epsilon(1e-10));
      CHECK(r.penalty_weights.v[k] == doctest::Approx(v[k]).epsilon(1e-10));
    }
  }
  CHECK_THROWS_AS(MinimaxConfig({0.1, 1.5, 1.0, 1.0}).validate(), ConfigError);
  CHECK_THROWS_AS(MinimaxConfig({0.1, 1.0, 0.5, 1.0}).validate(), ConfigError);
}

TEST_CASE("meta-gradient matches finite differences of the stepped meta loss") {
  int checked = 0;
  for (std::uint64_t seed = 40; seed < 52; ++seed) {
    World w = random_world(seed, 24, 5e-3, 5);  // 5 -> 5 -> 1: 36 parameters
    REQUIRE(w.params.num_parameters() <= 100);
    std::vector<const LoggedSample*> inner, meta;
    for (std::size_t i = 0; i < w.samples.size(); ++i) (i % 2 ? meta : inner).push_back(&w.samples[i]);
    Rng rng(seed);
    PenaltyWeights pw = random_penalty_weights(rng, w.num_domains);
    MetaGradConfig cfg;
    cfg.eta_inner = 0.05;
    cfg.lambda = seed % 2 ? 1.0 : 0.5;
    const DomainPrior prior = DomainPrior::from_samples(w.samples, w.num_domains);

    const UvGradient g = metagrad_uv_gradient(inner, meta, w.params, pw, cfg, prior);
    const auto f = [&] { return meta_after_step(w, inner, meta, pw, cfg, prior); };
    const Matrix fu = finite_difference(f, pw.u, 1e-4);
    const Matrix fv = finite_difference(f, pw.v, 1e-4);
    CAPTURE(seed);
    CHECK(worst_mismatch(g.u, fu, 1e-3) == 0.0);
    CHECK(worst_mismatch(g.v, fv, 1e-3) == 0.0);
    if (g.u.max_abs() > 0.0 || g.v.max_abs() > 0.0) ++checked;
  }
  CHECK(checked >= 6);
}

TEST_CASE("meta-gradient edge cases") {
  World w = random_world(60, 18);
  std::vector<const LoggedSample*> inner, meta;
  for (std::size_t i = 0; i < w.samples.size(); ++i) (i < 9 ? inner : meta).push_back(&w.samples[i]);
  Rng rng(60);

  SUBCASE("a domain absent from the inner batch gets zero gradient") {
    const std::size_t m = w.num_domains + 1;
    const PenaltyWeights pw = random_penalty_weights(rng, m);
    std::vector<double> prior(m, 0.25);
    const auto g = metagrad_uv_gradient(inner, meta, w.params, pw, MetaGradConfig{}, DomainPrior{prior});
    CHECK(g.u[m - 1] == 0.0);
    CHECK(g.v[m - 1] == 0.0);
  }
  SUBCASE("feasible meta batch with lambda = 1 gives zero gradient") {
    for (std::size_t i = 9; i < w.samples.size(); ++i) w.samples[i].bounds = {0.0, 1.0};
    const PenaltyWeights pw = random_penalty_weights(rng, w.num_domains);
    const DomainPrior prior = DomainPrior::from_samples(w.samples, w.num_domains);
    const auto g = metagrad_uv_gradient(inner, meta, w.params, pw, MetaGradConfig{}, prior);
    CHECK(g.u.max_abs() == 0.0);
    CHECK(g.v.max_abs() == 0.0);
  }
  SUBCASE("config validation") {
    MetaGradConfig bad;
    bad.lambda = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = MetaGradConfig{};
    bad.eta_inner = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }
}

TEST_CASE("metagrad reduces violations on a small world") {
  World w = random_world(70, 120);
  const DomainPrior prior = DomainPrior::from_samples(w.samples, w.num_domains);
  const TrainData data{w.samples, w.num_domains};
  const auto cfg = small_config(30, 20, OptimizerConfig{OptimizerKind::kAdam, 0.01});
  MetaGradConfig mg;
  mg.uv_optimizer.lr = 0.1;
  const auto r = train_metagrad(data, w.params, cfg, mg, prior);
  // 120 samples in pairs of 20-sample chunks: 3 iterations per epoch
  CHECK(r.report.iterations == 90);
  const auto ips = train_ips(data, w.params, cfg);
  CHECK(violation_rates(w.samples, r.params, w.num_domains).macro <
        violation_rates(w.samples, ips.params, w.num_domains).macro);
}

TEST_CASE("select_best") {
  World w = random_world(80, 30);
  const PolicyParams a = w.params;
  PolicyParams b = a;
  for (auto* t : b.tensors()) {
    for (double& x : t->values()) x *= 3.0;
  }
  CHECK(select_best(std::vector<PolicyParams>{a}, w.samples, w.num_domains) == 0);

  const auto ra = evaluate(w.samples, a, w.num_domains), rb = evaluate(w.samples, b, w.num_domains);
  REQUIRE(ra.violations.macro != rb.violations.macro);
  const std::size_t lower = ra.violations.macro < rb.violations.macro ? 0 : 1;
  CHECK(select_best(std::vector<PolicyParams>{a, b}, w.samples, w.num_domains) == lower);
  CHECK(select_best(std::vector<PolicyParams>{b, a}, w.samples, w.num_domains) == 1 - lower);
  CHECK(select_best(std::vector<PolicyParams>{a, b, a}, w.samples, w.num_domains) == (lower == 0 ? 0 : 1));

  // all feasible: ties on macro go to the higher reward, then the earlier index
  for (auto& s : w.samples) s.bounds = {0.0, 1.0};
  const double reward_a = expected_reward(w.samples, a).mean, reward_b = expected_reward(w.samples, b).mean;
  REQUIRE(reward_a != reward_b);
  CHECK(select_best(std::vector<PolicyParams>{a, b}, w.samples, w.num_domains) == (reward_a > reward_b ? 0 : 1));
  CHECK(select_best(std::vector<PolicyParams>{a, a}, w.samples, w.num_domains) == 0);
  CHECK_THROWS_AS(select_best(std::vector<PolicyParams>{}, w.samples, w.num_domains), ContractError);
}

TEST_CASE("divergence is reported") {
  World w = random_world(90, 20);
  for (auto& s : w.samples) s.reward = 1.0;
  try {
    train_ips({w.samples, w.num_domains}, w.params, small_config(50, 4, sgd(1e9)));
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.iteration() >= 0);
  }
}

TEST_CASE("bad training inputs") {
  World w = random_world(91, 10);
  CHECK_THROWS_AS(train_ips({std::span<const LoggedSample>{}, 3}, w.params, small_config(1, 4)), ContractError);
  CHECK_THROWS_AS(train_ips({w.samples, 2}, w.params, small_config(1, 4)), DomainError);
  CHECK_THROWS_AS(train_ips({w.samples, 3}, w.params, small_config(1, 0)), ConfigError);
  CHECK_THROWS_AS(train_metagrad({w.samples, 3}, w.params, small_config(1, 4), MetaGradConfig{}, DomainPrior{{1.0}}),
                  ConfigError);
}

TEST_CASE("train report csv") {
  World w = random_world(95, 20);
  auto cfg = small_config(2, 4);
  cfg.log_every = 3;
  const auto r = train_minimax({w.samples, w.num_domains}, w.params, cfg, MinimaxConfig{});
  const std::string csv = train_report_csv(r.report);
  std::istringstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "iteration,loss,reward,micro_viol,macro_viol,u_0,u_1,u_2,v_0,v_1,v_2");
  // iterations 0..9, every third one recorded
  REQUIRE(r.report.records.size() == 4);
  CHECK(r.report.records.back().iteration == 9);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 10);
  }
  CHECK(rows == 4);
}
