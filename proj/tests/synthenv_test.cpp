#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <string>

#include "cbx/error.hpp"
#include "cbx/eval.hpp"
#include "cbx/synthenv.hpp"
#include "support.hpp"

using namespace cbx;

namespace {

const Environment& default_env() {
  static const Environment env = gen_env(EnvSpec{});
  return env;
}

const DatasetSplits& default_data() {
  static const DatasetSplits d = gen_dataset(default_env(), 100000);
  return d;
}

std::vector<const LoggedSample*> all_samples(const DatasetSplits& d) {
  std::vector<const LoggedSample*> out;
  for (const Dataset* ds : {&d.train, &d.validation, &d.test}) {
    for (const auto& s : ds->samples) out.push_back(&s);
  }
  return out;
}

}  // namespace

TEST_CASE("gen_env is deterministic in the spec") {
  const Environment a = gen_env(EnvSpec{}), b = gen_env(EnvSpec{});
  CHECK(a.fingerprint == b.fingerprint);
  CHECK(a.logging == b.logging);
  CHECK(a.reward_model == b.reward_model);
  EnvSpec other;
  other.seed = 2;
  CHECK(gen_env(other).fingerprint != a.fingerprint);
  CHECK(a.domain_names == default_domain_names(8));
  CHECK(a.domain_names.front() == "general");
}

TEST_CASE("spec validation") {
  EnvSpec s;
  s.num_domains = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = EnvSpec{};
  s.temperature = 0.0;
  CHECK_THROWS_AS(gen_env(s), ConfigError);
  s = EnvSpec{};
  s.max_candidates = kMaxCandidates + 1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = EnvSpec{};
  s.context_dim = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK(parse_env_spec(env_spec_json(EnvSpec{})).temperature == EnvSpec{}.temperature);
}

TEST_CASE("single domain") {
  EnvSpec s;
  s.num_domains = 1;
  const Environment env = gen_env(s);
  CHECK(env.prior == std::vector<double>{1.0});
  const auto d = gen_dataset(env, 500);
  for (const auto& x : d.train.samples) CHECK(x.domain == 0);
}

TEST_CASE("zipf prior is heavily imbalanced") {
  EnvSpec s;
  s.num_domains = 27;
  const Environment env = gen_env(s);
  double total = 0.0;
  for (double p : env.prior) total += p;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
  // p_k proportional to (k+1)^-1.1, so first/last = 27^1.1 (about 37.5)
  CHECK(env.prior.front() / env.prior.back() == doctest::Approx(std::pow(27.0, 1.1)).epsilon(1e-12));
  CHECK(env.prior.front() / env.prior.back() >= 10.0);
}

TEST_CASE("dataset sizes and splits") {
  const auto empty = gen_dataset(default_env(), 0);
  CHECK(empty.train.samples.empty());
  CHECK(empty.validation.samples.empty());
  CHECK(empty.test.samples.empty());

  const auto d = gen_dataset(default_env(), 2000);
  CHECK(d.train.samples.size() == 1700);
  CHECK(d.validation.samples.size() == 200);
  CHECK(d.test.samples.size() == 100);
  CHECK(d.train.split == Split::kTrain);
  CHECK(d.test.fingerprint == default_env().fingerprint);

  // splits are disjoint and exhaustive: sample i of the concatenation is gen_sample(i)
  std::size_t i = 0;
  for (const auto* s : all_samples(d)) {
    const LoggedSample again = gen_sample(default_env(), i++);
    CHECK(s->p0 == again.p0);
    CHECK(s->cs.context == again.cs.context);
    CHECK(s->action == again.action);
  }
  CHECK(i == 2000);
  CHECK_THROWS_AS(gen_dataset(default_env(), 10, SplitFractions{0.5, 0.5, 0.5}), ConfigError);
}

TEST_CASE("logged propensities respect the floor and match the logging policy exactly") {
  const auto& d = default_data();
  double min_p = 1.0;
  for (const auto* s : all_samples(d)) {
    for (double p : s->p0) min_p = std::min(min_p, p);
  }
  CHECK(min_p >= 1e-3);

  const PolicyCheckpoint ckpt = parse_policy(serialize_policy({default_env().logging, default_env().fingerprint}));
  for (std::size_t i = 0; i < 500; ++i) {
    const auto& s = d.train.samples[i];
    CHECK(propensities(ckpt.params, s.cs) == s.p0);
  }
}

TEST_CASE("low temperature violates the floor") {
  EnvSpec s;
  s.temperature = 0.05;
  const Environment env = gen_env(s);
  CHECK_THROWS_AS(gen_dataset(env, 2000), ConfigError);
}

TEST_CASE("empirical domain frequencies are within 3 sigma of the prior") {
  const auto& d = default_data();
  const auto samples = all_samples(d);
  const double n = static_cast<double>(samples.size());
  std::vector<double> counts(8, 0.0);
  for (const auto* s : samples) counts[s->domain] += 1.0;
  for (std::size_t k = 0; k < 8; ++k) {
    const double p = default_env().prior[k];
    CHECK(std::fabs(counts[k] - n * p) <= 3.0 * std::sqrt(n * p * (1.0 - p)));
  }
}

TEST_CASE("true_policy_value oracles") {
  SUBCASE("certain success gives value 1") {
    EnvSpec s;
    s.reward_bias = 60.0;
    const Environment env = gen_env(s);
    CHECK(true_policy_value(env, env.logging, 2000).mean == 1.0);
  }
  SUBCASE("uniform policy on a two-candidate env") {
    EnvSpec s;
    s.min_candidates = s.max_candidates = 2;
    s.reward_hidden_scale = 1.5;
    const Environment env = gen_env(s);
    PolicyParams uniform = env.logging;
    for (auto* t : uniform.tensors()) *t = Matrix(t->rows(), t->cols());
    // independent enumeration: each context is worth the mean of its two success probabilities
    Rng rng(1234);
    const std::size_t n = 20000;
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const CandidateSet cs = env.draw_context(env.draw_domain(rng), rng);
      const auto q = env.success_probabilities(cs);
      const double v = 0.5 * (q[0] + q[1]);
      sum += v;
      sq += v * v;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sq / n - mean * mean) / n);
    const PolicyValue got = true_policy_value(env, uniform, n);
    CHECK(std::fabs(got.mean - mean) <= 4.0 * std::hypot(se, got.std_error));
  }
}

TEST_CASE("IPS estimate agrees with the true value for a perturbed policy") {
  const auto& d = default_data();
  PolicyParams perturbed = default_env().logging;
  Rng rng(6);
  for (auto* t : perturbed.tensors()) {
    for (double& x : t->values()) x += 0.1 * rng.normal();
  }
  const RewardEstimate est = expected_reward(d.train.samples, perturbed);
  const PolicyValue truth = true_policy_value(default_env(), perturbed, 50000);
  CHECK(std::fabs(est.mean - truth.mean) <= 4.0 * std::hypot(est.std_error, truth.std_error));
}

TEST_CASE("true_replication_profile") {
  const Environment& env = default_env();
  const auto same = true_replication_profile(env, env.logging, 3000);
  for (std::size_t k = 0; k < 8; ++k) CHECK(same.mean[k] == 1.0);

  const PolicyParams other = init_policy(77, default_policy_dims());
  const auto prof = true_replication_profile(env, other, 20000);
  const auto& d = default_data();
  std::vector<double> sum(8, 0.0), sq(8, 0.0), cnt(8, 0.0);
  for (const auto& s : d.train.samples) {
    const double r = replication(propensities(other, s.cs), s.p0);
    sum[s.domain] += r;
    sq[s.domain] += r * r;
    cnt[s.domain] += 1.0;
  }
  for (std::size_t k = 0; k < 8; ++k) {
    CHECK(prof.mean[k] > 0.0);
    CHECK(prof.mean[k] < 1.0);
    const double m = sum[k] / cnt[k];
    const double se = std::sqrt((sq[k] / cnt[k] - m * m) / cnt[k]);
    CHECK(std::fabs(prof.mean[k] - m) <= 4.0 * std::hypot(se, prof.std_error[k]));
  }
}

TEST_CASE("dataset files round-trip bit-exactly") {
  const auto d = gen_dataset(default_env(), 300);
  const std::string text = serialize_dataset(d.validation);
  const Dataset back = parse_dataset(text);
  CHECK(serialize_dataset(back) == text);
  REQUIRE(back.samples.size() == d.validation.samples.size());
  for (std::size_t i = 0; i < back.samples.size(); ++i) {
    const auto &a = back.samples[i], &b = d.validation.samples[i];
    CHECK(a.p0 == b.p0);
    CHECK(a.cs.context == b.cs.context);
    CHECK(a.cs.candidates == b.cs.candidates);
    CHECK(a.action == b.action);
    CHECK(a.reward == b.reward);
    CHECK(a.domain == b.domain);
  }
  CHECK(back.fingerprint == d.validation.fingerprint);
  CHECK(back.domain_names == d.validation.domain_names);
  CHECK(back.split == Split::kValidation);

  const auto path = std::filesystem::temp_directory_path() / "cbx_dataset_roundtrip.jsonl";
  save_dataset(path, d.test);
  CHECK(serialize_dataset(load_dataset(path)) == serialize_dataset(d.test));
  std::filesystem::remove(path);
}

TEST_CASE("dataset parsing rejects bad input") {
  const auto d = gen_dataset(default_env(), 40);
  std::string text = serialize_dataset(d.train);
  CHECK_THROWS_AS(parse_dataset(""), ParseError);
  CHECK_THROWS_AS(parse_dataset("{\"format\":\"other\"}\n"), ParseError);

  // drop the last sample line: the count no longer matches the header
  std::string truncated = text.substr(0, text.rfind('\n', text.size() - 2) + 1);
  CHECK_THROWS_AS(parse_dataset(truncated), ParseError);

  // a chosen-action propensity below the floor is rejected at load time
  Dataset small = d.train;
  small.samples.resize(1);
  auto& s = small.samples[0];
  s.cs.candidates = Matrix{{1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0}, {0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0}};
  s.p0 = {0.5, 0.5};
  s.action = 0;
  CHECK_NOTHROW(parse_dataset(serialize_dataset(small)));
  s.p0 = {1e-5, 1.0 - 1e-5};
  CHECK_THROWS_AS(parse_dataset(serialize_dataset(small)), PropensityFloorError);
  s.action = 1;
  CHECK_NOTHROW(parse_dataset(serialize_dataset(small)));
}
