#pragma once

// Shared fixtures for the unit tests and the acceptance runner: small random
// worlds and a central finite-difference oracle.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "cbx/matrix.hpp"
#include "cbx/objectives.hpp"
#include "cbx/policy.hpp"
#include "cbx/rng.hpp"

namespace cbx::testing {

inline Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double lo = -2.0, double hi = 2.0) {
  Matrix m(r, c);
  for (double& x : m.values()) x = rng.uniform(lo, hi);
  return m;
}

inline std::vector<double> random_simplex(Rng& rng, std::size_t n, double min_entry = 0.02) {
  std::vector<double> p(n);
  double s = 0.0;
  for (double& x : p) {
    x = min_entry + rng.uniform();
    s += x;
  }
  for (double& x : p) x /= s;
  return p;
}

// |a - b| <= rtol * max(|a|, |b|) + atol
inline bool close(double a, double b, double rtol, double atol = 1e-9) {
  return std::fabs(a - b) <= rtol * std::max(std::fabs(a), std::fabs(b)) + atol;
}

// Central difference of f with respect to every entry of x.
inline Matrix finite_difference(const std::function<double()>& f, Matrix& x, double h = 1e-5) {
  Matrix g(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Largest entry-wise violation of close(); 0 means every entry agrees.
inline double worst_mismatch(const Matrix& analytic, const Matrix& numeric, double rtol, double atol = 1e-9) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], b = numeric[i];
    const double allowed = rtol * std::max(std::fabs(a), std::fabs(b)) + atol;
    worst = std::max(worst, std::fabs(a - b) / allowed);
  }
  return worst <= 1.0 ? 0.0 : worst;
}

struct World {
  std::size_t context_dim = 3;
  std::size_t candidate_dim = 2;
  std::size_t num_domains = 3;
  PolicyParams params;  // 5 -> 6 -> 1: 43 parameters
  std::vector<LoggedSample> samples;

  std::vector<const LoggedSample*> batch() const {
    std::vector<const LoggedSample*> b;
    for (const auto& s : samples) b.push_back(&s);
    return b;
  }
};

inline CandidateSet random_candidates(Rng& rng, std::size_t context_dim, std::size_t candidate_dim, std::size_t n) {
  CandidateSet cs;
  cs.context.resize(context_dim);
  for (double& x : cs.context) x = rng.normal();
  cs.candidates = Matrix(n, candidate_dim);
  for (double& x : cs.candidates.values()) x = rng.normal();
  return cs;
}

// Random small world. Bounds sit around each sample's replication, roughly
// half of the samples violate, and no bound is within `margin` of a kink.
inline World random_world(std::uint64_t seed, std::size_t num_samples = 12, double margin = 2e-3,
                          std::size_t hidden = 6) {
  Rng rng = Rng::keyed(seed, 1000);
  World w;
  w.params = init_policy(rng.next_u64(), {w.context_dim + w.candidate_dim, hidden, 1});
  for (auto& b : w.params.biases) {
    for (double& x : b.values()) x = rng.uniform(-0.5, 0.5);
  }
  for (std::size_t i = 0; i < num_samples; ++i) {
    LoggedSample s;
    s.cs = random_candidates(rng, w.context_dim, w.candidate_dim, 2 + rng.below(4));
    s.p0 = random_simplex(rng, s.cs.size());
    s.action = rng.below(s.cs.size());
    s.reward = rng.uniform() < 0.6 ? rng.uniform() : 0.0;
    s.domain = i % w.num_domains;
    const double r = replication(propensities(w.params, s.cs), s.p0);
    for (;;) {
      const double lo = rng.uniform(std::max(0.0, r - 0.2), std::min(1.0, r + 0.2));
      const double hi = rng.uniform() < 0.3 ? rng.uniform(lo, std::min(1.0, lo + 0.1)) : 1.0;
      const bool lo_ok = std::fabs(r - lo) > margin;
      const bool hi_ok = hi == 1.0 || std::fabs(r - hi) > margin;
      if (lo_ok && hi_ok) {
        s.bounds = {lo, hi};
        break;
      }
    }
    w.samples.push_back(std::move(s));
  }
  return w;
}

inline PenaltyWeights random_penalty_weights(Rng& rng, std::size_t m, double lo = -1.0, double hi = 1.0) {
  PenaltyWeights pw(m);
  for (double& x : pw.u.values()) x = rng.uniform(lo, hi);
  for (double& x : pw.v.values()) x = rng.uniform(lo, hi);
  return pw;
}

}  // namespace cbx::testing
