#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cbx/objectives.hpp"
#include "cbx/optimizer.hpp"
#include "cbx/policy.hpp"

namespace cbx {

// Logged samples with bounds already resolved, plus the domain count M.
struct TrainData {
  std::span<const LoggedSample> samples;
  std::size_t num_domains = 1;
};

struct TrainConfig {
  std::size_t epochs = 32;
  std::size_t batch_size = 512;
  std::uint64_t seed = 1;       // batch order
  std::size_t log_every = 10;   // TrainReport record interval, in iterations
  OptimizerConfig theta_optimizer;

  void validate() const;
};

struct MinimaxConfig {
  double eta = 0.1;    // max-player learning rate
  double gamma = 1.0;  // learning-rate decay per max update
  double tau = 1.0;    // max update period, in iterations
  double xi = 1.0;     // period decay per max update

  void validate() const;
};

struct MetaGradConfig {
  double eta_inner = 0.01;  // step size of the cloned gradient-descent step
  double lambda = 1.0;      // balance between reward and constraint terms
  OptimizerConfig uv_optimizer{OptimizerKind::kAdam, 0.01};

  void validate() const;
};

struct TrainRecord {
  long iteration = 0;
  double loss = 0.0;
  double reward = 0.0;      // IPS estimate on the iteration's batch
  double micro_viol = 0.0;  // violation rates on the iteration's batch
  double macro_viol = 0.0;
  std::vector<double> u;
  std::vector<double> v;
};

struct TrainReport {
  std::vector<TrainRecord> records;
  std::string checkpoint_path;
  std::uint64_t seed = 0;
  std::size_t num_domains = 0;
  long iterations = 0;
};

// Columns: iteration,loss,reward,micro_viol,macro_viol,u_0..u_{M-1},v_0..v_{M-1}
std::string train_report_csv(const TrainReport& report);

struct TrainResult {
  PolicyParams params;                       // after the last iteration
  std::vector<PolicyParams> epoch_checkpoints;  // one per completed epoch
  PenaltyWeights penalty_weights;            // final u, v
  TrainReport report;
};

TrainResult train_ips(const TrainData& data, const PolicyParams& init, const TrainConfig& cfg);

// Fixed penalty weight w on squared hinge terms.
TrainResult train_quadratic(const TrainData& data, const PolicyParams& init, const TrainConfig& cfg, double w);

// Primal-dual: gradient ascent on u, v every round(tau)-th iteration, policy
// descent with the theta optimizer every iteration.
TrainResult train_minimax(const TrainData& data, const PolicyParams& init, const TrainConfig& cfg,
                          const MinimaxConfig& mm);

struct UvGradient {
  Matrix u;  // M x 1
  Matrix v;  // M x 1
};

// Gradient of the meta loss on meta_batch after one gradient-descent step on
// inner_batch, with respect to u and v. Uses
// d theta'/d u_k = -eta_inner exp(u_k) grad P_k^min: one meta backward plus one
// backward per active domain penalty.
UvGradient metagrad_uv_gradient(Batch inner_batch, Batch meta_batch, const PolicyParams& params,
                                const PenaltyWeights& pw, const MetaGradConfig& cfg, const DomainPrior& prior);

TrainResult train_metagrad(const TrainData& data, const PolicyParams& init, const TrainConfig& cfg,
                           const MetaGradConfig& mg, const DomainPrior& prior);

// Index of the checkpoint with the lowest macro violation rate on the
// validation data; ties go to higher expected reward, then the earlier entry.
std::size_t select_best(std::span<const PolicyParams> checkpoints, std::span<const LoggedSample> validation,
                        std::size_t num_domains);

}  // namespace cbx
