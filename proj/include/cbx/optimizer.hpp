#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cbx/matrix.hpp"

namespace cbx {

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

OptimizerKind parse_optimizer_kind(const std::string& name);
std::string to_string(OptimizerKind kind);

// Descent optimizer over a fixed list of tensors. Moment accumulators are
// allocated on the first step and must keep the same shapes afterwards.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config);

  // params[i] -= update(grads[i])
  void step(std::span<Matrix* const> params, std::span<const Matrix> grads);

  long steps() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }

 private:
  OptimizerConfig config_;
  long steps_ = 0;
  std::vector<Matrix> first_;
  std::vector<Matrix> second_;
};

}  // namespace cbx
