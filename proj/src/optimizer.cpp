#include "cbx/optimizer.hpp"

#include <cmath>

#include "cbx/error.hpp"

namespace cbx {

void OptimizerConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("optimizer learning rate must be positive");
  if (kind == OptimizerKind::kAdam) {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) throw ConfigError("adam epsilon must be positive");
  }
}

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer '" + name + "'");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::kSgd ? "sgd" : "adam"; }

Optimizer::Optimizer(OptimizerConfig config) : config_(config) { config_.validate(); }

void Optimizer::step(std::span<Matrix* const> params, std::span<const Matrix> grads) {
  if (params.size() != grads.size()) throw ShapeError("optimizer got mismatched parameter and gradient lists");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(grads[i])) {
      throw ShapeError("gradient " + grads[i].shape_string() + " for parameter " + params[i]->shape_string());
    }
  }
  ++steps_;
  if (config_.kind == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < params.size(); ++i) axpy(-config_.lr, grads[i], *params[i]);
    return;
  }

  if (first_.empty()) {
    for (const Matrix& g : grads) {
      first_.emplace_back(g.rows(), g.cols());
      second_.emplace_back(g.rows(), g.cols());
    }
  } else if (first_.size() != grads.size()) {
    throw ShapeError("optimizer parameter list changed between steps");
  }
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!first_[i].same_shape(grads[i])) throw ShapeError("optimizer accumulator shape changed");
    auto m = first_[i].values();
    auto v = second_[i].values();
    auto g = grads[i].values();
    auto p = params[i]->values();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p[j] -= config_.lr * mhat / (std::sqrt(vhat) + config_.epsilon);
    }
  }
}

}  // namespace cbx
