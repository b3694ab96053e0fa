#pragma once

// Define-by-run reverse-mode differentiation over dense matrices.
//
// A Tape records every operation applied to its Vars in execution order, so
// node inputs always precede the node itself. backward() walks the recorded
// nodes once in reverse order and never mutates the tape, which lets several
// roots be differentiated against the same forward pass.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "cbx/matrix.hpp"

namespace cbx {

class Tape;

enum class OpKind : std::uint8_t {
  kLeaf,
  kConstant,
  kMatMul,
  kAdd,
  kSub,
  kMul,
  kTanh,
  kExp,
  kLog,
  kRelu,
  kMax0,
  kAbs,
  kScale,
  kAddRowBias,
  kGather,
  kSoftmaxRows,
  kSumRows,
  kSumAll,
};

// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

struct TapeNode {
  OpKind op = OpKind::kConstant;
  std::size_t in0 = 0;
  std::size_t in1 = 0;
  Matrix value;
  bool requires_grad = false;
  double scalar = 0.0;                  // kScale factor
  std::vector<std::size_t> index;       // kGather source positions
  std::vector<std::uint8_t> mask;       // kSoftmaxRows, 1 = candidate present
};

// Adjoints produced by one backward pass, indexed by node id.
class Gradients {
 public:
  explicit Gradients(const Tape& tape);

  // Adjoint of v; a zero matrix of v's shape if the root does not reach v.
  Matrix grad(const Var& v) const;
  bool reached(const Var& v) const { return !adjoints_[v.id()].values().empty(); }

 private:
  friend Gradients backward(const Var& root);
  const Tape* tape_;
  std::vector<Matrix> adjoints_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable input (policy weights, penalty weights).
  Var variable(Matrix value);
  // Input that never receives an adjoint (features, propensities, rewards).
  Var constant(Matrix value);

  std::size_t size() const { return nodes_.size(); }
  const TapeNode& node(std::size_t id) const { return nodes_[id]; }

  // Low-level recording; used by the op functions in namespace ad.
  Var push(TapeNode node);

 private:
  std::vector<TapeNode> nodes_;
};

// Reverse pass from a 1x1 root. Throws ContractError for any other shape.
Gradients backward(const Var& root);

namespace ad {

inline constexpr std::size_t kNoSource = std::numeric_limits<std::size_t>::max();

enum class Elementwise : std::uint8_t { kAdd, kSub, kMul, kTanh, kExp, kLog, kRelu, kMax0, kAbs };

// Unary kinds ignore b. Binary kinds accept equal shapes or a 1x1 operand.
Var elementwise(Elementwise kind, const Var& a, const Var& b = Var{});

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var tanh(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);  // DomainError on any non-positive entry
Var relu(const Var& a);
Var max0(const Var& a);  // hinge max(0, x); subgradient 0 at x == 0
Var abs(const Var& a);   // subgradient 0 at x == 0
Var scale(const Var& a, double factor);
// a (r x c) plus bias (1 x c) added to every row.
Var add_row_bias(const Var& a, const Var& bias);
// rows x cols output; entry i takes a.flat[index[i]], or 0 for kNoSource.
Var gather(const Var& a, std::size_t rows, std::size_t cols, std::vector<std::size_t> index);
// Row-wise softmax over the entries flagged in `present` (one byte per logit);
// the other entries get probability 0. Computed with max-subtraction.
// Throws InvalidCandidateSetError when a row has nothing present.
Var softmax_rows(const Var& logits, std::vector<std::uint8_t> present);
// Single-row softmax; mask[i] == true drops entry i. Empty mask drops nothing.
Var softmax_row(const Var& logits, std::span<const bool> mask = {});
Var sum_rows(const Var& a);  // r x c -> r x 1
Var sum_all(const Var& a);   // -> 1x1
Var mean_all(const Var& a);  // -> 1x1

}  // namespace ad

inline Var operator+(const Var& a, const Var& b) { return ad::add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return ad::sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return ad::mul(a, b); }

}  // namespace cbx
