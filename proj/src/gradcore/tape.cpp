#include "cbx/tape.hpp"

#include <algorithm>
#include <cmath>

#include "cbx/error.hpp"

namespace cbx {

const Matrix& Var::value() const { return tape_->node(id_).value; }

Var Tape::variable(Matrix value) {
  TapeNode n;
  n.op = OpKind::kLeaf;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::constant(Matrix value) {
  TapeNode n;
  n.op = OpKind::kConstant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::push(TapeNode node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients::Gradients(const Tape& tape) : tape_(&tape), adjoints_(tape.size()) {}

Matrix Gradients::grad(const Var& v) const {
  const Matrix& a = adjoints_.at(v.id());
  if (a.values().empty()) return Matrix(v.rows(), v.cols());
  return a;
}

namespace {

void check_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
}

// Adds contribution into the adjoint slot, allocating it on first use.
void accumulate(Matrix& slot, const Matrix& contribution) {
  if (slot.values().empty()) {
    slot = contribution;
  } else {
    axpy(1.0, contribution, slot);
  }
}

Matrix& slot_for(Matrix& slot, std::size_t rows, std::size_t cols) {
  if (slot.values().empty()) slot = Matrix(rows, cols);
  return slot;
}

// Reduce a broadcast adjoint back onto the operand's shape.
void accumulate_broadcast(Matrix& slot, const Matrix& operand_value, const Matrix& contribution) {
  if (operand_value.same_shape(contribution)) {
    accumulate(slot, contribution);
  } else {
    double s = 0.0;
    for (double v : contribution.values()) s += v;
    slot_for(slot, 1, 1)[0] += s;
  }
}

TapeNode unary_node(OpKind op, const Var& a) {
  TapeNode n;
  n.op = op;
  n.in0 = a.id();
  n.requires_grad = a.tape().node(a.id()).requires_grad;
  return n;
}

TapeNode binary_node(OpKind op, const Var& a, const Var& b) {
  check_same_tape(a, b);
  TapeNode n;
  n.op = op;
  n.in0 = a.id();
  n.in1 = b.id();
  n.requires_grad = a.tape().node(a.id()).requires_grad || b.tape().node(b.id()).requires_grad;
  return n;
}

template <class F>
Matrix broadcast_apply(const Matrix& a, const Matrix& b, F f, const char* name) {
  if (a.same_shape(b)) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  if (b.is_scalar()) {
    Matrix out(a.rows(), a.cols());
    const double s = b[0];
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], s);
    return out;
  }
  if (a.is_scalar()) {
    Matrix out(b.rows(), b.cols());
    const double s = a[0];
    for (std::size_t i = 0; i < b.size(); ++i) out[i] = f(s, b[i]);
    return out;
  }
  throw ShapeError(std::string(name) + " " + a.shape_string() + " with " + b.shape_string());
}

template <class F>
Matrix map(const Matrix& a, F f) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

// Element i of a broadcast operand.
inline double at(const Matrix& m, std::size_t i) { return m.is_scalar() ? m[0] : m[i]; }

}  // namespace

Gradients backward(const Var& root) {
  const Matrix& rv = root.value();
  if (!rv.is_scalar()) {
    throw ContractError("backward requires a 1x1 root, got " + rv.shape_string());
  }
  const Tape& tape = root.tape();
  Gradients g(tape);
  auto& adj = g.adjoints_;
  adj[root.id()] = Matrix::scalar(1.0);

  for (std::size_t id = root.id() + 1; id-- > 0;) {
    const TapeNode& n = tape.node(id);
    if (!n.requires_grad || adj[id].values().empty()) continue;
    const Matrix& d = adj[id];
    const auto needs = [&](std::size_t in) { return tape.node(in).requires_grad; };

    switch (n.op) {
      case OpKind::kLeaf:
      case OpKind::kConstant:
        break;
      case OpKind::kMatMul: {
        const Matrix& a = tape.node(n.in0).value;
        const Matrix& b = tape.node(n.in1).value;
        if (needs(n.in0)) accumulate(adj[n.in0], matmul_nt(d, b));
        if (needs(n.in1)) accumulate(adj[n.in1], matmul_tn(a, d));
        break;
      }
      case OpKind::kAdd:
      case OpKind::kSub: {
        if (needs(n.in0)) accumulate_broadcast(adj[n.in0], tape.node(n.in0).value, d);
        if (needs(n.in1)) {
          if (n.op == OpKind::kAdd) {
            accumulate_broadcast(adj[n.in1], tape.node(n.in1).value, d);
          } else {
            accumulate_broadcast(adj[n.in1], tape.node(n.in1).value, map(d, [](double x) { return -x; }));
          }
        }
        break;
      }
      case OpKind::kMul: {
        const Matrix& a = tape.node(n.in0).value;
        const Matrix& b = tape.node(n.in1).value;
        if (needs(n.in0)) {
          Matrix c(d.rows(), d.cols());
          for (std::size_t i = 0; i < d.size(); ++i) c[i] = d[i] * at(b, i);
          accumulate_broadcast(adj[n.in0], a, c);
        }
        if (needs(n.in1)) {
          Matrix c(d.rows(), d.cols());
          for (std::size_t i = 0; i < d.size(); ++i) c[i] = d[i] * at(a, i);
          accumulate_broadcast(adj[n.in1], b, c);
        }
        break;
      }
      case OpKind::kTanh: {
        const Matrix& y = n.value;
        Matrix& s = slot_for(adj[n.in0], y.rows(), y.cols());
        for (std::size_t i = 0; i < y.size(); ++i) s[i] += d[i] * (1.0 - y[i] * y[i]);
        break;
      }
      case OpKind::kExp: {
        const Matrix& y = n.value;
        Matrix& s = slot_for(adj[n.in0], y.rows(), y.cols());
        for (std::size_t i = 0; i < y.size(); ++i) s[i] += d[i] * y[i];
        break;
      }
      case OpKind::kLog: {
        const Matrix& x = tape.node(n.in0).value;
        Matrix& s = slot_for(adj[n.in0], x.rows(), x.cols());
        for (std::size_t i = 0; i < x.size(); ++i) s[i] += d[i] / x[i];
        break;
      }
      case OpKind::kRelu:
      case OpKind::kMax0: {
        const Matrix& x = tape.node(n.in0).value;
        Matrix& s = slot_for(adj[n.in0], x.rows(), x.cols());
        for (std::size_t i = 0; i < x.size(); ++i) {
          if (x[i] > 0.0) s[i] += d[i];
        }
        break;
      }
      case OpKind::kAbs: {
        const Matrix& x = tape.node(n.in0).value;
        Matrix& s = slot_for(adj[n.in0], x.rows(), x.cols());
        for (std::size_t i = 0; i < x.size(); ++i) {
          if (x[i] > 0.0) {
            s[i] += d[i];
          } else if (x[i] < 0.0) {
            s[i] -= d[i];
          }
        }
        break;
      }
      case OpKind::kScale: {
        Matrix& s = slot_for(adj[n.in0], d.rows(), d.cols());
        axpy(n.scalar, d, s);
        break;
      }
      case OpKind::kAddRowBias: {
        if (needs(n.in0)) accumulate(adj[n.in0], d);
        if (needs(n.in1)) {
          Matrix& s = slot_for(adj[n.in1], 1, d.cols());
          for (std::size_t r = 0; r < d.rows(); ++r) {
            const auto row = d.row_span(r);
            for (std::size_t c = 0; c < d.cols(); ++c) s[c] += row[c];
          }
        }
        break;
      }
      case OpKind::kGather: {
        const Matrix& x = tape.node(n.in0).value;
        Matrix& s = slot_for(adj[n.in0], x.rows(), x.cols());
        for (std::size_t i = 0; i < n.index.size(); ++i) {
          if (n.index[i] != ad::kNoSource) s[n.index[i]] += d[i];
        }
        break;
      }
      case OpKind::kSoftmaxRows: {
        const Matrix& p = n.value;
        Matrix& s = slot_for(adj[n.in0], p.rows(), p.cols());
        for (std::size_t r = 0; r < p.rows(); ++r) {
          const auto pr = p.row_span(r);
          const auto dr = d.row_span(r);
          auto sr = s.row_span(r);
          double inner = 0.0;
          for (std::size_t c = 0; c < pr.size(); ++c) inner += pr[c] * dr[c];
          for (std::size_t c = 0; c < pr.size(); ++c) {
            if (n.mask[r * p.cols() + c]) sr[c] += pr[c] * (dr[c] - inner);
          }
        }
        break;
      }
      case OpKind::kSumRows: {
        const Matrix& x = tape.node(n.in0).value;
        Matrix& s = slot_for(adj[n.in0], x.rows(), x.cols());
        for (std::size_t r = 0; r < x.rows(); ++r) {
          auto sr = s.row_span(r);
          for (double& v : sr) v += d[r];
        }
        break;
      }
      case OpKind::kSumAll: {
        const Matrix& x = tape.node(n.in0).value;
        Matrix& s = slot_for(adj[n.in0], x.rows(), x.cols());
        const double d0 = d[0];
        for (double& v : s.values()) v += d0;
        break;
      }
    }
  }
  return g;
}

namespace ad {

Var elementwise(Elementwise kind, const Var& a, const Var& b) {
  switch (kind) {
    case Elementwise::kAdd:
      return add(a, b);
    case Elementwise::kSub:
      return sub(a, b);
    case Elementwise::kMul:
      return mul(a, b);
    case Elementwise::kTanh:
      return tanh(a);
    case Elementwise::kExp:
      return exp(a);
    case Elementwise::kLog:
      return log(a);
    case Elementwise::kRelu:
      return relu(a);
    case Elementwise::kMax0:
      return max0(a);
    case Elementwise::kAbs:
      return abs(a);
  }
  throw ContractError("unknown elementwise op");
}

Var matmul(const Var& a, const Var& b) {
  TapeNode n = binary_node(OpKind::kMatMul, a, b);
  n.value = cbx::matmul(a.value(), b.value());
  return a.tape().push(std::move(n));
}

Var add(const Var& a, const Var& b) {
  TapeNode n = binary_node(OpKind::kAdd, a, b);
  n.value = broadcast_apply(a.value(), b.value(), [](double x, double y) { return x + y; }, "add");
  return a.tape().push(std::move(n));
}

Var sub(const Var& a, const Var& b) {
  TapeNode n = binary_node(OpKind::kSub, a, b);
  n.value = broadcast_apply(a.value(), b.value(), [](double x, double y) { return x - y; }, "sub");
  return a.tape().push(std::move(n));
}

Var mul(const Var& a, const Var& b) {
  TapeNode n = binary_node(OpKind::kMul, a, b);
  n.value = broadcast_apply(a.value(), b.value(), [](double x, double y) { return x * y; }, "mul");
  return a.tape().push(std::move(n));
}

Var tanh(const Var& a) {
  TapeNode n = unary_node(OpKind::kTanh, a);
  n.value = map(a.value(), [](double x) { return std::tanh(x); });
  return a.tape().push(std::move(n));
}

Var exp(const Var& a) {
  TapeNode n = unary_node(OpKind::kExp, a);
  n.value = map(a.value(), [](double x) { return std::exp(x); });
  return a.tape().push(std::move(n));
}

Var log(const Var& a) {
  for (double v : a.value().values()) {
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  TapeNode n = unary_node(OpKind::kLog, a);
  n.value = map(a.value(), [](double x) { return std::log(x); });
  return a.tape().push(std::move(n));
}

Var relu(const Var& a) {
  TapeNode n = unary_node(OpKind::kRelu, a);
  n.value = map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; });
  return a.tape().push(std::move(n));
}

Var max0(const Var& a) {
  TapeNode n = unary_node(OpKind::kMax0, a);
  n.value = map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; });
  return a.tape().push(std::move(n));
}

Var abs(const Var& a) {
  TapeNode n = unary_node(OpKind::kAbs, a);
  n.value = map(a.value(), [](double x) { return std::fabs(x); });
  return a.tape().push(std::move(n));
}

Var scale(const Var& a, double factor) {
  TapeNode n = unary_node(OpKind::kScale, a);
  n.scalar = factor;
  n.value = map(a.value(), [factor](double x) { return factor * x; });
  return a.tape().push(std::move(n));
}

Var add_row_bias(const Var& a, const Var& bias) {
  const Matrix& x = a.value();
  const Matrix& b = bias.value();
  if (b.rows() != 1 || b.cols() != x.cols()) {
    throw ShapeError("add_row_bias " + x.shape_string() + " with bias " + b.shape_string());
  }
  TapeNode n = binary_node(OpKind::kAddRowBias, a, bias);
  Matrix out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row_span(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += b[c];
  }
  n.value = std::move(out);
  return a.tape().push(std::move(n));
}

Var gather(const Var& a, std::size_t rows, std::size_t cols, std::vector<std::size_t> index) {
  if (index.size() != rows * cols) throw ShapeError("gather index length does not match output shape");
  const Matrix& x = a.value();
  Matrix out(rows, cols);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] == kNoSource) continue;
    if (index[i] >= x.size()) throw ShapeError("gather index out of range");
    out[i] = x[index[i]];
  }
  TapeNode n = unary_node(OpKind::kGather, a);
  n.value = std::move(out);
  n.index = std::move(index);
  return a.tape().push(std::move(n));
}

Var softmax_rows(const Var& logits, std::vector<std::uint8_t> present) {
  const Matrix& z = logits.value();
  std::vector<std::uint8_t>& mask = present;
  if (mask.size() != z.size()) throw ShapeError("softmax mask length does not match logits");
  Matrix p(z.rows(), z.cols());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const auto zr = z.row_span(r);
    auto pr = p.row_span(r);
    const std::uint8_t* mr = mask.data() + r * z.cols();
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < zr.size(); ++c) {
      if (mr[c]) {
        mx = std::max(mx, zr[c]);
        any = true;
      }
    }
    if (!any) throw InvalidCandidateSetError("softmax row " + std::to_string(r) + " has every entry masked");
    double total = 0.0;
    for (std::size_t c = 0; c < zr.size(); ++c) {
      if (mr[c]) {
        pr[c] = std::exp(zr[c] - mx);
        total += pr[c];
      }
    }
    for (std::size_t c = 0; c < zr.size(); ++c) pr[c] /= total;
  }
  TapeNode n = unary_node(OpKind::kSoftmaxRows, logits);
  n.value = std::move(p);
  n.mask = std::move(mask);
  return logits.tape().push(std::move(n));
}

Var softmax_row(const Var& logits, std::span<const bool> mask) {
  if (logits.rows() != 1) throw ShapeError("softmax_row expects a single row, got " + logits.value().shape_string());
  std::vector<std::uint8_t> m(logits.cols(), 1);
  if (!mask.empty()) {
    if (mask.size() != m.size()) throw ShapeError("softmax mask length does not match logits");
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = mask[i] ? 0 : 1;
  }
  return softmax_rows(logits, std::move(m));
}

Var sum_rows(const Var& a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (double v : x.row_span(r)) s += v;
    out[r] = s;
  }
  TapeNode n = unary_node(OpKind::kSumRows, a);
  n.value = std::move(out);
  return a.tape().push(std::move(n));
}

Var sum_all(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  TapeNode n = unary_node(OpKind::kSumAll, a);
  n.value = Matrix::scalar(s);
  return a.tape().push(std::move(n));
}

Var mean_all(const Var& a) {
  const std::size_t count = a.value().size();
  if (count == 0) throw ShapeError("mean of empty matrix");
  return scale(sum_all(a), 1.0 / static_cast<double>(count));
}

}  // namespace ad
}  // namespace cbx
