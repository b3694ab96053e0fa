#include "cbx/policy.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cbx/error.hpp"

namespace cbx {

std::size_t PolicyParams::num_parameters() const {
  std::size_t n = 0;
  for (const auto* t : tensors()) n += t->size();
  return n;
}

std::vector<Matrix*> PolicyParams::tensors() {
  std::vector<Matrix*> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(&weights[l]);
    out.push_back(&biases[l]);
  }
  return out;
}

std::vector<const Matrix*> PolicyParams::tensors() const {
  std::vector<const Matrix*> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(&weights[l]);
    out.push_back(&biases[l]);
  }
  return out;
}

namespace {

void check_dims(std::span<const std::size_t> dims) {
  if (dims.size() < 2) throw ConfigError("policy dims need at least an input and an output size");
  for (std::size_t d : dims) {
    if (d == 0) throw ConfigError("policy dims must be positive");
  }
  if (dims.back() != 1) throw ConfigError("policy output layer must produce one score per candidate");
}

}  // namespace

void PolicyParams::validate() const {
  check_dims(dims);
  if (weights.size() != dims.size() - 1 || biases.size() != weights.size()) {
    throw ShapeError("policy layer count does not match dims");
  }
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (weights[l].rows() != dims[l] || weights[l].cols() != dims[l + 1]) {
      throw ShapeError("layer " + std::to_string(l) + " weight is " + weights[l].shape_string());
    }
    if (biases[l].rows() != 1 || biases[l].cols() != dims[l + 1]) {
      throw ShapeError("layer " + std::to_string(l) + " bias is " + biases[l].shape_string());
    }
    if (!weights[l].all_finite() || !biases[l].all_finite()) {
      throw DomainError("layer " + std::to_string(l) + " has non-finite parameters");
    }
  }
}

void CandidateSet::validate() const {
  if (candidates.rows() < 1 || candidates.rows() > kMaxCandidates) {
    throw InvalidCandidateSetError("candidate count " + std::to_string(candidates.rows()) + " outside [1, " +
                                   std::to_string(kMaxCandidates) + "]");
  }
  for (double v : context) {
    if (!std::isfinite(v)) throw DomainError("non-finite context feature");
  }
  if (!candidates.all_finite()) throw DomainError("non-finite candidate feature");
}

PolicyParams init_policy(std::uint64_t seed, std::span<const std::size_t> dims) {
  if (dims.empty()) throw ConfigError("empty policy dims");
  check_dims(dims);
  PolicyParams p;
  p.dims.assign(dims.begin(), dims.end());
  Rng rng(seed);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const double limit = std::sqrt(6.0 / static_cast<double>(dims[l] + dims[l + 1]));
    Matrix w(dims[l], dims[l + 1]);
    for (double& v : w.values()) v = rng.uniform(-limit, limit);
    p.weights.push_back(std::move(w));
    p.biases.emplace_back(1, dims[l + 1]);
  }
  return p;
}

std::vector<std::size_t> default_policy_dims(std::size_t context_dim, std::size_t candidate_dim) {
  return {context_dim + candidate_dim, 32, 32, 1};
}

BatchLayout make_layout(std::span<const CandidateSet* const> sets) {
  BatchLayout layout;
  layout.offsets.reserve(sets.size() + 1);
  layout.offsets.push_back(0);
  std::size_t total = 0;
  std::size_t dim = 0;
  for (const CandidateSet* cs : sets) {
    if (cs->size() < 1 || cs->size() > kMaxCandidates) cs->validate();
    const std::size_t d = cs->context.size() + cs->candidates.cols();
    if (dim != 0 && d != dim) throw ShapeError("inconsistent feature dims within batch");
    dim = d;
    total += cs->size();
    layout.offsets.push_back(total);
    layout.width = std::max(layout.width, cs->size());
  }
  layout.features = Matrix(total, dim);
  std::size_t row = 0;
  for (const CandidateSet* cs : sets) {
    const std::size_t dx = cs->context.size();
    for (std::size_t j = 0; j < cs->size(); ++j, ++row) {
      auto out = layout.features.row_span(row);
      std::copy(cs->context.begin(), cs->context.end(), out.begin());
      const auto cand = cs->candidates.row_span(j);
      std::copy(cand.begin(), cand.end(), out.begin() + static_cast<std::ptrdiff_t>(dx));
    }
  }
  return layout;
}

PolicyVars bind_policy(Tape& tape, const PolicyParams& params, bool trainable) {
  PolicyVars v;
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    v.weights.push_back(trainable ? tape.variable(params.weights[l]) : tape.constant(params.weights[l]));
    v.biases.push_back(trainable ? tape.variable(params.biases[l]) : tape.constant(params.biases[l]));
  }
  return v;
}

std::vector<Matrix> policy_gradients(const Gradients& g, const PolicyVars& vars) {
  std::vector<Matrix> out;
  for (std::size_t l = 0; l < vars.weights.size(); ++l) {
    out.push_back(g.grad(vars.weights[l]));
    out.push_back(g.grad(vars.biases[l]));
  }
  return out;
}

Var score_candidates(const PolicyVars& vars, const Var& features) {
  if (features.cols() != vars.weights.front().rows()) {
    throw ShapeError("candidate features have " + std::to_string(features.cols()) + " columns, policy expects " +
                     std::to_string(vars.weights.front().rows()));
  }
  Var h = features;
  for (std::size_t l = 0; l < vars.weights.size(); ++l) {
    h = ad::add_row_bias(ad::matmul(h, vars.weights[l]), vars.biases[l]);
    if (l + 1 < vars.weights.size()) h = ad::tanh(h);
  }
  return h;
}

Var batch_propensities(const PolicyVars& vars, const BatchLayout& layout) {
  Tape& tape = vars.weights.front().tape();
  const Var scores = score_candidates(vars, tape.constant(layout.features));
  const std::size_t b = layout.batch_size();
  const std::size_t w = layout.width;
  std::vector<std::size_t> index(b * w, ad::kNoSource);
  std::vector<std::uint8_t> present(b * w, 0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < layout.count(i); ++j) {
      index[i * w + j] = layout.offsets[i] + j;
      present[i * w + j] = 1;
    }
  }
  return ad::softmax_rows(ad::gather(scores, b, w, std::move(index)), std::move(present));
}

Matrix evaluate_propensities(const PolicyParams& params, const BatchLayout& layout) {
  Tape tape;
  const PolicyVars vars = bind_policy(tape, params, /*trainable=*/false);
  return batch_propensities(vars, layout).value();
}

std::vector<double> propensities(const PolicyParams& params, const CandidateSet& cs) {
  cs.validate();
  const CandidateSet* one[] = {&cs};
  const Matrix p = evaluate_propensities(params, make_layout(one));
  return {p.values().begin(), p.values().end()};
}

std::size_t sample_index(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0) last_positive = i;
    acc += probs[i];
    if (u < acc) return i;
  }
  // rounding left u above the cumulative sum
  return last_positive;
}

std::size_t sample_action(const PolicyParams& params, const CandidateSet& cs, Rng& rng) {
  const auto p = propensities(params, cs);
  return sample_index(p, rng);
}

// ---------------------------------------------------------------------------

using nlohmann::json;

std::string serialize_policy(const PolicyCheckpoint& ckpt) {
  ckpt.params.validate();
  json j;
  j["format"] = "cbx-policy";
  j["version"] = 1;
  j["dims"] = ckpt.params.dims;
  j["activation"] = "tanh";
  j["env_fingerprint"] = ckpt.env_fingerprint;
  json layers = json::array();
  for (std::size_t l = 0; l < ckpt.params.num_layers(); ++l) {
    const auto w = ckpt.params.weights[l].values();
    const auto b = ckpt.params.biases[l].values();
    layers.push_back({{"weight", std::vector<double>(w.begin(), w.end())},
                      {"bias", std::vector<double>(b.begin(), b.end())}});
  }
  j["layers"] = std::move(layers);
  return j.dump() + "\n";
}

PolicyCheckpoint parse_policy(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("policy checkpoint: ") + e.what(), 0);
  }
  try {
    if (j.at("format") != "cbx-policy") throw ParseError("not a policy checkpoint", 0);
    if (j.at("version") != 1) throw ParseError("unsupported policy checkpoint version", 0);
    if (j.value("activation", "tanh") != "tanh") throw ParseError("unsupported activation", 0);
    PolicyCheckpoint ckpt;
    ckpt.params.dims = j.at("dims").get<std::vector<std::size_t>>();
    check_dims(ckpt.params.dims);
    const auto& layers = j.at("layers");
    if (layers.size() != ckpt.params.dims.size() - 1) throw ParseError("layer count does not match dims", 0);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& d = ckpt.params.dims;
      ckpt.params.weights.emplace_back(d[l], d[l + 1], layers[l].at("weight").get<std::vector<double>>());
      ckpt.params.biases.emplace_back(1, d[l + 1], layers[l].at("bias").get<std::vector<double>>());
    }
    ckpt.env_fingerprint = j.value("env_fingerprint", "");
    ckpt.params.validate();
    return ckpt;
  } catch (const json::exception& e) {
    throw ParseError(std::string("policy checkpoint: ") + e.what(), 0);
  }
}

void save_policy(const std::filesystem::path& path, const PolicyCheckpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << serialize_policy(ckpt);
  if (!out) throw IoError("write failed: " + path.string());
}

PolicyCheckpoint load_policy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_policy(ss.str());
}

}  // namespace cbx
