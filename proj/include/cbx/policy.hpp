#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cbx/matrix.hpp"
#include "cbx/rng.hpp"
#include "cbx/tape.hpp"

namespace cbx {

inline constexpr std::size_t kMaxCandidates = 16;

// Weights of a per-candidate MLP scorer: dims = {input, hidden..., 1}.
// weights[l] is dims[l] x dims[l+1], biases[l] is 1 x dims[l+1]. Hidden
// layers use tanh, the output layer is linear.
struct PolicyParams {
  std::vector<std::size_t> dims;
  std::vector<Matrix> weights;
  std::vector<Matrix> biases;

  std::size_t input_dim() const { return dims.front(); }
  std::size_t num_layers() const { return weights.size(); }
  std::size_t num_parameters() const;

  // Flat views in the order W0, b0, W1, b1, ...; used by optimizers.
  std::vector<Matrix*> tensors();
  std::vector<const Matrix*> tensors() const;

  void validate() const;
  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;
};

// One decision point: a shared context plus one feature row per candidate.
struct CandidateSet {
  std::vector<double> context;
  Matrix candidates;  // N_c x d_c

  std::size_t size() const { return candidates.rows(); }
  void validate() const;
};

// Glorot-uniform weights, zero biases. Deterministic in seed.
PolicyParams init_policy(std::uint64_t seed, std::span<const std::size_t> dims);
inline PolicyParams init_policy(std::uint64_t seed, std::initializer_list<std::size_t> dims) {
  return init_policy(seed, std::span<const std::size_t>(dims.begin(), dims.size()));
}

// Default scorer layout: 16 context + 8 candidate features, hidden [32, 32].
std::vector<std::size_t> default_policy_dims(std::size_t context_dim = 16, std::size_t candidate_dim = 8);

// Action probabilities over the candidates of one decision point.
std::vector<double> propensities(const PolicyParams& params, const CandidateSet& cs);

// Draws an index from probs by inverse CDF on one uniform draw.
std::size_t sample_index(std::span<const double> probs, Rng& rng);
std::size_t sample_action(const PolicyParams& params, const CandidateSet& cs, Rng& rng);

// ---------------------------------------------------------------------------
// Batched evaluation on a tape.

// Stacked per-candidate inputs for a batch of decision points: row
// offsets[b] + j of `features` is concat(context_b, candidate_j of b).
struct BatchLayout {
  Matrix features;                   // total_candidates x input_dim
  std::vector<std::size_t> offsets;  // batch_size + 1 entries
  std::size_t width = 0;             // max candidate count in the batch

  std::size_t batch_size() const { return offsets.size() - 1; }
  std::size_t count(std::size_t b) const { return offsets[b + 1] - offsets[b]; }
};

BatchLayout make_layout(std::span<const CandidateSet* const> sets);

struct PolicyVars {
  std::vector<Var> weights;
  std::vector<Var> biases;
};

// Records params on the tape as differentiable variables (or constants).
PolicyVars bind_policy(Tape& tape, const PolicyParams& params, bool trainable = true);
// Gradient of every tensor, in PolicyParams::tensors() order.
std::vector<Matrix> policy_gradients(const Gradients& g, const PolicyVars& vars);

// total_candidates x 1 scores.
Var score_candidates(const PolicyVars& vars, const Var& features);
// batch_size x width propensities; padding slots hold exactly 0.
Var batch_propensities(const PolicyVars& vars, const BatchLayout& layout);

// Non-differentiable batch evaluation. Row b holds the first count(b)
// entries of sample b's propensity vector. Bit-identical to propensities().
Matrix evaluate_propensities(const PolicyParams& params, const BatchLayout& layout);

// ---------------------------------------------------------------------------
// Checkpoint files: JSON text with a dims header and row-major payloads.
// Doubles are written in shortest round-trip form, so load(save(p)) == p.

struct PolicyCheckpoint {
  PolicyParams params;
  std::string env_fingerprint;  // empty when unknown
};

std::string serialize_policy(const PolicyCheckpoint& ckpt);
PolicyCheckpoint parse_policy(const std::string& text);
void save_policy(const std::filesystem::path& path, const PolicyCheckpoint& ckpt);
PolicyCheckpoint load_policy(const std::filesystem::path& path);

}  // namespace cbx
