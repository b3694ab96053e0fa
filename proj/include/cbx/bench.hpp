#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cbx/objectives.hpp"

namespace cbx {

// One row of a constraint benchmark. An empty optional domain is the
// DEFAULT scope that applies to every domain without its own row.
struct ConstraintSpec {
  std::string description;
  std::optional<std::string> domain;
  double c_min = 0.0;
  double c_max = 1.0;

  bool is_default() const { return !domain.has_value(); }
  friend bool operator==(const ConstraintSpec&, const ConstraintSpec&) = default;
};

struct ConstraintBenchmark {
  std::string name;
  std::vector<ConstraintSpec> specs;

  void validate() const;
  friend bool operator==(const ConstraintBenchmark&, const ConstraintBenchmark&) = default;
};

// Domain identifiers are compared in lower case.
std::string normalize_domain(std::string_view name);

// Config grammar (line oriented, '#' starts a comment):
//
//   benchmark = critical
//
//   [constraint]
//   description = Tighter replication for shopping
//   domain = shopping            # or DEFAULT
//   min_replication = 0.995
//   max_replication = 1.0
//
// Throws ParseError (with line number) on malformed input and
// ValidationError when a well-formed benchmark breaks an invariant.
ConstraintBenchmark parse_benchmark(std::string_view source);
std::string serialize_benchmark(const ConstraintBenchmark& bench);
ConstraintBenchmark load_benchmark(const std::filesystem::path& path);

// Exact domain row, else the DEFAULT row, else unconstrained [0, 1].
Bounds resolve(const ConstraintBenchmark& bench, std::string_view domain);

// global, critical and explore.
std::vector<ConstraintBenchmark> builtin_benchmarks();
// A builtin by name, or a benchmark file path when no builtin matches.
ConstraintBenchmark find_benchmark(std::string_view name_or_path);

// Caches the resolved bounds on every sample.
void apply_benchmark(const ConstraintBenchmark& bench, std::span<LoggedSample> samples,
                     std::span<const std::string> domain_names);

}  // namespace cbx
