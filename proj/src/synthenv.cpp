#include "cbx/synthenv.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "cbx/error.hpp"

namespace cbx {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Random streams derived from the env seed.
enum Stream : std::uint64_t {
  kStreamLogging = 11,
  kStreamReward = 12,
  kStreamOffsets = 13,
  kStreamData = 21,
  kStreamMonteCarlo = 22,
};

constexpr std::size_t kChunk = 1024;

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a(std::uint64_t h, const Matrix& m) {
  return fnv1a(h, m.values().data(), m.size() * sizeof(double));
}

Matrix candidate_scores(const PolicyParams& params, const BatchLayout& layout) {
  Tape tape;
  const PolicyVars vars = bind_policy(tape, params, false);
  return score_candidates(vars, tape.constant(layout.features)).value();
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Success probability of every stacked candidate row of a layout.
std::vector<double> layout_success(const Environment& env, const BatchLayout& layout) {
  const Matrix logits = candidate_scores(env.logging, layout);
  const Matrix hidden = candidate_scores(env.reward_model, layout);
  std::vector<double> q(logits.size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    q[i] = sigmoid(env.spec.reward_alignment * logits[i] + env.spec.reward_hidden_scale * hidden[i] +
                   env.spec.reward_bias);
  }
  return q;
}

}  // namespace

void EnvSpec::validate() const {
  if (num_domains < 1) throw ConfigError("env needs at least one domain");
  if (context_dim < 1 || candidate_dim < 1) throw ConfigError("feature dims must be at least 1");
  if (min_candidates < 1 || min_candidates > max_candidates || max_candidates > kMaxCandidates) {
    throw ConfigError("candidate count range must satisfy 1 <= min <= max <= " + std::to_string(kMaxCandidates));
  }
  if (!(temperature > 0.0)) throw ConfigError("logging temperature must be positive");
  if (!(zipf_exponent >= 0.0)) throw ConfigError("zipf exponent must be non-negative");
  if (reward_hidden_units < 1) throw ConfigError("reward model needs at least one hidden unit");
  for (double v : {domain_shift, reward_alignment, reward_hidden_scale, reward_bias}) {
    if (!std::isfinite(v)) throw ConfigError("env parameters must be finite");
  }
}

std::string env_spec_json(const EnvSpec& s) {
  ordered_json j;
  j["seed"] = s.seed;
  j["num_domains"] = s.num_domains;
  j["zipf_exponent"] = s.zipf_exponent;
  j["context_dim"] = s.context_dim;
  j["candidate_dim"] = s.candidate_dim;
  j["min_candidates"] = s.min_candidates;
  j["max_candidates"] = s.max_candidates;
  j["temperature"] = s.temperature;
  j["domain_shift"] = s.domain_shift;
  j["reward_alignment"] = s.reward_alignment;
  j["reward_hidden_scale"] = s.reward_hidden_scale;
  j["reward_bias"] = s.reward_bias;
  j["reward_hidden_units"] = s.reward_hidden_units;
  return j.dump();
}

EnvSpec parse_env_spec(const std::string& text) {
  try {
    const json j = json::parse(text);
    EnvSpec s;
    s.seed = j.value("seed", s.seed);
    s.num_domains = j.value("num_domains", s.num_domains);
    s.zipf_exponent = j.value("zipf_exponent", s.zipf_exponent);
    s.context_dim = j.value("context_dim", s.context_dim);
    s.candidate_dim = j.value("candidate_dim", s.candidate_dim);
    s.min_candidates = j.value("min_candidates", s.min_candidates);
    s.max_candidates = j.value("max_candidates", s.max_candidates);
    s.temperature = j.value("temperature", s.temperature);
    s.domain_shift = j.value("domain_shift", s.domain_shift);
    s.reward_alignment = j.value("reward_alignment", s.reward_alignment);
    s.reward_hidden_scale = j.value("reward_hidden_scale", s.reward_hidden_scale);
    s.reward_bias = j.value("reward_bias", s.reward_bias);
    s.reward_hidden_units = j.value("reward_hidden_units", s.reward_hidden_units);
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw ParseError(std::string("env spec: ") + e.what(), 0);
  }
}

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain:
      return "train";
    case Split::kValidation:
      return "validation";
    case Split::kTest:
      return "test";
  }
  return "train";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "validation") return Split::kValidation;
  if (s == "test") return Split::kTest;
  throw ParseError("unknown split '" + s + "'", 0);
}

std::vector<std::string> default_domain_names(std::size_t num_domains) {
  static const char* const kNames[] = {"general",       "music",   "knowledge",       "shopping",
                                       "weather",       "video",   "home_automation", "notifications"};
  std::vector<std::string> out;
  for (std::size_t k = 0; k < num_domains; ++k) {
    out.push_back(k < std::size(kNames) ? kNames[k] : "domain_" + std::to_string(k));
  }
  return out;
}

Environment gen_env(const EnvSpec& spec) {
  spec.validate();
  Environment env;
  env.spec = spec;

  double total = 0.0;
  for (std::size_t k = 0; k < spec.num_domains; ++k) {
    env.prior.push_back(std::pow(static_cast<double>(k + 1), -spec.zipf_exponent));
    total += env.prior.back();
  }
  for (double& p : env.prior) p /= total;
  env.domain_names = default_domain_names(spec.num_domains);

  env.domain_offsets = Matrix(spec.num_domains, spec.context_dim);
  Rng offsets = Rng::keyed(spec.seed, kStreamOffsets);
  for (double& v : env.domain_offsets.values()) v = spec.domain_shift * offsets.normal();

  const auto dims = default_policy_dims(spec.context_dim, spec.candidate_dim);
  env.logging = init_policy(Rng::keyed(spec.seed, kStreamLogging).next_u64(), dims);
  for (double& w : env.logging.weights.back().values()) w /= spec.temperature;

  const std::size_t reward_dims[] = {spec.context_dim + spec.candidate_dim, spec.reward_hidden_units, 1};
  env.reward_model = init_policy(Rng::keyed(spec.seed, kStreamReward).next_u64(), reward_dims);

  const std::string spec_text = env_spec_json(spec);
  std::uint64_t h = fnv1a(0xcbf29ce484222325ULL, spec_text.data(), spec_text.size());
  h = fnv1a(h, env.domain_offsets);
  for (const auto* t : env.logging.tensors()) h = fnv1a(h, *t);
  for (const auto* t : env.reward_model.tensors()) h = fnv1a(h, *t);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  env.fingerprint = buf;
  return env;
}

std::size_t Environment::draw_domain(Rng& rng) const {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t k = 0; k < prior.size(); ++k) {
    acc += prior[k];
    if (u < acc) return k;
  }
  return prior.size() - 1;
}

CandidateSet Environment::draw_context(std::size_t domain, Rng& rng) const {
  CandidateSet cs;
  cs.context.resize(spec.context_dim);
  const auto offset = domain_offsets.row_span(domain);
  for (std::size_t i = 0; i < spec.context_dim; ++i) cs.context[i] = rng.normal() + offset[i];
  const std::size_t n = spec.min_candidates + rng.below(spec.max_candidates - spec.min_candidates + 1);
  cs.candidates = Matrix(n, spec.candidate_dim);
  for (double& v : cs.candidates.values()) v = rng.normal();
  return cs;
}

std::vector<double> Environment::success_probabilities(const CandidateSet& cs) const {
  const CandidateSet* one[] = {&cs};
  return layout_success(*this, make_layout(one));
}

LoggedSample gen_sample(const Environment& env, std::size_t index) {
  Rng rng = Rng::keyed(env.spec.seed, kStreamData, index);
  LoggedSample s;
  s.domain = env.draw_domain(rng);
  s.cs = env.draw_context(s.domain, rng);
  s.p0 = propensities(env.logging, s.cs);
  for (double p : s.p0) {
    if (p < kPropensityFloor) {
      throw ConfigError("logging propensity " + std::to_string(p) + " below floor for sample " + std::to_string(index) +
                        "; raise the logging temperature");
    }
  }
  s.action = sample_index(s.p0, rng);
  const double q = env.success_probabilities(s.cs)[s.action];
  s.reward = rng.uniform() < q ? 1.0 : 0.0;
  return s;
}

DatasetSplits gen_dataset(const Environment& env, std::size_t n, SplitFractions f) {
  for (double x : {f.train, f.validation, f.test}) {
    if (!(x >= 0.0)) throw ConfigError("split fractions must be non-negative");
  }
  if (std::fabs(f.train + f.validation + f.test - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  const auto count = [&](double frac) { return static_cast<std::size_t>(std::floor(frac * static_cast<double>(n) + 0.5)); };
  const std::size_t n_train = std::min(n, count(f.train));
  const std::size_t n_val = std::min(n - n_train, count(f.validation));

  DatasetSplits out;
  for (Dataset* d : {&out.train, &out.validation, &out.test}) {
    d->fingerprint = env.fingerprint;
    d->domain_names = env.domain_names;
  }
  out.train.split = Split::kTrain;
  out.validation.split = Split::kValidation;
  out.test.split = Split::kTest;
  out.train.samples.reserve(n_train);
  out.validation.samples.reserve(n_val);
  out.test.samples.reserve(n - n_train - n_val);
  for (std::size_t i = 0; i < n; ++i) {
    Dataset& d = i < n_train ? out.train : (i < n_train + n_val ? out.validation : out.test);
    d.samples.push_back(gen_sample(env, i));
  }
  return out;
}

namespace {

template <class F>
void for_each_mc_chunk(const Environment& env, std::size_t n_mc, F&& f) {
  if (n_mc < 1) throw ConfigError("Monte Carlo sample count must be at least 1");
  std::vector<CandidateSet> sets;
  std::vector<std::size_t> domains;
  std::vector<const CandidateSet*> ptrs;
  for (std::size_t start = 0; start < n_mc; start += kChunk) {
    const std::size_t end = std::min(n_mc, start + kChunk);
    sets.clear();
    domains.clear();
    ptrs.clear();
    for (std::size_t i = start; i < end; ++i) {
      Rng rng = Rng::keyed(env.spec.seed, kStreamMonteCarlo, i);
      domains.push_back(env.draw_domain(rng));
      sets.push_back(env.draw_context(domains.back(), rng));
    }
    for (const auto& s : sets) ptrs.push_back(&s);
    f(make_layout(ptrs), domains);
  }
}

}  // namespace

PolicyValue true_policy_value(const Environment& env, const PolicyParams& params, std::size_t n_mc) {
  double sum = 0.0, sq = 0.0;
  for_each_mc_chunk(env, n_mc, [&](const BatchLayout& layout, const std::vector<std::size_t>&) {
    const Matrix pi = evaluate_propensities(params, layout);
    const std::vector<double> q = layout_success(env, layout);
    for (std::size_t b = 0; b < layout.batch_size(); ++b) {
      double v = 0.0;
      for (std::size_t j = 0; j < layout.count(b); ++j) v += pi(b, j) * q[layout.offsets[b] + j];
      sum += v;
      sq += v * v;
    }
  });
  const double n = static_cast<double>(n_mc);
  PolicyValue out;
  out.mean = sum / n;
  if (n_mc > 1) out.std_error = std::sqrt(std::max(0.0, (sq - n * out.mean * out.mean) / (n - 1.0)) / n);
  return out;
}

ReplicationProfile true_replication_profile(const Environment& env, const PolicyParams& params, std::size_t n_mc) {
  const std::size_t m = env.spec.num_domains;
  std::vector<double> sum(m, 0.0), sq(m, 0.0);
  std::vector<std::size_t> counts(m, 0);
  for_each_mc_chunk(env, n_mc, [&](const BatchLayout& layout, const std::vector<std::size_t>& domains) {
    const Matrix pi = evaluate_propensities(params, layout);
    const Matrix p0 = evaluate_propensities(env.logging, layout);
    for (std::size_t b = 0; b < layout.batch_size(); ++b) {
      const std::size_t n = layout.count(b);
      const double r = replication(pi.row_span(b).first(n), p0.row_span(b).first(n));
      sum[domains[b]] += r;
      sq[domains[b]] += r * r;
      ++counts[domains[b]];
    }
  });
  ReplicationProfile out;
  out.counts = counts;
  for (std::size_t k = 0; k < m; ++k) {
    const double n = static_cast<double>(counts[k]);
    if (counts[k] == 0) {
      out.mean.push_back(std::numeric_limits<double>::quiet_NaN());
      out.std_error.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double mean = sum[k] / n;
    out.mean.push_back(mean);
    out.std_error.push_back(counts[k] > 1 ? std::sqrt(std::max(0.0, (sq[k] - n * mean * mean) / (n - 1.0)) / n) : 0.0);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string serialize_dataset(const Dataset& d) {
  std::string out;
  ordered_json header;
  header["format"] = "cbx-dataset";
  header["version"] = 1;
  header["split"] = to_string(d.split);
  header["fingerprint"] = d.fingerprint;
  header["domains"] = d.domain_names;
  header["count"] = d.samples.size();
  out += header.dump();
  out += '\n';
  for (const auto& s : d.samples) {
    ordered_json j;
    j["context"] = s.cs.context;
    auto cands = json::array();
    for (std::size_t r = 0; r < s.cs.candidates.rows(); ++r) {
      const auto row = s.cs.candidates.row_span(r);
      cands.push_back(std::vector<double>(row.begin(), row.end()));
    }
    j["candidates"] = std::move(cands);
    j["p0"] = s.p0;
    j["action"] = s.action;
    j["reward"] = s.reward;
    j["domain"] = d.domain_names.at(s.domain);
    out += j.dump();
    out += '\n';
  }
  return out;
}

Dataset parse_dataset(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  Dataset d;
  std::size_t expected = 0;
  if (!std::getline(in, line)) throw ParseError("empty dataset file", 1);
  ++line_no;
  try {
    const json h = json::parse(line);
    if (h.at("format") != "cbx-dataset") throw ParseError("not a dataset file", 1);
    if (h.at("version") != 1) throw ParseError("unsupported dataset version", 1);
    d.split = parse_split(h.at("split").get<std::string>());
    d.fingerprint = h.at("fingerprint").get<std::string>();
    d.domain_names = h.at("domains").get<std::vector<std::string>>();
    expected = h.at("count").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("dataset header: ") + e.what(), 1);
  }
  d.samples.reserve(expected);
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    LoggedSample s;
    try {
      const json j = json::parse(line);
      s.cs.context = j.at("context").get<std::vector<double>>();
      const auto& cands = j.at("candidates");
      if (cands.empty()) throw ParseError("sample has no candidates", line_no);
      const std::size_t dc = cands.front().size();
      std::vector<double> flat;
      flat.reserve(cands.size() * dc);
      for (const auto& c : cands) {
        if (c.size() != dc) throw ParseError("ragged candidate features", line_no);
        for (const auto& v : c) flat.push_back(v.get<double>());
      }
      s.cs.candidates = Matrix(cands.size(), dc, std::move(flat));
      s.p0 = j.at("p0").get<std::vector<double>>();
      s.action = j.at("action").get<std::size_t>();
      s.reward = j.at("reward").get<double>();
      const std::string domain = j.at("domain").get<std::string>();
      const auto it = std::find(d.domain_names.begin(), d.domain_names.end(), domain);
      if (it == d.domain_names.end()) throw ParseError("unknown domain '" + domain + "'", line_no);
      s.domain = static_cast<std::size_t>(it - d.domain_names.begin());
    } catch (const json::exception& e) {
      throw ParseError(e.what(), line_no);
    }
    try {
      validate_sample(s, d.domain_names.size());
    } catch (const PropensityFloorError& e) {
      throw PropensityFloorError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const ParseError&) {
      throw;
    } catch (const Error& e) {
      throw ParseError(e.what(), line_no);
    }
    d.samples.push_back(std::move(s));
  }
  if (d.samples.size() != expected) {
    throw ParseError("header announces " + std::to_string(expected) + " samples, found " +
                         std::to_string(d.samples.size()),
                     line_no);
  }
  return d;
}

void save_dataset(const std::filesystem::path& path, const Dataset& d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << serialize_dataset(d);
  if (!out) throw IoError("write failed: " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_dataset(ss.str());
}

}  // namespace cbx
