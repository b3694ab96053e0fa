#include "cbx/eval.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "cbx/error.hpp"

namespace cbx {

namespace {
constexpr std::size_t kEvalChunk = 1024;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}  // namespace

void for_each_propensity(std::span<const LoggedSample> data, const PolicyParams& params,
                         const std::function<void(std::size_t, std::span<const double>)>& fn) {
  std::vector<const CandidateSet*> sets;
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    const std::size_t end = std::min(data.size(), start + kEvalChunk);
    sets.clear();
    for (std::size_t i = start; i < end; ++i) sets.push_back(&data[i].cs);
    const BatchLayout layout = make_layout(sets);
    const Matrix p = evaluate_propensities(params, layout);
    for (std::size_t b = 0; b < layout.batch_size(); ++b) {
      fn(start + b, p.row_span(b).first(layout.count(b)));
    }
  }
}

namespace {

struct Accumulator {
  std::vector<std::size_t> counts;
  std::vector<std::size_t> violations;
  double reward_sum = 0.0;
  double reward_sq = 0.0;
  double replication_sum = 0.0;
};

Accumulator accumulate(std::span<const LoggedSample> data, const PolicyParams& params, std::size_t num_domains) {
  if (data.empty()) throw ContractError("evaluation over an empty dataset");
  Accumulator acc;
  acc.counts.assign(num_domains, 0);
  acc.violations.assign(num_domains, 0);
  for_each_propensity(data, params, [&](std::size_t i, std::span<const double> p) {
    const LoggedSample& s = data[i];
    if (s.domain >= num_domains) throw DomainError("sample domain out of range");
    const double rep = replication(p, s.p0);
    const double value = s.reward * (p[s.action] / s.p0[s.action]);
    acc.reward_sum += value;
    acc.reward_sq += value * value;
    acc.replication_sum += rep;
    ++acc.counts[s.domain];
    if (violates(rep, s.bounds)) ++acc.violations[s.domain];
  });
  return acc;
}

ViolationRates rates_from(const Accumulator& acc) {
  ViolationRates out;
  out.domain_counts = acc.counts;
  out.per_domain.assign(acc.counts.size(), kNaN);
  std::size_t total = 0, violating = 0, present = 0;
  double macro_sum = 0.0;
  for (std::size_t k = 0; k < acc.counts.size(); ++k) {
    if (acc.counts[k] == 0) continue;
    out.per_domain[k] = static_cast<double>(acc.violations[k]) / static_cast<double>(acc.counts[k]);
    macro_sum += out.per_domain[k];
    ++present;
    total += acc.counts[k];
    violating += acc.violations[k];
  }
  out.micro = static_cast<double>(violating) / static_cast<double>(total);
  out.macro = macro_sum / static_cast<double>(present);
  return out;
}

RewardEstimate reward_from(const Accumulator& acc, std::size_t n) {
  RewardEstimate r;
  const double dn = static_cast<double>(n);
  r.mean = acc.reward_sum / dn;
  if (n > 1) {
    const double var = std::max(0.0, (acc.reward_sq - dn * r.mean * r.mean) / (dn - 1.0));
    r.std_error = std::sqrt(var / dn);
  }
  return r;
}

}  // namespace

ViolationRates violation_rates(std::span<const LoggedSample> data, const PolicyParams& params,
                               std::size_t num_domains) {
  return rates_from(accumulate(data, params, num_domains));
}

RewardEstimate expected_reward(std::span<const LoggedSample> data, const PolicyParams& params) {
  std::size_t domains = 0;
  for (const auto& s : data) domains = std::max(domains, s.domain + 1);
  return reward_from(accumulate(data, params, domains), data.size());
}

double replication_rate(std::span<const LoggedSample> data, const PolicyParams& params) {
  std::size_t domains = 0;
  for (const auto& s : data) domains = std::max(domains, s.domain + 1);
  return accumulate(data, params, domains).replication_sum / static_cast<double>(data.size());
}

EvalResult evaluate(std::span<const LoggedSample> data, const PolicyParams& params, std::size_t num_domains) {
  const Accumulator acc = accumulate(data, params, num_domains);
  EvalResult r;
  r.reward = reward_from(acc, data.size());
  r.violations = rates_from(acc);
  r.replication = acc.replication_sum / static_cast<double>(data.size());
  r.samples = data.size();
  return r;
}

// ---------------------------------------------------------------------------

MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  if (values.empty()) return out;
  double s = 0.0;
  for (double v : values) s += v;
  out.mean = s / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

std::optional<double> violation_reduction(double rate, double baseline_rate) {
  if (baseline_rate == 0.0) return std::nullopt;
  return 100.0 * (1.0 - rate / baseline_rate);
}

const MethodSummary& ComparisonReport::at(const std::string& method) const {
  for (const auto& m : methods) {
    if (m.method == method) return m;
  }
  throw ReportError("method '" + method + "' not in report");
}

ComparisonReport compare(const std::map<std::string, std::vector<EvalResult>>& results, const std::string& baseline,
                         std::span<const std::string> order) {
  const auto base_it = results.find(baseline);
  if (base_it == results.end() || base_it->second.empty()) {
    throw ReportError("baseline '" + baseline + "' has no results");
  }
  std::vector<double> tmp;
  const auto collect = [&](const std::vector<EvalResult>& rs, auto&& f) {
    tmp.clear();
    for (const auto& r : rs) tmp.push_back(f(r));
    return mean_std(tmp);
  };
  const MeanStd base_micro = collect(base_it->second, [](const EvalResult& r) { return r.violations.micro; });
  const MeanStd base_macro = collect(base_it->second, [](const EvalResult& r) { return r.violations.macro; });
  const MeanStd base_reward = collect(base_it->second, [](const EvalResult& r) { return r.reward.mean; });

  std::vector<std::string> names(order.begin(), order.end());
  if (names.empty()) {
    for (const auto& [name, _] : results) names.push_back(name);
  }

  ComparisonReport report;
  report.baseline = baseline;
  for (const auto& name : names) {
    const auto it = results.find(name);
    if (it == results.end()) throw ReportError("method '" + name + "' has no results");
    const auto& rs = it->second;
    MethodSummary m;
    m.method = name;
    m.runs = rs.size();
    m.reward = collect(rs, [](const EvalResult& r) { return r.reward.mean; });
    m.micro = collect(rs, [](const EvalResult& r) { return r.violations.micro; });
    m.macro = collect(rs, [](const EvalResult& r) { return r.violations.macro; });
    m.replication = collect(rs, [](const EvalResult& r) { return r.replication; });
    if (base_micro.mean != 0.0) {
      m.micro_reduction = collect(rs, [&](const EvalResult& r) { return *violation_reduction(r.violations.micro, base_micro.mean); });
    }
    if (base_macro.mean != 0.0) {
      m.macro_reduction = collect(rs, [&](const EvalResult& r) { return *violation_reduction(r.violations.macro, base_macro.mean); });
    }
    if (base_reward.mean != 0.0) {
      m.reward_change = collect(rs, [&](const EvalResult& r) { return 100.0 * (r.reward.mean / base_reward.mean - 1.0); });
    }
    report.methods.push_back(std::move(m));
  }
  return report;
}

namespace {

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

void put_pair(std::ostringstream& os, const std::optional<MeanStd>& ms) {
  if (ms) {
    os << ',' << num(ms->mean) << ',' << num(ms->std);
  } else {
    os << ",n/a,n/a";
  }
}

}  // namespace

std::string comparison_csv(const ComparisonReport& report) {
  std::ostringstream os;
  os << "method,runs,reward_mean,reward_std,reward_change_mean,reward_change_std,micro_mean,micro_std,macro_mean,"
        "macro_std,micro_reduction_mean,micro_reduction_std,macro_reduction_mean,macro_reduction_std,"
        "replication_mean,replication_std\n";
  for (const auto& m : report.methods) {
    os << m.method << ',' << m.runs;
    put_pair(os, m.reward);
    put_pair(os, m.reward_change);
    put_pair(os, m.micro);
    put_pair(os, m.macro);
    put_pair(os, m.micro_reduction);
    put_pair(os, m.macro_reduction);
    put_pair(os, m.replication);
    os << '\n';
  }
  return os.str();
}

std::string comparison_table(const ComparisonReport& report) {
  std::ostringstream os;
  const auto cell = [](const std::optional<MeanStd>& ms, int precision) {
    if (!ms) return std::string("n/a");
    std::ostringstream c;
    c << std::fixed << std::setprecision(precision) << ms->mean << " +- " << ms->std;
    return c.str();
  };
  os << std::left << std::setw(12) << "method" << std::setw(24) << "reward" << std::setw(20) << "reward chg %"
     << std::setw(20) << "micro red. %" << std::setw(20) << "macro red. %" << "replication\n";
  for (const auto& m : report.methods) {
    os << std::left << std::setw(12) << m.method << std::setw(24) << cell(m.reward, 5) << std::setw(20)
       << cell(m.reward_change, 2) << std::setw(20) << cell(m.micro_reduction, 1) << std::setw(20)
       << cell(m.macro_reduction, 1) << cell(m.replication, 4) << '\n';
  }
  os << "(reductions relative to " << report.baseline << ")\n";
  return os.str();
}

std::string eval_result_json(const EvalResult& r, std::span<const std::string> domain_names) {
  nlohmann::ordered_json j;
  j["samples"] = r.samples;
  j["expected_reward"] = r.reward.mean;
  j["reward_std_error"] = r.reward.std_error;
  j["micro_violation"] = r.violations.micro;
  j["macro_violation"] = r.violations.macro;
  j["replication_rate"] = r.replication;
  auto domains = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < r.violations.domain_counts.size(); ++k) {
    nlohmann::ordered_json d;
    d["domain"] = k < domain_names.size() ? domain_names[k] : std::to_string(k);
    d["count"] = r.violations.domain_counts[k];
    if (r.violations.domain_counts[k] > 0) {
      d["violation_rate"] = r.violations.per_domain[k];
    } else {
      d["violation_rate"] = nullptr;
    }
    domains.push_back(std::move(d));
  }
  j["domains"] = std::move(domains);
  return j.dump(2) + "\n";
}

EvalResult parse_eval_result_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    EvalResult r;
    r.samples = j.at("samples").get<std::size_t>();
    r.reward.mean = j.at("expected_reward").get<double>();
    r.reward.std_error = j.at("reward_std_error").get<double>();
    r.violations.micro = j.at("micro_violation").get<double>();
    r.violations.macro = j.at("macro_violation").get<double>();
    r.replication = j.at("replication_rate").get<double>();
    for (const auto& d : j.at("domains")) {
      r.violations.domain_counts.push_back(d.at("count").get<std::size_t>());
      const auto& rate = d.at("violation_rate");
      r.violations.per_domain.push_back(rate.is_null() ? std::nan("") : rate.get<double>());
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("eval result: ") + e.what(), 0);
  }
}

}  // namespace cbx
