#include "cbx/bench.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "cbx/error.hpp"

namespace cbx {

namespace {

// Bounds for critical/explore are reconstructions: only the 0.99 global
// figure is published. Keep these strings in sync with benchmarks/.
constexpr std::string_view kGlobal = R"(# Minimum replication for every domain.
benchmark = global

[constraint]
description = General minimum replication rate for all domains
domain = DEFAULT
min_replication = 0.99
max_replication = 1
)";

constexpr std::string_view kCritical = R"(# Reconstructed bounds: tighter floor for three business-critical domains,
# relaxed default for the rest.
benchmark = critical

[constraint]
description = Default replication range for all other domains
domain = DEFAULT
min_replication = 0.99
max_replication = 1

[constraint]
description = Business-critical domain: home automation
domain = home_automation
min_replication = 0.995
max_replication = 1

[constraint]
description = Business-critical domain: shopping
domain = shopping
min_replication = 0.995
max_replication = 1

[constraint]
description = Business-critical domain: notifications
domain = notifications
min_replication = 0.995
max_replication = 1
)";

constexpr std::string_view kExploreExtra = R"(
# Exploration encouragement: an upper bound below 1 pushes the policy away
# from pure replication. Reconstructed values.
[constraint]
description = Encourage exploration: knowledge
domain = knowledge
min_replication = 0.9
max_replication = 0.95

[constraint]
description = Encourage exploration: music
domain = music
min_replication = 0.9
max_replication = 0.95
)";

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

double parse_real(std::string_view text, std::size_t line) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ParseError("expected a number, got '" + std::string(text) + "'", line);
  }
  return v;
}

std::string format_real(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string spec_label(const ConstraintSpec& s) {
  return s.is_default() ? std::string("DEFAULT") : *s.domain;
}

}  // namespace

std::string normalize_domain(std::string_view name) {
  std::string out(trim(name));
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

void ConstraintBenchmark::validate() const {
  std::set<std::string> seen;
  bool has_default = false;
  if (name.find_first_of("#\n") != std::string::npos) {
    throw ValidationError("benchmark name may not contain '#' or line breaks");
  }
  for (const auto& s : specs) {
    if (s.description.find_first_of("#\n") != std::string::npos) {
      throw ValidationError("benchmark '" + name + "': description may not contain '#' or line breaks");
    }
    if (!(0.0 <= s.c_min && s.c_min <= s.c_max && s.c_max <= 1.0)) {
      throw ValidationError("benchmark '" + name + "': spec for " + spec_label(s) + " has invalid range [" +
                            format_real(s.c_min) + ", " + format_real(s.c_max) + "]");
    }
    if (s.is_default()) {
      if (has_default) throw ValidationError("benchmark '" + name + "': more than one DEFAULT spec");
      has_default = true;
    } else {
      if (s.domain->empty()) throw ValidationError("benchmark '" + name + "': empty domain name");
      if (!seen.insert(*s.domain).second) {
        throw ValidationError("benchmark '" + name + "': duplicate spec for domain " + *s.domain);
      }
    }
  }
}

ConstraintBenchmark parse_benchmark(std::string_view source) {
  ConstraintBenchmark bench;
  struct Pending {
    ConstraintSpec spec;
    std::size_t line = 0;
    bool has_domain = false, has_min = false, has_max = false;
  };
  std::optional<Pending> current;

  const auto finish = [&] {
    if (!current) return;
    if (!current->has_domain) throw ParseError("constraint is missing 'domain'", current->line);
    if (!current->has_min) throw ParseError("constraint is missing 'min_replication'", current->line);
    if (!current->has_max) throw ParseError("constraint is missing 'max_replication'", current->line);
    bench.specs.push_back(std::move(current->spec));
    current.reset();
  };

  std::istringstream in{std::string(source)};
  std::string raw_line;
  std::size_t line_no = 0;
  while (std::getline(in, raw_line)) {
    ++line_no;
    std::string_view raw = raw_line;
    if (const auto hash = raw.find('#'); hash != std::string_view::npos) raw = raw.substr(0, hash);
    const std::string_view line = trim(raw);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line != "[constraint]") throw ParseError("unknown section " + std::string(line), line_no);
      finish();
      current.emplace();
      current->line = line_no;
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError("expected 'key = value'", line_no);
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    if (!current) {
      if (key != "benchmark") throw ParseError("unexpected key '" + std::string(key) + "' outside a [constraint]", line_no);
      bench.name = std::string(value);
      continue;
    }
    if (key == "description") {
      current->spec.description = std::string(value);
    } else if (key == "domain") {
      if (value.empty()) throw ParseError("empty domain", line_no);
      const std::string d = normalize_domain(value);
      if (d == "default") {
        current->spec.domain.reset();
      } else {
        current->spec.domain = d;
      }
      current->has_domain = true;
    } else if (key == "min_replication") {
      current->spec.c_min = parse_real(value, line_no);
      current->has_min = true;
    } else if (key == "max_replication") {
      current->spec.c_max = parse_real(value, line_no);
      current->has_max = true;
    } else {
      throw ParseError("unknown key '" + std::string(key) + "'", line_no);
    }
  }
  finish();
  bench.validate();
  return bench;
}

std::string serialize_benchmark(const ConstraintBenchmark& bench) {
  bench.validate();
  std::ostringstream out;
  out << "benchmark = " << bench.name << "\n";
  for (const auto& s : bench.specs) {
    out << "\n[constraint]\n";
    out << "description = " << s.description << "\n";
    out << "domain = " << spec_label(s) << "\n";
    out << "min_replication = " << format_real(s.c_min) << "\n";
    out << "max_replication = " << format_real(s.c_max) << "\n";
  }
  return out.str();
}

ConstraintBenchmark load_benchmark(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open benchmark file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  ConstraintBenchmark b = parse_benchmark(ss.str());
  if (b.name.empty()) b.name = path.filename().string();
  return b;
}

Bounds resolve(const ConstraintBenchmark& bench, std::string_view domain) {
  const std::string key = normalize_domain(domain);
  const ConstraintSpec* fallback = nullptr;
  for (const auto& s : bench.specs) {
    if (s.is_default()) {
      fallback = &s;
    } else if (*s.domain == key) {
      return {s.c_min, s.c_max};
    }
  }
  if (fallback) return {fallback->c_min, fallback->c_max};
  return {0.0, 1.0};
}

std::vector<ConstraintBenchmark> builtin_benchmarks() {
  ConstraintBenchmark explore = parse_benchmark(std::string(kCritical) + std::string(kExploreExtra));
  explore.name = "explore";
  return {parse_benchmark(kGlobal), parse_benchmark(kCritical), std::move(explore)};
}

ConstraintBenchmark find_benchmark(std::string_view name_or_path) {
  for (auto& b : builtin_benchmarks()) {
    if (b.name == name_or_path) return b;
  }
  const std::filesystem::path p(name_or_path);
  if (std::filesystem::exists(p)) return load_benchmark(p);
  throw ConfigError("unknown benchmark '" + std::string(name_or_path) + "'");
}

void apply_benchmark(const ConstraintBenchmark& bench, std::span<LoggedSample> samples,
                     std::span<const std::string> domain_names) {
  std::vector<Bounds> by_domain;
  by_domain.reserve(domain_names.size());
  for (const auto& name : domain_names) by_domain.push_back(resolve(bench, name));
  for (auto& s : samples) s.bounds = by_domain.at(s.domain);
}

}  // namespace cbx
