#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace cbx {

// Exit codes of run_cli.
inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;       // I/O, parse or validation failure
inline constexpr int kExitUsage = 2;       // bad command line
inline constexpr int kExitDiverged = 3;    // a trainer hit the divergence guard
inline constexpr int kExitPartial = 4;     // benchmark finished with failed runs

// Subcommands: gen-data, train, eval, benchmark, report. args excludes the
// program name. The default output root comes from CBX_OUTPUT_ROOT.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cbx
