#pragma once

#include <iosfwd>

namespace sapo {

enum ExitCode : int { kExitOk = 0, kExitTolerance = 1, kExitConfig = 2, kExitRuntime = 3 };

/// Parses argv, runs one subcommand and maps errors onto the exit-code contract.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sapo
