#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dirac::cli {

enum ExitCode : int { ok = 0, usage = 1, data = 2, numerical = 3, internal = 4 };

/// Runs one `dirac` invocation. args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dirac::cli
