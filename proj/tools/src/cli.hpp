#pragma once

#include <string>
#include <vector>

namespace gensdf::cli {

enum ExitCode : int { kSuccess = 0, kRuntimeFailure = 1, kUsageError = 2 };

// Runs the gensdf command line (args[0] is the program name) and returns the
// process exit code. Never throws.
int run(const std::vector<std::string>& args);

}  // namespace gensdf::cli
