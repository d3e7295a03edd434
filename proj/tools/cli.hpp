#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace flowmoe::cli {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kSolver = 3 };

// Runs one command line (without the program name) and returns its exit code.
int run(const std::vector<std::string>& args, std::ostream& out,
        std::ostream& err);

}  // namespace flowmoe::cli
