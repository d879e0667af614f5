#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace qcap {

inline constexpr const char* kVersion = "0.1.0";

// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3 };

// Runs one command. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace qcap
