#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace sact {

/// Parses `args` (without the program name) and runs one command. Returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sact
