#pragma once

// Command-line front end. Kept in a library so tests can drive it without spawning a process.

#include <ostream>
#include <string>
#include <vector>

namespace xmod::cli {

// args excludes the program name. Returns the process exit code; failures print one line to err.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace xmod::cli
