#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace regvit::cli {

// Runs one regvit command. args excludes the program name. Returns the
// process exit code: 0 on success, 1 on a runtime error, 2 on a usage error.
// Errors are printed to err as a single line "error: <kind>: <message>".
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace regvit::cli
