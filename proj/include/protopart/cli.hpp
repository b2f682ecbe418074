#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace protopart {

/// Subcommands train / evaluate / explain / audit / serve / synth. `args`
/// excludes the program name. Returns 0 on success, 1 on usage, configuration
/// or validation errors, 2 on runtime failures.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace protopart
