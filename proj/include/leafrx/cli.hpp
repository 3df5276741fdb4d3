#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace leafrx {

/// Runs the leafrx command line. `args` excludes the program name.
/// Returns 0 on success, 1 on operational errors, 2 on usage errors.
int cli_main(const std::vector<std::string>& args, std::istream& in, std::ostream& out,
             std::ostream& err);

}  // namespace leafrx
