#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace fmn::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitValidation = 1,
  kExitIo = 2,
  kExitNumeric = 3,
};

/// Parses `args` (without the program name), runs one command and maps
/// library errors to exit codes. Diagnostics go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fmn::cli
