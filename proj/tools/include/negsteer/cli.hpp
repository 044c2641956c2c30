#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace negsteer::cli {

/// Process exit codes.
enum ExitCode : int {
  kSuccess = 0,
  kIncomplete = 1,
  kUsageError = 2,
};

/// Entry point of the negsteer command line. The effective configuration and
/// diagnostics go to `err`; results go to `out`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Expands "a:b:step" or "a,b,c" into alpha values. Throws ConfigError for
/// malformed specs and values outside [0, 1].
std::vector<double> parse_alpha_grid(const std::string& spec);

/// JSON text of the built-in defaults.
std::string default_config_json();

}  // namespace negsteer::cli
