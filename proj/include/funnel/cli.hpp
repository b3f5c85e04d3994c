#pragma once

#include <ostream>

namespace funnel::cli {

/// Exit codes of every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitVerificationFailed = 1;
inline constexpr int kExitUsage = 2;

/// Runs one `funnel` command line. Failures print a single line
/// "error: <category>: <message>" to `err`; categories are usage, layout,
/// input, io, checkpoint, contract, numeric and internal.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace funnel::cli
