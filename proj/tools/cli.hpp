#pragma once

#include <ostream>

namespace probdrop::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitVerify = 2;
inline constexpr int kExitUsage = 64;

/// Parses argv and runs one subcommand (mask, stats, train, ablate).
/// Reports go to `out`; diagnostics go to `err` only.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace probdrop::cli
