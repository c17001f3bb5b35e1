#pragma once

#include <iosfwd>

namespace bitdance::app {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;          // bad command line
inline constexpr int kExitConfig = 2;         // invalid config or argument values
inline constexpr int kExitIo = 3;             // unreadable, unwritable or malformed files
inline constexpr int kExitCompatibility = 4;  // artifacts that do not fit together
inline constexpr int kExitRuntime = 5;        // training divergence and other failures

// Parses argv, dispatches to the verb and maps errors to exit codes.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace bitdance::app
