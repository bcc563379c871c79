#pragma once

#include <ostream>

namespace layerscope {

// Exit codes: 0 success, 1 a run (or validation) failed, 2 config or usage error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailed = 1;
inline constexpr int kExitUsage = 2;

// Entry point behind the executable; streams are injectable for tests.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace layerscope
