#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "eduloop/common.hpp"

namespace eduloop::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

int exit_code(ErrorKind kind);

// Runs `eduloop <args...>`; args excludes the program name. Results go to
// `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace eduloop::cli
