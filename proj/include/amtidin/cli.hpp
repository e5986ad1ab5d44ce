#pragma once

#include <string>
#include <vector>

namespace amtidin::cli {

// Exit codes: 0 success, 1 user error (bad arguments, configuration or input
// files), 2 internal error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUser = 1;
inline constexpr int kExitInternal = 2;

int cli_main(int argc, char** argv);
int cli_main(const std::vector<std::string>& args);  // args[0] is the program name

}  // namespace amtidin::cli
