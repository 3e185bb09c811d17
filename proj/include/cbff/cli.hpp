#pragma once

#include <string>
#include <vector>

namespace cbff::cli {

// Entry point behind the cbffcd binary; exposed so tests can drive commands
// in-process. Exit codes: 0 success, 1 I/O, 2 usage/config, 3 numeric
// failure, 4 artifact corruption.
int run(const std::vector<std::string>& args);

}  // namespace cbff::cli
