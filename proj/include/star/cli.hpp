#pragma once

#include <string>
#include <vector>

namespace star {

// Parses and dispatches one command line (argv without the program name).
// Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure,
// 4 artifact problem (corrupt or mismatched files), 1 anything else.
int run_cli(const std::vector<std::string>& args);

}  // namespace star
