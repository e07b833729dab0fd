#pragma once

#include <string>
#include <vector>

namespace brainstrip {

/// Command-line entry point; args exclude the program name.
/// Exit codes: 0 success, 1 usage error, 2 runtime error.
int run_cli(const std::vector<std::string>& args);

}  // namespace brainstrip
