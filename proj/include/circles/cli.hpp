#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace circles {

/// Exit codes: 0 success, 1 hard error, 2 failure tally above --max-failures.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace circles
