#pragma once

// Command-line front end. `run` is the whole program minus main(), so tests
// can drive it in-process.
//
// Exit status: 0 success, 1 validation/usage/IO error, 2 numeric fault.

#include <iosfwd>
#include <string>
#include <vector>

namespace maskdiff::cli {

inline constexpr const char* kVersion = "0.1.0";

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace maskdiff::cli
