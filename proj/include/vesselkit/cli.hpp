#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vk::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitUsage = 2;

/// Runs one subcommand. `args` excludes the program name. Settings resolve as
/// flags over the --config file over built-in defaults.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Levenshtein distance, used for "did you mean" hints.
std::size_t edit_distance(const std::string& a, const std::string& b);

}  // namespace vk::cli
