#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace metapid::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

/**
 * Runs one subcommand. `args` excludes the program name, e.g.
 * {"augment", "--bases", "toy2", "--variants", "4", "--out", "d.jsonl"}.
 * Data goes to files only; progress and errors go to `err`, help to `out`.
 */
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(const std::vector<std::string>& args);

}  // namespace metapid::cli
