#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace qmerge::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInputError = 2;
inline constexpr int kExitPipelineError = 3;

/// Entry point shared by the executable and the tests. Subcommands:
/// compress, saliency, train-prior, bench, gen-synthetic.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace qmerge::cli
