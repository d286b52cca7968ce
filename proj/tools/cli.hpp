#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace insight::cli {

/// Name of the environment variable holding the default output directory.
inline constexpr const char* kOutDirEnv = "INSIGHT_OUT_DIR";

[[nodiscard]] const char* tool_version() noexcept;

/// Runs one command line (argv[0] included). Returns the process exit code:
/// 0 on success, 2 for usage or configuration errors, 1 for failures. Every
/// failure writes one JSON object line to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Convenience overload for tests.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace insight::cli
