#pragma once

#include <ostream>

namespace octproj::cli {

// One command-line invocation. Human-readable output goes to `out`, errors
// to `err`. Returns 0 on success, 1 on a usage error, 2 on a runtime error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace octproj::cli
