#pragma once

#include <ostream>

namespace difflab {

/// Entry point behind the difflab executable. Subcommands: train, sample,
/// eval, bench, inspect. Returns 0 on success, 1 on a usage error, 2 on a
/// data or configuration error and 3 on any other failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace difflab
