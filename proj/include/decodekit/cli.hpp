#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "decodekit/errors.hpp"

namespace decodekit {

/// 0 success, 1 input/usage error, 2 backend or transport error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 1;
inline constexpr int kExitBackend = 2;

int exit_code_for(ErrorKind kind) noexcept;

/// Entry point shared by the binary and the tests. `args` excludes argv[0].
/// Data goes to `out` when no --out file is given; diagnostics go to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct SubcommandFlags {
    std::string name;
    std::vector<std::string> flags;  // long names, e.g. "--max-length"
    std::string help;                // rendered help text
};

/// Flags registered with the parser for each subcommand, with its help text.
std::vector<SubcommandFlags> cli_flag_inventory();

}  // namespace decodekit
