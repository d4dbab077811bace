#pragma once

#include <iosfwd>

namespace semab {

/// Entry point of the `semab` tool. Subcommands: split, train, score, eval,
/// report, run. Returns 0 on success, 2 for usage errors and a missing
/// config file, 1 for other failures; failures print one line
/// `error: code=<code> message="<text>"` to `err`.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace semab
