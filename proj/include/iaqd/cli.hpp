#pragma once

// Command-line entry point. Subcommands: gen-data, train, eval, diagnose, report.
// Exit status: 0 on success, 2 on flag errors (usage printed), 1 on runtime failure
// (one "error: {json}" line on stderr).

namespace iaqd {

int run_command(int argc, char** argv);

}  // namespace iaqd
