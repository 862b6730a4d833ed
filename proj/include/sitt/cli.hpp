#pragma once

namespace sitt {

/// Exit codes of the sitt executable.
enum ExitCode : int {
    kExitOk = 0,
    kExitVerifyFailed = 1,
    kExitConfig = 2,
    kExitNumeric = 3,
    kExitBudget = 4,
};

/// Entry point of the `sitt` executable; returns the process exit code.
int run_cli(int argc, char** argv);

}  // namespace sitt
