#pragma once

namespace psqd {

/// Entry point of the psqd command-line tool. Returns the process exit
/// code: 0 success, 2 configuration error, 3 runtime abort.
int run_cli(int argc, char** argv);

} // namespace psqd
