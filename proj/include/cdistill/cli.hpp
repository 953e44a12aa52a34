// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace cdistill {

/// Entry point of the `cdistill` binary. Returns the process exit code:
/// 0 success, 1 I/O failure, 2 configuration error, 3 missing prerequisite,
/// 4 numerical failure.
int run_cli(int argc, char** argv);

}  // namespace cdistill
