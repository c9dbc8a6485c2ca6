// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace ldeq {

/// Subcommands: budget, sweep, lipcheck, solve, train, eval.
/// Exit status: 0 success, 1 usage error, 2 runtime failure.
int run_cli(const std::vector<std::string>& args);

}  // namespace ldeq
