// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace tdmoe {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // invalid configuration or runtime failure
inline constexpr int kExitUsage = 2;    // unknown subcommand or flag

/// Runs the workbench with `args` (excluding the program name). Diagnostics go
/// to `err`, progress to `out`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tdmoe
