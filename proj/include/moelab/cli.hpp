// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Config files are `key = value` lines with dotted
// keys; `#` starts a comment. Lists are comma separated.

#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "moelab/simharness.hpp"

namespace moelab {

/// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Every key with its current value, one per line, in a fixed order.
/// Reals are printed so that the text round-trips exactly.
std::string dump_config(const RunConfig& cfg);

/// Applies `key = value` lines on top of `base`. Throws ConfigError
/// ("unknown key: ...", "invalid value for ...") on bad input.
RunConfig parse_config(std::string_view text, RunConfig base = {});

/// Applies one `key=value` override.
void apply_override(RunConfig& cfg, std::string_view assignment);

std::vector<std::string> config_keys();

/// Entry point behind the `moelab` executable; `args` excludes argv[0].
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace moelab
