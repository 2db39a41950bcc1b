#pragma once

// Command-line driver. Every subcommand reads a JSON config (defaults,
// optionally overlaid by --config FILE and --set key=value overrides), runs
// one module entry point, and writes its artifacts plus a manifest.json with
// the resolved config and an FNV-1a hash per output. Timestamps appear only
// in the manifest, so reruns with the same config and seed produce
// byte-identical artifacts.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 file I/O error,
// 4 runtime failure (including diverged training). On failure a partial
// manifest with an "error" field is still written when possible.

#include <string>

namespace gausscount {

int run_cli(int argc, const char* const* argv);

// The built-in config for one subcommand, serialized as pretty JSON. Throws
// ConfigError for unknown commands.
std::string default_config_json(const std::string& command);

}  // namespace gausscount
