#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace m2m {

// Command-line front end: one binary, five subcommands (synth, train,
// register, eval, diag). Each takes a TOML config (--config) plus optional
// dotted-key overrides (--set key=value, repeatable). The merged config is
// validated against the subcommand's known keys and written back as a
// resolved snapshot beside the outputs, so every artifact directory records
// exactly what produced it.
//
// Exit codes: 0 success, 2 usage or config error, 1 runtime error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace m2m
