#pragma once

namespace bus {

// Entry point shared by the binary and the in-process CLI tests.
// Exit codes: 0 success, 1 runtime error, 2 config error.
int run_cli(int argc, const char* const* argv);

} // namespace bus
