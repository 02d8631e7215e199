#pragma once

// command line front end; returns a process exit code:
//   0 success, 1 usage or config error, 2 runtime failure

namespace km {

int run_cli(int argc, const char* const* argv);

}  // namespace km
