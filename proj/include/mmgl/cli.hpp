#pragma once

#include <iosfwd>

namespace mmgl {

/// Entry point of the `mmgl` tool. Returns the process exit status; errors are
/// reported on `err` and yield a nonzero status.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Process-wide setup shared by every binary that trains: subnormal flushing and
/// large malloc thresholds so per-step buffers are not returned to the kernel.
void tune_process();

}  // namespace mmgl
