#pragma once

#include <cstdint>
#include <functional>

namespace cbff::threading {

// Global worker count. 0 means strictly serial execution. Results are
// bitwise identical for any worker count: each output range is written by
// exactly one task and inner accumulation order never changes.
void set_workers(int n);
int workers();

// Runs fn(begin, end) over [0, n) split into contiguous chunks. Blocks until
// all chunks are done. With workers() == 0 this is a plain function call.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace cbff::threading
