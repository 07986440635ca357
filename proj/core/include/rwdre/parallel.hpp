#pragma once

#include <cstddef>
#include <functional>

namespace rwdre {

// Worker pool size: the RWDRE_THREADS environment variable when set to a
// positive integer, otherwise the hardware concurrency, at least 1.
std::size_t worker_count();

// Runs fn(0..n-1) across the worker pool in static blocks. Each index must
// write only into its own preallocated slot; callers reduce sequentially
// afterwards, so results are bitwise independent of the thread count. The
// first exception thrown by any index is rethrown after all workers join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace rwdre
