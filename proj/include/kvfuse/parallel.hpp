#pragma once

#include <cstdint>
#include <functional>

namespace kvfuse {

// Worker count: KVFUSE_THREADS if set (>= 1), otherwise hardware concurrency.
int thread_count();

// Runs fn(i) for i in [0, n). Each index is executed exactly once; callers
// write results into per-index slots so output never depends on scheduling.
// The first exception thrown by any task is rethrown after all workers join.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

}  // namespace kvfuse
