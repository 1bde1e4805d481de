#pragma once

#include <cstddef>
#include <functional>

namespace metapid {

// Worker count for a --jobs style value: <= 0 means available parallelism.
int resolve_jobs(int jobs);

// Runs fn(i) for i in [0, count) on up to `jobs` threads.
//
// Tasks must write only to their own output slots; with that discipline the
// result is independent of the thread count. The first exception thrown by a
// task is rethrown on the calling thread after all workers stop.
void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& fn);

}  // namespace metapid
