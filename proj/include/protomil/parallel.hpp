#pragma once

#include <cstddef>
#include <functional>

namespace protomil {

// Process-wide worker count for read-only per-bag passes (inference,
// projection, census). 1 runs everything on the calling thread.
void set_num_threads(std::size_t n);
std::size_t num_threads();

// Calls fn(i) for i in [0, n). Work is split into contiguous blocks; callers
// write results into per-index slots, so outputs do not depend on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace protomil
