#pragma once

#include <cstdint>
#include <functional>

namespace ddpm {

// Splits [0, n) into contiguous chunks, one per worker, and runs
// fn(begin, end) on each. Every index is handled by exactly one thread, so
// kernels whose outputs are disjoint per index stay bit-deterministic for
// any worker count. Not reentrant.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

int worker_count();

}  // namespace ddpm
