#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace morphnn {

/// Worker count for data-parallel loops. Controlled by MORPHNN_THREADS,
/// defaults to the hardware concurrency.
int worker_count();

/// Runs fn(begin, end) over a partition of [0, n) across workers. Every
/// index is handled by exactly one invocation, so callers that write to
/// disjoint per-index locations need no synchronization and results are
/// bitwise reproducible regardless of the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

} // namespace morphnn
