#pragma once

#include <cstddef>
#include <functional>

namespace tqpt {

/// Worker count: `TQPT_THREADS` when set to a positive integer, otherwise all
/// hardware threads.
std::size_t worker_count();

/// Runs `fn(i)` for every i in [0, n). Calls may run concurrently, so each
/// index must write only to its own output slot; callers reduce those slots in
/// index order afterwards. The exception from the lowest failing index is
/// rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace tqpt
