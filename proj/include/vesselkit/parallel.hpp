#pragma once

#include <cstddef>
#include <functional>

namespace vk {

/// Upper bound on worker threads used by internal parallel loops. 0 restores
/// the default (hardware concurrency).
void set_max_threads(std::size_t n);
std::size_t max_threads();

/// Runs fn(begin, end) over disjoint chunks of [0, n). Chunks are static, so
/// results do not depend on the thread count as long as fn only writes to its
/// own range. The first exception thrown by a chunk is rethrown after all
/// chunks finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace vk
