#pragma once

#include <cstddef>
#include <functional>

namespace moemui {

/// Worker count used by parallel_for. Defaults to the MOEMUI_THREADS
/// environment variable when set, otherwise hardware concurrency.
std::size_t thread_count() noexcept;
void set_thread_count(std::size_t n) noexcept;

/// Runs fn(i) for i in [0, n). Each index is processed exactly once; callers
/// write results into index-addressed slots so output order is deterministic.
/// The first exception thrown by any fn is rethrown after all workers join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace moemui
