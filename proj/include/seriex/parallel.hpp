#pragma once

#include <cstddef>
#include <functional>

namespace seriex {

/// Worker cap for every parallel region. Defaults to SERIEX_THREADS when set,
/// else the hardware concurrency.
std::size_t thread_count() noexcept;
void set_thread_count(std::size_t n) noexcept;

/// Runs body(i) for i in [0, n). Tasks write to disjoint outputs; callers
/// merge results afterwards so the outcome does not depend on the schedule.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace seriex
