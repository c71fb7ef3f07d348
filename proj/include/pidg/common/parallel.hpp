#pragma once

#include <cstddef>
#include <functional>

namespace pidg {

// Worker count used by parallel_for. Defaults to the PIDG_THREADS environment
// variable, else the hardware concurrency. set_thread_count overrides both
// (0 restores the default).
std::size_t thread_count();
void set_thread_count(std::size_t n);

// Runs body(i) for i in [0, n). Work items are independent; callers that need
// deterministic reductions write into per-item slots and reduce afterwards in
// index order.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace pidg
