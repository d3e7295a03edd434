#pragma once

#include <cstddef>
#include <functional>

namespace flowmoe {

// Process-wide worker count used by parallel_for. Defaults to 1.
void set_thread_count(int threads);
int thread_count();

// Runs body(i) for i in [0, n). Each index is executed exactly once; callers
// write results into per-index slots and reduce in index order afterwards, so
// outcomes never depend on the worker count. Nested calls run serially.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace flowmoe
