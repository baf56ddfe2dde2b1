#pragma once

#include <cstddef>
#include <functional>

namespace normshape {

/// Worker cap used by parallel_for. 0 means "available parallelism".
void set_thread_count(unsigned n);
unsigned thread_count();

/// Runs body(i) for i in [0, n). Each index runs exactly once; callers must
/// write only to per-index state so results do not depend on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace normshape
