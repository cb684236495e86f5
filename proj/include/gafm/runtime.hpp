#pragma once

#include <cstdint>
#include <functional>

namespace gafm {

// Worker-thread cap taken from GAFM_THREADS (default 1). Read once.
int max_threads();

// Runs fn(begin, end) over a partition of [0, n). Each index is processed by
// exactly one invocation, so per-index work that does not share accumulators
// yields bit-identical results for any thread count. With max_threads() == 1
// this is a plain function call.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace gafm
