#pragma once

#include <cstddef>
#include <functional>

namespace danp {

/// Worker count: DANP_THREADS (when set to a positive integer) overrides
/// `requested`; zero means one.
std::size_t resolve_threads(std::size_t requested);

/// Runs fn(0..n-1) on up to `threads` workers. Work items must be
/// independent; callers reduce results in index order. If any item throws,
/// the exception of the lowest failing index is rethrown.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace danp
