#pragma once

#include <cstddef>
#include <exception>
#include <mutex>

namespace slim {

/// Runs fn(i) for i in [0, n) across OpenMP threads. The first exception thrown
/// by any iteration is rethrown on the calling thread after the loop.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  std::exception_ptr error;
  std::mutex mu;
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic, 4)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      fn(static_cast<std::size_t>(i));
    } catch (...) {
      std::lock_guard lock(mu);
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

/// Number of threads an OpenMP parallel region would use.
int max_threads();

}  // namespace slim
