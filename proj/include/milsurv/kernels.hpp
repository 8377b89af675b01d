#pragma once

// Dense compute kernels. Every kernel has a serial implementation in
// `kernels::reference`, kept for tests and benchmarks, and an OpenMP
// implementation used by the engine. The parallel versions partition output
// rows across threads and keep the per-element summation order fixed, so
// results do not depend on the thread count.

#include <cstddef>
#include <cstdint>
#include <span>

namespace milsurv::kernels {

enum class Trans : bool { no = false, yes = true };

/// c[m×n] += op(a) · op(b), where op(a) is m×k and op(b) is k×n.
/// Row-major storage; a transposed operand is stored as k×m (resp. n×k).
template <class T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          std::span<const T> a, std::span<const T> b, std::span<T> c);

/// Pair statistics for the concordance index. `concordant_halves` counts
/// concordant pairs twice and tied-risk pairs once, so the index is
/// concordant_halves / (2 · comparable).
struct PairCounts {
  std::uint64_t comparable = 0;
  std::uint64_t concordant_halves = 0;
};

PairCounts concordance_pairs(std::span<const double> risk, std::span<const double> time,
                             std::span<const std::uint8_t> event);

int max_threads();
void set_threads(int n);

namespace reference {

template <class T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          std::span<const T> a, std::span<const T> b, std::span<T> c);

PairCounts concordance_pairs(std::span<const double> risk, std::span<const double> time,
                             std::span<const std::uint8_t> event);

}  // namespace reference
}  // namespace milsurv::kernels
