#include "milsurv/kernels.hpp"

#include <omp.h>

#include <vector>

#include "milsurv/error.hpp"

namespace milsurv::kernels {
namespace {

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelWork = std::size_t{1} << 16;

// Outputs narrower than this are computed as contiguous dot products.
constexpr std::size_t kNarrowOutput = 16;

template <class T>
std::vector<T> transposed(const T* src, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

template <class T>
void gemm_dot(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* bt, T* c, bool parallel) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = bt + j * k;
      T sum{0};
#pragma omp simd reduction(+ : sum)
      for (std::size_t p = 0; p < k; ++p) sum += arow[p] * brow[p];
      c[i * n + j] += sum;
    }
  }
}

template <class T>
void check_gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const T> a,
                std::span<const T> b, std::span<T> c) {
  require(a.size() == m * k && b.size() == k * n && c.size() == m * n, ErrorKind::dimension,
          "gemm: buffer sizes do not match m, n, k");
}

}  // namespace

template <class T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          std::span<const T> a, std::span<const T> b, std::span<T> c) {
  check_gemm(m, n, k, a, b, c);
  const bool parallel = m > 1 && m * n * k >= kParallelWork;
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
  const auto rows = static_cast<std::ptrdiff_t>(m);

  if (n < kNarrowOutput && k >= kNarrowOutput) {
    std::vector<T> a_rows, b_rows;
    if (ta == Trans::yes) a_rows = transposed(pa, k, m);
    if (tb == Trans::no) b_rows = transposed(pb, k, n);
    gemm_dot(m, n, k, ta == Trans::yes ? a_rows.data() : pa, tb == Trans::no ? b_rows.data() : pb, pc, parallel);
    return;
  }

  if (ta == Trans::no && tb == Trans::no) {
#pragma omp parallel for schedule(static) if (parallel)
    for (std::ptrdiff_t i = 0; i < rows; ++i) {
      T* crow = pc + i * n;
      const T* arow = pa + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = arow[p];
        const T* brow = pb + p * n;
#pragma omp simd
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  } else if (ta == Trans::no && tb == Trans::yes) {
    gemm_dot(m, n, k, pa, pb, pc, parallel);
  } else if (ta == Trans::yes && tb == Trans::no) {
#pragma omp parallel for schedule(static) if (parallel)
    for (std::ptrdiff_t i = 0; i < rows; ++i) {
      T* crow = pc + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = pa[p * m + i];
        if (aip == T{0}) continue;
        const T* brow = pb + p * n;
#pragma omp simd
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  } else {
#pragma omp parallel for schedule(static) if (parallel)
    for (std::ptrdiff_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        T sum{0};
        for (std::size_t p = 0; p < k; ++p) sum += pa[p * m + i] * pb[j * k + p];
        pc[i * n + j] += sum;
      }
    }
  }
}

PairCounts concordance_pairs(std::span<const double> risk, std::span<const double> time,
                             std::span<const std::uint8_t> event) {
  require(risk.size() == time.size() && time.size() == event.size(), ErrorKind::dimension,
          "concordance_pairs: length mismatch");
  const auto n = static_cast<std::ptrdiff_t>(risk.size());
  std::uint64_t comparable = 0;
  std::uint64_t halves = 0;
#pragma omp parallel for schedule(dynamic, 16) reduction(+ : comparable, halves) if (n > 512)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    if (!event[i]) continue;
    for (std::ptrdiff_t j = 0; j < n; ++j) {
      if (!(time[i] < time[j])) continue;
      ++comparable;
      if (risk[i] > risk[j]) {
        halves += 2;
      } else if (risk[i] == risk[j]) {
        halves += 1;
      }
    }
  }
  return {comparable, halves};
}

int max_threads() { return omp_get_max_threads(); }

void set_threads(int n) { omp_set_num_threads(n < 1 ? 1 : n); }

namespace reference {

template <class T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          std::span<const T> a, std::span<const T> b, std::span<T> c) {
  check_gemm(m, n, k, a, b, c);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T sum{0};
      for (std::size_t p = 0; p < k; ++p) {
        const T av = ta == Trans::no ? a[i * k + p] : a[p * m + i];
        const T bv = tb == Trans::no ? b[p * n + j] : b[j * k + p];
        sum += av * bv;
      }
      c[i * n + j] += sum;
    }
  }
}

PairCounts concordance_pairs(std::span<const double> risk, std::span<const double> time,
                             std::span<const std::uint8_t> event) {
  require(risk.size() == time.size() && time.size() == event.size(), ErrorKind::dimension,
          "concordance_pairs: length mismatch");
  PairCounts counts;
  for (std::size_t i = 0; i < risk.size(); ++i) {
    for (std::size_t j = 0; j < risk.size(); ++j) {
      if (!event[i] || !(time[i] < time[j])) continue;
      ++counts.comparable;
      counts.concordant_halves += risk[i] > risk[j] ? 2 : (risk[i] == risk[j] ? 1 : 0);
    }
  }
  return counts;
}

template void gemm<float>(Trans, Trans, std::size_t, std::size_t, std::size_t,
                          std::span<const float>, std::span<const float>, std::span<float>);
template void gemm<double>(Trans, Trans, std::size_t, std::size_t, std::size_t,
                           std::span<const double>, std::span<const double>, std::span<double>);

}  // namespace reference

template void gemm<float>(Trans, Trans, std::size_t, std::size_t, std::size_t,
                          std::span<const float>, std::span<const float>, std::span<float>);
template void gemm<double>(Trans, Trans, std::size_t, std::size_t, std::size_t,
                           std::span<const double>, std::span<const double>, std::span<double>);

}  // namespace milsurv::kernels
