#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>

namespace dpffn::kernel {

namespace detail {
inline std::atomic<int>& thread_cap() {
  static std::atomic<int> cap{1};
  return cap;
}
}  // namespace detail

/// Number of threads dense kernels may use. Defaults to 1 (deterministic);
/// raising it row-partitions large matrix products.
inline int threads() { return detail::thread_cap().load(); }
inline void set_threads(int n) { detail::thread_cap().store(std::max(1, n)); }

/// Cap from the DPFFN_THREADS environment variable, or 1 when unset/invalid.
inline int threads_from_env() {
  const char* v = std::getenv("DPFFN_THREADS");
  if (!v) return 1;
  try {
    return std::max(1, std::stoi(v));
  } catch (...) {
    return 1;
  }
}

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapC = Eigen::Map<const RowMat<S>>;
template <typename S>
using Map = Eigen::Map<RowMat<S>>;

template <typename S>
void gemm_rows(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n, bool ta, bool tb,
               bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
             N = static_cast<Eigen::Index>(n);
  Map<S> C(c, M, N);
  if (!accumulate) C.setZero();
  if (!ta && !tb) {
    C.noalias() += MapC<S>(a, M, K) * MapC<S>(b, K, N);
  } else if (!ta && tb) {
    C.noalias() += MapC<S>(a, M, K) * MapC<S>(b, N, K).transpose();
  } else if (ta && !tb) {
    C.noalias() += MapC<S>(a, K, M).transpose() * MapC<S>(b, K, N);
  } else {
    C.noalias() += MapC<S>(a, K, M).transpose() * MapC<S>(b, N, K).transpose();
  }
}

/// C[m,n] (+)= op(A)[m,k] * op(B)[k,n]; op transposes when the flag is set
/// (A is then stored [k,m], B stored [n,k]).
template <typename S>
void gemm(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n, bool ta, bool tb,
          bool accumulate) {
  const int nt = threads();
  if (nt <= 1 || ta || m < 64 || m * k * n < (1u << 20)) {
    gemm_rows(a, b, c, m, k, n, ta, tb, accumulate);
    return;
  }
  const std::size_t parts = std::min<std::size_t>(static_cast<std::size_t>(nt), m);
  std::vector<std::thread> pool;
  for (std::size_t p = 0; p < parts; ++p) {
    const std::size_t r0 = m * p / parts, r1 = m * (p + 1) / parts;
    pool.emplace_back([=] { gemm_rows(a + r0 * k, b, c + r0 * n, r1 - r0, k, n, false, tb, accumulate); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace dpffn::kernel
