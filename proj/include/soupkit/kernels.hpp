#pragma once

// Dense inner-loop kernels with a scalar reference path and an AVX2 path
// chosen at runtime. Both paths accumulate every output element in the same
// order (ascending reduction index, separate multiply and add), so their
// results are bitwise identical and the choice of backend never changes a
// checkpoint or a report.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace soup::kernels {

enum class Backend { kScalar, kAvx2 };

bool avx2_available() noexcept;
// Backend used by the dispatching entry points below. Defaults to AVX2 when the
// CPU supports it, unless SOUPKIT_SIMD=scalar is set in the environment.
Backend active_backend() noexcept;
// Throws ConfigError when the requested backend is not supported on this CPU.
void set_backend(Backend backend);
std::string_view backend_name(Backend backend) noexcept;

// Multiply-add count of every gemm issued from the calling thread, times two.
std::uint64_t& thread_flops() noexcept;

// c[m x n] = (accumulate ? c : 0) + a[m x k] * b[k x n], all row-major.
template <class T>
void gemm_nn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);

// c[k x n] += a[m x k]^T * b[m x n]; each output sums over m in ascending order.
template <class T>
void gemm_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
             std::size_t n);

// y += alpha * x
template <class T>
void axpy(T alpha, std::span<const T> x, std::span<T> y);

// y += x
template <class T>
void add_inplace(std::span<const T> x, std::span<T> y);

namespace scalar {
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
template <class T>
void axpy(T alpha, const T* x, T* y, std::size_t len);
template <class T>
void add_inplace(const T* x, T* y, std::size_t len);
}  // namespace scalar

namespace avx2 {
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
template <class T>
void axpy(T alpha, const T* x, T* y, std::size_t len);
template <class T>
void add_inplace(const T* x, T* y, std::size_t len);
}  // namespace avx2

}  // namespace soup::kernels
