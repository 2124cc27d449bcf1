#include "soupkit/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

#include "soupkit/error.hpp"

namespace soup::kernels {

namespace scalar {

template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        if (!accumulate) {
            for (std::size_t j = 0; j < n; ++j) crow[j] = T(0);
        }
        const T* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] = crow[j] + av * brow[j];
        }
    }
}

template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            T* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] = crow[j] + av * brow[j];
        }
    }
}

template <class T>
void axpy(T alpha, const T* x, T* y, std::size_t len) {
    for (std::size_t i = 0; i < len; ++i) y[i] = y[i] + alpha * x[i];
}

template <class T>
void add_inplace(const T* x, T* y, std::size_t len) {
    for (std::size_t i = 0; i < len; ++i) y[i] = y[i] + x[i];
}

template void gemm_nn<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t, bool);
template void gemm_nn<double>(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool);
template void gemm_tn<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t);
template void gemm_tn<double>(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
template void axpy<float>(float, const float*, float*, std::size_t);
template void axpy<double>(double, const double*, double*, std::size_t);
template void add_inplace<float>(const float*, float*, std::size_t);
template void add_inplace<double>(const double*, double*, std::size_t);

}  // namespace scalar

namespace {

Backend detect_default() noexcept {
    if (const char* env = std::getenv("SOUPKIT_SIMD"); env != nullptr && std::string(env) == "scalar") {
        return Backend::kScalar;
    }
    return avx2_available() ? Backend::kAvx2 : Backend::kScalar;
}

std::atomic<Backend>& backend_slot() noexcept {
    static std::atomic<Backend> slot{detect_default()};
    return slot;
}

}  // namespace

bool avx2_available() noexcept {
#if defined(SOUPKIT_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
    static const bool ok = __builtin_cpu_supports("avx2") != 0;
    return ok;
#else
    return false;
#endif
}

Backend active_backend() noexcept { return backend_slot().load(std::memory_order_relaxed); }

void set_backend(Backend backend) {
    if (backend == Backend::kAvx2 && !avx2_available()) {
        throw ConfigError("AVX2 backend requested but not supported by this CPU/build");
    }
    backend_slot().store(backend, std::memory_order_relaxed);
}

std::string_view backend_name(Backend backend) noexcept {
    return backend == Backend::kAvx2 ? "avx2" : "scalar";
}

std::uint64_t& thread_flops() noexcept {
    thread_local std::uint64_t flops = 0;
    return flops;
}

namespace {

void check_size(std::size_t have, std::size_t need, const char* what) {
    if (have < need) throw DimensionError(std::string(what) + ": buffer too small");
}

}  // namespace

template <class T>
void gemm_nn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
    check_size(a.size(), m * k, "gemm_nn a");
    check_size(b.size(), k * n, "gemm_nn b");
    check_size(c.size(), m * n, "gemm_nn c");
    thread_flops() += 2ull * m * k * n;
#if defined(SOUPKIT_HAVE_AVX2)
    if (active_backend() == Backend::kAvx2) {
        avx2::gemm_nn(a.data(), b.data(), c.data(), m, k, n, accumulate);
        return;
    }
#endif
    scalar::gemm_nn(a.data(), b.data(), c.data(), m, k, n, accumulate);
}

template <class T>
void gemm_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
             std::size_t n) {
    check_size(a.size(), m * k, "gemm_tn a");
    check_size(b.size(), m * n, "gemm_tn b");
    check_size(c.size(), k * n, "gemm_tn c");
    thread_flops() += 2ull * m * k * n;
#if defined(SOUPKIT_HAVE_AVX2)
    if (active_backend() == Backend::kAvx2) {
        avx2::gemm_tn(a.data(), b.data(), c.data(), m, k, n);
        return;
    }
#endif
    scalar::gemm_tn(a.data(), b.data(), c.data(), m, k, n);
}

template <class T>
void axpy(T alpha, std::span<const T> x, std::span<T> y) {
    if (x.size() != y.size()) throw DimensionError("axpy length mismatch");
#if defined(SOUPKIT_HAVE_AVX2)
    if (active_backend() == Backend::kAvx2) {
        avx2::axpy(alpha, x.data(), y.data(), x.size());
        return;
    }
#endif
    scalar::axpy(alpha, x.data(), y.data(), x.size());
}

template <class T>
void add_inplace(std::span<const T> x, std::span<T> y) {
    if (x.size() != y.size()) throw DimensionError("add length mismatch");
#if defined(SOUPKIT_HAVE_AVX2)
    if (active_backend() == Backend::kAvx2) {
        avx2::add_inplace(x.data(), y.data(), x.size());
        return;
    }
#endif
    scalar::add_inplace(x.data(), y.data(), x.size());
}

template void gemm_nn<float>(std::span<const float>, std::span<const float>, std::span<float>, std::size_t,
                             std::size_t, std::size_t, bool);
template void gemm_nn<double>(std::span<const double>, std::span<const double>, std::span<double>, std::size_t,
                              std::size_t, std::size_t, bool);
template void gemm_tn<float>(std::span<const float>, std::span<const float>, std::span<float>, std::size_t,
                             std::size_t, std::size_t);
template void gemm_tn<double>(std::span<const double>, std::span<const double>, std::span<double>, std::size_t,
                              std::size_t, std::size_t);
template void axpy<float>(float, std::span<const float>, std::span<float>);
template void axpy<double>(double, std::span<const double>, std::span<double>);
template void add_inplace<float>(std::span<const float>, std::span<float>);
template void add_inplace<double>(std::span<const double>, std::span<double>);

}  // namespace soup::kernels
