// Compiled with -mavx2 (no FMA). Only reached after a runtime CPU check.
// Keep this translation unit free of standard-library templates so no
// AVX2-encoded copy of a shared inline function can leak into other callers.

#include <immintrin.h>

#include <cstddef>

namespace soup::kernels::avx2 {

template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
template <class T>
void axpy(T alpha, const T* x, T* y, std::size_t len);
template <class T>
void add_inplace(const T* x, T* y, std::size_t len);

template <>
void gemm_nn<float>(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
                    bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        float* crow = c + i * n;
        std::size_t j = 0;
        for (; j + 32 <= n; j += 32) {
            __m256 c0, c1, c2, c3;
            if (accumulate) {
                c0 = _mm256_loadu_ps(crow + j);
                c1 = _mm256_loadu_ps(crow + j + 8);
                c2 = _mm256_loadu_ps(crow + j + 16);
                c3 = _mm256_loadu_ps(crow + j + 24);
            } else {
                c0 = c1 = c2 = c3 = _mm256_setzero_ps();
            }
            for (std::size_t p = 0; p < k; ++p) {
                const __m256 av = _mm256_set1_ps(arow[p]);
                const float* brow = b + p * n + j;
                c0 = _mm256_add_ps(c0, _mm256_mul_ps(av, _mm256_loadu_ps(brow)));
                c1 = _mm256_add_ps(c1, _mm256_mul_ps(av, _mm256_loadu_ps(brow + 8)));
                c2 = _mm256_add_ps(c2, _mm256_mul_ps(av, _mm256_loadu_ps(brow + 16)));
                c3 = _mm256_add_ps(c3, _mm256_mul_ps(av, _mm256_loadu_ps(brow + 24)));
            }
            _mm256_storeu_ps(crow + j, c0);
            _mm256_storeu_ps(crow + j + 8, c1);
            _mm256_storeu_ps(crow + j + 16, c2);
            _mm256_storeu_ps(crow + j + 24, c3);
        }
        for (; j + 8 <= n; j += 8) {
            __m256 c0 = accumulate ? _mm256_loadu_ps(crow + j) : _mm256_setzero_ps();
            for (std::size_t p = 0; p < k; ++p) {
                c0 = _mm256_add_ps(c0, _mm256_mul_ps(_mm256_set1_ps(arow[p]), _mm256_loadu_ps(b + p * n + j)));
            }
            _mm256_storeu_ps(crow + j, c0);
        }
        for (; j < n; ++j) {
            float s = accumulate ? crow[j] : 0.0f;
            for (std::size_t p = 0; p < k; ++p) s = s + arow[p] * b[p * n + j];
            crow[j] = s;
        }
    }
}

template <>
void gemm_nn<double>(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
                     bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        std::size_t j = 0;
        for (; j + 16 <= n; j += 16) {
            __m256d c0, c1, c2, c3;
            if (accumulate) {
                c0 = _mm256_loadu_pd(crow + j);
                c1 = _mm256_loadu_pd(crow + j + 4);
                c2 = _mm256_loadu_pd(crow + j + 8);
                c3 = _mm256_loadu_pd(crow + j + 12);
            } else {
                c0 = c1 = c2 = c3 = _mm256_setzero_pd();
            }
            for (std::size_t p = 0; p < k; ++p) {
                const __m256d av = _mm256_set1_pd(arow[p]);
                const double* brow = b + p * n + j;
                c0 = _mm256_add_pd(c0, _mm256_mul_pd(av, _mm256_loadu_pd(brow)));
                c1 = _mm256_add_pd(c1, _mm256_mul_pd(av, _mm256_loadu_pd(brow + 4)));
                c2 = _mm256_add_pd(c2, _mm256_mul_pd(av, _mm256_loadu_pd(brow + 8)));
                c3 = _mm256_add_pd(c3, _mm256_mul_pd(av, _mm256_loadu_pd(brow + 12)));
            }
            _mm256_storeu_pd(crow + j, c0);
            _mm256_storeu_pd(crow + j + 4, c1);
            _mm256_storeu_pd(crow + j + 8, c2);
            _mm256_storeu_pd(crow + j + 12, c3);
        }
        for (; j + 4 <= n; j += 4) {
            __m256d c0 = accumulate ? _mm256_loadu_pd(crow + j) : _mm256_setzero_pd();
            for (std::size_t p = 0; p < k; ++p) {
                c0 = _mm256_add_pd(c0, _mm256_mul_pd(_mm256_set1_pd(arow[p]), _mm256_loadu_pd(b + p * n + j)));
            }
            _mm256_storeu_pd(crow + j, c0);
        }
        for (; j < n; ++j) {
            double s = accumulate ? crow[j] : 0.0;
            for (std::size_t p = 0; p < k; ++p) s = s + arow[p] * b[p * n + j];
            crow[j] = s;
        }
    }
}

template <>
void axpy<float>(float alpha, const float* x, float* y, std::size_t len) {
    const __m256 av = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= len; i += 8) {
        _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), _mm256_mul_ps(av, _mm256_loadu_ps(x + i))));
    }
    for (; i < len; ++i) y[i] = y[i] + alpha * x[i];
}

template <>
void axpy<double>(double alpha, const double* x, double* y, std::size_t len) {
    const __m256d av = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= len; i += 4) {
        _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), _mm256_mul_pd(av, _mm256_loadu_pd(x + i))));
    }
    for (; i < len; ++i) y[i] = y[i] + alpha * x[i];
}

template <>
void add_inplace<float>(const float* x, float* y, std::size_t len) {
    std::size_t i = 0;
    for (; i + 8 <= len; i += 8) {
        _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), _mm256_loadu_ps(x + i)));
    }
    for (; i < len; ++i) y[i] = y[i] + x[i];
}

template <>
void add_inplace<double>(const double* x, double* y, std::size_t len) {
    std::size_t i = 0;
    for (; i + 4 <= len; i += 4) {
        _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), _mm256_loadu_pd(x + i)));
    }
    for (; i < len; ++i) y[i] = y[i] + x[i];
}

// c[p, :] += sum_i a[i, p] * b[i, :]; for every element the rows i are
// accumulated in ascending order, matching the scalar reference.
template <>
void gemm_tn<float>(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        float* crow = c + p * n;
        std::size_t j = 0;
        for (; j + 32 <= n; j += 32) {
            __m256 c0 = _mm256_loadu_ps(crow + j);
            __m256 c1 = _mm256_loadu_ps(crow + j + 8);
            __m256 c2 = _mm256_loadu_ps(crow + j + 16);
            __m256 c3 = _mm256_loadu_ps(crow + j + 24);
            for (std::size_t i = 0; i < m; ++i) {
                const __m256 av = _mm256_set1_ps(a[i * k + p]);
                const float* brow = b + i * n + j;
                c0 = _mm256_add_ps(c0, _mm256_mul_ps(av, _mm256_loadu_ps(brow)));
                c1 = _mm256_add_ps(c1, _mm256_mul_ps(av, _mm256_loadu_ps(brow + 8)));
                c2 = _mm256_add_ps(c2, _mm256_mul_ps(av, _mm256_loadu_ps(brow + 16)));
                c3 = _mm256_add_ps(c3, _mm256_mul_ps(av, _mm256_loadu_ps(brow + 24)));
            }
            _mm256_storeu_ps(crow + j, c0);
            _mm256_storeu_ps(crow + j + 8, c1);
            _mm256_storeu_ps(crow + j + 16, c2);
            _mm256_storeu_ps(crow + j + 24, c3);
        }
        for (; j + 8 <= n; j += 8) {
            __m256 c0 = _mm256_loadu_ps(crow + j);
            for (std::size_t i = 0; i < m; ++i) {
                c0 = _mm256_add_ps(c0, _mm256_mul_ps(_mm256_set1_ps(a[i * k + p]), _mm256_loadu_ps(b + i * n + j)));
            }
            _mm256_storeu_ps(crow + j, c0);
        }
        for (; j < n; ++j) {
            float s = crow[j];
            for (std::size_t i = 0; i < m; ++i) s = s + a[i * k + p] * b[i * n + j];
            crow[j] = s;
        }
    }
}

template <>
void gemm_tn<double>(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        double* crow = c + p * n;
        std::size_t j = 0;
        for (; j + 16 <= n; j += 16) {
            __m256d c0 = _mm256_loadu_pd(crow + j);
            __m256d c1 = _mm256_loadu_pd(crow + j + 4);
            __m256d c2 = _mm256_loadu_pd(crow + j + 8);
            __m256d c3 = _mm256_loadu_pd(crow + j + 12);
            for (std::size_t i = 0; i < m; ++i) {
                const __m256d av = _mm256_set1_pd(a[i * k + p]);
                const double* brow = b + i * n + j;
                c0 = _mm256_add_pd(c0, _mm256_mul_pd(av, _mm256_loadu_pd(brow)));
                c1 = _mm256_add_pd(c1, _mm256_mul_pd(av, _mm256_loadu_pd(brow + 4)));
                c2 = _mm256_add_pd(c2, _mm256_mul_pd(av, _mm256_loadu_pd(brow + 8)));
                c3 = _mm256_add_pd(c3, _mm256_mul_pd(av, _mm256_loadu_pd(brow + 12)));
            }
            _mm256_storeu_pd(crow + j, c0);
            _mm256_storeu_pd(crow + j + 4, c1);
            _mm256_storeu_pd(crow + j + 8, c2);
            _mm256_storeu_pd(crow + j + 12, c3);
        }
        for (; j + 4 <= n; j += 4) {
            __m256d c0 = _mm256_loadu_pd(crow + j);
            for (std::size_t i = 0; i < m; ++i) {
                c0 = _mm256_add_pd(c0, _mm256_mul_pd(_mm256_set1_pd(a[i * k + p]), _mm256_loadu_pd(b + i * n + j)));
            }
            _mm256_storeu_pd(crow + j, c0);
        }
        for (; j < n; ++j) {
            double s = crow[j];
            for (std::size_t i = 0; i < m; ++i) s = s + a[i * k + p] * b[i * n + j];
            crow[j] = s;
        }
    }
}

}  // namespace soup::kernels::avx2
