#include <gtest/gtest.h>

#include <cstring>
#include <vector>

#include "soupkit/error.hpp"
#include "soupkit/kernels.hpp"
#include "soupkit/rng.hpp"

namespace {

using soup::kernels::Backend;

template <class T>
std::vector<T> random_vec(std::size_t n, soup::Rng& rng) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.normal());
    return v;
}

template <class T>
bool bitwise_equal(const std::vector<T>& a, const std::vector<T>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

class BackendGuard {
public:
    BackendGuard() : saved_(soup::kernels::active_backend()) {}
    ~BackendGuard() { soup::kernels::set_backend(saved_); }

private:
    Backend saved_;
};

template <class T>
void check_gemm_equivalence() {
    if (!soup::kernels::avx2_available()) GTEST_SKIP() << "AVX2 not available";
    soup::Rng rng(7);
    const std::size_t dims[][3] = {{1, 1, 1}, {3, 5, 7}, {17, 33, 65}, {64, 48, 144}, {5, 128, 31}, {2, 9, 40}};
    for (const auto& d : dims) {
        const std::size_t m = d[0], k = d[1], n = d[2];
        const auto a = random_vec<T>(m * k, rng);
        const auto b = random_vec<T>(k * n, rng);
        const auto c0 = random_vec<T>(m * n, rng);
        for (bool acc : {false, true}) {
            auto cs = c0;
            auto cv = c0;
            soup::kernels::scalar::gemm_nn(a.data(), b.data(), cs.data(), m, k, n, acc);
            soup::kernels::avx2::gemm_nn(a.data(), b.data(), cv.data(), m, k, n, acc);
            EXPECT_TRUE(bitwise_equal(cs, cv)) << "gemm_nn m=" << m << " k=" << k << " n=" << n;
        }
        const auto bt = random_vec<T>(m * n, rng);
        auto ts = random_vec<T>(k * n, rng);
        auto tv = ts;
        soup::kernels::scalar::gemm_tn(a.data(), bt.data(), ts.data(), m, k, n);
        soup::kernels::avx2::gemm_tn(a.data(), bt.data(), tv.data(), m, k, n);
        EXPECT_TRUE(bitwise_equal(ts, tv)) << "gemm_tn m=" << m << " k=" << k << " n=" << n;
    }
}

TEST(Kernels, GemmScalarAndAvx2AgreeBitwiseFloat) { check_gemm_equivalence<float>(); }
TEST(Kernels, GemmScalarAndAvx2AgreeBitwiseDouble) { check_gemm_equivalence<double>(); }

TEST(Kernels, ElementwiseScalarAndAvx2AgreeBitwise) {
    if (!soup::kernels::avx2_available()) GTEST_SKIP() << "AVX2 not available";
    soup::Rng rng(11);
    for (std::size_t len : {1u, 7u, 8u, 9u, 31u, 1000u}) {
        const auto x = random_vec<float>(len, rng);
        auto ys = random_vec<float>(len, rng);
        auto yv = ys;
        soup::kernels::scalar::axpy(0.37f, x.data(), ys.data(), len);
        soup::kernels::avx2::axpy(0.37f, x.data(), yv.data(), len);
        EXPECT_TRUE(bitwise_equal(ys, yv));
        soup::kernels::scalar::add_inplace(x.data(), ys.data(), len);
        soup::kernels::avx2::add_inplace(x.data(), yv.data(), len);
        EXPECT_TRUE(bitwise_equal(ys, yv));

        const auto xd = random_vec<double>(len, rng);
        auto ds = random_vec<double>(len, rng);
        auto dv = ds;
        soup::kernels::scalar::axpy(-1.25, xd.data(), ds.data(), len);
        soup::kernels::avx2::axpy(-1.25, xd.data(), dv.data(), len);
        EXPECT_TRUE(bitwise_equal(ds, dv));
    }
}

TEST(Kernels, DispatchMatchesReferenceOnBothBackends) {
    BackendGuard guard;
    soup::Rng rng(3);
    const std::size_t m = 9, k = 13, n = 40;
    const auto a = random_vec<float>(m * k, rng);
    const auto b = random_vec<float>(k * n, rng);
    std::vector<float> ref(m * n);
    soup::kernels::scalar::gemm_nn(a.data(), b.data(), ref.data(), m, k, n, false);
    std::vector<Backend> backends{Backend::kScalar};
    if (soup::kernels::avx2_available()) backends.push_back(Backend::kAvx2);
    for (Backend be : backends) {
        soup::kernels::set_backend(be);
        std::vector<float> out(m * n);
        soup::kernels::gemm_nn<float>(a, b, out, m, k, n, false);
        EXPECT_TRUE(bitwise_equal(ref, out)) << soup::kernels::backend_name(be);
    }
}

TEST(Kernels, FlopCounterCountsMultiplyAdds) {
    std::vector<float> a(6, 1.0f), b(12, 1.0f), c(8);
    const auto before = soup::kernels::thread_flops();
    soup::kernels::gemm_nn<float>(a, b, c, 2, 3, 4, false);
    EXPECT_EQ(soup::kernels::thread_flops() - before, 2u * 2 * 3 * 4);
}

TEST(Kernels, UndersizedBufferIsRejected) {
    std::vector<float> a(5), b(12), c(8);
    EXPECT_THROW(soup::kernels::gemm_nn<float>(a, b, c, 2, 3, 4, false), soup::DimensionError);
}

}  // namespace
