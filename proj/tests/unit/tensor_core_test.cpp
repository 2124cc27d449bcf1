#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <functional>

#include "soupkit/autodiff.hpp"
#include "soupkit/gradcheck.hpp"
#include "soupkit/optim.hpp"
#include "soupkit/rng.hpp"

namespace {

using soup::Tensor;
using soup::ad::Var;

template <class T>
Tensor<T> random_tensor(soup::Shape shape, soup::Rng& rng, double scale = 1.0) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(scale * rng.normal());
    return t;
}

class FiniteChecks : public ::testing::Test {
protected:
    void SetUp() override { soup::ad::set_finite_checks(true); }
    void TearDown() override { soup::ad::set_finite_checks(false); }
};

using TensorCore = FiniteChecks;

TEST_F(TensorCore, TensorRejectsBadShapes) {
    EXPECT_THROW(Tensor<float>({2, 0}), soup::DimensionError);
    EXPECT_THROW(Tensor<float>({2, 2}, {1.0f, 2.0f, 3.0f}), soup::DimensionError);
}

TEST_F(TensorCore, MatmulIdentityReturnsInput) {
    soup::Rng rng(1);
    auto a = Var<float>::constant(random_tensor<float>({2, 2}, rng));
    auto eye = Var<float>::constant(Tensor<float>({2, 2}, {1, 0, 0, 1}));
    EXPECT_EQ(soup::ad::matmul(eye, a).value(), a.value());
}

TEST_F(TensorCore, MatmulHandArithmetic) {
    auto a = Var<float>::constant(Tensor<float>({2, 2}, {1, 2, 3, 4}));
    auto b = Var<float>::constant(Tensor<float>({2, 1}, {1, 1}));
    const auto c = soup::ad::matmul(a, b).value();
    EXPECT_EQ(c.shape(), (soup::Shape{2, 1}));
    EXPECT_FLOAT_EQ(c[0], 3.0f);
    EXPECT_FLOAT_EQ(c[1], 7.0f);
}

TEST_F(TensorCore, MatmulShapeMismatchIsDimensionError) {
    auto a = Var<float>::constant(Tensor<float>({2, 3}));
    auto b = Var<float>::constant(Tensor<float>({2, 3}));
    EXPECT_THROW(soup::ad::matmul(a, b), soup::DimensionError);
}

TEST_F(TensorCore, MatmulGradientIsRowSumOfB) {
    soup::Rng rng(2);
    auto a = Var<double>::leaf(random_tensor<double>({3, 4}, rng), true);
    auto b = Var<double>::leaf(random_tensor<double>({4, 5}, rng), true);
    auto loss = soup::ad::sum(soup::ad::matmul(a, b));
    loss.backward();
    // d sum(AB) / dA[i,k] = sum_j B[k,j]
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t k = 0; k < 4; ++k) {
            double expect = 0.0;
            for (std::size_t j = 0; j < 5; ++j) expect += b.value()(k, j);
            EXPECT_NEAR(a.grad()(i, k), expect, 1e-12);
        }
    }
    const auto check = soup::finite_diff_check<double>(
        [&] { return soup::ad::sum(soup::ad::matmul(a, b)); }, {a, b}, {.step = 1e-5});
    EXPECT_LT(check.max_rel_error, 1e-8);
}

TEST_F(TensorCore, SoftmaxExamples) {
    auto zeros = Var<float>::constant(Tensor<float>({1, 4}));
    const auto uniform = soup::ad::softmax_rows(zeros).value();
    for (float v : uniform.data()) EXPECT_NEAR(v, 0.25f, 1e-7);

    auto x = Var<double>::constant(Tensor<double>({1, 2}, {std::log(1.0), std::log(3.0)}));
    const auto p = soup::ad::softmax_rows(x).value();
    EXPECT_NEAR(p[0], 0.25, 1e-12);
    EXPECT_NEAR(p[1], 0.75, 1e-12);
}

TEST_F(TensorCore, SoftmaxRowsSumToOneAndAreShiftInvariant) {
    soup::Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t rows = 1 + rng.below(6), cols = 1 + rng.below(40);
        const double spread = 0.1 + 20.0 * rng.uniform();
        auto base = random_tensor<float>({rows, cols}, rng, spread);
        const auto p = soup::ad::softmax_rows(Var<float>::constant(base)).value();
        for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (float v : p.row(r)) {
                EXPECT_GE(v, 0.0f);
                s += v;
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
        auto shifted = base;
        const float c = static_cast<float>(10.0 * rng.normal());
        for (auto& v : shifted.data()) v += c;
        const auto q = soup::ad::softmax_rows(Var<float>::constant(shifted)).value();
        for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-6);
    }
}

TEST_F(TensorCore, SoftmaxRejectsNonFinite) {
    auto x = Var<float>::constant(Tensor<float>({1, 2}, {1.0f, std::nanf("")}));
    EXPECT_THROW(soup::ad::softmax_rows(x), soup::NumericError);
}

TEST_F(TensorCore, CrossEntropyUniformAndConfident) {
    const std::vector<std::uint32_t> targets{3, 7};
    auto uniform = Var<float>::constant(Tensor<float>({2, 10}));
    EXPECT_NEAR(soup::ad::cross_entropy_mean(uniform, targets).value()[0], std::log(10.0), 1e-6);

    Tensor<float> confident({2, 10});
    confident(0, 3) = 20.0f;
    confident(1, 7) = 20.0f;
    const float loss = soup::ad::cross_entropy_mean(Var<float>::constant(confident), targets).value()[0];
    EXPECT_GE(loss, 0.0f);
    EXPECT_LT(loss, 1e-6f);
}

TEST_F(TensorCore, CrossEntropyMatchesLogSumExpReference) {
    soup::Rng rng(4);
    const auto logits = random_tensor<float>({3, 5}, rng, 2.0);
    const std::vector<std::uint32_t> targets{0, 4, 2};
    long double expect = 0.0L;
    for (std::size_t r = 0; r < 3; ++r) {
        long double s = 0.0L;
        for (std::size_t c = 0; c < 5; ++c) s += std::exp(static_cast<long double>(logits(r, c)));
        expect += std::log(s) - static_cast<long double>(logits(r, targets[r]));
    }
    expect /= 3.0L;
    const float got = soup::ad::cross_entropy_mean(Var<float>::constant(logits), targets).value()[0];
    EXPECT_NEAR(got, static_cast<double>(expect), 1e-5);
}

TEST_F(TensorCore, CrossEntropyTargetOutOfRange) {
    auto x = Var<float>::constant(Tensor<float>({1, 4}));
    const std::vector<std::uint32_t> targets{4};
    EXPECT_THROW(soup::ad::cross_entropy_mean(x, targets), soup::IndexError);
}

TEST_F(TensorCore, CrossEntropyIsNonNegative) {
    soup::Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t rows = 1 + rng.below(5), cols = 2 + rng.below(30);
        auto logits = random_tensor<float>({rows, cols}, rng, 5.0);
        std::vector<std::uint32_t> targets(rows);
        for (auto& t : targets) t = static_cast<std::uint32_t>(rng.below(cols));
        EXPECT_GE(soup::ad::cross_entropy_mean(Var<float>::constant(logits), targets).value()[0], 0.0f);
    }
}

TEST_F(TensorCore, AdamZeroGradientLeavesParametersUnchanged) {
    Tensor<float> p({3}, {1.0f, -2.0f, 0.5f});
    const Tensor<float> before = p;
    Tensor<float> g({3});
    soup::AdamState<float> state({.lr = 0.1}, {&p});
    soup::adam_step<float>({&p}, {&g}, state);
    EXPECT_EQ(p, before);
    EXPECT_EQ(state.step, 1u);
}

TEST_F(TensorCore, AdamFirstStepMovesByLearningRate) {
    Tensor<float> p = Tensor<float>::scalar(1.0f);
    Tensor<float> g = Tensor<float>::scalar(1.0f);
    soup::AdamState<float> state({.lr = 0.1}, {&p});
    soup::adam_step<float>({&p}, {&g}, state);
    // m_hat = v_hat = 1, so the step is lr / (1 + eps).
    EXPECT_NEAR(1.0f - p[0], 0.1f, 1e-6);
}

TEST_F(TensorCore, AdamShapeMismatch) {
    Tensor<float> p({3});
    Tensor<float> g({2});
    soup::AdamState<float> state({}, {&p});
    EXPECT_THROW(soup::adam_step<float>({&p}, {&g}, state), soup::DimensionError);
}

TEST_F(TensorCore, AdamIsDeterministicOverHundredSteps) {
    auto run = [] {
        soup::Rng rng(99);
        auto w = Var<float>::leaf(random_tensor<float>({4, 3}, rng), true);
        auto x = Var<float>::constant(random_tensor<float>({5, 4}, rng));
        soup::Adam<float> opt({w}, {.lr = 0.01});
        const std::vector<std::uint32_t> targets{0, 1, 2, 1, 0};
        for (int step = 0; step < 100; ++step) {
            opt.zero_grad();
            soup::ad::cross_entropy_mean(soup::ad::matmul(x, w), targets).backward();
            opt.step();
        }
        return w.value();
    };
    const auto a = run();
    const auto b = run();
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)), 0);
}

TEST_F(TensorCore, FiniteDiffSquare) {
    auto x = Var<double>::leaf(Tensor<double>::scalar(3.0), true);
    const auto r = soup::finite_diff_check<double>([&] { return soup::ad::mul(x, x); }, {x}, {.step = 1e-4});
    EXPECT_NEAR(r.worst_analytic, 6.0, 1e-12);
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST_F(TensorCore, FiniteDiffQuadraticFormAgainstAnalyticGradient) {
    soup::Rng rng(6);
    const std::size_t n = 6;
    auto a = Var<float>::constant(random_tensor<float>({n, n}, rng));
    auto x = Var<float>::leaf(random_tensor<float>({n, 1}, rng), true);
    // x^T A x written as sum(x .* (A x)).
    auto quad = [&] {
        return soup::ad::sum(soup::ad::mul(x, soup::ad::matmul(a, x)));
    };
    auto loss = quad();
    loss.backward();
    for (std::size_t i = 0; i < n; ++i) {
        double expect = 0.0;  // ((A + A^T) x)_i
        for (std::size_t j = 0; j < n; ++j) expect += (a.value()(i, j) + a.value()(j, i)) * x.value()[j];
        EXPECT_NEAR(x.grad()[i], expect, 1e-4);
    }
    x.clear_grad();
    const auto r = soup::finite_diff_check<float>(quad, {x}, {.step = 1e-3});
    EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST_F(TensorCore, FiniteDiffRejectsNonFiniteLoss) {
    auto x = Var<double>::leaf(Tensor<double>::scalar(1.0), true);
    soup::ad::set_finite_checks(false);
    auto inf = Var<double>::constant(Tensor<double>::scalar(std::numeric_limits<double>::infinity()));
    EXPECT_THROW(soup::finite_diff_check<double>([&] { return soup::ad::mul(x, inf); }, {x}), soup::NumericError);
}

TEST_F(TensorCore, FiniteChecksCatchOverflow) {
    auto x = Var<float>::constant(Tensor<float>::scalar(1e30f));
    EXPECT_THROW(soup::ad::mul(x, x), soup::NumericError);
}

// Random composite graphs up to five ops deep; gradients of every leaf are
// compared with central differences in both precisions.
template <class T>
double composite_graph_error(std::uint64_t seed, double step, int order) {
    soup::Rng rng(seed);
    // Width >= 4 keeps layer_norm away from its sign-function regime.
    const std::size_t rows = 2 + rng.below(3), cols = 4 + rng.below(4);
    auto x = Var<T>::leaf(random_tensor<T>({rows, cols}, rng), true);
    auto w = Var<T>::leaf(random_tensor<T>({cols, cols}, rng, 0.7), true);
    auto gain = Var<T>::leaf(random_tensor<T>({cols}, rng), true);
    auto bias = Var<T>::leaf(random_tensor<T>({cols}, rng), true);
    const std::size_t depth = 1 + rng.below(5);
    std::vector<int> ops(depth);
    for (auto& o : ops) o = static_cast<int>(rng.below(8));
    std::vector<std::uint32_t> targets(rows);
    for (auto& t : targets) t = static_cast<std::uint32_t>(rng.below(cols));
    const bool use_ce = rng.below(2) == 0;

    auto build = [&]() {
        Var<T> h = x;
        for (int o : ops) {
            switch (o) {
                case 0: h = soup::ad::matmul(h, w); break;
                case 1: h = soup::ad::tanh(h); break;
                case 2: h = soup::ad::gelu(h); break;
                case 3: h = soup::ad::layer_norm(h, gain, bias); break;
                case 4: h = soup::ad::softmax_rows(h); break;
                case 5: h = soup::ad::add_bias(h, bias); break;
                case 6: h = soup::ad::mul(h, h); break;
                default: h = soup::ad::add(soup::ad::scale(h, T(0.5)), x); break;
            }
        }
        return use_ce ? soup::ad::cross_entropy_mean(h, targets) : soup::ad::sum(h);
    };
    return soup::finite_diff_check<T>(build, {x, w, gain, bias}, {.step = step, .floor_scales_with_loss = true, .order = order})
        .max_rel_error;
}

TEST_F(TensorCore, CompositeGraphGradientsMatchFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        EXPECT_LT(composite_graph_error<float>(seed, 2e-2, 4), 1e-2) << "float seed " << seed;
        EXPECT_LT(composite_graph_error<double>(seed, 1e-5, 2), 1e-6) << "double seed " << seed;
    }
}

TEST_F(TensorCore, AttentionAndEmbeddingGradients) {
    soup::Rng rng(8);
    const std::size_t batch = 2, seq = 3, heads = 2, d = 4, vocab = 5;
    auto table = Var<double>::leaf(random_tensor<double>({vocab, d}, rng), true);
    auto wqkv = Var<double>::leaf(random_tensor<double>({d, 3 * d}, rng, 0.5), true);
    const std::vector<std::uint32_t> ids{0, 3, 4, 1, 1, 2};
    const std::vector<std::uint32_t> targets{1, 2, 3, 0, 1, 2};
    auto build = [&] {
        auto h = soup::ad::embedding(table, ids);
        auto att = soup::ad::causal_attention(soup::ad::matmul(h, wqkv), batch, seq, heads);
        return soup::ad::cross_entropy_mean(att, targets);
    };
    const auto r = soup::finite_diff_check<double>(build, {table, wqkv}, {.step = 1e-6});
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST_F(TensorCore, AttentionIsCausal) {
    soup::Rng rng(9);
    auto qkv = random_tensor<float>({4, 6}, rng);
    const auto a = soup::ad::causal_attention(Var<float>::constant(qkv), 1, 4, 1).value();
    for (std::size_t c = 0; c < 6; ++c) qkv(3, c) += 1.0f;
    const auto b = soup::ad::causal_attention(Var<float>::constant(qkv), 1, 4, 1).value();
    for (std::size_t t = 0; t < 3; ++t) {
        for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(a(t, c), b(t, c));
    }
}

TEST_F(TensorCore, OpsAreBitwiseDeterministic) {
    soup::Rng rng(10);
    const auto x = random_tensor<float>({7, 9}, rng);
    const auto w = random_tensor<float>({9, 11}, rng);
    auto run = [&] {
        auto h = soup::ad::matmul(Var<float>::constant(x), Var<float>::constant(w));
        return soup::ad::softmax_rows(soup::ad::gelu(h)).value();
    };
    const auto a = run();
    const auto b = run();
    EXPECT_EQ(std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)), 0);
}

}  // namespace
