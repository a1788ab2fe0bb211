#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "star/oracle.hpp"

using star::Tensor;
namespace oracle = star::oracle;

namespace {

// Determinant by Gaussian elimination with partial pivoting (test-only).
double determinant(Tensor a) {
    const std::size_t n = a.rows();
    double det = 1.0;
    for (std::size_t c = 0; c < n; ++c) {
        std::size_t piv = c;
        for (std::size_t r = c + 1; r < n; ++r)
            if (std::abs(a(r, c)) > std::abs(a(piv, c))) piv = r;
        if (a(piv, c) == 0.0) return 0.0;
        if (piv != c) {
            for (std::size_t k = 0; k < n; ++k) std::swap(a(c, k), a(piv, k));
            det = -det;
        }
        det *= a(c, c);
        for (std::size_t r = c + 1; r < n; ++r) {
            const double f = a(r, c) / a(c, c);
            for (std::size_t k = c; k < n; ++k) a(r, k) -= f * a(c, k);
        }
    }
    return det;
}

}  // namespace

TEST(NaiveTgm, Examples) {
    EXPECT_EQ(oracle::naive_tgm(Tensor::matrix({{1, 2}, {3, 4}})), Tensor::matrix({{10, 14}, {14, 20}}));
    EXPECT_EQ(oracle::naive_tgm(Tensor({3, 2})), Tensor({2, 2}));
    EXPECT_EQ(oracle::naive_channel_gram(Tensor::matrix({{1, 2}, {3, 4}})), Tensor::matrix({{5, 11}, {11, 25}}));
}

TEST(NaiveIntraTgm, ReducesToTgmOnSelfPairing) {
    star::Rng rng(1);
    Tensor f({4, 3});
    for (double& v : f.data()) v = rng.uniform(-2.0, 2.0);
    EXPECT_EQ(oracle::naive_intra_tgm(f, f), oracle::naive_tgm(f));
}

TEST(NaiveAvgAttnLoss, ZeroOnIdenticalTraces) {
    star::ForwardTrace t;
    t.seq_len = 2;
    t.features = {Tensor({2, 2}), Tensor({2, 2})};
    t.attn_maps = {{Tensor::matrix({{0.3, 0.7}, {0.9, 0.1}}), Tensor::matrix({{0.5, 0.5}, {0.2, 0.8}})}};
    EXPECT_EQ(oracle::naive_avg_attn_loss(t, t), 0.0);
}

TEST(NaiveAttentionMap, MatchesFastPath) {
    star::Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t d = rng.uniform_int(1, 8), n = rng.uniform_int(1, 6);
        Tensor q({d, n}), k({d, n});
        for (double& v : q.data()) v = rng.normal();
        for (double& v : k.data()) v = rng.normal();
        const Tensor fast = star::attention_map(q, k), naive = oracle::naive_attention_map(q, k);
        for (std::size_t i = 0; i < fast.size(); ++i) EXPECT_NEAR(fast[i], naive[i], 1e-12);
    }
}

TEST(NumericGradient, QuadraticConstantAndRestoration) {
    star::Rng rng(2);
    Tensor x({3, 2});
    for (double& v : x.data()) v = rng.uniform(-2.0, 2.0);
    const Tensor before = x;
    const Tensor g = oracle::numeric_gradient(
        [](const Tensor& t) {
            double s = 0.0;
            for (double v : t.data()) s += 0.5 * v * v;
            return s;
        },
        x);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(g[i], x[i], 1e-6);
    EXPECT_EQ(oracle::numeric_gradient([](const Tensor&) { return 3.0; }, x), Tensor(x.shape()));

    Tensor* ptr = &x;
    oracle::numeric_gradient([&] { return x[0] * x[1]; }, std::span<Tensor* const>(&ptr, 1));
    EXPECT_EQ(x, before);
}

TEST(CompareGradients, RelativeAndAbsoluteBands) {
    EXPECT_TRUE(oracle::compare_gradients(Tensor::vector({1.0}), Tensor::vector({1.00005})).ok());
    EXPECT_FALSE(oracle::compare_gradients(Tensor::vector({1.0}), Tensor::vector({1.001})).ok());
    EXPECT_TRUE(oracle::compare_gradients(Tensor::vector({0.0}), Tensor::vector({5e-8})).ok());
    EXPECT_FALSE(oracle::compare_gradients(Tensor::vector({0.0}), Tensor::vector({5e-6})).ok());
}

TEST(RandomOrthogonal, Properties) {
    const Tensor one = oracle::random_orthogonal(1, 3);
    EXPECT_EQ(std::abs(one[0]), 1.0);
    for (std::size_t d = 1; d <= 32; ++d) {
        const Tensor q = oracle::random_orthogonal(d, 100 + d);
        double worst = 0.0;
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < d; ++k) s += q(k, i) * q(k, j);
                worst = std::max(worst, std::abs(s - (i == j ? 1.0 : 0.0)));
            }
        EXPECT_LT(worst, 1e-10) << "d=" << d;
        EXPECT_NEAR(std::abs(determinant(q)), 1.0, 1e-8) << "d=" << d;
    }
    EXPECT_EQ(oracle::random_orthogonal(5, 9), oracle::random_orthogonal(5, 9));
}

TEST(Oracle, ComparisonsAreFast) {
    const auto start = std::chrono::steady_clock::now();
    star::Rng rng(4);
    for (int i = 0; i < 200; ++i) {
        Tensor f({8, 6});
        for (double& v : f.data()) v = rng.uniform(-2.0, 2.0);
        oracle::naive_tgm(f);
        oracle::naive_intra_tgm(f, f);
        oracle::naive_channel_gram(f);
    }
    EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 5.0);
}
