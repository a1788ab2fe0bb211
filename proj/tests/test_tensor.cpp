#include <gtest/gtest.h>

#include <cmath>

#include "star/rng.hpp"
#include "star/tensor.hpp"

using star::Tensor;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, star::Rng& rng, double lo = -2.0, double hi = 2.0) {
    Tensor t({r, c});
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

Tensor random_distribution(std::size_t r, std::size_t c, star::Rng& rng) {
    return star::softmax_rows(random_matrix(r, c, rng, -3.0, 3.0));
}

}  // namespace

TEST(Tensor, ConstructionChecksLength) {
    EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), star::DimensionError);
    EXPECT_THROW(Tensor(star::Shape{}), star::DimensionError);
    EXPECT_THROW(Tensor({1, 1, 1, 1}), star::DimensionError);
    EXPECT_NO_THROW(Tensor({2, 3, 4}));
}

TEST(Tensor, ExternalInputRejectsNonFinite) {
    EXPECT_THROW(Tensor::from_external({2}, {1.0, NAN}), star::DimensionError);
    EXPECT_THROW(Tensor::from_external({1}, {INFINITY}), star::DimensionError);
    EXPECT_NO_THROW(Tensor::from_external({2}, {1.0, -3.0}));
}

TEST(Matmul, Examples) {
    const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    EXPECT_EQ(star::matmul(a, Tensor::identity(2)), a);
    EXPECT_EQ(star::matmul(a, Tensor::matrix({{1}, {1}})), Tensor::matrix({{3}, {7}}));
    star::Rng rng(3);
    EXPECT_EQ(star::matmul(Tensor({2, 3}), random_matrix(3, 4, rng)), Tensor({2, 4}));
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
    try {
        star::matmul(Tensor({2, 3}), Tensor({2, 3}));
        FAIL() << "expected DimensionError";
    } catch (const star::DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3] x [2x3]"), std::string::npos) << msg;
    }
}

TEST(Matmul, MatchesTripleLoopAndIsReproducible) {
    star::Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor a = random_matrix(1 + trial % 5, 1 + trial % 7, rng);
        const Tensor b = random_matrix(a.cols(), 1 + trial % 4, rng);
        const Tensor c = star::matmul(a, b);
        for (std::size_t i = 0; i < c.rows(); ++i)
            for (std::size_t j = 0; j < c.cols(); ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
                EXPECT_NEAR(c(i, j), s, 1e-12);
            }
        EXPECT_EQ(star::matmul(a, b), c);
    }
}

TEST(SoftmaxRows, Examples) {
    const Tensor y = star::softmax_rows(Tensor::matrix({{0, 0}, {std::log(1.0), std::log(3.0)}, {1000, 0}}));
    EXPECT_DOUBLE_EQ(y(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(y(0, 1), 0.5);
    EXPECT_NEAR(y(1, 0), 0.25, 1e-15);
    EXPECT_NEAR(y(1, 1), 0.75, 1e-15);
    EXPECT_NEAR(y(2, 0), 1.0, 1e-15);
    EXPECT_NEAR(y(2, 1), 0.0, 1e-15);
    EXPECT_TRUE(y.all_finite());
}

TEST(SoftmaxRows, RowsSumToOneAndShiftInvariant) {
    star::Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor x = random_matrix(4, 6, rng, -20.0, 20.0);
        const Tensor y = star::softmax_rows(x);
        for (std::size_t i = 0; i < 4; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < 6; ++j) {
                EXPECT_GE(y(i, j), 0.0);
                s += y(i, j);
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
        const double shift = rng.uniform(-50.0, 50.0);
        for (std::size_t j = 0; j < 6; ++j) x(1, j) += shift;
        const Tensor ys = star::softmax_rows(x);
        for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(ys(1, j), y(1, j), 1e-12);
    }
}

TEST(KlDivRows, Examples) {
    const Tensor p = Tensor::matrix({{0.3, 0.7}});
    EXPECT_EQ(star::kl_div_rows(p, p).item(), 0.0);
    EXPECT_NEAR(star::kl_div_rows(Tensor::matrix({{1, 0}}), Tensor::matrix({{0.5, 0.5}})).item(), std::log(2.0),
                1e-15);
    const double expected = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
    EXPECT_NEAR(star::kl_div_rows(Tensor::matrix({{0.5, 0.5}}), Tensor::matrix({{0.25, 0.75}})).item(), expected,
                1e-15);
    EXPECT_NEAR(expected, 0.143841, 1e-6);
}

TEST(KlDivRows, ClampsZeroQ) {
    const double v = star::kl_div_rows(Tensor::matrix({{0.5, 0.5}}), Tensor::matrix({{1.0, 0.0}})).item();
    EXPECT_NEAR(v, 0.5 * std::log(0.5) + 0.5 * std::log(0.5 / 1e-12), 1e-9);
}

TEST(KlDivRows, RejectsNonDistributionWithRowIndex) {
    try {
        star::kl_div_rows(Tensor::matrix({{0.5, 0.5}, {0.5, 0.6}}), Tensor::matrix({{0.5, 0.5}, {0.5, 0.5}}));
        FAIL() << "expected DistributionError";
    } catch (const star::DistributionError& e) {
        EXPECT_EQ(e.row(), 1u);
    }
    EXPECT_THROW(star::kl_div_rows(Tensor::matrix({{1.5, -0.5}}), Tensor::matrix({{0.5, 0.5}})),
                 star::DistributionError);
}

TEST(KlDivRows, NonNegativeOnRandomDistributions) {
    star::Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const Tensor p = random_distribution(3, 5, rng);
        const Tensor q = random_distribution(3, 5, rng);
        EXPECT_GE(star::kl_div_rows(p, q).item(), -1e-9);
        EXPECT_EQ(star::kl_div_rows(p, p).item(), 0.0);
    }
}

TEST(FrobeniusSqDiff, Examples) {
    const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    EXPECT_EQ(star::frobenius_sq_diff(a, a).item(), 0.0);
    EXPECT_EQ(star::frobenius_sq_diff(Tensor::identity(2), Tensor({2, 2})).item(), 2.0);
    EXPECT_EQ(star::frobenius_sq_diff(Tensor::matrix({{3}}), Tensor::matrix({{1}})).item(), 4.0);
    EXPECT_THROW(star::frobenius_sq_diff(Tensor({2, 2}), Tensor({2, 3})), star::DimensionError);
}

TEST(FrobeniusSqDiff, Symmetric) {
    star::Rng rng(2);
    const Tensor a = random_matrix(3, 4, rng), b = random_matrix(3, 4, rng);
    EXPECT_EQ(star::frobenius_sq_diff(a, b).item(), star::frobenius_sq_diff(b, a).item());
    EXPECT_GT(star::frobenius_sq_diff(a, b).item(), 0.0);
}

TEST(LayerNorm, Examples) {
    const Tensor ones = Tensor::filled({2}, 1.0), zeros({2});
    const Tensor c = star::layer_norm(Tensor::matrix({{3, -1}, {3, -1}}), ones, zeros);
    for (double v : c.data()) EXPECT_EQ(v, 0.0);

    const Tensor y = star::layer_norm(Tensor::matrix({{1}, {-1}}), ones, zeros);
    const double expected = 1.0 / std::sqrt(1.0 + 1e-5);
    EXPECT_NEAR(y(0, 0), expected, 1e-15);
    EXPECT_NEAR(y(1, 0), -expected, 1e-15);
    EXPECT_LT(y(0, 0), 1.0);

    star::Rng rng(9);
    const Tensor bias = Tensor::vector({0.25, -2.0, 7.0});
    const Tensor z = star::layer_norm(random_matrix(3, 5, rng), Tensor({3}), bias);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t t = 0; t < 5; ++t) EXPECT_EQ(z(i, t), bias[i]);
}

TEST(LayerNorm, ColumnsNormalized) {
    star::Rng rng(13);
    const Tensor x = random_matrix(6, 4, rng, -5.0, 5.0);
    const Tensor y = star::layer_norm(x, Tensor::filled({6}, 1.0), Tensor({6}));
    for (std::size_t t = 0; t < 4; ++t) {
        double mean = 0.0, var = 0.0;
        for (std::size_t i = 0; i < 6; ++i) mean += y(i, t);
        mean /= 6.0;
        for (std::size_t i = 0; i < 6; ++i) var += (y(i, t) - mean) * (y(i, t) - mean);
        var /= 6.0;
        EXPECT_NEAR(mean, 0.0, 1e-12);
        EXPECT_NEAR(var, 1.0, 1e-4);
    }
}

TEST(Gelu, TanhApproximationValues) {
    const Tensor y = star::gelu(Tensor::vector({0.0, 1.0, -1.0}));
    EXPECT_EQ(y[0], 0.0);
    const double c = 0.7978845608, k = 0.044715;
    EXPECT_NEAR(y[1], 0.5 * (1.0 + std::tanh(c * (1.0 + k))), 1e-15);
    EXPECT_NEAR(y[2], -0.5 * (1.0 + std::tanh(-c * (1.0 + k))), 1e-15);
}

TEST(SliceConcat, Inverse) {
    star::Rng rng(1);
    const Tensor x = random_matrix(5, 3, rng);
    const Tensor parts[] = {star::slice_rows(x, 0, 2), star::slice_rows(x, 2, 3)};
    EXPECT_EQ(star::concat_rows(parts), x);
    EXPECT_THROW(star::slice_rows(x, 4, 2), star::DimensionError);
}
