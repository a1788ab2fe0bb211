#pragma once

// Slow, literal reference implementations used to check the fast paths.
// Nothing here calls the kernels in tensor.hpp or starloss.hpp: every sum is
// written out index by index, so agreement is evidence rather than tautology.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "star/model.hpp"
#include "star/rng.hpp"
#include "star/tensor.hpp"

namespace star::oracle {

/// G_ij = sum_k F_ki F_kj.
inline Tensor naive_tgm(const Tensor& f) {
    const std::size_t d = f.rows(), n = f.cols();
    Tensor g({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) s += f.data()[k * n + i] * f.data()[k * n + j];
            g.data()[i * n + j] = s;
        }
    return g;
}

/// G_ij = sum_k P_ki C_kj.
inline Tensor naive_intra_tgm(const Tensor& prev, const Tensor& cur) {
    if (prev.shape() != cur.shape()) throw DimensionError("naive_intra_tgm: shape mismatch");
    const std::size_t d = cur.rows(), n = cur.cols();
    Tensor g({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) s += prev.data()[k * n + i] * cur.data()[k * n + j];
            g.data()[i * n + j] = s;
        }
    return g;
}

/// G_ij = sum_k F_ik F_jk.
inline Tensor naive_channel_gram(const Tensor& f) {
    const std::size_t d = f.rows(), n = f.cols();
    Tensor g({d, d});
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < n; ++k) s += f.data()[i * n + k] * f.data()[j * n + k];
            g.data()[i * d + j] = s;
        }
    return g;
}

namespace detail {

inline double sq_diff(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
    return s;
}

}  // namespace detail

/// sum_l sum_t KL(mean_h A^T_{h,t} || mean_h A^S_{h,t}), no normalization.
inline double naive_avg_attn_loss(const ForwardTrace& teacher, const ForwardTrace& student) {
    const std::size_t L = teacher.attn_maps.size();
    const std::size_t N = teacher.seq_len;
    double loss = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
        const auto& tm = teacher.attn_maps[l];
        const auto& sm = student.attn_maps[l];
        for (std::size_t t = 0; t < N; ++t) {
            double kl = 0.0;
            for (std::size_t j = 0; j < N; ++j) {
                double p = 0.0, q = 0.0;
                for (const Tensor& a : tm) p += a.data()[t * N + j];
                for (const Tensor& a : sm) q += a.data()[t * N + j];
                p /= static_cast<double>(tm.size());
                q /= static_cast<double>(sm.size());
                if (p > 0.0) kl += p * std::log(p / std::max(q, 1e-12));
            }
            loss += kl;
        }
    }
    return loss;
}

/// sum_{l=0..L} ||G^{l,T} - G^{l,S}||^2 with raw Gram matrices.
inline double naive_layer_wise_loss(const ForwardTrace& teacher, const ForwardTrace& student) {
    double loss = 0.0;
    for (std::size_t l = 0; l < teacher.features.size(); ++l)
        loss += detail::sq_diff(naive_tgm(teacher.features[l]), naive_tgm(student.features[l]));
    return loss;
}

/// sum_{l=1..L} ||Gx^{l,T} - Gx^{l,S}||^2 with raw cross Gram matrices.
inline double naive_intra_layer_loss(const ForwardTrace& teacher, const ForwardTrace& student) {
    double loss = 0.0;
    for (std::size_t l = 1; l < teacher.features.size(); ++l)
        loss += detail::sq_diff(naive_intra_tgm(teacher.features[l - 1], teacher.features[l]),
                                naive_intra_tgm(student.features[l - 1], student.features[l]));
    return loss;
}

/// softmax over j of sum_c q(c,i) k(c,j) / sqrt(d), row by row.
inline Tensor naive_attention_map(const Tensor& q, const Tensor& k) {
    const std::size_t d = q.rows(), n = q.cols();
    const double inv = 1.0 / std::sqrt(static_cast<double>(d));
    Tensor a({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        double hi = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += q(c, i) * k(c, j);
            a(i, j) = s * inv;
            hi = std::max(hi, a(i, j));
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(a(i, j) - hi);
        for (std::size_t j = 0; j < n; ++j) a(i, j) = std::exp(a(i, j) - hi) / z;
    }
    return a;
}

/// Central differences (f(x+h) - f(x-h)) / 2h over every coordinate of every
/// tensor in params. f reads the tensors through the pointers; each
/// coordinate is restored to its original bits afterwards.
inline std::vector<Tensor> numeric_gradient(const std::function<double()>& f, std::span<Tensor* const> params,
                                            double h = 1e-5) {
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (Tensor* p : params) {
        Tensor g(p->shape());
        for (std::size_t i = 0; i < p->size(); ++i) {
            const double orig = (*p)[i];
            (*p)[i] = orig + h;
            const double fp = f();
            (*p)[i] = orig - h;
            const double fm = f();
            (*p)[i] = orig;
            g[i] = (fp - fm) / (2.0 * h);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
    Tensor probe = x;
    Tensor* ptr = &probe;
    return numeric_gradient([&] { return f(probe); }, std::span<Tensor* const>(&ptr, 1), h)[0];
}

struct GradientComparison {
    std::size_t count = 0;
    std::size_t failures = 0;
    double max_abs_error = 0.0;
    /// Largest relative error among coordinates whose magnitude exceeds the
    /// absolute tolerance.
    double max_rel_error = 0.0;
    bool ok() const { return failures == 0; }
};

/// A coordinate passes when |a - n| <= abs_tol or |a - n| / max(|a|, |n|) < rel_tol.
inline GradientComparison compare_gradients(const Tensor& analytic, const Tensor& numeric, double rel_tol = 1e-4,
                                            double abs_tol = 1e-7) {
    if (analytic.shape() != numeric.shape()) throw DimensionError("compare_gradients: shape mismatch");
    GradientComparison c;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i], n = numeric[i];
        const double diff = std::abs(a - n);
        ++c.count;
        c.max_abs_error = std::max(c.max_abs_error, diff);
        const double scale = std::max(std::abs(a), std::abs(n));
        const double rel = scale > 0.0 ? diff / scale : 0.0;
        if (scale > abs_tol) c.max_rel_error = std::max(c.max_rel_error, rel);
        if (diff <= abs_tol) continue;
        if (!(rel < rel_tol)) ++c.failures;
    }
    return c;
}

inline GradientComparison merge(GradientComparison a, const GradientComparison& b) {
    a.count += b.count;
    a.failures += b.failures;
    a.max_abs_error = std::max(a.max_abs_error, b.max_abs_error);
    a.max_rel_error = std::max(a.max_rel_error, b.max_rel_error);
    return a;
}

/// d x d matrix with orthonormal columns: modified Gram-Schmidt (two passes)
/// over a seeded Gaussian matrix.
inline Tensor random_orthogonal(std::size_t d, std::uint64_t seed) {
    if (d < 1) throw DimensionError("random_orthogonal: d must be >= 1");
    Rng rng(seed);
    std::vector<std::vector<double>> cols(d, std::vector<double>(d));
    for (auto& c : cols)
        for (double& v : c) v = rng.normal();
    for (std::size_t j = 0; j < d; ++j) {
        for (int pass = 0; pass < 2; ++pass)
            for (std::size_t i = 0; i < j; ++i) {
                double dot = 0.0;
                for (std::size_t k = 0; k < d; ++k) dot += cols[i][k] * cols[j][k];
                for (std::size_t k = 0; k < d; ++k) cols[j][k] -= dot * cols[i][k];
            }
        double norm = 0.0;
        for (double v : cols[j]) norm += v * v;
        norm = std::sqrt(norm);
        for (double& v : cols[j]) v /= norm;
    }
    Tensor q({d, d});
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) q.data()[i * d + j] = cols[j][i];
    return q;
}

}  // namespace star::oracle
