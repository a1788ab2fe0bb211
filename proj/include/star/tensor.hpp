#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "star/error.hpp"

namespace star {

using Shape = std::vector<std::size_t>;

/// Dense row-major array of rank 1 to 3 holding doubles.
///
/// Scalars are represented as rank-1 tensors of shape {1}. Matrices used by
/// the encoder are laid out channels x time, i.e. a feature sequence of width
/// d over N steps is a d x N tensor whose column t is the frame at step t.
class Tensor {
public:
    Tensor() : shape_{1}, data_(1, 0.0) {}

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        check_rank(shape_);
        data_.assign(element_count(shape_), 0.0);
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_rank(shape_);
        if (data_.size() != element_count(shape_))
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string(shape_));
    }

    /// Builds a matrix from nested rows; mainly for tests and small literals.
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<double> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw DimensionError("ragged matrix literal");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor({r, c}, std::move(data));
    }

    static Tensor vector(std::initializer_list<double> values) {
        return Tensor({values.size()}, std::vector<double>(values));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor filled(Shape shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
        return t;
    }

    /// Construction from untrusted input (files, user data): rejects NaN/Inf.
    static Tensor from_external(Shape shape, std::vector<double> data) {
        for (std::size_t i = 0; i < data.size(); ++i)
            if (!std::isfinite(data[i]))
                throw DimensionError("non-finite value at flat index " + std::to_string(i));
        return Tensor(std::move(shape), std::move(data));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t rows() const { return shape_.at(0); }
    std::size_t cols() const { return rank() >= 2 ? shape_[1] : 1; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    const double& operator[](std::size_t i) const { return data_[i]; }
    double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const double& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    double item() const {
        if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape_));
        return data_[0];
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    static void check_rank(const Shape& s) {
        if (s.empty() || s.size() > 3)
            throw DimensionError("tensor rank must be 1..3, got " + std::to_string(s.size()));
    }
    static std::size_t element_count(const Shape& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
    }

    Shape shape_;
    std::vector<double> data_;
};

inline const Tensor& value_of(const Tensor& t) { return t; }

namespace detail {

inline void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
}

inline double gelu_scalar(double x) {
    constexpr double c = 0.7978845608;
    constexpr double k = 0.044715;
    return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x)));
}

inline double gelu_grad_scalar(double x) {
    constexpr double c = 0.7978845608;
    constexpr double k = 0.044715;
    const double th = std::tanh(c * (x + k * x * x * x));
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * k * x * x);
}

}  // namespace detail

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kKlClamp = 1e-12;
inline constexpr double kDistributionTol = 1e-6;

/// C = A B. Each output element accumulates over k in ascending order, so the
/// result is bit-reproducible for identical inputs.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    if (a.cols() != b.rows())
        throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    const std::size_t m = a.rows(), n = b.cols(), kk = a.cols();
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = &c(i, 0);
        for (std::size_t k = 0; k < kk; ++k) {
            const double aik = a(i, k);
            const double* brow = &b(k, 0);
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    detail::require_matrix(a, "transpose");
    Tensor t({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
    return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
    return c;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
    return c;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor c = a;
    for (double& v : c.data()) v *= s;
    return c;
}

/// Adds bias[i] to every entry of row i of a d x N matrix.
inline Tensor add_col_bias(const Tensor& x, const Tensor& bias) {
    detail::require_matrix(x, "add_col_bias");
    if (bias.rank() != 1 || bias.size() != x.rows())
        throw DimensionError("add_col_bias: bias " + shape_string(bias.shape()) + " for input " +
                             shape_string(x.shape()));
    Tensor y = x;
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) += bias[i];
    return y;
}

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return Tensor::scalar(s);
}

inline Tensor softmax_rows(const Tensor& x) {
    detail::require_matrix(x, "softmax_rows");
    Tensor y({x.rows(), x.cols()});
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double mx = x(i, 0);
        for (std::size_t j = 1; j < x.cols(); ++j) mx = std::max(mx, x(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) {
            y(i, j) = std::exp(x(i, j) - mx);
            z += y(i, j);
        }
        for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) /= z;
    }
    return y;
}

inline void check_distribution_rows(const Tensor& p, const char* which) {
    detail::require_matrix(p, "kl_div_rows");
    for (std::size_t i = 0; i < p.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < p.cols(); ++j) {
            if (!(p(i, j) >= 0.0)) throw DistributionError(i, std::string(which) + " has a negative or NaN entry");
            s += p(i, j);
        }
        if (std::abs(s - 1.0) > kDistributionTol)
            throw DistributionError(i, std::string(which) + " sums to " + std::to_string(s));
    }
}

/// Sum over rows of KL(p_row || q_row). q is clamped below at 1e-12 and
/// terms with p == 0 contribute exactly zero.
inline Tensor kl_div_rows(const Tensor& p, const Tensor& q) {
    detail::require_same_shape(p, q, "kl_div_rows");
    check_distribution_rows(p, "p");
    check_distribution_rows(q, "q");
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) continue;
        total += p[i] * std::log(p[i] / std::max(q[i], kKlClamp));
    }
    return Tensor::scalar(total);
}

inline Tensor frobenius_sq_diff(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "frobenius_sq_diff");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return Tensor::scalar(s);
}

/// Per column: normalize channels to zero mean / unit variance, then apply
/// gain and bias per channel.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    detail::require_matrix(x, "layer_norm");
    const std::size_t d = x.rows(), n = x.cols();
    if (gain.size() != d || bias.size() != d)
        throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" +
                             shape_string(bias.shape()) + " for input " + shape_string(x.shape()));
    Tensor y({d, n});
    for (std::size_t t = 0; t < n; ++t) {
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += x(i, t);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double c = x(i, t) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        for (std::size_t i = 0; i < d; ++i) y(i, t) = (x(i, t) - mean) * inv * gain[i] + bias[i];
    }
    return y;
}

/// GELU, tanh approximation.
inline Tensor gelu(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.data()) v = detail::gelu_scalar(v);
    return y;
}

inline Tensor relu(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.data()) v = std::max(v, 0.0);
    return y;
}

inline Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
    detail::require_matrix(x, "slice_rows");
    if (start + count > x.rows())
        throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                             ") out of " + shape_string(x.shape()));
    const std::size_t n = x.cols();
    std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(start * n),
                            x.data().begin() + static_cast<std::ptrdiff_t>((start + count) * n));
    return Tensor({count, n}, std::move(out));
}

inline Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const std::size_t n = parts[0].cols();
    std::size_t rows = 0;
    for (const Tensor& p : parts) {
        detail::require_matrix(p, "concat_rows");
        if (p.cols() != n) throw DimensionError("concat_rows: column count mismatch");
        rows += p.rows();
    }
    std::vector<double> out;
    out.reserve(rows * n);
    for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return Tensor({rows, n}, std::move(out));
}

}  // namespace star
