#pragma once

// Tape-based reverse-mode differentiation over star::Tensor.
//
// A Graph owns every node created while evaluating an expression. Node ids
// increase in creation order, so reverse id order is a topological order of
// the DAG and backward() visits each reachable node exactly once. Forward
// values are produced by the same kernels as the plain Tensor functions in
// tensor.hpp, which makes differentiable and plain evaluations bit-identical.

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "star/tensor.hpp"

namespace star::ad {

class Graph;

/// Handle to a node of a Graph.
class Var {
public:
    Var() = default;
    Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

    Graph& graph() const { return *graph_; }
    std::size_t id() const noexcept { return id_; }
    const Tensor& value() const;
    const Tensor& grad() const;
    bool requires_grad() const;

private:
    Graph* graph_ = nullptr;
    std::size_t id_ = 0;
};

inline const Tensor& value_of(const Var& v) { return v.value(); }

class Graph {
public:
    using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Trainable input; receives a gradient on backward().
    Var leaf(Tensor value) {
        ++leaves_;
        return push(std::move(value), true, {});
    }

    /// Input that never receives a gradient.
    Var constant(Tensor value) { return push(std::move(value), false, {}); }

    Var make(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
        bool rg = false;
        for (const Var& p : parents) rg = rg || nodes_[p.id()].requires_grad;
        return push(std::move(value), rg, rg ? std::move(fn) : BackwardFn{});
    }

    Var make(Tensor value, std::span<const Var> parents, BackwardFn fn) {
        bool rg = false;
        for (const Var& p : parents) rg = rg || nodes_[p.id()].requires_grad;
        return push(std::move(value), rg, rg ? std::move(fn) : BackwardFn{});
    }

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }
    /// Number of trainable leaves created so far.
    std::size_t leaf_count() const noexcept { return leaves_; }

    /// Adds g into the gradient of node id (no-op for constants).
    void accumulate(std::size_t id, const Tensor& g) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return;
        if (n.grad.shape() != g.shape())
            throw DimensionError("gradient shape " + shape_string(g.shape()) + " for node of shape " +
                                 shape_string(n.grad.shape()));
        for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
        n.reached = true;
    }

    /// Populates gradients of every node that the scalar root depends on.
    void backward(const Var& root) {
        if (root.value().size() != 1)
            throw DimensionError("backward: root must be scalar, got " + shape_string(root.value().shape()));
        for (Node& n : nodes_) {
            n.grad = Tensor(n.value.shape());
            n.reached = false;
        }
        visits_ = 0;
        Node& r = nodes_[root.id()];
        if (!r.requires_grad) return;
        r.grad[0] = 1.0;
        r.reached = true;
        for (std::size_t i = root.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || !n.reached) continue;
            ++visits_;
            if (n.backward) {
                // The closure may accumulate into earlier nodes only, so this
                // reference stays valid (no push happens during backward).
                n.backward(*this, n.grad);
            }
        }
    }

    /// Number of nodes processed by the most recent backward().
    std::size_t last_backward_visits() const noexcept { return visits_; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool reached = false;
        BackwardFn backward;
    };

    Var push(Tensor value, bool rg, BackwardFn fn) {
        nodes_.push_back(Node{std::move(value), Tensor(), rg, false, std::move(fn)});
        return Var(this, nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
    std::size_t visits_ = 0;
    std::size_t leaves_ = 0;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }
inline const Tensor& Var::grad() const { return graph_->grad(id_); }
inline bool Var::requires_grad() const { return graph_->requires_grad(id_); }

// ---------------------------------------------------------------------------
// Differentiable operations. Each mirrors the plain function of the same name.

inline Var matmul(const Var& a, const Var& b) {
    const std::size_t ia = a.id(), ib = b.id();
    return a.graph().make(star::matmul(a.value(), b.value()), {a, b}, [ia, ib](Graph& g, const Tensor& dc) {
        if (g.requires_grad(ia)) g.accumulate(ia, star::matmul(dc, star::transpose(g.value(ib))));
        if (g.requires_grad(ib)) g.accumulate(ib, star::matmul(star::transpose(g.value(ia)), dc));
    });
}

inline Var transpose(const Var& a) {
    const std::size_t ia = a.id();
    return a.graph().make(star::transpose(a.value()), {a},
                          [ia](Graph& g, const Tensor& dy) { g.accumulate(ia, star::transpose(dy)); });
}

inline Var add(const Var& a, const Var& b) {
    const std::size_t ia = a.id(), ib = b.id();
    return a.graph().make(star::add(a.value(), b.value()), {a, b}, [ia, ib](Graph& g, const Tensor& dy) {
        g.accumulate(ia, dy);
        g.accumulate(ib, dy);
    });
}

inline Var sub(const Var& a, const Var& b) {
    const std::size_t ia = a.id(), ib = b.id();
    return a.graph().make(star::sub(a.value(), b.value()), {a, b}, [ia, ib](Graph& g, const Tensor& dy) {
        g.accumulate(ia, dy);
        g.accumulate(ib, star::scale(dy, -1.0));
    });
}

inline Var mul(const Var& a, const Var& b) {
    const std::size_t ia = a.id(), ib = b.id();
    return a.graph().make(star::mul(a.value(), b.value()), {a, b}, [ia, ib](Graph& g, const Tensor& dy) {
        if (g.requires_grad(ia)) g.accumulate(ia, star::mul(dy, g.value(ib)));
        if (g.requires_grad(ib)) g.accumulate(ib, star::mul(dy, g.value(ia)));
    });
}

inline Var scale(const Var& a, double s) {
    const std::size_t ia = a.id();
    return a.graph().make(star::scale(a.value(), s), {a},
                          [ia, s](Graph& g, const Tensor& dy) { g.accumulate(ia, star::scale(dy, s)); });
}

inline Var add_col_bias(const Var& x, const Var& bias) {
    const std::size_t ix = x.id(), ib = bias.id();
    return x.graph().make(star::add_col_bias(x.value(), bias.value()), {x, bias},
                          [ix, ib](Graph& g, const Tensor& dy) {
                              g.accumulate(ix, dy);
                              if (!g.requires_grad(ib)) return;
                              Tensor db({dy.rows()});
                              for (std::size_t i = 0; i < dy.rows(); ++i)
                                  for (std::size_t j = 0; j < dy.cols(); ++j) db[i] += dy(i, j);
                              g.accumulate(ib, db);
                          });
}

inline Var sum(const Var& a) {
    const std::size_t ia = a.id();
    return a.graph().make(star::sum(a.value()), {a}, [ia](Graph& g, const Tensor& dy) {
        g.accumulate(ia, Tensor::filled(g.value(ia).shape(), dy[0]));
    });
}

inline Var softmax_rows(const Var& x) {
    const std::size_t ix = x.id();
    Tensor y = star::softmax_rows(x.value());
    return x.graph().make(y, {x}, [ix, y](Graph& g, const Tensor& dy) {
        Tensor dx({y.rows(), y.cols()});
        for (std::size_t i = 0; i < y.rows(); ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < y.cols(); ++j) dot += dy(i, j) * y(i, j);
            for (std::size_t j = 0; j < y.cols(); ++j) dx(i, j) = y(i, j) * (dy(i, j) - dot);
        }
        g.accumulate(ix, dx);
    });
}

inline Var layer_norm(const Var& x, const Var& gain, const Var& bias) {
    const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
    return x.graph().make(
        star::layer_norm(x.value(), gain.value(), bias.value()), {x, gain, bias},
        [ix, ig, ib](Graph& g, const Tensor& dy) {
            const Tensor& xv = g.value(ix);
            const Tensor& gv = g.value(ig);
            const std::size_t d = xv.rows(), n = xv.cols();
            Tensor dx({d, n}), dg({d}), db({d});
            std::vector<double> xhat(d), dxhat(d);
            for (std::size_t t = 0; t < n; ++t) {
                double mean = 0.0;
                for (std::size_t i = 0; i < d; ++i) mean += xv(i, t);
                mean /= static_cast<double>(d);
                double var = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    const double c = xv(i, t) - mean;
                    var += c * c;
                }
                var /= static_cast<double>(d);
                const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    xhat[i] = (xv(i, t) - mean) * inv;
                    dxhat[i] = dy(i, t) * gv[i];
                    dg[i] += dy(i, t) * xhat[i];
                    db[i] += dy(i, t);
                    mean_dxhat += dxhat[i];
                    mean_dxhat_xhat += dxhat[i] * xhat[i];
                }
                mean_dxhat /= static_cast<double>(d);
                mean_dxhat_xhat /= static_cast<double>(d);
                for (std::size_t i = 0; i < d; ++i)
                    dx(i, t) = inv * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
            }
            g.accumulate(ix, dx);
            g.accumulate(ig, dg);
            g.accumulate(ib, db);
        });
}

inline Var gelu(const Var& x) {
    const std::size_t ix = x.id();
    return x.graph().make(star::gelu(x.value()), {x}, [ix](Graph& g, const Tensor& dy) {
        const Tensor& xv = g.value(ix);
        Tensor dx = dy;
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= star::detail::gelu_grad_scalar(xv[i]);
        g.accumulate(ix, dx);
    });
}

inline Var relu(const Var& x) {
    const std::size_t ix = x.id();
    return x.graph().make(star::relu(x.value()), {x}, [ix](Graph& g, const Tensor& dy) {
        const Tensor& xv = g.value(ix);
        Tensor dx = dy;
        for (std::size_t i = 0; i < dx.size(); ++i)
            if (xv[i] <= 0.0) dx[i] = 0.0;
        g.accumulate(ix, dx);
    });
}

/// Gradient w.r.t. p is ln(p/q)+1 where p > 0 and 0 where p == 0; gradient
/// w.r.t. q is -p/q where q is above the clamp and 0 where it is clamped.
inline Var kl_div_rows(const Var& p, const Var& q) {
    const std::size_t ip = p.id(), iq = q.id();
    return p.graph().make(star::kl_div_rows(p.value(), q.value()), {p, q}, [ip, iq](Graph& g, const Tensor& dy) {
        const Tensor& pv = g.value(ip);
        const Tensor& qv = g.value(iq);
        if (g.requires_grad(ip)) {
            Tensor dp(pv.shape());
            for (std::size_t i = 0; i < pv.size(); ++i)
                if (pv[i] > 0.0) dp[i] = dy[0] * (std::log(pv[i] / std::max(qv[i], kKlClamp)) + 1.0);
            g.accumulate(ip, dp);
        }
        if (g.requires_grad(iq)) {
            Tensor dq(qv.shape());
            for (std::size_t i = 0; i < qv.size(); ++i)
                if (qv[i] > kKlClamp) dq[i] = -dy[0] * pv[i] / qv[i];
            g.accumulate(iq, dq);
        }
    });
}

inline Var frobenius_sq_diff(const Var& a, const Var& b) {
    const std::size_t ia = a.id(), ib = b.id();
    return a.graph().make(star::frobenius_sq_diff(a.value(), b.value()), {a, b},
                          [ia, ib](Graph& g, const Tensor& dy) {
                              Tensor da = star::scale(star::sub(g.value(ia), g.value(ib)), 2.0 * dy[0]);
                              if (g.requires_grad(ib)) g.accumulate(ib, star::scale(da, -1.0));
                              g.accumulate(ia, da);
                          });
}

inline Var slice_rows(const Var& x, std::size_t start, std::size_t count) {
    const std::size_t ix = x.id();
    return x.graph().make(star::slice_rows(x.value(), start, count), {x},
                          [ix, start](Graph& g, const Tensor& dy) {
                              Tensor dx(g.value(ix).shape());
                              const std::size_t n = dy.cols();
                              std::copy(dy.data().begin(), dy.data().end(),
                                        dx.data().begin() + static_cast<std::ptrdiff_t>(start * n));
                              g.accumulate(ix, dx);
                          });
}

inline Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    std::vector<Tensor> values;
    std::vector<std::size_t> ids;
    values.reserve(parts.size());
    for (const Var& v : parts) {
        values.push_back(v.value());
        ids.push_back(v.id());
    }
    Tensor out = star::concat_rows(values);
    return parts[0].graph().make(std::move(out), parts, [ids](Graph& g, const Tensor& dy) {
        std::size_t row = 0;
        for (std::size_t id : ids) {
            const std::size_t r = g.value(id).rows();
            if (g.requires_grad(id)) g.accumulate(id, star::slice_rows(dy, row, r));
            row += r;
        }
    });
}

}  // namespace star::ad
