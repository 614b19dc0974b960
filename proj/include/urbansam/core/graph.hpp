#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "urbansam/core/errors.hpp"
#include "urbansam/core/tensor.hpp"

namespace urbansam {

// Named model parameter. Gradients accumulate here when the parameter is
// trainable; frozen parameters keep an empty accumulator by contract.
template <class Scalar>
struct Param {
    std::string name;
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool trainable = true;

    Param() = default;
    Param(std::string n, Tensor<Scalar> v, bool train = true)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()), trainable(train) {}
};

template <class Scalar>
class Graph;

// Handle into a Graph node.
template <class Scalar>
struct Var {
    Graph<Scalar>* g = nullptr;
    std::int32_t id = -1;

    bool valid() const { return g != nullptr && id >= 0; }
    const Tensor<Scalar>& value() const;
    const std::vector<Eigen::Index>& shape() const { return value().shape(); }
};

// Reverse-mode tape. Creation order is a valid topological order, so backward
// is a single reverse sweep. One graph per forward pass; parameters live
// outside the graph and re-enter each pass as leaves.
template <class Scalar>
class Graph {
public:
    using V = Var<Scalar>;
    using T = Tensor<Scalar>;
    // Backward hook: (graph, id of this node).
    using BackFn = std::function<void(Graph&, std::int32_t)>;

    V leaf(T value, bool needs_grad = false) { return push(std::move(value), needs_grad, nullptr); }

    V constant(T value) { return leaf(std::move(value), false); }

    V param(Param<Scalar>& p) {
        V v = push(p.value, p.trainable, nullptr, p.trainable ? &p : nullptr);
        return v;
    }

    const T& val(V v) const { return nodes_[v.id].value; }
    const T& val(std::int32_t id) const { return nodes_[id].value; }
    T& grad(std::int32_t id) { return nodes_[id].grad; }
    bool needs_grad(V v) const { return v.valid() && nodes_[v.id].needs_grad; }
    std::size_t size() const { return nodes_.size(); }

    V push(T value, bool needs_grad, BackFn back, Param<Scalar>* p = nullptr) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        n.back = std::move(back);
        n.param = p;
        nodes_.push_back(std::move(n));
        return V{this, static_cast<std::int32_t>(nodes_.size() - 1)};
    }

    void backward(V loss) {
        if (val(loss).numel() != 1) throw ValidationError("backward: loss must be a scalar");
        for (auto& n : nodes_)
            if (n.needs_grad) {
                n.grad = T(n.value.shape());
            }
        nodes_[loss.id].grad.array().setConstant(Scalar(1));
        for (std::int32_t i = loss.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (!n.needs_grad) continue;
            if (n.back) n.back(*this, i);
            if (n.param) n.param->grad.array() += n.grad.array();
        }
    }

    void check_finite(V v, const std::string& context) const {
        if (!val(v).all_finite()) throw NumericError("non-finite activations in " + context);
    }

private:
    struct Node {
        T value;
        T grad;
        bool needs_grad = false;
        BackFn back;
        Param<Scalar>* param = nullptr;
    };
    std::vector<Node> nodes_;
};

template <class Scalar>
const Tensor<Scalar>& Var<Scalar>::value() const {
    return g->val(*this);
}

namespace detail {
template <class S>
bool any_grad(Var<S> a) {
    return a.g->needs_grad(a);
}
template <class S, class... Rest>
bool any_grad(Var<S> a, Rest... rest) {
    return a.g->needs_grad(a) || any_grad(rest...);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
    auto& g = *a.g;
    require_same_shape(g.val(a), g.val(b), "add");
    Tensor<S> out(g.val(a).shape());
    out.array() = g.val(a).array() + g.val(b).array();
    const auto ia = a.id, ib = b.id;
    return g.push(std::move(out), detail::any_grad(a, b), [ia, ib](Graph<S>& gg, std::int32_t o) {
        const auto& go = gg.grad(o).array();
        if (gg.needs_grad(Var<S>{&gg, ia})) gg.grad(ia).array() += go;
        if (gg.needs_grad(Var<S>{&gg, ib})) gg.grad(ib).array() += go;
    });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
    auto& g = *a.g;
    require_same_shape(g.val(a), g.val(b), "sub");
    Tensor<S> out(g.val(a).shape());
    out.array() = g.val(a).array() - g.val(b).array();
    const auto ia = a.id, ib = b.id;
    return g.push(std::move(out), detail::any_grad(a, b), [ia, ib](Graph<S>& gg, std::int32_t o) {
        const auto& go = gg.grad(o).array();
        if (gg.needs_grad(Var<S>{&gg, ia})) gg.grad(ia).array() += go;
        if (gg.needs_grad(Var<S>{&gg, ib})) gg.grad(ib).array() -= go;
    });
}

template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
    auto& g = *a.g;
    require_same_shape(g.val(a), g.val(b), "mul");
    Tensor<S> out(g.val(a).shape());
    out.array() = g.val(a).array() * g.val(b).array();
    const auto ia = a.id, ib = b.id;
    return g.push(std::move(out), detail::any_grad(a, b), [ia, ib](Graph<S>& gg, std::int32_t o) {
        const auto& go = gg.grad(o).array();
        if (gg.needs_grad(Var<S>{&gg, ia})) gg.grad(ia).array() += go * gg.val(ib).array();
        if (gg.needs_grad(Var<S>{&gg, ib})) gg.grad(ib).array() += go * gg.val(ia).array();
    });
}

template <class S>
Var<S> div(Var<S> a, Var<S> b) {
    auto& g = *a.g;
    require_same_shape(g.val(a), g.val(b), "div");
    Tensor<S> out(g.val(a).shape());
    out.array() = g.val(a).array() / g.val(b).array();
    const auto ia = a.id, ib = b.id;
    return g.push(std::move(out), detail::any_grad(a, b), [ia, ib](Graph<S>& gg, std::int32_t o) {
        const auto& go = gg.grad(o).array();
        const auto& bv = gg.val(ib).array();
        if (gg.needs_grad(Var<S>{&gg, ia})) gg.grad(ia).array() += go / bv;
        if (gg.needs_grad(Var<S>{&gg, ib}))
            gg.grad(ib).array() -= go * gg.val(ia).array() / (bv * bv);
    });
}

template <class S>
Var<S> scale(Var<S> a, S c) {
    auto& g = *a.g;
    Tensor<S> out(g.val(a).shape());
    out.array() = g.val(a).array() * c;
    const auto ia = a.id;
    return g.push(std::move(out), g.needs_grad(a), [ia, c](Graph<S>& gg, std::int32_t o) {
        gg.grad(ia).array() += gg.grad(o).array() * c;
    });
}

template <class S>
Var<S> add_const(Var<S> a, S c) {
    auto& g = *a.g;
    Tensor<S> out(g.val(a).shape());
    out.array() = g.val(a).array() + c;
    const auto ia = a.id;
    return g.push(std::move(out), g.needs_grad(a), [ia](Graph<S>& gg, std::int32_t o) {
        gg.grad(ia).array() += gg.grad(o).array();
    });
}

// Multiply a tensor by a rank-0 variable (learnable gate).
template <class S>
Var<S> scale_by(Var<S> a, Var<S> s) {
    auto& g = *a.g;
    if (g.val(s).numel() != 1) throw ValidationError("scale_by: gate must be rank-0");
    Tensor<S> out(g.val(a).shape());
    const S sv = g.val(s).value();
    out.array() = g.val(a).array() * sv;
    const auto ia = a.id, is = s.id;
    return g.push(std::move(out), detail::any_grad(a, s), [ia, is, sv](Graph<S>& gg, std::int32_t o) {
        const auto& go = gg.grad(o).array();
        if (gg.needs_grad(Var<S>{&gg, ia})) gg.grad(ia).array() += go * sv;
        if (gg.needs_grad(Var<S>{&gg, is}))
            gg.grad(is).array()(0) += (go * gg.val(ia).array()).sum();
    });
}

// ---------------------------------------------------------------------------
// Activations and pointwise functions
// ---------------------------------------------------------------------------

template <class S>
Var<S> relu(Var<S> a) {
    auto& g = *a.g;
    Tensor<S> out(g.val(a).shape());
    out.array() = g.val(a).array().max(S(0));
    const auto ia = a.id;
    return g.push(std::move(out), g.needs_grad(a), [ia](Graph<S>& gg, std::int32_t o) {
        gg.grad(ia).array() +=
            gg.grad(o).array() * (gg.val(ia).array() > S(0)).template cast<S>();
    });
}

template <class S>
Var<S> sigmoid(Var<S> a) {
    auto& g = *a.g;
    Tensor<S> out(g.val(a).shape());
    out.array() = S(1) / (S(1) + (-g.val(a).array()).exp());
    const auto ia = a.id;
    return g.push(std::move(out), g.needs_grad(a), [ia](Graph<S>& gg, std::int32_t o) {
        const auto& y = gg.val(o).array();
        gg.grad(ia).array() += gg.grad(o).array() * y * (S(1) - y);
    });
}

template <class S>
Var<S> log_op(Var<S> a) {
    auto& g = *a.g;
    Tensor<S> out(g.val(a).shape());
    out.array() = g.val(a).array().log();
    const auto ia = a.id;
    return g.push(std::move(out), g.needs_grad(a), [ia](Graph<S>& gg, std::int32_t o) {
        gg.grad(ia).array() += gg.grad(o).array() / gg.val(ia).array();
    });
}

// Clamp with pass-through gradient strictly inside the interval.
template <class S>
Var<S> clamp(Var<S> a, S lo, S hi) {
    auto& g = *a.g;
    Tensor<S> out(g.val(a).shape());
    out.array() = g.val(a).array().max(lo).min(hi);
    const auto ia = a.id;
    return g.push(std::move(out), g.needs_grad(a), [ia, lo, hi](Graph<S>& gg, std::int32_t o) {
        const auto& x = gg.val(ia).array();
        gg.grad(ia).array() +=
            gg.grad(o).array() * ((x > lo) && (x < hi)).template cast<S>();
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class S>
Var<S> sum_all(Var<S> a) {
    auto& g = *a.g;
    Tensor<S> out = Tensor<S>::scalar(g.val(a).array().sum());
    const auto ia = a.id;
    return g.push(std::move(out), g.needs_grad(a), [ia](Graph<S>& gg, std::int32_t o) {
        gg.grad(ia).array() += gg.grad(o).value();
    });
}

template <class S>
Var<S> mean_all(Var<S> a) {
    auto& g = *a.g;
    const S inv = S(1) / static_cast<S>(g.val(a).numel());
    Tensor<S> out = Tensor<S>::scalar(g.val(a).array().sum() * inv);
    const auto ia = a.id;
    return g.push(std::move(out), g.needs_grad(a), [ia, inv](Graph<S>& gg, std::int32_t o) {
        gg.grad(ia).array() += gg.grad(o).value() * inv;
    });
}

// ---------------------------------------------------------------------------
// Matrix ops (rank-2 tensors, row-major)
// ---------------------------------------------------------------------------

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
    auto& g = *a.g;
    const auto& A = g.val(a);
    const auto& B = g.val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
        throw ValidationError("matmul: incompatible shapes " + A.shape_str() + " x " + B.shape_str());
    const Eigen::Index m = A.dim(0), k = A.dim(1), n = B.dim(1);
    Tensor<S> out({m, n});
    out.mat(m, n).noalias() = A.mat(m, k) * B.mat(k, n);
    const auto ia = a.id, ib = b.id;
    return g.push(std::move(out), detail::any_grad(a, b),
                  [ia, ib, m, k, n](Graph<S>& gg, std::int32_t o) {
                      auto go = gg.grad(o).mat(m, n);
                      if (gg.needs_grad(Var<S>{&gg, ia}))
                          gg.grad(ia).mat(m, k).noalias() += go * gg.val(ib).mat(k, n).transpose();
                      if (gg.needs_grad(Var<S>{&gg, ib}))
                          gg.grad(ib).mat(k, n).noalias() += gg.val(ia).mat(m, k).transpose() * go;
                  });
}

template <class S>
Var<S> transpose(Var<S> a) {
    auto& g = *a.g;
    const auto& A = g.val(a);
    if (A.rank() != 2) throw ValidationError("transpose: rank-2 required");
    const Eigen::Index m = A.dim(0), n = A.dim(1);
    Tensor<S> out({n, m});
    out.mat(n, m) = A.mat(m, n).transpose();
    const auto ia = a.id;
    return g.push(std::move(out), g.needs_grad(a), [ia, m, n](Graph<S>& gg, std::int32_t o) {
        gg.grad(ia).mat(m, n) += gg.grad(o).mat(n, m).transpose();
    });
}

// Row-wise bias broadcast: A[m,n] + v[n].
template <class S>
Var<S> add_rowwise(Var<S> a, Var<S> v) {
    auto& g = *a.g;
    const auto& A = g.val(a);
    const auto& bv = g.val(v);
    if (A.rank() != 2 || bv.numel() != A.dim(1)) throw ValidationError("add_rowwise: shape mismatch");
    const Eigen::Index m = A.dim(0), n = A.dim(1);
    Tensor<S> out(A.shape());
    auto om = out.mat(m, n);
    om = A.mat(m, n);
    om.rowwise() += Eigen::Map<const Eigen::RowVector<S, Eigen::Dynamic>>(bv.data(), n);
    const auto ia = a.id, iv = v.id;
    return g.push(std::move(out), detail::any_grad(a, v),
                  [ia, iv, m, n](Graph<S>& gg, std::int32_t o) {
                      auto go = gg.grad(o).mat(m, n);
                      if (gg.needs_grad(Var<S>{&gg, ia})) gg.grad(ia).mat(m, n) += go;
                      if (gg.needs_grad(Var<S>{&gg, iv}))
                          Eigen::Map<Eigen::RowVector<S, Eigen::Dynamic>>(gg.grad(iv).data(), n) +=
                              go.colwise().sum();
                  });
}

// Per-row gate: A[m,n] * v[m] (v broadcast across columns).
template <class S>
Var<S> mul_rowwise(Var<S> a, Var<S> v) {
    auto& g = *a.g;
    const auto& A = g.val(a);
    const auto& gv = g.val(v);
    if (A.rank() != 2 || gv.numel() != A.dim(0)) throw ValidationError("mul_rowwise: shape mismatch");
    const Eigen::Index m = A.dim(0), n = A.dim(1);
    Tensor<S> out(A.shape());
    auto om = out.mat(m, n);
    om = A.mat(m, n);
    om.array().colwise() *= Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(gv.data(), m);
    const auto ia = a.id, iv = v.id;
    return g.push(std::move(out), detail::any_grad(a, v),
                  [ia, iv, m, n](Graph<S>& gg, std::int32_t o) {
                      auto go = gg.grad(o).mat(m, n);
                      const auto vv = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(
                          gg.val(iv).data(), m);
                      if (gg.needs_grad(Var<S>{&gg, ia}))
                          gg.grad(ia).mat(m, n).array() += go.array().colwise() * vv;
                      if (gg.needs_grad(Var<S>{&gg, iv}))
                          Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>(gg.grad(iv).data(), m) +=
                              (go.array() * gg.val(ia).mat(m, n).array()).rowwise().sum();
                  });
}

template <class S>
Var<S> softmax_rows(Var<S> a) {
    auto& g = *a.g;
    const auto& A = g.val(a);
    if (A.rank() != 2) throw ValidationError("softmax_rows: rank-2 required");
    const Eigen::Index m = A.dim(0), n = A.dim(1);
    Tensor<S> out(A.shape());
    auto om = out.mat(m, n);
    auto am = A.mat(m, n);
    for (Eigen::Index r = 0; r < m; ++r) {
        const S mx = am.row(r).maxCoeff();
        om.row(r) = (am.row(r).array() - mx).exp();
        om.row(r) /= om.row(r).sum();
    }
    const auto ia = a.id;
    return g.push(std::move(out), g.needs_grad(a), [ia, m, n](Graph<S>& gg, std::int32_t o) {
        auto y = gg.val(o).mat(m, n);
        auto go = gg.grad(o).mat(m, n);
        auto ga = gg.grad(ia).mat(m, n);
        for (Eigen::Index r = 0; r < m; ++r) {
            const S dot = go.row(r).dot(y.row(r));
            ga.row(r).array() += y.row(r).array() * (go.row(r).array() - dot);
        }
    });
}

// Column slice A[:, c0:c1).
template <class S>
Var<S> slice_cols(Var<S> a, Eigen::Index c0, Eigen::Index c1) {
    auto& g = *a.g;
    const auto& A = g.val(a);
    const Eigen::Index m = A.dim(0), n = A.dim(1), w = c1 - c0;
    Tensor<S> out({m, w});
    out.mat(m, w) = A.mat(m, n).middleCols(c0, w);
    const auto ia = a.id;
    return g.push(std::move(out), g.needs_grad(a), [ia, m, n, c0, w](Graph<S>& gg, std::int32_t o) {
        gg.grad(ia).mat(m, n).middleCols(c0, w) += gg.grad(o).mat(m, w);
    });
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
    auto& g = *parts.front().g;
    const Eigen::Index m = g.val(parts.front()).dim(0);
    Eigen::Index n = 0;
    bool ng = false;
    for (auto p : parts) {
        if (g.val(p).dim(0) != m) throw ValidationError("concat_cols: row mismatch");
        n += g.val(p).dim(1);
        ng = ng || g.needs_grad(p);
    }
    Tensor<S> out({m, n});
    Eigen::Index off = 0;
    std::vector<std::pair<std::int32_t, Eigen::Index>> spans;
    for (auto p : parts) {
        const Eigen::Index w = g.val(p).dim(1);
        out.mat(m, n).middleCols(off, w) = g.val(p).mat(m, w);
        spans.emplace_back(p.id, w);
        off += w;
    }
    return g.push(std::move(out), ng, [spans, m, n](Graph<S>& gg, std::int32_t o) {
        Eigen::Index off2 = 0;
        for (auto [id, w] : spans) {
            if (gg.needs_grad(Var<S>{&gg, id}))
                gg.grad(id).mat(m, w) += gg.grad(o).mat(m, n).middleCols(off2, w);
            off2 += w;
        }
    });
}

// ---------------------------------------------------------------------------
// Layout bridges between [C,H,W] maps and [N=H*W, C] token matrices
// ---------------------------------------------------------------------------

template <class S>
Var<S> chw_to_tokens(Var<S> a) {
    auto& g = *a.g;
    const auto& A = g.val(a);
    if (A.rank() != 3) throw ValidationError("chw_to_tokens: rank-3 required");
    const Eigen::Index c = A.dim(0), hw = A.dim(1) * A.dim(2);
    Tensor<S> out({hw, c});
    out.mat(hw, c) = A.mat(c, hw).transpose();
    const auto ia = a.id;
    return g.push(std::move(out), g.needs_grad(a), [ia, c, hw](Graph<S>& gg, std::int32_t o) {
        gg.grad(ia).mat(c, hw) += gg.grad(o).mat(hw, c).transpose();
    });
}

template <class S>
Var<S> tokens_to_chw(Var<S> a, Eigen::Index h, Eigen::Index w) {
    auto& g = *a.g;
    const auto& A = g.val(a);
    if (A.rank() != 2 || A.dim(0) != h * w) throw ValidationError("tokens_to_chw: shape mismatch");
    const Eigen::Index c = A.dim(1), hw = h * w;
    Tensor<S> out({c, h, w});
    out.mat(c, hw) = A.mat(hw, c).transpose();
    const auto ia = a.id;
    return g.push(std::move(out), g.needs_grad(a), [ia, c, hw](Graph<S>& gg, std::int32_t o) {
        gg.grad(ia).mat(hw, c) += gg.grad(o).mat(c, hw).transpose();
    });
}

// Flatten to a column [numel, 1] (used for per-token mask gates).
template <class S>
Var<S> flatten_col(Var<S> a) {
    auto& g = *a.g;
    const Eigen::Index n = g.val(a).numel();
    Tensor<S> out({n, 1});
    out.array() = g.val(a).array();
    const auto ia = a.id;
    return g.push(std::move(out), g.needs_grad(a), [ia](Graph<S>& gg, std::int32_t o) {
        gg.grad(ia).array() += gg.grad(o).array();
    });
}

template <class S>
Var<S> reshape(Var<S> a, std::vector<Eigen::Index> shape) {
    auto& g = *a.g;
    Tensor<S> out(std::move(shape));
    if (out.numel() != g.val(a).numel()) throw ValidationError("reshape: element count mismatch");
    out.array() = g.val(a).array();
    const auto ia = a.id;
    return g.push(std::move(out), g.needs_grad(a), [ia](Graph<S>& gg, std::int32_t o) {
        gg.grad(ia).array() += gg.grad(o).array();
    });
}

template <class S>
Var<S> concat_channels(const std::vector<Var<S>>& parts) {
    auto& g = *parts.front().g;
    const auto& first = g.val(parts.front());
    const Eigen::Index h = first.dim(1), w = first.dim(2);
    Eigen::Index ctot = 0;
    bool ng = false;
    for (auto p : parts) {
        const auto& t = g.val(p);
        if (t.rank() != 3 || t.dim(1) != h || t.dim(2) != w)
            throw ValidationError("concat_channels: spatial mismatch");
        ctot += t.dim(0);
        ng = ng || g.needs_grad(p);
    }
    Tensor<S> out({ctot, h, w});
    Eigen::Index off = 0;
    std::vector<std::pair<std::int32_t, Eigen::Index>> spans;
    for (auto p : parts) {
        const auto& t = g.val(p);
        const Eigen::Index c = t.dim(0), plane = h * w;
        out.array().segment(off * plane, c * plane) = t.array();
        spans.emplace_back(p.id, c);
        off += c;
    }
    return g.push(std::move(out), ng, [spans, h, w](Graph<S>& gg, std::int32_t o) {
        Eigen::Index off2 = 0;
        const Eigen::Index plane = h * w;
        for (auto [id, c] : spans) {
            if (gg.needs_grad(Var<S>{&gg, id}))
                gg.grad(id).array() += gg.grad(o).array().segment(off2 * plane, c * plane);
            off2 += c;
        }
    });
}

// ---------------------------------------------------------------------------
// Convolutions and spatial ops
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void im2col(const Tensor<S>& x, Eigen::Index k, Eigen::Index stride, Eigen::Index pad,
            Tensor<S>& col, Eigen::Index ho, Eigen::Index wo) {
    const Eigen::Index ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    col = Tensor<S>({ci * k * k, ho * wo});
    S* cp = col.data();
    for (Eigen::Index c = 0; c < ci; ++c)
        for (Eigen::Index kh = 0; kh < k; ++kh)
            for (Eigen::Index kw = 0; kw < k; ++kw) {
                for (Eigen::Index oh = 0; oh < ho; ++oh) {
                    const Eigen::Index ih = oh * stride + kh - pad;
                    for (Eigen::Index ow = 0; ow < wo; ++ow) {
                        const Eigen::Index iw = ow * stride + kw - pad;
                        *cp++ = (ih >= 0 && ih < h && iw >= 0 && iw < w) ? x.at(c, ih, iw) : S(0);
                    }
                }
            }
}

template <class S>
void col2im_accum(const Tensor<S>& col, Eigen::Index k, Eigen::Index stride, Eigen::Index pad,
                  Tensor<S>& gx, Eigen::Index ho, Eigen::Index wo) {
    const Eigen::Index ci = gx.dim(0), h = gx.dim(1), w = gx.dim(2);
    const S* cp = col.data();
    for (Eigen::Index c = 0; c < ci; ++c)
        for (Eigen::Index kh = 0; kh < k; ++kh)
            for (Eigen::Index kw = 0; kw < k; ++kw) {
                for (Eigen::Index oh = 0; oh < ho; ++oh) {
                    const Eigen::Index ih = oh * stride + kh - pad;
                    for (Eigen::Index ow = 0; ow < wo; ++ow) {
                        const Eigen::Index iw = ow * stride + kw - pad;
                        if (ih >= 0 && ih < h && iw >= 0 && iw < w) gx.at(c, ih, iw) += *cp;
                        ++cp;
                    }
                }
            }
}

}  // namespace detail

// 2-d convolution, zero padding. x [Cin,H,W], w [Cout,Cin,k,k], b [Cout].
template <class S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b, Eigen::Index stride, Eigen::Index pad) {
    auto& g = *x.g;
    const auto& X = g.val(x);
    const auto& W = g.val(w);
    if (X.rank() != 3 || W.rank() != 4 || X.dim(0) != W.dim(1))
        throw ValidationError("conv2d: input channels " + X.shape_str() + " incompatible with weight " +
                              W.shape_str());
    const Eigen::Index cout = W.dim(0), cin = W.dim(1), k = W.dim(2);
    const Eigen::Index h = X.dim(1), wd = X.dim(2);
    const Eigen::Index ho = (h + 2 * pad - k) / stride + 1;
    const Eigen::Index wo = (wd + 2 * pad - k) / stride + 1;
    if (ho < 1 || wo < 1) throw ValidationError("conv2d: output would be empty");

    Tensor<S> col;
    detail::im2col(X, k, stride, pad, col, ho, wo);
    Tensor<S> out({cout, ho, wo});
    out.mat(cout, ho * wo).noalias() = W.mat(cout, cin * k * k) * col.mat(cin * k * k, ho * wo);
    out.mat(cout, ho * wo).colwise() +=
        Eigen::Map<const Eigen::Vector<S, Eigen::Dynamic>>(g.val(b).data(), cout);

    const auto ix = x.id, iw = w.id, ib = b.id;
    return g.push(std::move(out), detail::any_grad(x, w, b),
                  [ix, iw, ib, k, stride, pad, cout, cin, ho, wo](Graph<S>& gg, std::int32_t o) {
                      auto go = gg.grad(o).mat(cout, ho * wo);
                      const auto& X2 = gg.val(ix);
                      // col is cheap to rebuild relative to holding it per node
                      Tensor<S> col2;
                      detail::im2col(X2, k, stride, pad, col2, ho, wo);
                      if (gg.needs_grad(Var<S>{&gg, iw}))
                          gg.grad(iw).mat(cout, cin * k * k).noalias() +=
                              go * col2.mat(cin * k * k, ho * wo).transpose();
                      if (gg.needs_grad(Var<S>{&gg, ib}))
                          Eigen::Map<Eigen::Vector<S, Eigen::Dynamic>>(gg.grad(ib).data(), cout) +=
                              go.rowwise().sum();
                      if (gg.needs_grad(Var<S>{&gg, ix})) {
                          Tensor<S> gcol({cin * k * k, ho * wo});
                          gcol.mat(cin * k * k, ho * wo).noalias() =
                              gg.val(iw).mat(cout, cin * k * k).transpose() * go;
                          detail::col2im_accum(gcol, k, stride, pad, gg.grad(ix), ho, wo);
                      }
                  });
}

// Transposed convolution with kernel == stride (exact x-k upsampling, no overlap).
// x [Cin,H,W], w [Cin,Cout,k,k], b [Cout] -> [Cout, H*k, W*k].
template <class S>
Var<S> conv_transpose2d(Var<S> x, Var<S> w, Var<S> b) {
    auto& g = *x.g;
    const auto& X = g.val(x);
    const auto& W = g.val(w);
    if (X.rank() != 3 || W.rank() != 4 || X.dim(0) != W.dim(0))
        throw ValidationError("conv_transpose2d: input channels " + X.shape_str() +
                              " incompatible with weight " + W.shape_str());
    const Eigen::Index cin = W.dim(0), cout = W.dim(1), k = W.dim(2);
    const Eigen::Index h = X.dim(1), wd = X.dim(2);
    Tensor<S> out({cout, h * k, wd * k});
    // y' = W_m^T x_m with W_m [Cin, Cout*k*k], then a stride-k scatter.
    Tensor<S> yk({cout * k * k, h * wd});
    yk.mat(cout * k * k, h * wd).noalias() =
        W.mat(cin, cout * k * k).transpose() * X.mat(cin, h * wd);
    const auto& B = g.val(b);
    for (Eigen::Index c = 0; c < cout; ++c)
        for (Eigen::Index kh = 0; kh < k; ++kh)
            for (Eigen::Index kw = 0; kw < k; ++kw) {
                const Eigen::Index row = (c * k + kh) * k + kw;
                for (Eigen::Index ih = 0; ih < h; ++ih)
                    for (Eigen::Index iw2 = 0; iw2 < wd; ++iw2)
                        out.at(c, ih * k + kh, iw2 * k + kw) = yk.at(row, ih * wd + iw2);
            }
    for (Eigen::Index c = 0; c < cout; ++c)
        out.array().segment(c * h * k * wd * k, h * k * wd * k) += B[c];

    const auto ix = x.id, iw = w.id, ib = b.id;
    return g.push(std::move(out), detail::any_grad(x, w, b),
                  [ix, iw, ib, cin, cout, k, h, wd](Graph<S>& gg, std::int32_t o) {
                      // gather grad back into the [Cout*k*k, H*W] layout
                      Tensor<S> gyk({cout * k * k, h * wd});
                      const auto& GO = gg.grad(o);
                      for (Eigen::Index c = 0; c < cout; ++c)
                          for (Eigen::Index kh = 0; kh < k; ++kh)
                              for (Eigen::Index kw = 0; kw < k; ++kw) {
                                  const Eigen::Index row = (c * k + kh) * k + kw;
                                  for (Eigen::Index ih = 0; ih < h; ++ih)
                                      for (Eigen::Index iw2 = 0; iw2 < wd; ++iw2)
                                          gyk.at(row, ih * wd + iw2) =
                                              GO.at(c, ih * k + kh, iw2 * k + kw);
                              }
                      if (gg.needs_grad(Var<S>{&gg, ix}))
                          gg.grad(ix).mat(cin, h * wd).noalias() +=
                              gg.val(iw).mat(cin, cout * k * k) * gyk.mat(cout * k * k, h * wd);
                      if (gg.needs_grad(Var<S>{&gg, iw}))
                          gg.grad(iw).mat(cin, cout * k * k).noalias() +=
                              gg.val(ix).mat(cin, h * wd) * gyk.mat(cout * k * k, h * wd).transpose();
                      if (gg.needs_grad(Var<S>{&gg, ib})) {
                          auto& gb = gg.grad(ib);
                          for (Eigen::Index c = 0; c < cout; ++c)
                              gb[c] += GO.array().segment(c * h * k * wd * k, h * k * wd * k).sum();
                      }
                  });
}

template <class S>
Var<S> maxpool2(Var<S> x) {
    auto& g = *x.g;
    const auto& X = g.val(x);
    const Eigen::Index c = X.dim(0), h = X.dim(1), w = X.dim(2);
    if (h % 2 || w % 2) throw ValidationError("maxpool2: odd spatial size " + X.shape_str());
    const Eigen::Index ho = h / 2, wo = w / 2;
    Tensor<S> out({c, ho, wo});
    std::vector<Eigen::Index> arg(static_cast<std::size_t>(c * ho * wo));
    Eigen::Index i = 0;
    for (Eigen::Index cc = 0; cc < c; ++cc)
        for (Eigen::Index oh = 0; oh < ho; ++oh)
            for (Eigen::Index ow = 0; ow < wo; ++ow, ++i) {
                S best = X.at(cc, oh * 2, ow * 2);
                Eigen::Index bi = (cc * h + oh * 2) * w + ow * 2;
                for (Eigen::Index dh = 0; dh < 2; ++dh)
                    for (Eigen::Index dw = 0; dw < 2; ++dw) {
                        const S v = X.at(cc, oh * 2 + dh, ow * 2 + dw);
                        if (v > best) {
                            best = v;
                            bi = (cc * h + oh * 2 + dh) * w + ow * 2 + dw;
                        }
                    }
                out[i] = best;
                arg[static_cast<std::size_t>(i)] = bi;
            }
    const auto ix = x.id;
    return g.push(std::move(out), g.needs_grad(x),
                  [ix, arg = std::move(arg)](Graph<S>& gg, std::int32_t o) {
                      auto& gx = gg.grad(ix);
                      const auto& go = gg.grad(o);
                      for (Eigen::Index j = 0; j < go.numel(); ++j)
                          gx[arg[static_cast<std::size_t>(j)]] += go[j];
                  });
}

namespace detail {
struct LerpAxis {
    std::vector<Eigen::Index> i0, i1;
    std::vector<double> w1;  // weight of i1; weight of i0 is 1-w1
};
inline LerpAxis make_lerp(Eigen::Index src, Eigen::Index dst) {
    LerpAxis ax;
    ax.i0.resize(static_cast<std::size_t>(dst));
    ax.i1.resize(static_cast<std::size_t>(dst));
    ax.w1.resize(static_cast<std::size_t>(dst));
    const double scale = static_cast<double>(src) / static_cast<double>(dst);
    for (Eigen::Index i = 0; i < dst; ++i) {
        double sx = (static_cast<double>(i) + 0.5) * scale - 0.5;
        if (sx < 0) sx = 0;
        if (sx > static_cast<double>(src - 1)) sx = static_cast<double>(src - 1);
        const auto x0 = static_cast<Eigen::Index>(std::floor(sx));
        const Eigen::Index x1 = std::min<Eigen::Index>(x0 + 1, src - 1);
        ax.i0[static_cast<std::size_t>(i)] = x0;
        ax.i1[static_cast<std::size_t>(i)] = x1;
        ax.w1[static_cast<std::size_t>(i)] = sx - static_cast<double>(x0);
    }
    return ax;
}
inline std::vector<Eigen::Index> make_nearest(Eigen::Index src, Eigen::Index dst) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(dst));
    const double scale = static_cast<double>(src) / static_cast<double>(dst);
    for (Eigen::Index i = 0; i < dst; ++i) {
        auto s = static_cast<Eigen::Index>(std::floor((static_cast<double>(i) + 0.5) * scale));
        if (s < 0) s = 0;
        if (s > src - 1) s = src - 1;
        idx[static_cast<std::size_t>(i)] = s;
    }
    return idx;
}
}  // namespace detail

// Bilinear resize (half-pixel centers); linear, so backward is the transpose scatter.
template <class S>
Var<S> resize_bilinear(Var<S> x, Eigen::Index ho, Eigen::Index wo) {
    auto& g = *x.g;
    const auto& X = g.val(x);
    const Eigen::Index c = X.dim(0), h = X.dim(1), w = X.dim(2);
    if (h == ho && w == wo) return x;
    const auto ay = detail::make_lerp(h, ho);
    const auto axx = detail::make_lerp(w, wo);
    Tensor<S> out({c, ho, wo});
    for (Eigen::Index cc = 0; cc < c; ++cc)
        for (Eigen::Index oh = 0; oh < ho; ++oh) {
            const auto y0 = ay.i0[oh], y1 = ay.i1[oh];
            const S fy = static_cast<S>(ay.w1[oh]);
            for (Eigen::Index ow = 0; ow < wo; ++ow) {
                const auto x0 = axx.i0[ow], x1 = axx.i1[ow];
                const S fx = static_cast<S>(axx.w1[ow]);
                out.at(cc, oh, ow) = (S(1) - fy) * ((S(1) - fx) * X.at(cc, y0, x0) + fx * X.at(cc, y0, x1)) +
                                     fy * ((S(1) - fx) * X.at(cc, y1, x0) + fx * X.at(cc, y1, x1));
            }
        }
    const auto ix = x.id;
    return g.push(std::move(out), g.needs_grad(x),
                  [ix, ay, axx, c, ho, wo](Graph<S>& gg, std::int32_t o) {
                      auto& gx = gg.grad(ix);
                      const auto& go = gg.grad(o);
                      for (Eigen::Index cc = 0; cc < c; ++cc)
                          for (Eigen::Index oh = 0; oh < ho; ++oh) {
                              const auto y0 = ay.i0[oh], y1 = ay.i1[oh];
                              const S fy = static_cast<S>(ay.w1[oh]);
                              for (Eigen::Index ow = 0; ow < wo; ++ow) {
                                  const auto x0 = axx.i0[ow], x1 = axx.i1[ow];
                                  const S fx = static_cast<S>(axx.w1[ow]);
                                  const S gv = go.at(cc, oh, ow);
                                  gx.at(cc, y0, x0) += (S(1) - fy) * (S(1) - fx) * gv;
                                  gx.at(cc, y0, x1) += (S(1) - fy) * fx * gv;
                                  gx.at(cc, y1, x0) += fy * (S(1) - fx) * gv;
                                  gx.at(cc, y1, x1) += fy * fx * gv;
                              }
                          }
                  });
}

template <class S>
Var<S> resize_nearest(Var<S> x, Eigen::Index ho, Eigen::Index wo) {
    auto& g = *x.g;
    const auto& X = g.val(x);
    const Eigen::Index c = X.dim(0), h = X.dim(1), w = X.dim(2);
    if (h == ho && w == wo) return x;
    const auto iy = detail::make_nearest(h, ho);
    const auto ixx = detail::make_nearest(w, wo);
    Tensor<S> out({c, ho, wo});
    for (Eigen::Index cc = 0; cc < c; ++cc)
        for (Eigen::Index oh = 0; oh < ho; ++oh)
            for (Eigen::Index ow = 0; ow < wo; ++ow) out.at(cc, oh, ow) = X.at(cc, iy[oh], ixx[ow]);
    const auto id = x.id;
    return g.push(std::move(out), g.needs_grad(x),
                  [id, iy, ixx, c, ho, wo](Graph<S>& gg, std::int32_t o) {
                      auto& gx = gg.grad(id);
                      const auto& go = gg.grad(o);
                      for (Eigen::Index cc = 0; cc < c; ++cc)
                          for (Eigen::Index oh = 0; oh < ho; ++oh)
                              for (Eigen::Index ow = 0; ow < wo; ++ow)
                                  gx.at(cc, iy[oh], ixx[ow]) += go.at(cc, oh, ow);
                  });
}

template <class S>
Var<S> upsample_nearest(Var<S> x, Eigen::Index factor) {
    const auto& X = x.g->val(x);
    return resize_nearest(x, X.dim(1) * factor, X.dim(2) * factor);
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Per-row layer norm over the feature dimension of a token matrix [N, C].
template <class S>
Var<S> layernorm_rows(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-6)) {
    auto& g = *x.g;
    const auto& X = g.val(x);
    if (X.rank() != 2) throw ValidationError("layernorm_rows: rank-2 required");
    const Eigen::Index m = X.dim(0), n = X.dim(1);
    Tensor<S> out(X.shape());
    Tensor<S> xhat(X.shape());
    std::vector<S> inv_std(static_cast<std::size_t>(m));
    auto xm = X.mat(m, n);
    auto om = out.mat(m, n);
    auto hm = xhat.mat(m, n);
    const auto gv = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(g.val(gamma).data(), n);
    const auto bv = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(g.val(beta).data(), n);
    for (Eigen::Index r = 0; r < m; ++r) {
        const S mu = xm.row(r).mean();
        const S var = (xm.row(r).array() - mu).square().mean();
        const S is = S(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        hm.row(r) = (xm.row(r).array() - mu) * is;
        om.row(r) = (hm.row(r).array().transpose() * gv + bv).transpose();
    }
    const auto ix = x.id, ig = gamma.id, ib = beta.id;
    return g.push(std::move(out), detail::any_grad(x, gamma, beta),
                  [ix, ig, ib, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Graph<S>& gg, std::int32_t o) {
                      auto go = gg.grad(o).mat(m, n);
                      auto hm = xhat.mat(m, n);
                      const auto gv = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(
                          gg.val(ig).data(), n);
                      if (gg.needs_grad(Var<S>{&gg, ig}))
                          Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>(gg.grad(ig).data(), n) +=
                              (go.array() * hm.array()).colwise().sum();
                      if (gg.needs_grad(Var<S>{&gg, ib}))
                          Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>(gg.grad(ib).data(), n) +=
                              go.array().colwise().sum();
                      if (gg.needs_grad(Var<S>{&gg, ix})) {
                          auto gx = gg.grad(ix).mat(m, n);
                          for (Eigen::Index r = 0; r < m; ++r) {
                              const Eigen::Array<S, Eigen::Dynamic, 1> gy =
                                  go.row(r).transpose().array() * gv;
                              const S mg = gy.mean();
                              const S mgx = (gy * hm.row(r).transpose().array()).mean();
                              gx.row(r).array() +=
                                  ((gy - mg - hm.row(r).transpose().array() * mgx) *
                                   inv_std[static_cast<std::size_t>(r)])
                                      .transpose();
                          }
                      }
                  });
}

// ---------------------------------------------------------------------------
// Straight-through threshold (learnable tau)
// ---------------------------------------------------------------------------

template <class S>
S read_tau(S raw) {
    const S lo = S(1e-4), hi = S(1) - S(1e-4);
    return std::min(std::max(raw, lo), hi);
}

// Forward: hard 1[sigmoid(p) >= tau]. Backward: gradient of the shifted soft
// surrogate sigmoid(p - logit(tau)) for both the logits and tau.
template <class S>
Var<S> ste_threshold(Var<S> logits, Var<S> tau) {
    auto& g = *logits.g;
    if (g.val(tau).numel() != 1) throw ValidationError("ste_threshold: tau must be rank-0");
    const S tc = read_tau(g.val(tau).value());
    const S lt = std::log(tc / (S(1) - tc));
    Tensor<S> out(g.val(logits).shape());
    out.array() = (g.val(logits).array() >= lt).template cast<S>();
    const auto il = logits.id, it = tau.id;
    const bool tau_inside = g.val(tau).value() > S(1e-4) && g.val(tau).value() < S(1) - S(1e-4);
    return g.push(std::move(out), detail::any_grad(logits, tau),
                  [il, it, tc, lt, tau_inside](Graph<S>& gg, std::int32_t o) {
                      const auto& go = gg.grad(o).array();
                      const auto s = (S(1) / (S(1) + (-(gg.val(il).array() - lt)).exp())).eval();
                      const auto ds = (go * s * (S(1) - s)).eval();
                      if (gg.needs_grad(Var<S>{&gg, il})) gg.grad(il).array() += ds;
                      if (gg.needs_grad(Var<S>{&gg, it}) && tau_inside)
                          gg.grad(it).array()(0) += -ds.sum() / (tc * (S(1) - tc));
                  });
}

// Operator sugar.
template <class S>
Var<S> operator+(Var<S> a, Var<S> b) {
    return add(a, b);
}
template <class S>
Var<S> operator-(Var<S> a, Var<S> b) {
    return sub(a, b);
}
template <class S>
Var<S> operator*(Var<S> a, Var<S> b) {
    return mul(a, b);
}

}  // namespace urbansam
