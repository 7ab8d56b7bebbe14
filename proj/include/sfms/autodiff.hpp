#pragma once

// Reverse-mode automatic differentiation over dense matrices. A Graph is a
// tape of nodes created by one forward pass; backward() runs the recorded
// closures in reverse creation order, pruned to the ancestors of the loss
// node. Templated on the scalar so the identical code paths can be exercised
// in double precision by the finite-difference tests while production uses
// the float instantiation.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "sfms/mat.hpp"

namespace sfms::ad {

template <class R>
class Graph;

template <class R>
struct V {
    Graph<R>* g = nullptr;
    int id = -1;

    bool valid() const { return g != nullptr && id >= 0; }
    const Mat<R>& val() const;
    int rows() const { return val().rows; }
    int cols() const { return val().cols; }
};

template <class R>
class Graph {
  public:
    // Backward closures receive the graph and the id of their own node; they
    // read grad(self) and accumulate into the parents' grads.
    using BackFn = std::function<void(Graph&, int)>;

    struct Node {
        Mat<R> val;
        Mat<R> grad;  // allocated lazily
        bool needs_grad = false;
        std::vector<int> parents;
        BackFn back;
    };

    int add(Mat<R> val, bool needs_grad, std::vector<int> parents, BackFn back) {
        Node n;
        n.val = std::move(val);
        n.needs_grad = needs_grad;
        n.parents = std::move(parents);
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    const Mat<R>& val(int id) const { return nodes_[id].val; }
    Mat<R>& val(int id) { return nodes_[id].val; }

    Mat<R>& grad(int id) {
        Node& n = nodes_[id];
        if (n.grad.rows != n.val.rows || n.grad.cols != n.val.cols)
            n.grad = Mat<R>::zeros(n.val.rows, n.val.cols);
        return n.grad;
    }

    bool needs_grad(int id) const { return nodes_[id].needs_grad; }
    std::size_t size() const { return nodes_.size(); }

    // Backward from a 1x1 loss node. Only ancestors of the loss that require
    // gradients are visited, so dead subgraphs (e.g. unselected reconstruction
    // samples) cost nothing.
    void backward(int loss_id) {
        const Node& loss = nodes_[loss_id];
        if (loss.val.rows != 1 || loss.val.cols != 1)
            throw DimensionError("backward: loss node must be 1x1");
        std::vector<char> reach(nodes_.size(), 0);
        std::vector<int> stack{loss_id};
        reach[loss_id] = 1;
        while (!stack.empty()) {
            int i = stack.back();
            stack.pop_back();
            for (int p : nodes_[i].parents) {
                if (!reach[p] && nodes_[p].needs_grad) {
                    reach[p] = 1;
                    stack.push_back(p);
                }
            }
        }
        grad(loss_id)(0, 0) = R(1);
        for (int i = loss_id; i >= 0; --i) {
            if (reach[i] && nodes_[i].needs_grad && nodes_[i].back) nodes_[i].back(*this, i);
        }
    }

  private:
    std::vector<Node> nodes_;
};

template <class R>
const Mat<R>& V<R>::val() const {
    return g->val(id);
}

// ---------------------------------------------------------------------------
// Leaves
// ---------------------------------------------------------------------------

template <class R>
V<R> leaf(Graph<R>& g, Mat<R> m, bool needs_grad) {
    return {&g, g.add(std::move(m), needs_grad, {}, nullptr)};
}

template <class R>
V<R> constant(Graph<R>& g, Mat<R> m) {
    return {&g, g.add(std::move(m), false, {}, nullptr)};
}

// Value passes through, gradient does not.
template <class R>
V<R> detach(V<R> a) {
    return {a.g, a.g->add(a.val(), false, {}, nullptr)};
}

namespace detail {

template <class R>
bool any_grad(std::initializer_list<V<R>> vs) {
    for (const V<R>& v : vs)
        if (v.g->needs_grad(v.id)) return true;
    return false;
}

template <class R>
void require_same_shape(const V<R>& a, const V<R>& b, const char* op) {
    if (!a.val().same_shape(b.val()))
        throw DimensionError(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <class R>
V<R> add(V<R> a, V<R> b) {
    detail::require_same_shape(a, b, "add");
    Graph<R>& g = *a.g;
    Mat<R> y = a.val();
    y.map() += b.val().map();
    int aid = a.id, bid = b.id;
    int id = g.add(std::move(y), detail::any_grad<R>({a, b}), {aid, bid},
                   [aid, bid](Graph<R>& gr, int self) {
                       const Mat<R>& gy = gr.grad(self);
                       if (gr.needs_grad(aid)) gr.grad(aid).map() += gy.map();
                       if (gr.needs_grad(bid)) gr.grad(bid).map() += gy.map();
                   });
    return {&g, id};
}

template <class R>
V<R> sub(V<R> a, V<R> b) {
    detail::require_same_shape(a, b, "sub");
    Graph<R>& g = *a.g;
    Mat<R> y = a.val();
    y.map() -= b.val().map();
    int aid = a.id, bid = b.id;
    int id = g.add(std::move(y), detail::any_grad<R>({a, b}), {aid, bid},
                   [aid, bid](Graph<R>& gr, int self) {
                       const Mat<R>& gy = gr.grad(self);
                       if (gr.needs_grad(aid)) gr.grad(aid).map() += gy.map();
                       if (gr.needs_grad(bid)) gr.grad(bid).map() -= gy.map();
                   });
    return {&g, id};
}

// Hadamard product.
template <class R>
V<R> mul(V<R> a, V<R> b) {
    detail::require_same_shape(a, b, "mul");
    Graph<R>& g = *a.g;
    Mat<R> y = a.val();
    y.map().array() *= b.val().map().array();
    int aid = a.id, bid = b.id;
    int id = g.add(std::move(y), detail::any_grad<R>({a, b}), {aid, bid},
                   [aid, bid](Graph<R>& gr, int self) {
                       const Mat<R>& gy = gr.grad(self);
                       if (gr.needs_grad(aid))
                           gr.grad(aid).map().array() += gy.map().array() * gr.val(bid).map().array();
                       if (gr.needs_grad(bid))
                           gr.grad(bid).map().array() += gy.map().array() * gr.val(aid).map().array();
                   });
    return {&g, id};
}

template <class R>
V<R> scale(V<R> a, R c) {
    Graph<R>& g = *a.g;
    Mat<R> y = a.val();
    y.map() *= c;
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid, c](Graph<R>& gr, int self) {
        if (gr.needs_grad(aid)) gr.grad(aid).map() += c * gr.grad(self).map();
    });
    return {&g, id};
}

template <class R>
V<R> add_scalar(V<R> a, R c) {
    Graph<R>& g = *a.g;
    Mat<R> y = a.val();
    y.map().array() += c;
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid](Graph<R>& gr, int self) {
        if (gr.needs_grad(aid)) gr.grad(aid).map() += gr.grad(self).map();
    });
    return {&g, id};
}

// c - a
template <class R>
V<R> rsub_scalar(R c, V<R> a) {
    Graph<R>& g = *a.g;
    Mat<R> y = a.val();
    y.map() = -y.map();
    y.map().array() += c;
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid](Graph<R>& gr, int self) {
        if (gr.needs_grad(aid)) gr.grad(aid).map() -= gr.grad(self).map();
    });
    return {&g, id};
}

// Multiply by a 1x1 graph scalar (learnable gate).
template <class R>
V<R> mul_scalarvar(V<R> a, V<R> s) {
    if (s.rows() != 1 || s.cols() != 1) throw DimensionError("mul_scalarvar: gate must be 1x1");
    Graph<R>& g = *a.g;
    Mat<R> y = a.val();
    y.map() *= s.val()(0, 0);
    int aid = a.id, sid = s.id;
    int id = g.add(std::move(y), detail::any_grad<R>({a, s}), {aid, sid},
                   [aid, sid](Graph<R>& gr, int self) {
                       const Mat<R>& gy = gr.grad(self);
                       if (gr.needs_grad(aid))
                           gr.grad(aid).map() += gr.val(sid)(0, 0) * gy.map();
                       if (gr.needs_grad(sid))
                           gr.grad(sid)(0, 0) +=
                               (gy.map().array() * gr.val(aid).map().array()).sum();
                   });
    return {&g, id};
}

template <class R>
V<R> sigmoid(V<R> a) {
    Graph<R>& g = *a.g;
    Mat<R> y = a.val();
    for (R& v : y.a) {
        double e = 1.0 / (1.0 + std::exp(-static_cast<double>(v)));
        v = static_cast<R>(e);
    }
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid](Graph<R>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const Mat<R>& y = gr.val(self);
        gr.grad(aid).map().array() +=
            gr.grad(self).map().array() * y.map().array() * (R(1) - y.map().array());
    });
    return {&g, id};
}

// Forward takes the supplied values; backward is the identity into `a`. This
// is the straight-through estimator with the discrete values passed in
// exactly (no (h - s) + s rounding slack).
template <class R>
V<R> value_override(V<R> a, Mat<R> vals) {
    if (!a.val().same_shape(vals)) throw DimensionError("value_override: shape mismatch");
    Graph<R>& g = *a.g;
    int aid = a.id;
    int id = g.add(std::move(vals), g.needs_grad(aid), {aid}, [aid](Graph<R>& gr, int self) {
        if (gr.needs_grad(aid)) gr.grad(aid).map() += gr.grad(self).map();
    });
    return {&g, id};
}

template <class R>
V<R> gelu(V<R> a) {
    Graph<R>& g = *a.g;
    const Mat<R>& x = a.val();
    Mat<R> y(x.rows, x.cols);
    for (std::size_t i = 0; i < x.size(); ++i) {
        double v = static_cast<double>(x.a[i]);
        y.a[i] = static_cast<R>(v * 0.5 * (1.0 + std::erf(v * 0.7071067811865476)));
    }
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid](Graph<R>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const Mat<R>& gy = gr.grad(self);
        const Mat<R>& x = gr.val(aid);
        Mat<R>& ga = gr.grad(aid);
        for (std::size_t i = 0; i < x.size(); ++i) {
            double v = static_cast<double>(x.a[i]);
            double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865476));
            double pdf = 0.3989422804014327 * std::exp(-0.5 * v * v);
            ga.a[i] += gy.a[i] * static_cast<R>(cdf + v * pdf);
        }
    });
    return {&g, id};
}

template <class R>
V<R> tanh_(V<R> a) {
    Graph<R>& g = *a.g;
    Mat<R> y = a.val();
    for (R& v : y.a) v = std::tanh(v);
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid](Graph<R>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const Mat<R>& gy = gr.grad(self);
        const Mat<R>& y = gr.val(self);
        gr.grad(aid).map().array() +=
            gy.map().array() * (R(1) - y.map().array() * y.map().array());
    });
    return {&g, id};
}

template <class R>
V<R> log_(V<R> a) {
    Graph<R>& g = *a.g;
    Mat<R> y = a.val();
    for (R& v : y.a) v = std::log(v);
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid](Graph<R>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        gr.grad(aid).map().array() +=
            gr.grad(self).map().array() / gr.val(aid).map().array();
    });
    return {&g, id};
}

template <class R>
V<R> abs_(V<R> a) {
    Graph<R>& g = *a.g;
    Mat<R> y = a.val();
    for (R& v : y.a) v = std::abs(v);
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid](Graph<R>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const Mat<R>& gy = gr.grad(self);
        const Mat<R>& x = gr.val(aid);
        Mat<R>& ga = gr.grad(aid);
        for (std::size_t i = 0; i < x.size(); ++i) {
            R s = x.a[i] > R(0) ? R(1) : (x.a[i] < R(0) ? R(-1) : R(0));
            ga.a[i] += gy.a[i] * s;
        }
    });
    return {&g, id};
}

// max(a, c) elementwise; subgradient 0 at the kink.
template <class R>
V<R> max_scalar(V<R> a, R c) {
    Graph<R>& g = *a.g;
    Mat<R> y = a.val();
    for (R& v : y.a) v = std::max(v, c);
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid, c](Graph<R>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const Mat<R>& gy = gr.grad(self);
        const Mat<R>& x = gr.val(aid);
        Mat<R>& ga = gr.grad(aid);
        for (std::size_t i = 0; i < x.size(); ++i)
            if (x.a[i] > c) ga.a[i] += gy.a[i];
    });
    return {&g, id};
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class R>
V<R> matmul(V<R> a, V<R> b) {
    Graph<R>& g = *a.g;
    Mat<R> y;
    matmul_into(a.val(), b.val(), y);
    int aid = a.id, bid = b.id;
    int id = g.add(std::move(y), detail::any_grad<R>({a, b}), {aid, bid},
                   [aid, bid](Graph<R>& gr, int self) {
                       const Mat<R>& gy = gr.grad(self);
                       if (gr.needs_grad(aid)) matmul_transB_acc(gy, gr.val(bid), gr.grad(aid));
                       if (gr.needs_grad(bid)) matmul_transA_acc(gr.val(aid), gy, gr.grad(bid));
                   });
    return {&g, id};
}

template <class R>
V<R> transpose(V<R> a) {
    Graph<R>& g = *a.g;
    Mat<R> y(a.cols(), a.rows());
    y.map() = a.val().map().transpose();
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid](Graph<R>& gr, int self) {
        if (gr.needs_grad(aid)) gr.grad(aid).map() += gr.grad(self).map().transpose();
    });
    return {&g, id};
}

// Broadcast-add a 1xC row vector to every row of a TxC matrix.
template <class R>
V<R> add_rowvec(V<R> a, V<R> v) {
    if (v.rows() != 1 || v.cols() != a.cols()) throw DimensionError("add_rowvec: bad vector shape");
    Graph<R>& g = *a.g;
    Mat<R> y = a.val();
    y.map().rowwise() += Eigen::Map<const Eigen::Matrix<R, 1, Eigen::Dynamic>>(v.val().data(),
                                                                               v.cols());
    int aid = a.id, vid = v.id;
    int id = g.add(std::move(y), detail::any_grad<R>({a, v}), {aid, vid},
                   [aid, vid](Graph<R>& gr, int self) {
                       const Mat<R>& gy = gr.grad(self);
                       if (gr.needs_grad(aid)) gr.grad(aid).map() += gy.map();
                       if (gr.needs_grad(vid))
                           gr.grad(vid).map() += gy.map().colwise().sum();
                   });
    return {&g, id};
}

// Broadcast-multiply each row t of a TxC matrix by entry t of a Tx1 column.
template <class R>
V<R> mul_colvec(V<R> a, V<R> v) {
    if (v.cols() != 1 || v.rows() != a.rows()) throw DimensionError("mul_colvec: bad vector shape");
    Graph<R>& g = *a.g;
    const Mat<R>& x = a.val();
    const Mat<R>& w = v.val();
    Mat<R> y(x.rows, x.cols);
    for (int r = 0; r < x.rows; ++r)
        for (int c = 0; c < x.cols; ++c) y(r, c) = x(r, c) * w(r, 0);
    int aid = a.id, vid = v.id;
    int id = g.add(std::move(y), detail::any_grad<R>({a, v}), {aid, vid},
                   [aid, vid](Graph<R>& gr, int self) {
                       const Mat<R>& gy = gr.grad(self);
                       const Mat<R>& x = gr.val(aid);
                       const Mat<R>& w = gr.val(vid);
                       if (gr.needs_grad(aid)) {
                           Mat<R>& ga = gr.grad(aid);
                           for (int r = 0; r < x.rows; ++r)
                               for (int c = 0; c < x.cols; ++c) ga(r, c) += gy(r, c) * w(r, 0);
                       }
                       if (gr.needs_grad(vid)) {
                           Mat<R>& gv = gr.grad(vid);
                           for (int r = 0; r < x.rows; ++r) {
                               R s = R(0);
                               for (int c = 0; c < x.cols; ++c) s += gy(r, c) * x(r, c);
                               gv(r, 0) += s;
                           }
                       }
                   });
    return {&g, id};
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class R>
V<R> sum_all(V<R> a) {
    Graph<R>& g = *a.g;
    Mat<R> y(1, 1);
    y(0, 0) = a.val().map().sum();
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid](Graph<R>& gr, int self) {
        if (gr.needs_grad(aid)) gr.grad(aid).map().array() += gr.grad(self)(0, 0);
    });
    return {&g, id};
}

template <class R>
V<R> mean_all(V<R> a) {
    Graph<R>& g = *a.g;
    R inv = R(1) / static_cast<R>(a.val().size());
    Mat<R> y(1, 1);
    y(0, 0) = a.val().map().sum() * inv;
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid, inv](Graph<R>& gr, int self) {
        if (gr.needs_grad(aid)) gr.grad(aid).map().array() += gr.grad(self)(0, 0) * inv;
    });
    return {&g, id};
}

// Mean over rows: TxC -> 1xC.
template <class R>
V<R> mean_rows(V<R> a) {
    Graph<R>& g = *a.g;
    R inv = R(1) / static_cast<R>(a.rows());
    Mat<R> y(1, a.cols());
    y.map() = a.val().map().colwise().sum() * inv;
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid, inv](Graph<R>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const Mat<R>& gy = gr.grad(self);
        gr.grad(aid).map().rowwise() +=
            Eigen::Map<const Eigen::Matrix<R, 1, Eigen::Dynamic>>(gy.data(), gy.cols) * inv;
    });
    return {&g, id};
}

// Max over all entries -> 1x1; gradient routed to the first argmax.
template <class R>
V<R> max_all(V<R> a) {
    Graph<R>& g = *a.g;
    const Mat<R>& x = a.val();
    std::size_t arg = 0;
    for (std::size_t i = 1; i < x.size(); ++i)
        if (x.a[i] > x.a[arg]) arg = i;
    Mat<R> y(1, 1);
    y(0, 0) = x.a[arg];
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid, arg](Graph<R>& gr, int self) {
        if (gr.needs_grad(aid)) gr.grad(aid).a[arg] += gr.grad(self)(0, 0);
    });
    return {&g, id};
}

// Numerically stable log(sum(exp(a))) over all entries -> 1x1.
template <class R>
V<R> logsumexp_all(V<R> a) {
    Graph<R>& g = *a.g;
    const Mat<R>& x = a.val();
    R mx = x.a[0];
    for (R v : x.a) mx = std::max(mx, v);
    double s = 0;
    for (R v : x.a) s += std::exp(static_cast<double>(v - mx));
    Mat<R> y(1, 1);
    y(0, 0) = mx + static_cast<R>(std::log(s));
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid](Graph<R>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const Mat<R>& x = gr.val(aid);
        R lse = gr.val(self)(0, 0);
        R gy = gr.grad(self)(0, 0);
        Mat<R>& ga = gr.grad(aid);
        for (std::size_t i = 0; i < x.size(); ++i)
            ga.a[i] += gy * std::exp(x.a[i] - lse);
    });
    return {&g, id};
}

// Extract a single entry -> 1x1.
template <class R>
V<R> pick(V<R> a, int r, int c) {
    Graph<R>& g = *a.g;
    Mat<R> y(1, 1);
    y(0, 0) = a.val()(r, c);
    int aid = a.id;
    int cols = a.cols();
    std::size_t flat = static_cast<std::size_t>(r) * cols + c;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid, flat](Graph<R>& gr, int self) {
        if (gr.needs_grad(aid)) gr.grad(aid).a[flat] += gr.grad(self)(0, 0);
    });
    return {&g, id};
}

// ---------------------------------------------------------------------------
// Softmax family (rowwise, max-subtracted)
// ---------------------------------------------------------------------------

namespace detail {
template <class R>
void softmax_row(const R* x, R* y, int n, const R* allowed) {
    R mx = -std::numeric_limits<R>::infinity();
    for (int i = 0; i < n; ++i)
        if (!allowed || allowed[i] > R(0)) mx = std::max(mx, x[i]);
    if (!std::isfinite(static_cast<double>(mx)))
        throw NumericalError("softmax: row has no allowed entries");
    double s = 0;
    for (int i = 0; i < n; ++i) {
        if (!allowed || allowed[i] > R(0)) {
            double e = std::exp(static_cast<double>(x[i] - mx));
            y[i] = static_cast<R>(e);
            s += e;
        } else {
            y[i] = R(0);
        }
    }
    R inv = static_cast<R>(1.0 / s);
    for (int i = 0; i < n; ++i) y[i] *= inv;
}
}  // namespace detail

template <class R>
V<R> softmax_rows(V<R> a) {
    Graph<R>& g = *a.g;
    const Mat<R>& x = a.val();
    Mat<R> y(x.rows, x.cols);
    for (int r = 0; r < x.rows; ++r)
        detail::softmax_row(x.data() + static_cast<std::size_t>(r) * x.cols,
                            y.data() + static_cast<std::size_t>(r) * y.cols, x.cols,
                            static_cast<const R*>(nullptr));
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid](Graph<R>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const Mat<R>& y = gr.val(self);
        const Mat<R>& gy = gr.grad(self);
        Mat<R>& ga = gr.grad(aid);
        for (int r = 0; r < y.rows; ++r) {
            R dot = R(0);
            for (int c = 0; c < y.cols; ++c) dot += gy(r, c) * y(r, c);
            for (int c = 0; c < y.cols; ++c) ga(r, c) += (gy(r, c) - dot) * y(r, c);
        }
    });
    return {&g, id};
}

// Rowwise softmax restricted to positions where allowed > 0; disallowed
// positions get probability exactly zero.
template <class R>
V<R> softmax_rows_masked(V<R> a, const Mat<R>& allowed) {
    if (allowed.rows != a.rows() || allowed.cols != a.cols())
        throw DimensionError("softmax_rows_masked: mask shape mismatch");
    Graph<R>& g = *a.g;
    const Mat<R>& x = a.val();
    Mat<R> y(x.rows, x.cols);
    for (int r = 0; r < x.rows; ++r)
        detail::softmax_row(x.data() + static_cast<std::size_t>(r) * x.cols,
                            y.data() + static_cast<std::size_t>(r) * y.cols, x.cols,
                            allowed.data() + static_cast<std::size_t>(r) * allowed.cols);
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid](Graph<R>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const Mat<R>& y = gr.val(self);
        const Mat<R>& gy = gr.grad(self);
        Mat<R>& ga = gr.grad(aid);
        for (int r = 0; r < y.rows; ++r) {
            R dot = R(0);
            for (int c = 0; c < y.cols; ++c) dot += gy(r, c) * y(r, c);
            for (int c = 0; c < y.cols; ++c) ga(r, c) += (gy(r, c) - dot) * y(r, c);
        }
    });
    return {&g, id};
}

template <class R>
V<R> log_softmax_rows(V<R> a) {
    Graph<R>& g = *a.g;
    const Mat<R>& x = a.val();
    Mat<R> y(x.rows, x.cols);
    for (int r = 0; r < x.rows; ++r) {
        const R* xr = x.data() + static_cast<std::size_t>(r) * x.cols;
        R* yr = y.data() + static_cast<std::size_t>(r) * y.cols;
        R mx = xr[0];
        for (int c = 1; c < x.cols; ++c) mx = std::max(mx, xr[c]);
        double s = 0;
        for (int c = 0; c < x.cols; ++c) s += std::exp(static_cast<double>(xr[c] - mx));
        R lse = mx + static_cast<R>(std::log(s));
        for (int c = 0; c < x.cols; ++c) yr[c] = xr[c] - lse;
    }
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid](Graph<R>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const Mat<R>& y = gr.val(self);
        const Mat<R>& gy = gr.grad(self);
        Mat<R>& ga = gr.grad(aid);
        for (int r = 0; r < y.rows; ++r) {
            R gsum = R(0);
            for (int c = 0; c < y.cols; ++c) gsum += gy(r, c);
            for (int c = 0; c < y.cols; ++c)
                ga(r, c) += gy(r, c) - std::exp(y(r, c)) * gsum;
        }
    });
    return {&g, id};
}

// ---------------------------------------------------------------------------
// Layer norm (rowwise, population variance)
// ---------------------------------------------------------------------------

template <class R>
V<R> layernorm_rows(V<R> a, V<R> gamma, V<R> beta, R eps = R(1e-5)) {
    if (gamma.rows() != 1 || gamma.cols() != a.cols() || beta.rows() != 1 ||
        beta.cols() != a.cols())
        throw DimensionError("layernorm_rows: parameter shape mismatch");
    Graph<R>& g = *a.g;
    const Mat<R>& x = a.val();
    Mat<R> y(x.rows, x.cols);
    Mat<R> xhat(x.rows, x.cols);
    std::vector<R> inv_std(x.rows);
    const Mat<R>& gm = gamma.val();
    const Mat<R>& bt = beta.val();
    for (int r = 0; r < x.rows; ++r) {
        R mu = R(0);
        for (int c = 0; c < x.cols; ++c) mu += x(r, c);
        mu /= static_cast<R>(x.cols);
        R var = R(0);
        for (int c = 0; c < x.cols; ++c) var += (x(r, c) - mu) * (x(r, c) - mu);
        var /= static_cast<R>(x.cols);
        R is = R(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (int c = 0; c < x.cols; ++c) {
            xhat(r, c) = (x(r, c) - mu) * is;
            y(r, c) = gm(0, c) * xhat(r, c) + bt(0, c);
        }
    }
    int aid = a.id, gid = gamma.id, bid = beta.id;
    auto xh = std::make_shared<Mat<R>>(std::move(xhat));
    auto istd = std::make_shared<std::vector<R>>(std::move(inv_std));
    int id = g.add(std::move(y), detail::any_grad<R>({a, gamma, beta}), {aid, gid, bid},
                   [aid, gid, bid, xh, istd](Graph<R>& gr, int self) {
                       const Mat<R>& gy = gr.grad(self);
                       const Mat<R>& gm = gr.val(gid);
                       int rows = gy.rows, cols = gy.cols;
                       if (gr.needs_grad(gid)) {
                           Mat<R>& gg = gr.grad(gid);
                           for (int r = 0; r < rows; ++r)
                               for (int c = 0; c < cols; ++c) gg(0, c) += gy(r, c) * (*xh)(r, c);
                       }
                       if (gr.needs_grad(bid)) {
                           Mat<R>& gb = gr.grad(bid);
                           for (int r = 0; r < rows; ++r)
                               for (int c = 0; c < cols; ++c) gb(0, c) += gy(r, c);
                       }
                       if (gr.needs_grad(aid)) {
                           Mat<R>& ga = gr.grad(aid);
                           for (int r = 0; r < rows; ++r) {
                               R sum_dxhat = R(0), sum_dxhat_xhat = R(0);
                               for (int c = 0; c < cols; ++c) {
                                   R dxh = gy(r, c) * gm(0, c);
                                   sum_dxhat += dxh;
                                   sum_dxhat_xhat += dxh * (*xh)(r, c);
                               }
                               R invn = R(1) / static_cast<R>(cols);
                               for (int c = 0; c < cols; ++c) {
                                   R dxh = gy(r, c) * gm(0, c);
                                   ga(r, c) += (*istd)[r] * (dxh - invn * sum_dxhat -
                                                             (*xh)(r, c) * invn * sum_dxhat_xhat);
                               }
                           }
                       }
                   });
    return {&g, id};
}

// ---------------------------------------------------------------------------
// Shape surgery
// ---------------------------------------------------------------------------

template <class R>
V<R> concat_rows(V<R> a, V<R> b) {
    if (a.cols() != b.cols()) throw DimensionError("concat_rows: column mismatch");
    Graph<R>& g = *a.g;
    Mat<R> y(a.rows() + b.rows(), a.cols());
    y.map().topRows(a.rows()) = a.val().map();
    y.map().bottomRows(b.rows()) = b.val().map();
    int aid = a.id, bid = b.id;
    int ar = a.rows(), br = b.rows();
    int id = g.add(std::move(y), detail::any_grad<R>({a, b}), {aid, bid},
                   [aid, bid, ar, br](Graph<R>& gr, int self) {
                       const Mat<R>& gy = gr.grad(self);
                       if (gr.needs_grad(aid)) gr.grad(aid).map() += gy.map().topRows(ar);
                       if (gr.needs_grad(bid)) gr.grad(bid).map() += gy.map().bottomRows(br);
                   });
    return {&g, id};
}

template <class R>
V<R> concat_cols(V<R> a, V<R> b) {
    if (a.rows() != b.rows()) throw DimensionError("concat_cols: row mismatch");
    Graph<R>& g = *a.g;
    Mat<R> y(a.rows(), a.cols() + b.cols());
    y.map().leftCols(a.cols()) = a.val().map();
    y.map().rightCols(b.cols()) = b.val().map();
    int aid = a.id, bid = b.id;
    int ac = a.cols(), bc = b.cols();
    int id = g.add(std::move(y), detail::any_grad<R>({a, b}), {aid, bid},
                   [aid, bid, ac, bc](Graph<R>& gr, int self) {
                       const Mat<R>& gy = gr.grad(self);
                       if (gr.needs_grad(aid)) gr.grad(aid).map() += gy.map().leftCols(ac);
                       if (gr.needs_grad(bid)) gr.grad(bid).map() += gy.map().rightCols(bc);
                   });
    return {&g, id};
}

template <class R>
V<R> slice_rows(V<R> a, int r0, int r1) {
    if (r0 < 0 || r1 > a.rows() || r0 >= r1) throw DimensionError("slice_rows: bad range");
    Graph<R>& g = *a.g;
    Mat<R> y(r1 - r0, a.cols());
    y.map() = a.val().map().middleRows(r0, r1 - r0);
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid, r0](Graph<R>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const Mat<R>& gy = gr.grad(self);
        gr.grad(aid).map().middleRows(r0, gy.rows) += gy.map();
    });
    return {&g, id};
}

template <class R>
V<R> slice_cols(V<R> a, int c0, int c1) {
    if (c0 < 0 || c1 > a.cols() || c0 >= c1) throw DimensionError("slice_cols: bad range");
    Graph<R>& g = *a.g;
    Mat<R> y(a.rows(), c1 - c0);
    y.map() = a.val().map().middleCols(c0, c1 - c0);
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid, c0](Graph<R>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const Mat<R>& gy = gr.grad(self);
        gr.grad(aid).map().middleCols(c0, gy.cols) += gy.map();
    });
    return {&g, id};
}

// Repeat a 1xC row n times -> nxC.
template <class R>
V<R> tile_rows(V<R> a, int n) {
    if (a.rows() != 1) throw DimensionError("tile_rows: input must be a row vector");
    Graph<R>& g = *a.g;
    Mat<R> y(n, a.cols());
    y.map().rowwise() =
        Eigen::Map<const Eigen::Matrix<R, 1, Eigen::Dynamic>>(a.val().data(), a.cols());
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid](Graph<R>& gr, int self) {
        if (gr.needs_grad(aid)) gr.grad(aid).map() += gr.grad(self).map().colwise().sum();
    });
    return {&g, id};
}

// y[i] = a[indices[i]]; duplicate indices accumulate gradient.
template <class R>
V<R> gather_rows(V<R> a, std::vector<int> indices) {
    Graph<R>& g = *a.g;
    Mat<R> y(static_cast<int>(indices.size()), a.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] < 0 || indices[i] >= a.rows())
            throw DimensionError("gather_rows: index out of range");
        y.map().row(static_cast<int>(i)) = a.val().map().row(indices[i]);
    }
    int aid = a.id;
    auto idx = std::make_shared<std::vector<int>>(std::move(indices));
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid, idx](Graph<R>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const Mat<R>& gy = gr.grad(self);
        Mat<R>& ga = gr.grad(aid);
        for (std::size_t i = 0; i < idx->size(); ++i)
            ga.map().row((*idx)[i]) += gy.map().row(static_cast<int>(i));
    });
    return {&g, id};
}

// Build a T x D matrix placing rows of `a` at positions idx_a and rows of `b`
// at positions idx_b. The two index sets must exactly partition 0..T-1.
template <class R>
V<R> interleave_rows(V<R> a, const std::vector<int>& idx_a, V<R> b, const std::vector<int>& idx_b,
                     int total_rows) {
    if (a.cols() != b.cols()) throw DimensionError("interleave_rows: column mismatch");
    if (static_cast<int>(idx_a.size()) != a.rows() ||
        static_cast<int>(idx_b.size()) != b.rows())
        throw DimensionError("interleave_rows: index count mismatch");
    std::vector<char> seen(total_rows, 0);
    for (int i : idx_a) {
        if (i < 0 || i >= total_rows || seen[i]) throw DimensionError("interleave_rows: overlap");
        seen[i] = 1;
    }
    for (int i : idx_b) {
        if (i < 0 || i >= total_rows || seen[i]) throw DimensionError("interleave_rows: overlap");
        seen[i] = 1;
    }
    for (char s : seen)
        if (!s) throw DimensionError("interleave_rows: positions not covered");
    Graph<R>& g = *a.g;
    Mat<R> y(total_rows, a.cols());
    for (std::size_t i = 0; i < idx_a.size(); ++i)
        y.map().row(idx_a[i]) = a.val().map().row(static_cast<int>(i));
    for (std::size_t i = 0; i < idx_b.size(); ++i)
        y.map().row(idx_b[i]) = b.val().map().row(static_cast<int>(i));
    int aid = a.id, bid = b.id;
    auto ia = std::make_shared<std::vector<int>>(idx_a);
    auto ib = std::make_shared<std::vector<int>>(idx_b);
    int id = g.add(std::move(y), detail::any_grad<R>({a, b}), {aid, bid},
                   [aid, bid, ia, ib](Graph<R>& gr, int self) {
                       const Mat<R>& gy = gr.grad(self);
                       if (gr.needs_grad(aid)) {
                           Mat<R>& ga = gr.grad(aid);
                           for (std::size_t i = 0; i < ia->size(); ++i)
                               ga.map().row(static_cast<int>(i)) += gy.map().row((*ia)[i]);
                       }
                       if (gr.needs_grad(bid)) {
                           Mat<R>& gb = gr.grad(bid);
                           for (std::size_t i = 0; i < ib->size(); ++i)
                               gb.map().row(static_cast<int>(i)) += gy.map().row((*ib)[i]);
                       }
                   });
    return {&g, id};
}

// ---------------------------------------------------------------------------
// Temporal ops
// ---------------------------------------------------------------------------

// Same-padded 1-D convolution over time. x: T x Cin, w: (k*Cin) x Cout laid
// out with row index = tap*Cin + cin, b: 1 x Cout. Output: T x Cout.
template <class R>
V<R> conv1d_same(V<R> x, V<R> w, V<R> b, int k) {
    int T = x.rows(), cin = x.cols();
    if (w.rows() != k * cin) throw DimensionError("conv1d_same: weight rows != k*Cin");
    int cout = w.cols();
    if (b.rows() != 1 || b.cols() != cout) throw DimensionError("conv1d_same: bad bias shape");
    int pad = k / 2;
    Graph<R>& g = *x.g;
    // im2col buffer, shared with the backward closure
    auto cols = std::make_shared<Mat<R>>(T, k * cin);
    const Mat<R>& xv = x.val();
    for (int t = 0; t < T; ++t) {
        for (int j = 0; j < k; ++j) {
            int src = t + j - pad;
            for (int c = 0; c < cin; ++c)
                (*cols)(t, j * cin + c) = (src >= 0 && src < T) ? xv(src, c) : R(0);
        }
    }
    Mat<R> y;
    matmul_into(*cols, w.val(), y);
    y.map().rowwise() +=
        Eigen::Map<const Eigen::Matrix<R, 1, Eigen::Dynamic>>(b.val().data(), cout);
    int xid = x.id, wid = w.id, bid = b.id;
    int id = g.add(std::move(y), detail::any_grad<R>({x, w, b}), {xid, wid, bid},
                   [xid, wid, bid, cols, k, cin, pad](Graph<R>& gr, int self) {
                       const Mat<R>& gy = gr.grad(self);
                       int T = gy.rows;
                       if (gr.needs_grad(wid)) matmul_transA_acc(*cols, gy, gr.grad(wid));
                       if (gr.needs_grad(bid))
                           gr.grad(bid).map() += gy.map().colwise().sum();
                       if (gr.needs_grad(xid)) {
                           Mat<R> gcols;
                           matmul_transB_into(gy, gr.val(wid), gcols);
                           Mat<R>& gx = gr.grad(xid);
                           for (int t = 0; t < T; ++t)
                               for (int j = 0; j < k; ++j) {
                                   int src = t + j - pad;
                                   if (src < 0 || src >= T) continue;
                                   for (int c = 0; c < cin; ++c)
                                       gx(src, c) += gcols(t, j * cin + c);
                               }
                       }
                   });
    return {&g, id};
}

// Non-overlapping max pooling over time with stride == window: T x C ->
// ceil(T/window) x C, gradient routed to the argmax of each window.
template <class R>
V<R> maxpool_time(V<R> a, int window) {
    if (window < 1) throw DimensionError("maxpool_time: window must be >= 1");
    Graph<R>& g = *a.g;
    const Mat<R>& x = a.val();
    int T = x.rows, C = x.cols;
    int To = (T + window - 1) / window;
    Mat<R> y(To, C);
    auto argmax = std::make_shared<std::vector<int>>(static_cast<std::size_t>(To) * C);
    for (int o = 0; o < To; ++o) {
        int t0 = o * window;
        int t1 = std::min(T, t0 + window);
        for (int c = 0; c < C; ++c) {
            int best = t0;
            for (int t = t0 + 1; t < t1; ++t)
                if (x(t, c) > x(best, c)) best = t;
            y(o, c) = x(best, c);
            (*argmax)[static_cast<std::size_t>(o) * C + c] = best;
        }
    }
    int aid = a.id;
    int id = g.add(std::move(y), g.needs_grad(aid), {aid}, [aid, argmax](Graph<R>& gr, int self) {
        if (!gr.needs_grad(aid)) return;
        const Mat<R>& gy = gr.grad(self);
        Mat<R>& ga = gr.grad(aid);
        for (int o = 0; o < gy.rows; ++o)
            for (int c = 0; c < gy.cols; ++c)
                ga((*argmax)[static_cast<std::size_t>(o) * gy.cols + c], c) += gy(o, c);
    });
    return {&g, id};
}

// ---------------------------------------------------------------------------
// Soft dynamic time warping against a fixed reference
// ---------------------------------------------------------------------------

// a: n x 1 graph column, b: fixed reference sequence, cost (a_i - b_j)^2.
// Forward is the soft-min alignment recursion; backward distributes through
// the expected-alignment matrix. Internal arithmetic is double for stability
// at small gamma.
template <class R>
V<R> soft_dtw_to(V<R> a, const std::vector<double>& b, double gamma) {
    if (a.cols() != 1) throw DimensionError("soft_dtw_to: input must be a column");
    if (b.empty() || a.rows() < 1) throw DimensionError("soft_dtw_to: empty sequence");
    if (!(gamma > 0)) throw ValidationError("soft_dtw_to: gamma must be positive");
    Graph<R>& g = *a.g;
    int n = a.rows(), m = static_cast<int>(b.size());
    const Mat<R>& av = a.val();

    auto cost = [&](int i, int j) {
        double d = static_cast<double>(av(i, 0)) - b[j];
        return d * d;
    };
    auto costs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * m);
    auto Rmat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * m);
    auto at = [m](std::vector<double>& v, int i, int j) -> double& {
        return v[static_cast<std::size_t>(i) * m + j];
    };
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
            double c = cost(i, j);
            at(*costs, i, j) = c;
            if (i == 0 && j == 0) {
                at(*Rmat, i, j) = c;
                continue;
            }
            double best = std::numeric_limits<double>::infinity();
            double acc = 0;
            auto visit = [&](double r) {
                if (r < best) {
                    acc = acc * std::exp((r - best) / gamma) + 1.0;
                    best = r;
                } else {
                    acc += std::exp((best - r) / gamma);
                }
            };
            if (i > 0) visit(at(*Rmat, i - 1, j));
            if (j > 0) visit(at(*Rmat, i, j - 1));
            if (i > 0 && j > 0) visit(at(*Rmat, i - 1, j - 1));
            at(*Rmat, i, j) = c + (best - gamma * std::log(acc));
        }
    }
    Mat<R> y(1, 1);
    y(0, 0) = static_cast<R>(at(*Rmat, n - 1, m - 1));

    int aid = a.id;
    auto bcopy = std::make_shared<std::vector<double>>(b);
    int id = g.add(std::move(y), g.needs_grad(aid), {aid},
                   [aid, costs, Rmat, bcopy, gamma, n, m](Graph<R>& gr, int self) {
                       if (!gr.needs_grad(aid)) return;
                       auto at = [m](std::vector<double>& v, int i, int j) -> double& {
                           return v[static_cast<std::size_t>(i) * m + j];
                       };
                       // E(i,j) = dR(n-1,m-1)/dR(i,j), accumulated from successors.
                       std::vector<double> E(static_cast<std::size_t>(n) * m, 0.0);
                       at(E, n - 1, m - 1) = 1.0;
                       for (int i = n - 1; i >= 0; --i) {
                           for (int j = m - 1; j >= 0; --j) {
                               if (i == n - 1 && j == m - 1) continue;
                               double acc = 0;
                               auto from = [&](int si, int sj) {
                                   double w = std::exp((at(*Rmat, si, sj) - at(*costs, si, sj) -
                                                        at(*Rmat, i, j)) /
                                                       gamma);
                                   acc += at(E, si, sj) * w;
                               };
                               if (i + 1 < n) from(i + 1, j);
                               if (j + 1 < m) from(i, j + 1);
                               if (i + 1 < n && j + 1 < m) from(i + 1, j + 1);
                               at(E, i, j) = acc;
                           }
                       }
                       double gy = static_cast<double>(gr.grad(self)(0, 0));
                       const Mat<R>& av = gr.val(aid);
                       Mat<R>& ga = gr.grad(aid);
                       for (int i = 0; i < n; ++i) {
                           double s = 0;
                           for (int j = 0; j < m; ++j)
                               s += at(E, i, j) * 2.0 *
                                    (static_cast<double>(av(i, 0)) - (*bcopy)[j]);
                           ga(i, 0) += static_cast<R>(gy * s);
                       }
                   });
    return {&g, id};
}

}  // namespace sfms::ad
