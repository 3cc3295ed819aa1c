#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "atp/tensor.hpp"

namespace atp {

template <typename T>
Tensor<T> matmul_plain(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
void matmul_nt_acc(const Tensor<T>& g, const Tensor<T>& b, Tensor<T>& acc);
template <typename T>
void matmul_tn_acc(const Tensor<T>& a, const Tensor<T>& g, Tensor<T>& acc);

// Reverse-mode tape over dense tensors. A Tape owns all nodes created during
// one forward pass; Var is a cheap handle into it. Backward walks nodes in
// reverse creation order (a valid topological order by construction) and
// accumulates gradients additively. Reductions run left-to-right so repeated
// runs are bit-identical.
template <typename T>
class Tape;

template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor<T>& value() const;
    const Tensor<T>& grad() const;
};

template <typename T>
class Tape {
public:
    using BackFn = std::function<void(Tape&, int self)>;

    struct Node {
        Tensor<T> value;
        Tensor<T> grad;  // allocated lazily, same shape as value
        bool requires_grad = false;
        BackFn backprop;
    };

    Var<T> leaf(Tensor<T> v, bool requires_grad = true) {
        return push(std::move(v), requires_grad, nullptr);
    }

    Var<T> constant(Tensor<T> v) { return push(std::move(v), false, nullptr); }
    Var<T> constant_scalar(T v) { return constant(Tensor<T>::scalar(v)); }

    const Tensor<T>& value(Var<T> v) const { return nodes_[static_cast<size_t>(v.id)].value; }
    const Tensor<T>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }

    Tensor<T>& grad(Var<T> v) { return grad(v.id); }

    Tensor<T>& grad(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.shape != n.value.shape) n.grad = Tensor<T>(n.value.shape);
        return n.grad;
    }

    bool requires_grad(Var<T> v) const { return nodes_[static_cast<size_t>(v.id)].requires_grad; }
    bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

    size_t size() const { return nodes_.size(); }

    // Backward from a scalar root. Gradients accumulate; call zero_grad
    // between repeated passes to reproduce the first run bit-for-bit.
    void backward(Var<T> root) {
        if (value(root).numel() != 1) {
            throw ContractError("backward root must be scalar, got shape " +
                                value(root).shape_str());
        }
        grad(root).data[0] += T(1);
        for (int id = root.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.requires_grad && n.backprop && n.grad.shape == n.value.shape) {
                n.backprop(*this, id);
            }
        }
    }

    void zero_grad() {
        for (Node& n : nodes_) std::fill(n.grad.data.begin(), n.grad.data.end(), T(0));
    }

    Var<T> push(Tensor<T> v, bool requires_grad, BackFn backprop) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = requires_grad;
        n.backprop = std::move(backprop);
        nodes_.push_back(std::move(n));
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

private:
    std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return tape->value(*this);
}

template <typename T>
const Tensor<T>& Var<T>::grad() const {
    return const_cast<Tape<T>*>(tape)->grad(*this);
}

namespace detail {

template <typename T>
inline void require_same_tape(Var<T> a, Var<T> b, const char* op) {
    if (a.tape != b.tape) throw ContractError(std::string(op) + ": operands on different tapes");
}

template <typename T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape != b.shape) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require_same_tape(a, b, "add");
    Tape<T>& tp = *a.tape;
    detail::require_same_shape(tp.value(a), tp.value(b), "add");
    Tensor<T> out = tp.value(a);
    const auto& bv = tp.value(b).data;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv[i];
    bool rg = tp.requires_grad(a) || tp.requires_grad(b);
    int ia = a.id, ib = b.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ia, ib](Tape<T>& t, int self) {
        const auto& g = t.grad(self).data;
        if (t.requires_grad(ia)) {
            auto& ga = t.grad(ia).data;
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.requires_grad(ib)) {
            auto& gb = t.grad(ib).data;
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    detail::require_same_tape(a, b, "sub");
    Tape<T>& tp = *a.tape;
    detail::require_same_shape(tp.value(a), tp.value(b), "sub");
    Tensor<T> out = tp.value(a);
    const auto& bv = tp.value(b).data;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv[i];
    bool rg = tp.requires_grad(a) || tp.requires_grad(b);
    int ia = a.id, ib = b.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ia, ib](Tape<T>& t, int self) {
        const auto& g = t.grad(self).data;
        if (t.requires_grad(ia)) {
            auto& ga = t.grad(ia).data;
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.requires_grad(ib)) {
            auto& gb = t.grad(ib).data;
            for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::require_same_tape(a, b, "mul");
    Tape<T>& tp = *a.tape;
    detail::require_same_shape(tp.value(a), tp.value(b), "mul");
    Tensor<T> out = tp.value(a);
    const auto& bv = tp.value(b).data;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv[i];
    bool rg = tp.requires_grad(a) || tp.requires_grad(b);
    int ia = a.id, ib = b.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ia, ib](Tape<T>& t, int self) {
        const auto& g = t.grad(self).data;
        const auto& av = t.value(ia).data;
        const auto& bv2 = t.value(ib).data;
        if (t.requires_grad(ia)) {
            auto& ga = t.grad(ia).data;
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
        }
        if (t.requires_grad(ib)) {
            auto& gb = t.grad(ib).data;
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
    Tape<T>& tp = *a.tape;
    Tensor<T> out = tp.value(a);
    for (auto& v : out.data) v *= c;
    bool rg = tp.requires_grad(a);
    int ia = a.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ia, c](Tape<T>& t, int self) {
        const auto& g = t.grad(self).data;
        auto& ga = t.grad(ia).data;
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
    Tape<T>& tp = *a.tape;
    Tensor<T> out = tp.value(a);
    for (auto& v : out.data) v += c;
    bool rg = tp.requires_grad(a);
    int ia = a.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ia](Tape<T>& t, int self) {
        const auto& g = t.grad(self).data;
        auto& ga = t.grad(ia).data;
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

// Adds a length-q row vector to every row of a p x q matrix.
template <typename T>
Var<T> add_rowvec(Var<T> x, Var<T> b) {
    detail::require_same_tape(x, b, "add_rowvec");
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    const Tensor<T>& bv = tp.value(b);
    xv.require_rank(2, "add_rowvec x");
    if (bv.rank() != 1 || bv.shape[0] != xv.cols()) {
        throw ShapeError("add_rowvec: vector shape " + bv.shape_str() + " vs matrix " +
                         xv.shape_str());
    }
    Tensor<T> out = xv;
    int p = xv.rows(), q = xv.cols();
    for (int i = 0; i < p; ++i) {
        for (int j = 0; j < q; ++j) out.data[static_cast<size_t>(i) * q + j] += bv.data[j];
    }
    bool rg = tp.requires_grad(x) || tp.requires_grad(b);
    int ix = x.id, ib = b.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ix, ib, p, q](Tape<T>& t, int self) {
        const auto& g = t.grad(self).data;
        if (t.requires_grad(ix)) {
            auto& gx = t.grad(ix).data;
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (t.requires_grad(ib)) {
            auto& gb = t.grad(ib).data;
            for (int i = 0; i < p; ++i) {
                for (int j = 0; j < q; ++j) gb[j] += g[static_cast<size_t>(i) * q + j];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// matrix ops

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    detail::require_same_tape(a, b, "matmul");
    Tape<T>& tp = *a.tape;
    const Tensor<T>& av = tp.value(a);
    const Tensor<T>& bv = tp.value(b);
    av.require_rank(2, "matmul lhs");
    bv.require_rank(2, "matmul rhs");
    if (av.cols() != bv.rows()) {
        throw ShapeError("matmul: inner dimensions differ, " + av.shape_str() + " x " +
                         bv.shape_str());
    }
    Tensor<T> out = matmul_plain(av, bv);
    bool rg = tp.requires_grad(a) || tp.requires_grad(b);
    int ia = a.id, ib = b.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ia, ib](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& av2 = t.value(ia);
        const Tensor<T>& bv2 = t.value(ib);
        if (t.requires_grad(ia)) matmul_nt_acc(g, bv2, t.grad(ia));  // ga += g * b^T
        if (t.requires_grad(ib)) matmul_tn_acc(av2, g, t.grad(ib));  // gb += a^T * g
    });
}

// c = a * b, ikj loop order: deterministic left-to-right accumulation over k
// for every output element, and the j loop vectorizes.
template <typename T>
Tensor<T> matmul_plain(const Tensor<T>& a, const Tensor<T>& b) {
    int p = a.rows(), q = a.cols(), s = b.cols();
    Tensor<T> c({p, s});
    for (int i = 0; i < p; ++i) {
        const T* arow = &a.data[static_cast<size_t>(i) * q];
        T* crow = &c.data[static_cast<size_t>(i) * s];
        for (int k = 0; k < q; ++k) {
            T aik = arow[k];
            const T* brow = &b.data[static_cast<size_t>(k) * s];
            for (int j = 0; j < s; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

// acc += g * b^T   (g: p x s, b: q x s, acc: p x q)
template <typename T>
void matmul_nt_acc(const Tensor<T>& g, const Tensor<T>& b, Tensor<T>& acc) {
    int p = g.rows(), s = g.cols(), q = b.rows();
    for (int i = 0; i < p; ++i) {
        const T* grow = &g.data[static_cast<size_t>(i) * s];
        T* arow = &acc.data[static_cast<size_t>(i) * q];
        for (int k = 0; k < q; ++k) {
            const T* brow = &b.data[static_cast<size_t>(k) * s];
            T sum = T(0);
            for (int j = 0; j < s; ++j) sum += grow[j] * brow[j];
            arow[k] += sum;
        }
    }
}

// acc += a^T * g   (a: p x q, g: p x s, acc: q x s)
template <typename T>
void matmul_tn_acc(const Tensor<T>& a, const Tensor<T>& g, Tensor<T>& acc) {
    int p = a.rows(), q = a.cols(), s = g.cols();
    for (int i = 0; i < p; ++i) {
        const T* arow = &a.data[static_cast<size_t>(i) * q];
        const T* grow = &g.data[static_cast<size_t>(i) * s];
        for (int k = 0; k < q; ++k) {
            T aik = arow[k];
            T* acc_row = &acc.data[static_cast<size_t>(k) * s];
            for (int j = 0; j < s; ++j) acc_row[j] += aik * grow[j];
        }
    }
}

template <typename T>
Var<T> transpose(Var<T> a) {
    Tape<T>& tp = *a.tape;
    const Tensor<T>& av = tp.value(a);
    av.require_rank(2, "transpose");
    int p = av.rows(), q = av.cols();
    Tensor<T> out({q, p});
    for (int i = 0; i < p; ++i) {
        for (int j = 0; j < q; ++j) out.data[static_cast<size_t>(j) * p + i] = av.at(i, j);
    }
    bool rg = tp.requires_grad(a);
    int ia = a.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ia, p, q](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& ga = t.grad(ia);
        for (int i = 0; i < p; ++i) {
            for (int j = 0; j < q; ++j) ga.at(i, j) += g.at(j, i);
        }
    });
}

// y = x * diag(d): column j of x scaled by d[j]. The gradient w.r.t. d is how
// pruning decisions receive gradient from every masked projection.
template <typename T>
Var<T> colwise_mul(Var<T> x, Var<T> d) {
    detail::require_same_tape(x, d, "colwise_mul");
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    const Tensor<T>& dv = tp.value(d);
    xv.require_rank(2, "colwise_mul x");
    if (dv.rank() != 1 || dv.shape[0] != xv.cols()) {
        throw ShapeError("colwise_mul: mask shape " + dv.shape_str() + " vs matrix " +
                         xv.shape_str());
    }
    int p = xv.rows(), q = xv.cols();
    Tensor<T> out = xv;
    for (int i = 0; i < p; ++i) {
        for (int j = 0; j < q; ++j) out.data[static_cast<size_t>(i) * q + j] *= dv.data[j];
    }
    bool rg = tp.requires_grad(x) || tp.requires_grad(d);
    int ix = x.id, id_ = d.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ix, id_, p, q](Tape<T>& t, int self) {
        const auto& g = t.grad(self).data;
        const auto& xv2 = t.value(ix).data;
        const auto& dv2 = t.value(id_).data;
        if (t.requires_grad(ix)) {
            auto& gx = t.grad(ix).data;
            for (int i = 0; i < p; ++i) {
                for (int j = 0; j < q; ++j) {
                    size_t k = static_cast<size_t>(i) * q + j;
                    gx[k] += g[k] * dv2[j];
                }
            }
        }
        if (t.requires_grad(id_)) {
            auto& gd = t.grad(id_).data;
            for (int i = 0; i < p; ++i) {
                for (int j = 0; j < q; ++j) {
                    size_t k = static_cast<size_t>(i) * q + j;
                    gd[j] += g[k] * xv2[k];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// shape ops

template <typename T>
Var<T> reshape(Var<T> a, std::vector<int> shape) {
    Tape<T>& tp = *a.tape;
    const Tensor<T>& av = tp.value(a);
    if (Tensor<T>::numel_of(shape) != av.numel()) {
        throw ShapeError("reshape: cannot view " + av.shape_str() + " as " +
                         Tensor<T>::shape_str(shape));
    }
    Tensor<T> out(shape, av.data);
    bool rg = tp.requires_grad(a);
    int ia = a.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ia](Tape<T>& t, int self) {
        const auto& g = t.grad(self).data;
        auto& ga = t.grad(ia).data;
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

template <typename T>
Var<T> slice_cols(Var<T> a, int start, int len) {
    Tape<T>& tp = *a.tape;
    const Tensor<T>& av = tp.value(a);
    av.require_rank(2, "slice_cols");
    int p = av.rows(), q = av.cols();
    if (start < 0 || len < 0 || start + len > q) {
        throw IndexError("slice_cols: [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of " + std::to_string(q));
    }
    Tensor<T> out({p, len});
    for (int i = 0; i < p; ++i) {
        for (int j = 0; j < len; ++j) out.at(i, j) = av.at(i, start + j);
    }
    bool rg = tp.requires_grad(a);
    int ia = a.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ia, start, len, p](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& ga = t.grad(ia);
        for (int i = 0; i < p; ++i) {
            for (int j = 0; j < len; ++j) ga.at(i, start + j) += g.at(i, j);
        }
    });
}

template <typename T>
Var<T> slice_rows(Var<T> a, int start, int len) {
    Tape<T>& tp = *a.tape;
    const Tensor<T>& av = tp.value(a);
    av.require_rank(2, "slice_rows");
    int p = av.rows(), q = av.cols();
    if (start < 0 || len < 0 || start + len > p) {
        throw IndexError("slice_rows: [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of " + std::to_string(p));
    }
    Tensor<T> out({len, q});
    for (int i = 0; i < len; ++i) {
        for (int j = 0; j < q; ++j) out.at(i, j) = av.at(start + i, j);
    }
    bool rg = tp.requires_grad(a);
    int ia = a.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ia, start, len, q](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& ga = t.grad(ia);
        for (int i = 0; i < len; ++i) {
            for (int j = 0; j < q; ++j) ga.at(start + i, j) += g.at(i, j);
        }
    });
}

template <typename T>
Var<T> slice_vec(Var<T> a, int start, int len) {
    Tape<T>& tp = *a.tape;
    const Tensor<T>& av = tp.value(a);
    if (av.rank() != 1) throw ShapeError("slice_vec: tensor shape " + av.shape_str());
    int n = av.shape[0];
    if (start < 0 || len < 0 || start + len > n) {
        throw IndexError("slice_vec: [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of " + std::to_string(n));
    }
    Tensor<T> out({len});
    for (int j = 0; j < len; ++j) out.data[static_cast<size_t>(j)] = av.data[static_cast<size_t>(start + j)];
    bool rg = tp.requires_grad(a);
    int ia = a.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ia, start, len](Tape<T>& t, int self) {
        const auto& g = t.grad(self).data;
        auto& ga = t.grad(ia).data;
        for (int j = 0; j < len; ++j) ga[static_cast<size_t>(start + j)] += g[static_cast<size_t>(j)];
    });
}

// Concatenate matrices with equal row counts along columns. Repeating the
// same Var tiles it, and its gradient accumulates once per repetition.
template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    Tape<T>& tp = *parts[0].tape;
    int p = tp.value(parts[0]).rows();
    int total = 0;
    bool rg = false;
    for (Var<T> v : parts) {
        detail::require_same_tape(parts[0], v, "concat_cols");
        const Tensor<T>& t = tp.value(v);
        t.require_rank(2, "concat_cols part");
        if (t.rows() != p) throw ShapeError("concat_cols: row count mismatch");
        total += t.cols();
        rg = rg || tp.requires_grad(v);
    }
    Tensor<T> out({p, total});
    int off = 0;
    std::vector<int> ids, widths, offs;
    for (Var<T> v : parts) {
        const Tensor<T>& t = tp.value(v);
        int w = t.cols();
        for (int i = 0; i < p; ++i) {
            for (int j = 0; j < w; ++j) out.at(i, off + j) = t.at(i, j);
        }
        ids.push_back(v.id);
        widths.push_back(w);
        offs.push_back(off);
        off += w;
    }
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ids, widths, offs, p](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        for (size_t k = 0; k < ids.size(); ++k) {
            if (!t.requires_grad(ids[k])) continue;
            Tensor<T>& ga = t.grad(ids[k]);
            for (int i = 0; i < p; ++i) {
                for (int j = 0; j < widths[k]; ++j) ga.at(i, j) += g.at(i, offs[k] + j);
            }
        }
    });
}

// 1-D concatenation, used to tile per-head decision vectors across heads.
template <typename T>
Var<T> concat_vec(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_vec: no parts");
    Tape<T>& tp = *parts[0].tape;
    int total = 0;
    bool rg = false;
    for (Var<T> v : parts) {
        detail::require_same_tape(parts[0], v, "concat_vec");
        const Tensor<T>& t = tp.value(v);
        if (t.rank() != 1) throw ShapeError("concat_vec: part shape " + t.shape_str());
        total += t.shape[0];
        rg = rg || tp.requires_grad(v);
    }
    Tensor<T> out({total});
    std::vector<int> ids, widths, offs;
    int off = 0;
    for (Var<T> v : parts) {
        const Tensor<T>& t = tp.value(v);
        for (int j = 0; j < t.shape[0]; ++j) out.data[static_cast<size_t>(off + j)] = t.data[j];
        ids.push_back(v.id);
        widths.push_back(t.shape[0]);
        offs.push_back(off);
        off += t.shape[0];
    }
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ids, widths, offs](Tape<T>& t, int self) {
        const auto& g = t.grad(self).data;
        for (size_t k = 0; k < ids.size(); ++k) {
            if (!t.requires_grad(ids[k])) continue;
            auto& ga = t.grad(ids[k]).data;
            for (int j = 0; j < widths[k]; ++j) ga[j] += g[static_cast<size_t>(offs[k] + j)];
        }
    });
}

// Embedding lookup: rows of table selected by ids; backward scatter-adds.
template <typename T>
Var<T> gather_rows(Var<T> table, const std::vector<int>& ids) {
    Tape<T>& tp = *table.tape;
    const Tensor<T>& tv = tp.value(table);
    tv.require_rank(2, "gather_rows");
    int rows = tv.rows(), q = tv.cols();
    for (int id : ids) {
        if (id < 0 || id >= rows) {
            throw IndexError("gather_rows: id " + std::to_string(id) + " out of " +
                             std::to_string(rows));
        }
    }
    Tensor<T> out({static_cast<int>(ids.size()), q});
    for (size_t i = 0; i < ids.size(); ++i) {
        for (int j = 0; j < q; ++j) out.at(static_cast<int>(i), j) = tv.at(ids[i], j);
    }
    bool rg = tp.requires_grad(table);
    int it = table.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [it, ids, q](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& gt = t.grad(it);
        for (size_t i = 0; i < ids.size(); ++i) {
            for (int j = 0; j < q; ++j) gt.at(ids[i], j) += g.at(static_cast<int>(i), j);
        }
    });
}

// ---------------------------------------------------------------------------
// nonlinearities

template <typename T>
Var<T> sigmoid(Var<T> a) {
    Tape<T>& tp = *a.tape;
    Tensor<T> out = tp.value(a);
    for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
    bool rg = tp.requires_grad(a);
    int ia = a.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ia](Tape<T>& t, int self) {
        const auto& g = t.grad(self).data;
        const auto& y = t.value(self).data;
        auto& ga = t.grad(ia).data;
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
    });
}

template <typename T>
Var<T> relu(Var<T> a) {
    Tape<T>& tp = *a.tape;
    Tensor<T> out = tp.value(a);
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    bool rg = tp.requires_grad(a);
    int ia = a.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ia](Tape<T>& t, int self) {
        const auto& g = t.grad(self).data;
        const auto& x = t.value(ia).data;
        auto& ga = t.grad(ia).data;
        for (size_t i = 0; i < g.size(); ++i) ga[i] += x[i] > T(0) ? g[i] : T(0);
    });
}

template <typename T>
Var<T> silu(Var<T> a) {
    Tape<T>& tp = *a.tape;
    Tensor<T> out = tp.value(a);
    for (auto& v : out.data) v = v / (T(1) + std::exp(-v));
    bool rg = tp.requires_grad(a);
    int ia = a.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ia](Tape<T>& t, int self) {
        const auto& g = t.grad(self).data;
        const auto& x = t.value(ia).data;
        auto& ga = t.grad(ia).data;
        for (size_t i = 0; i < g.size(); ++i) {
            T s = T(1) / (T(1) + std::exp(-x[i]));
            ga[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
        }
    });
}

template <typename T>
Var<T> log_elem(Var<T> a) {
    Tape<T>& tp = *a.tape;
    Tensor<T> out = tp.value(a);
    for (auto& v : out.data) v = std::log(v);
    bool rg = tp.requires_grad(a);
    int ia = a.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ia](Tape<T>& t, int self) {
        const auto& g = t.grad(self).data;
        const auto& x = t.value(ia).data;
        auto& ga = t.grad(ia).data;
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
    });
}

// |x| with subgradient 0 at 0.
template <typename T>
Var<T> abs_elem(Var<T> a) {
    Tape<T>& tp = *a.tape;
    Tensor<T> out = tp.value(a);
    for (auto& v : out.data) v = std::abs(v);
    bool rg = tp.requires_grad(a);
    int ia = a.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ia](Tape<T>& t, int self) {
        const auto& g = t.grad(self).data;
        const auto& x = t.value(ia).data;
        auto& ga = t.grad(ia).data;
        for (size_t i = 0; i < g.size(); ++i) {
            T s = x[i] > T(0) ? T(1) : (x[i] < T(0) ? T(-1) : T(0));
            ga[i] += g[i] * s;
        }
    });
}

// max(x, c); gradient passes where x >= c.
template <typename T>
Var<T> clamp_min(Var<T> a, T c) {
    Tape<T>& tp = *a.tape;
    Tensor<T> out = tp.value(a);
    for (auto& v : out.data) v = v < c ? c : v;
    bool rg = tp.requires_grad(a);
    int ia = a.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ia, c](Tape<T>& t, int self) {
        const auto& g = t.grad(self).data;
        const auto& x = t.value(ia).data;
        auto& ga = t.grad(ia).data;
        for (size_t i = 0; i < g.size(); ++i) ga[i] += x[i] >= c ? g[i] : T(0);
    });
}

// Straight-through rounding: forward emits 1 where x >= 0.5 and 0 elsewhere;
// backward passes the incoming gradient through unchanged.
template <typename T>
Var<T> ste_round(Var<T> a) {
    Tape<T>& tp = *a.tape;
    Tensor<T> out = tp.value(a);
    for (auto& v : out.data) v = v >= T(0.5) ? T(1) : T(0);
    bool rg = tp.requires_grad(a);
    int ia = a.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ia](Tape<T>& t, int self) {
        const auto& g = t.grad(self).data;
        auto& ga = t.grad(ia).data;
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

// ---------------------------------------------------------------------------
// reductions and normalizations

template <typename T>
Var<T> sum(Var<T> a) {
    Tape<T>& tp = *a.tape;
    const auto& av = tp.value(a).data;
    T s = T(0);
    for (T v : av) s += v;
    bool rg = tp.requires_grad(a);
    int ia = a.id;
    return tp.push(Tensor<T>::scalar(s), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                                 : [ia](Tape<T>& t, int self) {
        T g = t.grad(self).data[0];
        auto& ga = t.grad(ia).data;
        for (auto& v : ga) v += g;
    });
}

template <typename T>
Var<T> mean(Var<T> a) {
    Tape<T>& tp = *a.tape;
    int64_t n = tp.value(a).numel();
    if (n == 0) throw ContractError("mean of empty tensor");
    return scale(sum(a), T(1) / static_cast<T>(n));
}

// Row softmax with an optional keep-mask; excluded entries behave like -inf.
// Rows whose every position is excluded come out all-zero.
template <typename T>
Var<T> softmax_rows(Var<T> x, const Tensor<uint8_t>* mask = nullptr) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    xv.require_rank(2, "softmax_rows");
    int p = xv.rows(), q = xv.cols();
    if (mask != nullptr && (mask->shape != xv.shape)) {
        throw ShapeError("softmax_rows: mask shape " + mask->shape_str() + " vs " +
                         xv.shape_str());
    }
    Tensor<T> out({p, q});
    std::vector<uint8_t> keep;
    if (mask != nullptr) keep = mask->data;
    for (int i = 0; i < p; ++i) {
        T m = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < q; ++j) {
            if (mask == nullptr || keep[static_cast<size_t>(i) * q + j]) m = std::max(m, xv.at(i, j));
        }
        if (!(m > -std::numeric_limits<T>::infinity())) continue;  // all masked: zero row
        T s = T(0);
        for (int j = 0; j < q; ++j) {
            if (mask == nullptr || keep[static_cast<size_t>(i) * q + j]) {
                T e = std::exp(xv.at(i, j) - m);
                out.at(i, j) = e;
                s += e;
            }
        }
        for (int j = 0; j < q; ++j) out.at(i, j) /= s;
    }
    bool rg = tp.requires_grad(x);
    int ix = x.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ix, p, q](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& y = t.value(self);
        Tensor<T>& gx = t.grad(ix);
        for (int i = 0; i < p; ++i) {
            T dot = T(0);
            for (int j = 0; j < q; ++j) dot += g.at(i, j) * y.at(i, j);
            for (int j = 0; j < q; ++j) gx.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
        }
    });
}

// RMS normalization over each row with a learned scale.
template <typename T>
Var<T> rmsnorm(Var<T> x, Var<T> gamma, T eps) {
    detail::require_same_tape(x, gamma, "rmsnorm");
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    const Tensor<T>& gv = tp.value(gamma);
    xv.require_rank(2, "rmsnorm x");
    if (gv.rank() != 1 || gv.shape[0] != xv.cols()) {
        throw ShapeError("rmsnorm: scale shape " + gv.shape_str() + " vs " + xv.shape_str());
    }
    int p = xv.rows(), q = xv.cols();
    Tensor<T> out({p, q});
    for (int i = 0; i < p; ++i) {
        T ms = T(0);
        for (int j = 0; j < q; ++j) ms += xv.at(i, j) * xv.at(i, j);
        T r = T(1) / std::sqrt(ms / static_cast<T>(q) + eps);
        for (int j = 0; j < q; ++j) out.at(i, j) = xv.at(i, j) * r * gv.data[j];
    }
    bool rg = tp.requires_grad(x) || tp.requires_grad(gamma);
    int ix = x.id, ig = gamma.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ix, ig, p, q, eps](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& xv2 = t.value(ix);
        const Tensor<T>& gv2 = t.value(ig);
        for (int i = 0; i < p; ++i) {
            T ms = T(0);
            for (int j = 0; j < q; ++j) ms += xv2.at(i, j) * xv2.at(i, j);
            T inv = T(1) / std::sqrt(ms / static_cast<T>(q) + eps);
            if (t.requires_grad(ig)) {
                Tensor<T>& gg = t.grad(ig);
                for (int j = 0; j < q; ++j) gg.data[j] += g.at(i, j) * xv2.at(i, j) * inv;
            }
            if (t.requires_grad(ix)) {
                Tensor<T>& gx = t.grad(ix);
                T dot = T(0);
                for (int j = 0; j < q; ++j) dot += g.at(i, j) * gv2.data[j] * xv2.at(i, j);
                T c = dot * inv * inv * inv / static_cast<T>(q);
                for (int j = 0; j < q; ++j) {
                    gx.at(i, j) += g.at(i, j) * gv2.data[j] * inv - xv2.at(i, j) * c;
                }
            }
        }
    });
}

// LayerNorm over each row with learned scale and shift.
template <typename T>
Var<T> layernorm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
    detail::require_same_tape(x, gamma, "layernorm");
    detail::require_same_tape(x, beta, "layernorm");
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    const Tensor<T>& gv = tp.value(gamma);
    const Tensor<T>& bv = tp.value(beta);
    xv.require_rank(2, "layernorm x");
    if (gv.rank() != 1 || gv.shape[0] != xv.cols() || bv.shape != gv.shape) {
        throw ShapeError("layernorm: parameter shapes " + gv.shape_str() + "/" + bv.shape_str() +
                         " vs " + xv.shape_str());
    }
    int p = xv.rows(), q = xv.cols();
    Tensor<T> out({p, q});
    for (int i = 0; i < p; ++i) {
        T mu = T(0);
        for (int j = 0; j < q; ++j) mu += xv.at(i, j);
        mu /= static_cast<T>(q);
        T var = T(0);
        for (int j = 0; j < q; ++j) {
            T d = xv.at(i, j) - mu;
            var += d * d;
        }
        var /= static_cast<T>(q);
        T inv = T(1) / std::sqrt(var + eps);
        for (int j = 0; j < q; ++j) {
            out.at(i, j) = (xv.at(i, j) - mu) * inv * gv.data[j] + bv.data[j];
        }
    }
    bool rg = tp.requires_grad(x) || tp.requires_grad(gamma) || tp.requires_grad(beta);
    int ix = x.id, ig = gamma.id, ib = beta.id;
    return tp.push(std::move(out), rg, !rg ? typename Tape<T>::BackFn(nullptr)
                                           : [ix, ig, ib, p, q, eps](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& xv2 = t.value(ix);
        const Tensor<T>& gv2 = t.value(ig);
        for (int i = 0; i < p; ++i) {
            T mu = T(0);
            for (int j = 0; j < q; ++j) mu += xv2.at(i, j);
            mu /= static_cast<T>(q);
            T var = T(0);
            for (int j = 0; j < q; ++j) {
                T d = xv2.at(i, j) - mu;
                var += d * d;
            }
            var /= static_cast<T>(q);
            T inv = T(1) / std::sqrt(var + eps);
            if (t.requires_grad(ib)) {
                Tensor<T>& gb = t.grad(ib);
                for (int j = 0; j < q; ++j) gb.data[j] += g.at(i, j);
            }
            if (t.requires_grad(ig)) {
                Tensor<T>& gg = t.grad(ig);
                for (int j = 0; j < q; ++j) {
                    gg.data[j] += g.at(i, j) * (xv2.at(i, j) - mu) * inv;
                }
            }
            if (t.requires_grad(ix)) {
                Tensor<T>& gx = t.grad(ix);
                T sum_dy = T(0), sum_dyx = T(0);
                for (int j = 0; j < q; ++j) {
                    T dy = g.at(i, j) * gv2.data[j];
                    sum_dy += dy;
                    sum_dyx += dy * (xv2.at(i, j) - mu) * inv;
                }
                for (int j = 0; j < q; ++j) {
                    T xh = (xv2.at(i, j) - mu) * inv;
                    T dy = g.at(i, j) * gv2.data[j];
                    gx.at(i, j) += inv * (dy - sum_dy / static_cast<T>(q) -
                                          xh * sum_dyx / static_cast<T>(q));
                }
            }
        }
    });
}

// Mean next-token negative log-likelihood: row i of logits predicts target[i].
template <typename T>
Var<T> cross_entropy_mean(Var<T> logits, const std::vector<int>& targets) {
    Tape<T>& tp = *logits.tape;
    const Tensor<T>& lv = tp.value(logits);
    lv.require_rank(2, "cross_entropy_mean");
    int n = lv.rows(), vsz = lv.cols();
    if (static_cast<int>(targets.size()) != n) {
        throw ShapeError("cross_entropy_mean: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(n) + " rows");
    }
    if (n == 0) throw ContractError("cross_entropy_mean: empty batch");
    for (int t : targets) {
        if (t < 0 || t >= vsz) throw IndexError("cross_entropy_mean: target " + std::to_string(t));
    }
    T total = T(0);
    for (int i = 0; i < n; ++i) {
        T m = lv.at(i, 0);
        for (int j = 1; j < vsz; ++j) m = std::max(m, lv.at(i, j));
        T s = T(0);
        for (int j = 0; j < vsz; ++j) s += std::exp(lv.at(i, j) - m);
        total += m + std::log(s) - lv.at(i, targets[i]);
    }
    total /= static_cast<T>(n);
    bool rg = tp.requires_grad(logits);
    int il = logits.id;
    return tp.push(Tensor<T>::scalar(total), rg,
                   !rg ? typename Tape<T>::BackFn(nullptr)
                       : [il, targets, n, vsz](Tape<T>& t, int self) {
        T g = t.grad(self).data[0] / static_cast<T>(n);
        const Tensor<T>& lv2 = t.value(il);
        Tensor<T>& gl = t.grad(il);
        for (int i = 0; i < n; ++i) {
            T m = lv2.at(i, 0);
            for (int j = 1; j < vsz; ++j) m = std::max(m, lv2.at(i, j));
            T s = T(0);
            for (int j = 0; j < vsz; ++j) s += std::exp(lv2.at(i, j) - m);
            for (int j = 0; j < vsz; ++j) {
                T p = std::exp(lv2.at(i, j) - m) / s;
                gl.at(i, j) += g * (p - (j == targets[i] ? T(1) : T(0)));
            }
        }
    });
}

// Euclidean norm of the entries selected by flat indices. Gradient at the
// zero vector is defined as zero (group-lasso subgradient choice).
template <typename T>
Var<T> group_l2(Var<T> x, const std::vector<int64_t>& indices) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    for (int64_t k : indices) {
        if (k < 0 || k >= xv.numel()) {
            throw IndexError("group_l2: index " + std::to_string(k) + " out of " +
                             std::to_string(xv.numel()));
        }
    }
    T ss = T(0);
    for (int64_t k : indices) ss += xv.data[static_cast<size_t>(k)] * xv.data[static_cast<size_t>(k)];
    T norm = std::sqrt(ss);
    bool rg = tp.requires_grad(x);
    int ix = x.id;
    return tp.push(Tensor<T>::scalar(norm), rg,
                   !rg ? typename Tape<T>::BackFn(nullptr)
                       : [ix, indices](Tape<T>& t, int self) {
        T y = t.value(self).data[0];
        if (y == T(0)) return;
        T g = t.grad(self).data[0] / y;
        const auto& xv2 = t.value(ix).data;
        auto& gx = t.grad(ix).data;
        for (int64_t k : indices) gx[static_cast<size_t>(k)] += g * xv2[static_cast<size_t>(k)];
    });
}

// Sum of L2 norms of the columns marked by select (0/1 per column).
template <typename T>
Var<T> sum_l2_cols(Var<T> x, const std::vector<uint8_t>& select) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    xv.require_rank(2, "sum_l2_cols");
    int p = xv.rows(), q = xv.cols();
    if (static_cast<int>(select.size()) != q) {
        throw ShapeError("sum_l2_cols: select length " + std::to_string(select.size()) +
                         " vs cols " + std::to_string(q));
    }
    T total = T(0);
    for (int j = 0; j < q; ++j) {
        if (!select[static_cast<size_t>(j)]) continue;
        T ss = T(0);
        for (int i = 0; i < p; ++i) ss += xv.at(i, j) * xv.at(i, j);
        total += std::sqrt(ss);
    }
    bool rg = tp.requires_grad(x);
    int ix = x.id;
    return tp.push(Tensor<T>::scalar(total), rg,
                   !rg ? typename Tape<T>::BackFn(nullptr)
                       : [ix, select, p, q](Tape<T>& t, int self) {
        T g = t.grad(self).data[0];
        const Tensor<T>& xv2 = t.value(ix);
        Tensor<T>& gx = t.grad(ix);
        for (int j = 0; j < q; ++j) {
            if (!select[static_cast<size_t>(j)]) continue;
            T ss = T(0);
            for (int i = 0; i < p; ++i) ss += xv2.at(i, j) * xv2.at(i, j);
            T norm = std::sqrt(ss);
            if (norm == T(0)) continue;
            for (int i = 0; i < p; ++i) gx.at(i, j) += g * xv2.at(i, j) / norm;
        }
    });
}

// Sum of L2 norms of the rows marked by select (0/1 per row).
template <typename T>
Var<T> sum_l2_rows(Var<T> x, const std::vector<uint8_t>& select) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    xv.require_rank(2, "sum_l2_rows");
    int p = xv.rows(), q = xv.cols();
    if (static_cast<int>(select.size()) != p) {
        throw ShapeError("sum_l2_rows: select length " + std::to_string(select.size()) +
                         " vs rows " + std::to_string(p));
    }
    T total = T(0);
    for (int i = 0; i < p; ++i) {
        if (!select[static_cast<size_t>(i)]) continue;
        T ss = T(0);
        for (int j = 0; j < q; ++j) ss += xv.at(i, j) * xv.at(i, j);
        total += std::sqrt(ss);
    }
    bool rg = tp.requires_grad(x);
    int ix = x.id;
    return tp.push(Tensor<T>::scalar(total), rg,
                   !rg ? typename Tape<T>::BackFn(nullptr)
                       : [ix, select, p, q](Tape<T>& t, int self) {
        T g = t.grad(self).data[0];
        const Tensor<T>& xv2 = t.value(ix);
        Tensor<T>& gx = t.grad(ix);
        for (int i = 0; i < p; ++i) {
            if (!select[static_cast<size_t>(i)]) continue;
            T ss = T(0);
            for (int j = 0; j < q; ++j) ss += xv2.at(i, j) * xv2.at(i, j);
            T norm = std::sqrt(ss);
            if (norm == T(0)) continue;
            for (int j = 0; j < q; ++j) gx.at(i, j) += g * xv2.at(i, j) / norm;
        }
    });
}

}  // namespace atp
