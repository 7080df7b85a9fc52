#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "skillrank/tensor.hpp"

namespace skillrank {

class Tape;

// Handle to a node on a tape.
struct Value {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode computation record, rebuilt per forward pass (define-by-run).
// Nodes are appended in evaluation order, so the list is topologically sorted
// and one reverse sweep visits every node exactly once.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

    Value leaf(Tensor v) { return record("leaf", std::move(v), {}); }

    Value record(const char* op, Tensor out, std::vector<int> parents) {
        for (int p : parents) {
            if (p < 0 || p >= static_cast<int>(nodes_.size()))
                throw std::invalid_argument(std::string("tape: parent of '") + op +
                                            "' is not an earlier node");
        }
        nodes_.push_back(Node{std::move(out), std::move(parents), nullptr, op});
        return Value{this, static_cast<int>(nodes_.size()) - 1};
    }

    void set_backward(Value v, BackwardFn fn) { nodes_.at(v.id).backward = std::move(fn); }

    const Tensor& value(int id) const { return nodes_.at(id).value; }
    const Tensor& value(Value v) const { return value(v.id); }
    double scalar(Value v) const {
        const Tensor& t = value(v);
        if (t.size() != 1) throw std::invalid_argument("tape: node is not scalar");
        return t[0];
    }

    std::size_t node_count() const { return nodes_.size(); }
    const std::vector<int>& parents(int id) const { return nodes_.at(id).parents; }
    const char* op_name(int id) const { return nodes_.at(id).op; }

    // Gradient of the last backward() loss w.r.t. node v; zeros if the loss
    // does not depend on it. Repeated backward() calls give identical results
    // because buffers are reset on every call.
    Tensor grad(Value v) const {
        if (!ran_backward_) throw std::logic_error("tape: grad() before backward()");
        if (touched_[v.id]) return grads_[v.id];
        return Tensor::zeros(value(v.id).shape());
    }

    void backward(Value loss) {
        if (loss.tape != this) throw std::invalid_argument("tape: loss from another tape");
        if (value(loss).size() != 1)
            throw std::invalid_argument("tape: backward seed must be scalar, got shape " +
                                        value(loss).shape_str());
        grads_.assign(nodes_.size(), Tensor{});
        touched_.assign(nodes_.size(), 0);
        grad_accum(loss.id)[0] = 1.0;
        for (int i = loss.id; i >= 0; --i) {
            if (touched_[i] && nodes_[i].backward) nodes_[i].backward(*this, grads_[i]);
        }
        ran_backward_ = true;
    }

    // Accumulation buffer used by op backward closures.
    Tensor& grad_accum(int id) {
        if (!touched_[id]) {
            grads_[id] = Tensor::zeros(nodes_[id].value.shape());
            touched_[id] = 1;
        }
        return grads_[id];
    }

private:
    struct Node {
        Tensor value;
        std::vector<int> parents;
        BackwardFn backward;
        const char* op;
    };

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::vector<char> touched_;
    bool ran_backward_ = false;
};

namespace detail {

inline void require_same_tape(Value a, Value b, const char* op) {
    if (a.tape != b.tape || a.tape == nullptr)
        throw std::invalid_argument(std::string(op) + ": operands from different tapes");
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
}

// C[m,n] += A[m,k] * B[k,n]; inner accumulation in ascending k.
inline void mm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void mm_acc_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                      std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            const double* ai = a + i * k;
            const double* bj = b + j * k;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            c[i * n + j] += s;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void mm_acc_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                      std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double* cp = c + p * n;
            const double aip = ai[p];
            for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
        }
    }
}

}  // namespace detail

// ---- arithmetic ------------------------------------------------------------

// [m,k]x[k,n] -> [m,n], or [m,k]x[k] -> [m].
inline Value matmul(Value a, Value b) {
    detail::require_same_tape(a, b, "matmul");
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (av.rank() != 2 || (bv.rank() != 2 && bv.rank() != 1))
        throw std::invalid_argument("matmul: expects [m,k]x[k,n] or [m,k]x[k], got " +
                                    av.shape_str() + " and " + bv.shape_str());
    const std::size_t m = av.dim(0), k = av.dim(1);
    const bool vec = bv.rank() == 1;
    const std::size_t n = vec ? 1 : bv.dim(1);
    if (bv.dim(0) != k)
        throw std::invalid_argument("matmul: inner dimensions disagree, " + av.shape_str() +
                                    " vs " + bv.shape_str());
    Tensor out(vec ? std::vector<std::size_t>{m} : std::vector<std::size_t>{m, n});
    detail::mm_acc(av.data(), bv.data(), out.data(), m, k, n);
    Value y = t.record("matmul", std::move(out), {a.id, b.id});
    t.set_backward(y, [aid = a.id, bid = b.id, m, k, n](Tape& t, const Tensor& g) {
        const Tensor& av = t.value(aid);
        const Tensor& bv = t.value(bid);
        detail::mm_acc_nt(g.data(), bv.data(), t.grad_accum(aid).data(), m, n, k);
        detail::mm_acc_tn(av.data(), g.data(), t.grad_accum(bid).data(), m, k, n);
    });
    return y;
}

namespace detail {

enum class Ew { Add, Sub, Mul };

inline Value elementwise_impl(Ew kind, Value a, Value b, const char* name) {
    require_same_tape(a, b, name);
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    require_same_shape(av, bv, name);
    Tensor out(av.shape());
    const std::size_t n = out.size();
    switch (kind) {
        case Ew::Add:
            for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
            break;
        case Ew::Sub:
            for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i];
            break;
        case Ew::Mul:
            for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
            break;
    }
    Value y = t.record(name, std::move(out), {a.id, b.id});
    t.set_backward(y, [kind, aid = a.id, bid = b.id, n](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_accum(aid);
        Tensor& gb = t.grad_accum(bid);
        switch (kind) {
            case Ew::Add:
                for (std::size_t i = 0; i < n; ++i) {
                    ga[i] += g[i];
                    gb[i] += g[i];
                }
                break;
            case Ew::Sub:
                for (std::size_t i = 0; i < n; ++i) {
                    ga[i] += g[i];
                    gb[i] -= g[i];
                }
                break;
            case Ew::Mul: {
                const Tensor& av = t.value(aid);
                const Tensor& bv = t.value(bid);
                for (std::size_t i = 0; i < n; ++i) {
                    ga[i] += g[i] * bv[i];
                    gb[i] += g[i] * av[i];
                }
                break;
            }
        }
    });
    return y;
}

}  // namespace detail

inline Value add(Value a, Value b) { return detail::elementwise_impl(detail::Ew::Add, a, b, "add"); }
inline Value sub(Value a, Value b) { return detail::elementwise_impl(detail::Ew::Sub, a, b, "sub"); }
inline Value mul(Value a, Value b) { return detail::elementwise_impl(detail::Ew::Mul, a, b, "mul"); }

// Explicit scalar-with-tensor forms; there is no implicit broadcasting.
inline Value add_const(Value a, double c) {
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + c;
    Value y = t.record("add_const", std::move(out), {a.id});
    t.set_backward(y, [aid = a.id](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_accum(aid);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
    return y;
}

inline Value scale(Value a, double c) {
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
    Value y = t.record("scale", std::move(out), {a.id});
    t.set_backward(y, [aid = a.id, c](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_accum(aid);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
    return y;
}

// ---- nonlinearities --------------------------------------------------------

enum class Act { Tanh, Sigmoid, Relu };

inline Value activation(Act kind, Value x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    Tensor out(xv.shape());
    const std::size_t n = xv.size();
    switch (kind) {
        case Act::Tanh:
            for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(xv[i]);
            break;
        case Act::Sigmoid:
            for (std::size_t i = 0; i < n; ++i) out[i] = 1.0 / (1.0 + std::exp(-xv[i]));
            break;
        case Act::Relu:
            for (std::size_t i = 0; i < n; ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
            break;
    }
    const char* name = kind == Act::Tanh ? "tanh" : kind == Act::Sigmoid ? "sigmoid" : "relu";
    Value y = t.record(name, std::move(out), {x.id});
    t.set_backward(y, [kind, xid = x.id, yid = y.id, n](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad_accum(xid);
        const Tensor& yv = t.value(yid);
        switch (kind) {
            case Act::Tanh:
                for (std::size_t i = 0; i < n; ++i) gx[i] += (1.0 - yv[i] * yv[i]) * g[i];
                break;
            case Act::Sigmoid:
                for (std::size_t i = 0; i < n; ++i) gx[i] += yv[i] * (1.0 - yv[i]) * g[i];
                break;
            case Act::Relu: {
                const Tensor& xv = t.value(xid);
                for (std::size_t i = 0; i < n; ++i)
                    if (xv[i] > 0.0) gx[i] += g[i];
                break;
            }
        }
    });
    return y;
}

inline Value tanh(Value x) { return activation(Act::Tanh, x); }
inline Value sigmoid(Value x) { return activation(Act::Sigmoid, x); }
inline Value relu(Value x) { return activation(Act::Relu, x); }

// Max-subtracted softmax over the flattened tensor; safe for inputs of any
// magnitude. Output sums to 1 up to rounding of the final division.
inline Value softmax_stable(Value x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    const std::size_t n = xv.size();
    if (n == 0) throw std::invalid_argument("softmax_stable: empty input");
    double m = xv[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, xv[i]);
    Tensor out(xv.shape());
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = std::exp(xv[i] - m);
        s += out[i];
    }
    for (std::size_t i = 0; i < n; ++i) out[i] /= s;
    Value y = t.record("softmax", std::move(out), {x.id});
    t.set_backward(y, [xid = x.id, yid = y.id, n](Tape& t, const Tensor& g) {
        const Tensor& yv = t.value(yid);
        Tensor& gx = t.grad_accum(xid);
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += g[i] * yv[i];
        for (std::size_t i = 0; i < n; ++i) gx[i] += yv[i] * (g[i] - dot);
    });
    return y;
}

// ---- spatial reductions ----------------------------------------------------

namespace detail {
inline void require_chw(const Tensor& x, const char* op) {
    if (x.rank() != 3)
        throw std::invalid_argument(std::string(op) + ": expects [C,H,W], got " + x.shape_str());
}
}  // namespace detail

// Per-channel global mean over all HxW locations.
inline Value spatial_avg_pool(Value x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    detail::require_chw(xv, "spatial_avg_pool");
    const std::size_t c = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
    Tensor out({c});
    for (std::size_t ci = 0; ci < c; ++ci) {
        double s = 0.0;
        const double* p = xv.data() + ci * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
        out[ci] = s / static_cast<double>(hw);
    }
    Value y = t.record("avg_pool", std::move(out), {x.id});
    t.set_backward(y, [xid = x.id, c, hw](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad_accum(xid);
        const double inv = 1.0 / static_cast<double>(hw);
        for (std::size_t ci = 0; ci < c; ++ci) {
            double* p = gx.data() + ci * hw;
            const double gc = g[ci] * inv;
            for (std::size_t i = 0; i < hw; ++i) p[i] += gc;
        }
    });
    return y;
}

// Per-channel global max; gradient routes to the argmax location, ties broken
// by the first (lowest flat index) maximum.
inline Value spatial_max_pool(Value x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    detail::require_chw(xv, "spatial_max_pool");
    const std::size_t c = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
    Tensor out({c});
    std::vector<std::size_t> argmax(c);
    for (std::size_t ci = 0; ci < c; ++ci) {
        const double* p = xv.data() + ci * hw;
        std::size_t best = 0;
        for (std::size_t i = 1; i < hw; ++i)
            if (p[i] > p[best]) best = i;
        out[ci] = p[best];
        argmax[ci] = best;
    }
    Value y = t.record("max_pool", std::move(out), {x.id});
    t.set_backward(y, [xid = x.id, hw, argmax = std::move(argmax)](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad_accum(xid);
        for (std::size_t ci = 0; ci < argmax.size(); ++ci)
            gx[ci * hw + argmax[ci]] += g[ci];
    });
    return y;
}

// v_c = sum_i alpha_i x[c,i] over flattened locations; alpha must lie on the
// simplex (checked to 1e-6).
inline Value weighted_spatial_sum(Value x, Value alpha) {
    detail::require_same_tape(x, alpha, "weighted_spatial_sum");
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    const Tensor& av = t.value(alpha);
    detail::require_chw(xv, "weighted_spatial_sum");
    const std::size_t c = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
    if (av.rank() != 1 || av.dim(0) != hw)
        throw std::invalid_argument("weighted_spatial_sum: weights " + av.shape_str() +
                                    " do not match " + std::to_string(hw) + " locations");
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
        if (av[i] < -1e-6)
            throw std::invalid_argument("weighted_spatial_sum: negative weight");
        s += av[i];
    }
    if (std::abs(s - 1.0) > 1e-6)
        throw std::invalid_argument("weighted_spatial_sum: weights sum to " + std::to_string(s) +
                                    ", not normalized");
    Tensor out({c});
    for (std::size_t ci = 0; ci < c; ++ci) {
        const double* p = xv.data() + ci * hw;
        double acc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) acc += av[i] * p[i];
        out[ci] = acc;
    }
    Value y = t.record("weighted_sum", std::move(out), {x.id, alpha.id});
    t.set_backward(y, [xid = x.id, aid = alpha.id, c, hw](Tape& t, const Tensor& g) {
        const Tensor& xv = t.value(xid);
        const Tensor& av = t.value(aid);
        Tensor& gx = t.grad_accum(xid);
        Tensor& ga = t.grad_accum(aid);
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double gc = g[ci];
            const double* p = xv.data() + ci * hw;
            double* q = gx.data() + ci * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                q[i] += gc * av[i];
                ga[i] += gc * p[i];
            }
        }
    });
    return y;
}

// ---- shape ops ---------------------------------------------------------------

inline Value concat(std::size_t axis, Value a, Value b) {
    detail::require_same_tape(a, b, "concat");
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (av.rank() != bv.rank() || axis >= av.rank())
        throw std::invalid_argument("concat: rank mismatch or bad axis, " + av.shape_str() +
                                    " vs " + bv.shape_str());
    for (std::size_t i = 0; i < av.rank(); ++i)
        if (i != axis && av.dim(i) != bv.dim(i))
            throw std::invalid_argument("concat: shapes disagree off axis, " + av.shape_str() +
                                        " vs " + bv.shape_str());
    std::vector<std::size_t> shape = av.shape();
    shape[axis] += bv.dim(axis);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= av.dim(i);
    for (std::size_t i = axis + 1; i < av.rank(); ++i) inner *= av.dim(i);
    const std::size_t ablk = av.dim(axis) * inner, bblk = bv.dim(axis) * inner;
    Tensor out(shape);
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(av.data() + o * ablk, ablk, out.data() + o * (ablk + bblk));
        std::copy_n(bv.data() + o * bblk, bblk, out.data() + o * (ablk + bblk) + ablk);
    }
    Value y = t.record("concat", std::move(out), {a.id, b.id});
    t.set_backward(y, [aid = a.id, bid = b.id, outer, ablk, bblk](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_accum(aid);
        Tensor& gb = t.grad_accum(bid);
        for (std::size_t o = 0; o < outer; ++o) {
            const double* src = g.data() + o * (ablk + bblk);
            double* da = ga.data() + o * ablk;
            double* db = gb.data() + o * bblk;
            for (std::size_t i = 0; i < ablk; ++i) da[i] += src[i];
            for (std::size_t i = 0; i < bblk; ++i) db[i] += src[ablk + i];
        }
    });
    return y;
}

// Same elements, new shape; no data movement in the reverse pass either.
inline Value reshape(Value x, std::vector<std::size_t> shape) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    Tensor out(std::move(shape), xv.values());
    if (out.size() != xv.size())
        throw std::invalid_argument("reshape: element count changes, " + xv.shape_str() + " -> " +
                                    out.shape_str());
    Value y = t.record("reshape", std::move(out), {x.id});
    t.set_backward(y, [xid = x.id](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad_accum(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
    return y;
}

inline Value sum(Value x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    double s = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i];
    Value y = t.record("sum", Tensor::scalar(s), {x.id});
    t.set_backward(y, [xid = x.id](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad_accum(xid);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
    });
    return y;
}

}  // namespace skillrank
