#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace css {

constexpr double kEps = 1e-12;

// Dense row-major tensor of doubles. The value buffer is shared so
// tensors are cheap to copy; contents are treated as immutable once an
// op has consumed them. `node` links the tensor into the active tape
// (-1 = constant, gradients do not flow).
struct Tensor {
    std::vector<int> shape;
    std::shared_ptr<std::vector<double>> store;
    int node = -1;

    Tensor() : store(std::make_shared<std::vector<double>>()) {}

    Tensor(std::vector<int> s, std::vector<double> v)
        : shape(std::move(s)), store(std::make_shared<std::vector<double>>(std::move(v))) {
        if (static_cast<int>(store->size()) != size_of(shape))
            throw std::invalid_argument("tensor: shape/value size mismatch");
    }

    static int size_of(const std::vector<int>& s) {
        int n = 1;
        for (int d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int> s) {
        int n = size_of(s);
        return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), 0.0));
    }

    static Tensor full(std::vector<int> s, double v) {
        int n = size_of(s);
        return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), v));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    int size() const { return static_cast<int>(store->size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    double* data() { return store->data(); }
    const double* data() const { return store->data(); }
    double item() const {
        if (size() != 1) throw std::logic_error("tensor: item() on non-scalar");
        return (*store)[0];
    }
    bool finite() const {
        for (double v : *store)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// Reverse-mode tape. Ops append nodes in topological order; backward
// walks the record once in reverse, accumulating into per-node gradient
// buffers (fan-out sums naturally).
class Tape {
public:
    using BackwardFn = std::function<void(const std::vector<double>& out_grad, Tape& tape)>;

    // Registers `t` as a leaf so its gradient is retained.
    void watch(Tensor& t) {
        if (t.node >= 0) return;
        t.node = record({}, t.size(), nullptr);
    }

    int record(std::vector<int> inputs, int out_size, BackwardFn fn) {
        nodes_.push_back({std::move(inputs), out_size, std::move(fn)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    void backward(const Tensor& loss) {
        if (loss.size() != 1) throw std::logic_error("backward: loss must be scalar");
        if (loss.node < 0) throw std::logic_error("backward: loss is not on the tape");
        grads_.assign(nodes_.size(), {});
        for (std::size_t i = 0; i < nodes_.size(); ++i)
            grads_[i].assign(static_cast<std::size_t>(nodes_[i].out_size), 0.0);
        grads_[static_cast<std::size_t>(loss.node)][0] = 1.0;
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (n.fn) n.fn(grads_[static_cast<std::size_t>(i)], *this);
        }
    }

    std::vector<double>& grad_buf(int node) { return grads_.at(static_cast<std::size_t>(node)); }

    const std::vector<double>& grad(int node) const {
        return grads_.at(static_cast<std::size_t>(node));
    }

    std::size_t num_nodes() const { return nodes_.size(); }

private:
    struct Node {
        std::vector<int> inputs;
        int out_size;
        BackwardFn fn;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
};

namespace detail {

inline bool tracked(const Tape* tape, const Tensor& t) { return tape && t.node >= 0; }

inline std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b) {
    std::size_t r = std::max(a.size(), b.size());
    std::vector<int> out(r);
    for (std::size_t i = 0; i < r; ++i) {
        int da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        int db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument("broadcast: incompatible shapes");
        out[i] = std::max(da, db);
    }
    return out;
}

// Row-major strides with zeros on broadcast (size-1) dims, rank-aligned
// to `out`.
inline std::vector<long> broadcast_strides(const std::vector<int>& s, const std::vector<int>& out) {
    std::vector<long> st(out.size(), 0);
    long acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        std::size_t oi = out.size() - s.size() + static_cast<std::size_t>(i);
        st[oi] = (s[static_cast<std::size_t>(i)] == 1) ? 0 : acc;
        acc *= s[static_cast<std::size_t>(i)];
    }
    return st;
}

template <typename F>
void for_each_broadcast(const std::vector<int>& out, const std::vector<long>& sa,
                        const std::vector<long>& sb, F&& f) {
    int n = Tensor::size_of(out);
    std::size_t r = out.size();
    std::vector<int> idx(r, 0);
    long oa = 0, ob = 0;
    for (int lin = 0; lin < n; ++lin) {
        f(lin, oa, ob);
        for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
            auto du = static_cast<std::size_t>(d);
            if (++idx[du] < out[du]) {
                oa += sa[du];
                ob += sb[du];
                break;
            }
            oa -= sa[du] * (out[du] - 1);
            ob -= sb[du] * (out[du] - 1);
            idx[du] = 0;
        }
    }
}

// axis split: outer * n * inner
inline void axis_dims(const std::vector<int>& shape, int axis, int& outer, int& n, int& inner) {
    if (axis < 0 || axis >= static_cast<int>(shape.size()))
        throw std::invalid_argument("axis out of range");
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
    n = shape[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i)
        inner *= shape[i];
}

}  // namespace detail

// ---- elementwise binary ops (broadcasting) ----

namespace detail {

template <typename Fwd, typename BackA, typename BackB>
Tensor binary_op(Tape* tape, const Tensor& a, const Tensor& b, Fwd fwd, BackA back_a,
                 BackB back_b) {
    auto oshape = broadcast_shape(a.shape, b.shape);
    auto sa = broadcast_strides(a.shape, oshape);
    auto sb = broadcast_strides(b.shape, oshape);
    Tensor out = Tensor::zeros(oshape);
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for_each_broadcast(oshape, sa, sb,
                       [&](int lin, long oa, long ob) { po[lin] = fwd(pa[oa], pb[ob]); });
    bool ta = tracked(tape, a), tb = tracked(tape, b);
    if (ta || tb) {
        Tensor ac = a, bc = b;
        out.node = tape->record(
            {ta ? a.node : -1, tb ? b.node : -1}, out.size(),
            [ac, bc, oshape, sa, sb, ta, tb, an = a.node, bn = b.node, back_a, back_b](
                const std::vector<double>& g, Tape& t) {
                const double* pa2 = ac.data();
                const double* pb2 = bc.data();
                double* ga = ta ? t.grad_buf(an).data() : nullptr;
                double* gb = tb ? t.grad_buf(bn).data() : nullptr;
                for_each_broadcast(oshape, sa, sb, [&](int lin, long oa, long ob) {
                    if (ga) ga[oa] += back_a(g[static_cast<std::size_t>(lin)], pa2[oa], pb2[ob]);
                    if (gb) gb[ob] += back_b(g[static_cast<std::size_t>(lin)], pa2[oa], pb2[ob]);
                });
            });
    }
    return out;
}

}  // namespace detail

inline Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        tape, a, b, [](double x, double y) { return x + y; },
        [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

inline Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        tape, a, b, [](double x, double y) { return x - y; },
        [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

inline Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        tape, a, b, [](double x, double y) { return x * y; },
        [](double g, double, double y) { return g * y; },
        [](double g, double x, double) { return g * x; });
}

inline Tensor scale(Tape* tape, const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape);
    for (int i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * s;
    if (detail::tracked(tape, a)) {
        out.node = tape->record({a.node}, out.size(),
                                [an = a.node, s](const std::vector<double>& g, Tape& t) {
                                    double* ga = t.grad_buf(an).data();
                                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
                                });
    }
    return out;
}

// ---- matmul ----

inline Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
        throw std::invalid_argument("matmul: dimension mismatch");
    const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor out = Tensor::zeros({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
            const double av = pa[i * k + kk];
            if (av == 0.0) continue;
            const double* brow = pb + kk * n;
            double* orow = po + i * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    bool ta = detail::tracked(tape, a), tb = detail::tracked(tape, b);
    if (ta || tb) {
        Tensor ac = a, bc = b;
        out.node = tape->record(
            {ta ? a.node : -1, tb ? b.node : -1}, out.size(),
            [ac, bc, m, k, n, ta, tb, an = a.node, bn = b.node](const std::vector<double>& g,
                                                               Tape& t) {
                if (ta) {
                    double* ga = t.grad_buf(an).data();
                    const double* pb2 = bc.data();
                    // dA = G * B^T
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j) {
                            const double gv = g[static_cast<std::size_t>(i * n + j)];
                            if (gv == 0.0) continue;
                            for (int kk = 0; kk < k; ++kk) ga[i * k + kk] += gv * pb2[kk * n + j];
                        }
                }
                if (tb) {
                    double* gb = t.grad_buf(bn).data();
                    const double* pa2 = ac.data();
                    // dB = A^T * G
                    for (int i = 0; i < m; ++i)
                        for (int kk = 0; kk < k; ++kk) {
                            const double av = pa2[i * k + kk];
                            if (av == 0.0) continue;
                            for (int j = 0; j < n; ++j)
                                gb[kk * n + j] += av * g[static_cast<std::size_t>(i * n + j)];
                        }
                }
            });
    }
    return out;
}

// ---- unary ops ----

inline Tensor relu(Tape* tape, const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape);
    for (int i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    if (detail::tracked(tape, a)) {
        Tensor ac = a;
        out.node =
            tape->record({a.node}, out.size(), [ac, an = a.node](const std::vector<double>& g, Tape& t) {
                double* ga = t.grad_buf(an).data();
                const double* x = ac.data();
                // subgradient at 0 is 0
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (x[i] > 0.0) ga[i] += g[i];
            });
    }
    return out;
}

inline Tensor exp_t(Tape* tape, const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape);
    for (int i = 0; i < a.size(); ++i) out.data()[i] = std::exp(a.data()[i]);
    if (detail::tracked(tape, a)) {
        Tensor oc = out;
        out.node =
            tape->record({a.node}, out.size(), [oc, an = a.node](const std::vector<double>& g, Tape& t) {
                double* ga = t.grad_buf(an).data();
                const double* y = oc.data();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
            });
    }
    return out;
}

inline Tensor log_t(Tape* tape, const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape);
    for (int i = 0; i < a.size(); ++i) out.data()[i] = std::log(std::max(a.data()[i], kEps));
    if (detail::tracked(tape, a)) {
        Tensor ac = a;
        out.node =
            tape->record({a.node}, out.size(), [ac, an = a.node](const std::vector<double>& g, Tape& t) {
                double* ga = t.grad_buf(an).data();
                const double* x = ac.data();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / std::max(x[i], kEps);
            });
    }
    return out;
}

// ---- axis ops: softmax / log_softmax / logsumexp / l2_normalize ----

inline Tensor softmax(Tape* tape, const Tensor& a, int axis) {
    int outer, n, inner;
    detail::axis_dims(a.shape, axis, outer, n, inner);
    Tensor out = Tensor::zeros(a.shape);
    const double* x = a.data();
    double* y = out.data();
    for (int o = 0; o < outer; ++o)
        for (int in = 0; in < inner; ++in) {
            const long base = static_cast<long>(o) * n * inner + in;
            double mx = -1e300;
            for (int c = 0; c < n; ++c) mx = std::max(mx, x[base + static_cast<long>(c) * inner]);
            double z = 0.0;
            for (int c = 0; c < n; ++c) {
                double e = std::exp(x[base + static_cast<long>(c) * inner] - mx);
                y[base + static_cast<long>(c) * inner] = e;
                z += e;
            }
            for (int c = 0; c < n; ++c) y[base + static_cast<long>(c) * inner] /= z;
        }
    if (detail::tracked(tape, a)) {
        Tensor oc = out;
        out.node = tape->record(
            {a.node}, out.size(),
            [oc, outer, n, inner, an = a.node](const std::vector<double>& g, Tape& t) {
                double* ga = t.grad_buf(an).data();
                const double* yv = oc.data();
                for (int o = 0; o < outer; ++o)
                    for (int in = 0; in < inner; ++in) {
                        const long base = static_cast<long>(o) * n * inner + in;
                        double dot = 0.0;
                        for (int c = 0; c < n; ++c) {
                            long i = base + static_cast<long>(c) * inner;
                            dot += g[static_cast<std::size_t>(i)] * yv[i];
                        }
                        for (int c = 0; c < n; ++c) {
                            long i = base + static_cast<long>(c) * inner;
                            ga[i] += yv[i] * (g[static_cast<std::size_t>(i)] - dot);
                        }
                    }
            });
    }
    return out;
}

inline Tensor log_softmax(Tape* tape, const Tensor& a, int axis) {
    int outer, n, inner;
    detail::axis_dims(a.shape, axis, outer, n, inner);
    Tensor out = Tensor::zeros(a.shape);
    const double* x = a.data();
    double* y = out.data();
    for (int o = 0; o < outer; ++o)
        for (int in = 0; in < inner; ++in) {
            const long base = static_cast<long>(o) * n * inner + in;
            double mx = -1e300;
            for (int c = 0; c < n; ++c) mx = std::max(mx, x[base + static_cast<long>(c) * inner]);
            double z = 0.0;
            for (int c = 0; c < n; ++c) z += std::exp(x[base + static_cast<long>(c) * inner] - mx);
            const double lse = mx + std::log(z);
            for (int c = 0; c < n; ++c) {
                long i = base + static_cast<long>(c) * inner;
                y[i] = x[i] - lse;
            }
        }
    if (detail::tracked(tape, a)) {
        Tensor oc = out;
        out.node = tape->record(
            {a.node}, out.size(),
            [oc, outer, n, inner, an = a.node](const std::vector<double>& g, Tape& t) {
                double* ga = t.grad_buf(an).data();
                const double* yv = oc.data();
                for (int o = 0; o < outer; ++o)
                    for (int in = 0; in < inner; ++in) {
                        const long base = static_cast<long>(o) * n * inner + in;
                        double gsum = 0.0;
                        for (int c = 0; c < n; ++c)
                            gsum += g[static_cast<std::size_t>(base + static_cast<long>(c) * inner)];
                        for (int c = 0; c < n; ++c) {
                            long i = base + static_cast<long>(c) * inner;
                            ga[i] += g[static_cast<std::size_t>(i)] - std::exp(yv[i]) * gsum;
                        }
                    }
            });
    }
    return out;
}

// Reduces `axis` to size 1 (kept) so results broadcast back cleanly.
inline Tensor logsumexp(Tape* tape, const Tensor& a, int axis) {
    int outer, n, inner;
    detail::axis_dims(a.shape, axis, outer, n, inner);
    std::vector<int> oshape = a.shape;
    oshape[static_cast<std::size_t>(axis)] = 1;
    Tensor out = Tensor::zeros(oshape);
    const double* x = a.data();
    double* y = out.data();
    for (int o = 0; o < outer; ++o)
        for (int in = 0; in < inner; ++in) {
            const long base = static_cast<long>(o) * n * inner + in;
            double mx = -1e300;
            for (int c = 0; c < n; ++c) mx = std::max(mx, x[base + static_cast<long>(c) * inner]);
            double z = 0.0;
            for (int c = 0; c < n; ++c) z += std::exp(x[base + static_cast<long>(c) * inner] - mx);
            y[static_cast<long>(o) * inner + in] = mx + std::log(z);
        }
    if (detail::tracked(tape, a)) {
        Tensor ac = a, oc = out;
        out.node = tape->record(
            {a.node}, out.size(),
            [ac, oc, outer, n, inner, an = a.node](const std::vector<double>& g, Tape& t) {
                double* ga = t.grad_buf(an).data();
                const double* x2 = ac.data();
                const double* lse = oc.data();
                for (int o = 0; o < outer; ++o)
                    for (int in = 0; in < inner; ++in) {
                        const long base = static_cast<long>(o) * n * inner + in;
                        const double gv = g[static_cast<std::size_t>(static_cast<long>(o) * inner + in)];
                        const double l = lse[static_cast<long>(o) * inner + in];
                        for (int c = 0; c < n; ++c) {
                            long i = base + static_cast<long>(c) * inner;
                            ga[i] += gv * std::exp(x2[i] - l);
                        }
                    }
            });
    }
    return out;
}

inline Tensor l2_normalize(Tape* tape, const Tensor& a, int axis) {
    int outer, n, inner;
    detail::axis_dims(a.shape, axis, outer, n, inner);
    Tensor out = Tensor::zeros(a.shape);
    std::vector<double> norms(static_cast<std::size_t>(outer) * inner);
    const double* x = a.data();
    double* y = out.data();
    for (int o = 0; o < outer; ++o)
        for (int in = 0; in < inner; ++in) {
            const long base = static_cast<long>(o) * n * inner + in;
            double s = 0.0;
            for (int c = 0; c < n; ++c) {
                double v = x[base + static_cast<long>(c) * inner];
                s += v * v;
            }
            double nrm = std::max(std::sqrt(s), kEps);
            norms[static_cast<std::size_t>(o) * inner + in] = nrm;
            for (int c = 0; c < n; ++c) {
                long i = base + static_cast<long>(c) * inner;
                y[i] = x[i] / nrm;
            }
        }
    if (detail::tracked(tape, a)) {
        Tensor oc = out;
        out.node = tape->record(
            {a.node}, out.size(),
            [oc, norms, outer, n, inner, an = a.node](const std::vector<double>& g, Tape& t) {
                double* ga = t.grad_buf(an).data();
                const double* yv = oc.data();
                for (int o = 0; o < outer; ++o)
                    for (int in = 0; in < inner; ++in) {
                        const long base = static_cast<long>(o) * n * inner + in;
                        const double nrm = norms[static_cast<std::size_t>(o) * inner + in];
                        double dot = 0.0;
                        for (int c = 0; c < n; ++c) {
                            long i = base + static_cast<long>(c) * inner;
                            dot += g[static_cast<std::size_t>(i)] * yv[i];
                        }
                        for (int c = 0; c < n; ++c) {
                            long i = base + static_cast<long>(c) * inner;
                            ga[i] += (g[static_cast<std::size_t>(i)] - yv[i] * dot) / nrm;
                        }
                    }
            });
    }
    return out;
}

// ---- reductions ----

inline Tensor reduce_sum_all(Tape* tape, const Tensor& a) {
    double s = 0.0;
    for (int i = 0; i < a.size(); ++i) s += a.data()[i];
    Tensor out = Tensor::scalar(s);
    if (detail::tracked(tape, a)) {
        out.node = tape->record({a.node}, 1, [an = a.node](const std::vector<double>& g, Tape& t) {
            double* ga = t.grad_buf(an).data();
            std::size_t n = t.grad_buf(an).size();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
        });
    }
    return out;
}

inline Tensor reduce_mean_all(Tape* tape, const Tensor& a) {
    return scale(tape, reduce_sum_all(tape, a), 1.0 / a.size());
}

// Sum along `axis`, kept as size 1.
inline Tensor reduce_sum(Tape* tape, const Tensor& a, int axis) {
    int outer, n, inner;
    detail::axis_dims(a.shape, axis, outer, n, inner);
    std::vector<int> oshape = a.shape;
    oshape[static_cast<std::size_t>(axis)] = 1;
    Tensor out = Tensor::zeros(oshape);
    const double* x = a.data();
    double* y = out.data();
    for (int o = 0; o < outer; ++o)
        for (int in = 0; in < inner; ++in) {
            const long base = static_cast<long>(o) * n * inner + in;
            double s = 0.0;
            for (int c = 0; c < n; ++c) s += x[base + static_cast<long>(c) * inner];
            y[static_cast<long>(o) * inner + in] = s;
        }
    if (detail::tracked(tape, a)) {
        out.node = tape->record(
            {a.node}, out.size(),
            [outer, n, inner, an = a.node](const std::vector<double>& g, Tape& t) {
                double* ga = t.grad_buf(an).data();
                for (int o = 0; o < outer; ++o)
                    for (int in = 0; in < inner; ++in) {
                        const double gv = g[static_cast<std::size_t>(static_cast<long>(o) * inner + in)];
                        const long base = static_cast<long>(o) * n * inner + in;
                        for (int c = 0; c < n; ++c) ga[base + static_cast<long>(c) * inner] += gv;
                    }
            });
    }
    return out;
}

inline Tensor reduce_mean(Tape* tape, const Tensor& a, int axis) {
    int outer, n, inner;
    detail::axis_dims(a.shape, axis, outer, n, inner);
    return scale(tape, reduce_sum(tape, a, axis), 1.0 / n);
}

// ---- im2col ----

// Input feature map laid out [H*W x C_in] (row per pixel). Output row p
// holds the zero-padded k x k neighborhood of pixel p, channel-major:
// column index = c*k*k + ky*k + kx.
inline Tensor im2col(Tape* tape, const Tensor& a, int height, int width, int channels, int kernel) {
    if (kernel % 2 == 0) throw std::invalid_argument("im2col: kernel must be odd");
    if (a.rank() != 2 || a.shape[0] != height * width || a.shape[1] != channels)
        throw std::invalid_argument("im2col: input must be [H*W x C]");
    const int pad = (kernel - 1) / 2;
    const int cols = channels * kernel * kernel;
    Tensor out = Tensor::zeros({height * width, cols});
    const double* x = a.data();
    double* y = out.data();
    for (int py = 0; py < height; ++py)
        for (int px = 0; px < width; ++px) {
            const long row = static_cast<long>(py) * width + px;
            for (int ky = 0; ky < kernel; ++ky) {
                const int sy = py + ky - pad;
                if (sy < 0 || sy >= height) continue;
                for (int kx = 0; kx < kernel; ++kx) {
                    const int sx = px + kx - pad;
                    if (sx < 0 || sx >= width) continue;
                    const long src = static_cast<long>(sy) * width + sx;
                    for (int c = 0; c < channels; ++c)
                        y[row * cols + c * kernel * kernel + ky * kernel + kx] =
                            x[src * channels + c];
                }
            }
        }
    if (detail::tracked(tape, a)) {
        out.node = tape->record(
            {a.node}, out.size(),
            [height, width, channels, kernel, pad, cols, an = a.node](const std::vector<double>& g,
                                                                     Tape& t) {
                double* ga = t.grad_buf(an).data();
                for (int py = 0; py < height; ++py)
                    for (int px = 0; px < width; ++px) {
                        const long row = static_cast<long>(py) * width + px;
                        for (int ky = 0; ky < kernel; ++ky) {
                            const int sy = py + ky - pad;
                            if (sy < 0 || sy >= height) continue;
                            for (int kx = 0; kx < kernel; ++kx) {
                                const int sx = px + kx - pad;
                                if (sx < 0 || sx >= width) continue;
                                const long src = static_cast<long>(sy) * width + sx;
                                for (int c = 0; c < channels; ++c)
                                    ga[src * channels + c] +=
                                        g[static_cast<std::size_t>(row * cols + c * kernel * kernel +
                                                                   ky * kernel + kx)];
                            }
                        }
                    }
            });
    }
    return out;
}

// ---- gather / concat ----

inline Tensor gather_rows(Tape* tape, const Tensor& a, const std::vector<int>& rows) {
    if (a.rank() != 2) throw std::invalid_argument("gather_rows: need 2-D input");
    const int cols = a.shape[1];
    Tensor out = Tensor::zeros({static_cast<int>(rows.size()), cols});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] < 0 || rows[r] >= a.shape[0])
            throw std::out_of_range("gather_rows: row index out of range");
        std::copy_n(a.data() + static_cast<long>(rows[r]) * cols, cols,
                    out.data() + static_cast<long>(r) * cols);
    }
    if (detail::tracked(tape, a)) {
        out.node = tape->record({a.node}, out.size(),
                                [rows, cols, an = a.node](const std::vector<double>& g, Tape& t) {
                                    double* ga = t.grad_buf(an).data();
                                    for (std::size_t r = 0; r < rows.size(); ++r)
                                        for (int c = 0; c < cols; ++c)
                                            ga[static_cast<long>(rows[r]) * cols + c] +=
                                                g[r * static_cast<std::size_t>(cols) +
                                                  static_cast<std::size_t>(c)];
                                });
    }
    return out;
}

inline Tensor concat_cols(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape[0] != b.shape[0])
        throw std::invalid_argument("concat_cols: row counts differ");
    const int rows = a.shape[0], ca = a.shape[1], cb = b.shape[1];
    Tensor out = Tensor::zeros({rows, ca + cb});
    for (int r = 0; r < rows; ++r) {
        std::copy_n(a.data() + static_cast<long>(r) * ca, ca,
                    out.data() + static_cast<long>(r) * (ca + cb));
        std::copy_n(b.data() + static_cast<long>(r) * cb, cb,
                    out.data() + static_cast<long>(r) * (ca + cb) + ca);
    }
    bool ta = detail::tracked(tape, a), tb = detail::tracked(tape, b);
    if (ta || tb) {
        out.node = tape->record(
            {ta ? a.node : -1, tb ? b.node : -1}, out.size(),
            [rows, ca, cb, ta, tb, an = a.node, bn = b.node](const std::vector<double>& g, Tape& t) {
                for (int r = 0; r < rows; ++r) {
                    if (ta) {
                        double* ga = t.grad_buf(an).data();
                        for (int c = 0; c < ca; ++c)
                            ga[static_cast<long>(r) * ca + c] +=
                                g[static_cast<std::size_t>(static_cast<long>(r) * (ca + cb) + c)];
                    }
                    if (tb) {
                        double* gb = t.grad_buf(bn).data();
                        for (int c = 0; c < cb; ++c)
                            gb[static_cast<long>(r) * cb + c] +=
                                g[static_cast<std::size_t>(static_cast<long>(r) * (ca + cb) + ca + c)];
                    }
                }
            });
    }
    return out;
}

inline Tensor concat_rows(Tape* tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const int cols = parts[0].shape[1];
    int rows = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.shape[1] != cols)
            throw std::invalid_argument("concat_rows: column counts differ");
        rows += p.shape[0];
    }
    Tensor out = Tensor::zeros({rows, cols});
    long off = 0;
    for (const auto& p : parts) {
        std::copy_n(p.data(), p.size(), out.data() + off);
        off += p.size();
    }
    bool any = false;
    for (const auto& p : parts) any = any || detail::tracked(tape, p);
    if (any) {
        std::vector<int> nodes;
        std::vector<int> sizes;
        for (const auto& p : parts) {
            nodes.push_back(detail::tracked(tape, p) ? p.node : -1);
            sizes.push_back(p.size());
        }
        out.node = tape->record(nodes, out.size(),
                                [nodes, sizes](const std::vector<double>& g, Tape& t) {
                                    long off2 = 0;
                                    for (std::size_t i = 0; i < nodes.size(); ++i) {
                                        if (nodes[i] >= 0) {
                                            double* gp = t.grad_buf(nodes[i]).data();
                                            for (int j = 0; j < sizes[i]; ++j)
                                                gp[j] += g[static_cast<std::size_t>(off2 + j)];
                                        }
                                        off2 += sizes[i];
                                    }
                                });
    }
    return out;
}

inline Tensor transpose(Tape* tape, const Tensor& a) {
    if (a.rank() != 2) throw std::invalid_argument("transpose: need 2-D input");
    const int m = a.shape[0], n = a.shape[1];
    Tensor out = Tensor::zeros({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.data()[static_cast<long>(j) * m + i] = a.data()[static_cast<long>(i) * n + j];
    if (detail::tracked(tape, a)) {
        out.node = tape->record({a.node}, out.size(),
                                [m, n, an = a.node](const std::vector<double>& g, Tape& t) {
                                    double* ga = t.grad_buf(an).data();
                                    for (int i = 0; i < m; ++i)
                                        for (int j = 0; j < n; ++j)
                                            ga[static_cast<long>(i) * n + j] +=
                                                g[static_cast<std::size_t>(static_cast<long>(j) * m + i)];
                                });
    }
    return out;
}

// ---- SGD ----

inline void sgd_step(std::vector<Tensor*> params, Tape& tape, double lr) {
    for (Tensor* p : params) {
        if (p->node < 0) throw std::logic_error("sgd_step: parameter has no gradient");
        const auto& g = tape.grad(p->node);
        if (static_cast<int>(g.size()) != p->size())
            throw std::logic_error("sgd_step: gradient size mismatch");
        // copy-on-write so earlier tape captures stay intact
        auto fresh = std::make_shared<std::vector<double>>(*p->store);
        for (std::size_t i = 0; i < g.size(); ++i) (*fresh)[i] -= lr * g[i];
        p->store = std::move(fresh);
        p->node = -1;
    }
}

}  // namespace css
