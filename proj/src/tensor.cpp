#include "utsr/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include <cblas.h>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace utsr {

namespace {
// Volume-sized buffers are allocated and freed every iteration; keep them on
// the heap instead of round-tripping through mmap/munmap (page-fault churn).
[[maybe_unused]] const bool g_malloc_tuned = [] {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
    return true;
}();
}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
    UTSR_REQUIRE(hi >= lo, "uniform_int: empty range");
    uint64_t span = uint64_t(hi - lo) + 1;
    return lo + int64_t(next_u64() % span);
}

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    double u1 = 0.0, u2;
    while (u1 <= 1e-300) u1 = uniform();
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
}

namespace {

std::atomic<uint64_t> g_node_id{1};

void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, real alpha, const real* a,
          int64_t lda, const real* b, int64_t ldb, real beta, real* c, int64_t ldc) {
#ifdef UTSR_REAL_DOUBLE
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                int(m), int(n), int(k), alpha, a, int(lda), b, int(ldb), beta, c, int(ldc));
#else
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                int(m), int(n), int(k), alpha, a, int(lda), b, int(ldb), beta, c, int(ldc));
#endif
}

void check_finite_shape(const Shape& s) {
    for (int64_t d : s) UTSR_REQUIRE(d > 0, "tensor extents must be positive, got " + shape_str(s));
}

// (outer, n, inner) decomposition around one axis.
struct AxisSplit {
    int64_t outer, n, inner;
};
AxisSplit axis_split(const Shape& s, int axis) {
    AxisSplit r{1, s[size_t(axis)], 1};
    for (int i = 0; i < axis; ++i) r.outer *= s[size_t(i)];
    for (size_t i = size_t(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    check_finite_shape(shape);
    auto n = std::make_shared<Node>();
    n->value.assign(size_t(shape_numel(shape)), real(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    n->id = g_node_id++;
    return Tensor(n);
}

Tensor Tensor::full(Shape shape, real v, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<real> data, bool requires_grad) {
    check_finite_shape(shape);
    UTSR_REQUIRE(int64_t(data.size()) == shape_numel(shape),
                 "from_data: " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    n->id = g_node_id++;
    return Tensor(n);
}

Tensor make_node(Shape shape, std::vector<real> value, std::vector<Tensor> parents,
                 std::function<void(Node&)> backprop) {
    UTSR_REQUIRE(int64_t(value.size()) == shape_numel(shape), "make_node: value/shape mismatch");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->id = g_node_id++;
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    n->requires_grad = rg;
    if (rg) {
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Tensor(n);
}

void backward(const Tensor& root) {
    UTSR_REQUIRE(root.numel() == 1, "backward: root must be scalar, got shape " + shape_str(root.shape()));
    // Collect the reachable subgraph, then run in decreasing creation order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.node().get()};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });
    // Interior node grads are scratch for this pass; only leaves accumulate
    // across repeated calls.
    for (Node* n : order)
        if (n->backprop && !n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), real(0));
    root.node()->ensure_grad();
    root.node()->grad[0] += real(1);
    for (Node* n : order) {
        if (n->backprop && !n->grad.empty()) n->backprop(*n);
    }
}

// ---- elementwise ----------------------------------------------------------

namespace {

// c = f(a, b), shapes equal or either side a single element.
template <class F, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f, DA dfa, DB dfb) {
    const bool as = a.numel() == 1, bs = b.numel() == 1;
    UTSR_REQUIRE(as || bs || a.shape() == b.shape(),
                 std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const Shape& out_shape = as && !bs ? b.shape() : a.shape();
    const int64_t n = shape_numel(out_shape);
    std::vector<real> v(size_t(n) + 0);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (int64_t i = 0; i < n; ++i) v[size_t(i)] = f(av[as ? 0 : size_t(i)], bv[bs ? 0 : size_t(i)]);
    auto an = a.node();
    auto bn = b.node();
    return make_node(out_shape, std::move(v), {a, b}, [an, bn, as, bs, n, dfa, dfb](Node& node) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                real av_ = an->value[as ? 0 : size_t(i)];
                real bv_ = bn->value[bs ? 0 : size_t(i)];
                an->grad[as ? 0 : size_t(i)] += node.grad[size_t(i)] * dfa(av_, bv_, node.value[size_t(i)]);
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                real av_ = an->value[as ? 0 : size_t(i)];
                real bv_ = bn->value[bs ? 0 : size_t(i)];
                bn->grad[bs ? 0 : size_t(i)] += node.grad[size_t(i)] * dfb(av_, bv_, node.value[size_t(i)]);
            }
        }
    });
}

template <class F, class DF>
Tensor unary_op(const Tensor& a, F f, DF df) {
    const int64_t n = a.numel();
    std::vector<real> v(size_t(n) + 0);
    const auto& av = a.data();
    for (int64_t i = 0; i < n; ++i) v[size_t(i)] = f(av[size_t(i)]);
    auto an = a.node();
    return make_node(a.shape(), std::move(v), {a}, [an, n, df](Node& node) {
        an->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            an->grad[size_t(i)] += node.grad[size_t(i)] * df(an->value[size_t(i)], node.value[size_t(i)]);
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "add", [](real x, real y) { return x + y; },
                     [](real, real, real) { return real(1); }, [](real, real, real) { return real(1); });
}
Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "sub", [](real x, real y) { return x - y; },
                     [](real, real, real) { return real(1); }, [](real, real, real) { return real(-1); });
}
Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "mul", [](real x, real y) { return x * y; },
                     [](real, real y, real) { return y; }, [](real x, real, real) { return x; });
}
Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "div", [](real x, real y) { return x / y; },
                     [](real, real y, real) { return real(1) / y; },
                     [](real x, real y, real) { return -x / (y * y); });
}
Tensor add(const Tensor& a, real s) { return add(a, Tensor::scalar(s)); }
Tensor mul(const Tensor& a, real s) { return mul(a, Tensor::scalar(s)); }
Tensor neg(const Tensor& a) { return mul(a, real(-1)); }

Tensor exp(const Tensor& a) {
    return unary_op(a, [](real x) { return std::exp(x); }, [](real, real y) { return y; });
}
Tensor log(const Tensor& a) {
    for (real x : a.data()) UTSR_REQUIRE(x > 0, "log: non-positive input");
    return unary_op(a, [](real x) { return std::log(x); }, [](real x, real) { return real(1) / x; });
}
Tensor sqrt(const Tensor& a) {
    for (real x : a.data()) UTSR_REQUIRE(x >= 0, "sqrt: negative input");
    return unary_op(a, [](real x) { return std::sqrt(x); },
                    [](real, real y) { return real(0.5) / (y > 0 ? y : real(1e-12)); });
}
Tensor pow(const Tensor& a, real p) {
    return unary_op(a, [p](real x) { return std::pow(x, p); },
                    [p](real x, real) { return p * std::pow(x, p - 1); });
}
Tensor sigmoid(const Tensor& a) {
    return unary_op(a, [](real x) { return real(1) / (real(1) + std::exp(-x)); },
                    [](real, real y) { return y * (real(1) - y); });
}
Tensor gelu(const Tensor& a) {
    const real inv_sqrt2 = real(0.7071067811865476);
    const real inv_sqrt2pi = real(0.3989422804014327);
    return unary_op(a,
                    [=](real x) { return real(0.5) * x * (real(1) + std::erf(x * inv_sqrt2)); },
                    [=](real x, real) {
                        real cdf = real(0.5) * (real(1) + std::erf(x * inv_sqrt2));
                        return cdf + x * inv_sqrt2pi * std::exp(real(-0.5) * x * x);
                    });
}
Tensor relu(const Tensor& a) {
    // x < 0 (not x > 0) so NaN inputs stay NaN and surface downstream
    return unary_op(a, [](real x) { return x < 0 ? real(0) : x; },
                    [](real x, real) { return x > 0 ? real(1) : real(0); });
}

// ---- shape ops ------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    UTSR_REQUIRE(!parts.empty(), "concat: no inputs");
    Shape out = parts[0].shape();
    UTSR_REQUIRE(axis >= 0 && axis < int(out.size()), "concat: bad axis");
    int64_t total = 0;
    for (const auto& p : parts) {
        UTSR_REQUIRE(int(p.shape().size()) == int(out.size()), "concat: rank mismatch");
        for (int i = 0; i < int(out.size()); ++i)
            UTSR_REQUIRE(i == axis || p.shape()[size_t(i)] == out[size_t(i)],
                         "concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(out));
        total += p.shape()[size_t(axis)];
    }
    out[size_t(axis)] = total;
    auto sp = axis_split(out, axis);
    std::vector<real> v(size_t(shape_numel(out)));
    int64_t off = 0;
    for (const auto& p : parts) {
        int64_t pn = p.shape()[size_t(axis)];
        const auto& pv = p.data();
        for (int64_t o = 0; o < sp.outer; ++o)
            std::memcpy(&v[size_t((o * sp.n + off) * sp.inner)], &pv[size_t(o * pn * sp.inner)],
                        size_t(pn * sp.inner) * sizeof(real));
        off += pn;
    }
    std::vector<NodePtr> pn;
    for (const auto& p : parts) pn.push_back(p.node());
    return make_node(out, std::move(v), parts, [pn, sp, axis](Node& node) {
        int64_t off = 0;
        for (const auto& p : pn) {
            int64_t n = p->shape[size_t(axis)];
            if (p->requires_grad) {
                p->ensure_grad();
                for (int64_t o = 0; o < sp.outer; ++o) {
                    const real* src = &node.grad[size_t((o * sp.n + off) * sp.inner)];
                    real* dst = &p->grad[size_t(o * n * sp.inner)];
                    for (int64_t i = 0; i < n * sp.inner; ++i) dst[i] += src[i];
                }
            }
            off += n;
        }
    });
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
    UTSR_REQUIRE(axis >= 0 && axis < a.ndim(), "slice: bad axis");
    UTSR_REQUIRE(start >= 0 && len >= 1 && start + len <= a.dim(axis), "slice: out of range");
    auto sp = axis_split(a.shape(), axis);
    Shape out = a.shape();
    out[size_t(axis)] = len;
    std::vector<real> v(size_t(sp.outer * len * sp.inner));
    const auto& av = a.data();
    for (int64_t o = 0; o < sp.outer; ++o)
        std::memcpy(&v[size_t(o * len * sp.inner)], &av[size_t((o * sp.n + start) * sp.inner)],
                    size_t(len * sp.inner) * sizeof(real));
    auto an = a.node();
    return make_node(out, std::move(v), {a}, [an, sp, start, len](Node& node) {
        an->ensure_grad();
        for (int64_t o = 0; o < sp.outer; ++o) {
            const real* src = &node.grad[size_t(o * len * sp.inner)];
            real* dst = &an->grad[size_t((o * sp.n + start) * sp.inner)];
            for (int64_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
        }
    });
}

std::vector<Tensor> split(const Tensor& a, int axis, const std::vector<int64_t>& lens) {
    std::vector<Tensor> out;
    int64_t off = 0;
    for (int64_t l : lens) {
        out.push_back(slice(a, axis, off, l));
        off += l;
    }
    UTSR_REQUIRE(off == a.dim(axis), "split: lengths do not cover the axis");
    return out;
}

Tensor pad_zero(const Tensor& a, const std::vector<std::array<int64_t, 2>>& lo_hi) {
    UTSR_REQUIRE(int(lo_hi.size()) == a.ndim(), "pad_zero: rank mismatch");
    Shape out = a.shape();
    for (int i = 0; i < a.ndim(); ++i) out[size_t(i)] += lo_hi[size_t(i)][0] + lo_hi[size_t(i)][1];
    const int nd = a.ndim();
    std::vector<int64_t> in_stride(size_t(nd), 1), out_stride(size_t(nd), 1);
    for (int i = nd - 2; i >= 0; --i) {
        in_stride[size_t(i)] = in_stride[size_t(i) + 1] * a.dim(i + 1);
        out_stride[size_t(i)] = out_stride[size_t(i) + 1] * out[size_t(i) + 1];
    }
    const int64_t n = a.numel();
    // Map each input linear index to its output linear index.
    auto idx = std::make_shared<std::vector<int64_t>>(size_t(n) + 0);
    for (int64_t i = 0; i < n; ++i) {
        int64_t rem = i, oi = 0;
        for (int d = 0; d < nd; ++d) {
            int64_t c = rem / in_stride[size_t(d)];
            rem %= in_stride[size_t(d)];
            oi += (c + lo_hi[size_t(d)][0]) * out_stride[size_t(d)];
        }
        (*idx)[size_t(i)] = oi;
    }
    std::vector<real> v(size_t(shape_numel(out)), real(0));
    const auto& av = a.data();
    for (int64_t i = 0; i < n; ++i) v[size_t((*idx)[size_t(i)])] = av[size_t(i)];
    auto an = a.node();
    return make_node(out, std::move(v), {a}, [an, idx, n](Node& node) {
        an->ensure_grad();
        for (int64_t i = 0; i < n; ++i) an->grad[size_t(i)] += node.grad[size_t((*idx)[size_t(i)])];
    });
}

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
    const int nd = a.ndim();
    UTSR_REQUIRE(int(axes.size()) == nd, "permute: rank mismatch");
    Shape out(size_t(nd) + 0);
    for (int i = 0; i < nd; ++i) out[size_t(i)] = a.dim(axes[size_t(i)]);
    std::vector<int64_t> in_stride(size_t(nd), 1);
    for (int i = nd - 2; i >= 0; --i) in_stride[size_t(i)] = in_stride[size_t(i) + 1] * a.dim(i + 1);
    std::vector<int64_t> step(size_t(nd) + 0);
    for (int i = 0; i < nd; ++i) step[size_t(i)] = in_stride[size_t(axes[size_t(i)])];
    const int64_t n = a.numel();
    std::vector<real> v(size_t(n) + 0);
    const auto& av = a.data();
    // Iterate output indices in order, tracking the input offset.
    std::vector<int64_t> cnt(size_t(nd), 0);
    int64_t src = 0;
    for (int64_t i = 0; i < n; ++i) {
        v[size_t(i)] = av[size_t(src)];
        for (int d = nd - 1; d >= 0; --d) {
            src += step[size_t(d)];
            if (++cnt[size_t(d)] < out[size_t(d)]) break;
            src -= step[size_t(d)] * out[size_t(d)];
            cnt[size_t(d)] = 0;
        }
    }
    auto an = a.node();
    auto step_sp = std::make_shared<std::vector<int64_t>>(step);
    auto out_sp = std::make_shared<Shape>(out);
    return make_node(out, std::move(v), {a}, [an, step_sp, out_sp, n, nd](Node& node) {
        an->ensure_grad();
        std::vector<int64_t> cnt(size_t(nd), 0);
        int64_t src = 0;
        for (int64_t i = 0; i < n; ++i) {
            an->grad[size_t(src)] += node.grad[size_t(i)];
            for (int d = nd - 1; d >= 0; --d) {
                src += (*step_sp)[size_t(d)];
                if (++cnt[size_t(d)] < (*out_sp)[size_t(d)]) break;
                src -= (*step_sp)[size_t(d)] * (*out_sp)[size_t(d)];
                cnt[size_t(d)] = 0;
            }
        }
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    UTSR_REQUIRE(shape_numel(shape) == a.numel(),
                 "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    auto an = a.node();
    std::vector<real> v = a.data();
    return make_node(std::move(shape), std::move(v), {a}, [an](Node& node) {
        an->ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += node.grad[i];
    });
}

Tensor reduce_sum(const Tensor& a) {
    double acc = 0;  // double accumulation keeps large reductions sharp at f32
    for (real x : a.data()) acc += double(x);
    real s = real(acc);
    auto an = a.node();
    return make_node({1}, {s}, {a}, [an](Node& node) {
        an->ensure_grad();
        for (auto& g : an->grad) g += node.grad[0];
    });
}
Tensor reduce_mean(const Tensor& a) { return mul(reduce_sum(a), real(1) / real(a.numel())); }

Tensor reduce_sum(const Tensor& a, int axis) {
    UTSR_REQUIRE(axis >= 0 && axis < a.ndim(), "reduce_sum: bad axis");
    auto sp = axis_split(a.shape(), axis);
    Shape out;
    for (int i = 0; i < a.ndim(); ++i)
        if (i != axis) out.push_back(a.dim(i));
    if (out.empty()) out.push_back(1);
    std::vector<real> v(size_t(sp.outer * sp.inner), real(0));
    const auto& av = a.data();
    for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t j = 0; j < sp.n; ++j)
            for (int64_t i = 0; i < sp.inner; ++i)
                v[size_t(o * sp.inner + i)] += av[size_t((o * sp.n + j) * sp.inner + i)];
    auto an = a.node();
    return make_node(out, std::move(v), {a}, [an, sp](Node& node) {
        an->ensure_grad();
        for (int64_t o = 0; o < sp.outer; ++o)
            for (int64_t j = 0; j < sp.n; ++j)
                for (int64_t i = 0; i < sp.inner; ++i)
                    an->grad[size_t((o * sp.n + j) * sp.inner + i)] += node.grad[size_t(o * sp.inner + i)];
    });
}
Tensor reduce_mean(const Tensor& a, int axis) {
    return mul(reduce_sum(a, axis), real(1) / real(a.dim(axis)));
}

// ---- matmul ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    UTSR_REQUIRE(a.ndim() >= 2 && b.ndim() >= 2, "matmul: operands must have rank >= 2");
    const int64_t m = a.dim(a.ndim() - 2), k = a.dim(a.ndim() - 1);
    const int64_t kb = b.dim(b.ndim() - 2), n = b.dim(b.ndim() - 1);
    UTSR_REQUIRE(k == kb, "matmul: inner extents differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const bool shared_b = b.ndim() == 2 && a.ndim() > 2;
    if (!shared_b) {
        UTSR_REQUIRE(a.ndim() == b.ndim(), "matmul: batch rank mismatch");
        for (int i = 0; i < a.ndim() - 2; ++i)
            UTSR_REQUIRE(a.dim(i) == b.dim(i), "matmul: batch extents differ");
    }
    int64_t batch = 1;
    Shape out;
    for (int i = 0; i < a.ndim() - 2; ++i) {
        batch *= a.dim(i);
        out.push_back(a.dim(i));
    }
    out.push_back(m);
    out.push_back(n);
    std::vector<real> v(size_t(batch * m * n));
    const auto& av = a.data();
    const auto& bv = b.data();
    for (int64_t t = 0; t < batch; ++t)
        gemm(false, false, m, n, k, real(1), &av[size_t(t * m * k)], k,
             &bv[size_t(shared_b ? 0 : t * k * n)], n, real(0), &v[size_t(t * m * n)], n);
    auto an = a.node();
    auto bn = b.node();
    return make_node(out, std::move(v), {a, b}, [an, bn, m, n, k, batch, shared_b](Node& node) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (int64_t t = 0; t < batch; ++t)
                gemm(false, true, m, k, n, real(1), &node.grad[size_t(t * m * n)], n,
                     &bn->value[size_t(shared_b ? 0 : t * k * n)], n, real(1),
                     &an->grad[size_t(t * m * k)], k);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t t = 0; t < batch; ++t)
                gemm(true, false, k, n, m, real(1), &an->value[size_t(t * m * k)], k,
                     &node.grad[size_t(t * m * n)], n, real(1),
                     &bn->grad[size_t(shared_b ? 0 : t * k * n)], n);
        }
    });
}

// ---- softmax / normalization ------------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
    if (axis < 0) axis += a.ndim();
    UTSR_REQUIRE(axis >= 0 && axis < a.ndim(), "softmax: bad axis");
    auto sp = axis_split(a.shape(), axis);
    std::vector<real> v(size_t(a.numel()));
    const auto& av = a.data();
    for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t i = 0; i < sp.inner; ++i) {
            real mx = -std::numeric_limits<real>::infinity();
            for (int64_t j = 0; j < sp.n; ++j) mx = std::max(mx, av[size_t((o * sp.n + j) * sp.inner + i)]);
            real s = 0;
            for (int64_t j = 0; j < sp.n; ++j) {
                real e = std::exp(av[size_t((o * sp.n + j) * sp.inner + i)] - mx);
                v[size_t((o * sp.n + j) * sp.inner + i)] = e;
                s += e;
            }
            real inv = real(1) / s;
            for (int64_t j = 0; j < sp.n; ++j) v[size_t((o * sp.n + j) * sp.inner + i)] *= inv;
        }
    auto an = a.node();
    return make_node(a.shape(), std::move(v), {a}, [an, sp](Node& node) {
        an->ensure_grad();
        for (int64_t o = 0; o < sp.outer; ++o)
            for (int64_t i = 0; i < sp.inner; ++i) {
                real dot = 0;
                for (int64_t j = 0; j < sp.n; ++j) {
                    size_t p = size_t((o * sp.n + j) * sp.inner + i);
                    dot += node.grad[p] * node.value[p];
                }
                for (int64_t j = 0; j < sp.n; ++j) {
                    size_t p = size_t((o * sp.n + j) * sp.inner + i);
                    an->grad[p] += node.value[p] * (node.grad[p] - dot);
                }
            }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps) {
    const int64_t c = x.dim(x.ndim() - 1);
    UTSR_REQUIRE(gain.numel() == c && bias.numel() == c, "layer_norm: gain/bias extent mismatch");
    const int64_t rows = x.numel() / c;
    std::vector<real> v(size_t(x.numel()));
    std::vector<real> inv_std(size_t(rows) + 0), mean(size_t(rows) + 0);
    const auto& xv = x.data();
    const auto& gv = gain.data();
    const auto& bv = bias.data();
    for (int64_t r = 0; r < rows; ++r) {
        const real* row = &xv[size_t(r * c)];
        real mu = 0;
        for (int64_t j = 0; j < c; ++j) mu += row[j];
        mu /= real(c);
        real var = 0;
        for (int64_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= real(c);
        real is = real(1) / std::sqrt(var + eps);
        mean[size_t(r)] = mu;
        inv_std[size_t(r)] = is;
        for (int64_t j = 0; j < c; ++j) v[size_t(r * c + j)] = (row[j] - mu) * is * gv[size_t(j)] + bv[size_t(j)];
    }
    auto xn = x.node();
    auto gn = gain.node();
    auto bn = bias.node();
    auto mu_sp = std::make_shared<std::vector<real>>(std::move(mean));
    auto is_sp = std::make_shared<std::vector<real>>(std::move(inv_std));
    return make_node(x.shape(), std::move(v), {x, gain, bias}, [xn, gn, bn, rows, c, mu_sp, is_sp](Node& node) {
        for (int64_t r = 0; r < rows; ++r) {
            const real mu = (*mu_sp)[size_t(r)], is = (*is_sp)[size_t(r)];
            const real* xr = &xn->value[size_t(r * c)];
            const real* dy = &node.grad[size_t(r * c)];
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (int64_t j = 0; j < c; ++j) gn->grad[size_t(j)] += dy[j] * (xr[j] - mu) * is;
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t j = 0; j < c; ++j) bn->grad[size_t(j)] += dy[j];
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                real sum_dyg = 0, sum_dygx = 0;
                for (int64_t j = 0; j < c; ++j) {
                    real dyg = dy[j] * gn->value[size_t(j)];
                    sum_dyg += dyg;
                    sum_dygx += dyg * (xr[j] - mu) * is;
                }
                for (int64_t j = 0; j < c; ++j) {
                    real dyg = dy[j] * gn->value[size_t(j)];
                    real xhat = (xr[j] - mu) * is;
                    xn->grad[size_t(r * c + j)] +=
                        is * (dyg - sum_dyg / real(c) - xhat * sum_dygx / real(c));
                }
            }
        }
    });
}

Tensor instance_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps) {
    UTSR_REQUIRE(x.ndim() == 4, "instance_norm: expects [C, D0, D1, D2]");
    const int64_t c = x.dim(0), s = x.numel() / c;
    UTSR_REQUIRE(gain.numel() == c && bias.numel() == c, "instance_norm: gain/bias extent mismatch");
    std::vector<real> v(size_t(x.numel()));
    std::vector<real> mean(size_t(c) + 0), inv_std(size_t(c) + 0);
    const auto& xv = x.data();
    for (int64_t ch = 0; ch < c; ++ch) {
        const real* p = &xv[size_t(ch * s)];
        real mu = 0;
        for (int64_t i = 0; i < s; ++i) mu += p[i];
        mu /= real(s);
        real var = 0;
        for (int64_t i = 0; i < s; ++i) var += (p[i] - mu) * (p[i] - mu);
        var /= real(s);
        real is = real(1) / std::sqrt(var + eps);
        mean[size_t(ch)] = mu;
        inv_std[size_t(ch)] = is;
        real g = gain.data()[size_t(ch)], b = bias.data()[size_t(ch)];
        for (int64_t i = 0; i < s; ++i) v[size_t(ch * s + i)] = (p[i] - mu) * is * g + b;
    }
    auto xn = x.node();
    auto gn = gain.node();
    auto bn = bias.node();
    auto mu_sp = std::make_shared<std::vector<real>>(std::move(mean));
    auto is_sp = std::make_shared<std::vector<real>>(std::move(inv_std));
    return make_node(x.shape(), std::move(v), {x, gain, bias}, [xn, gn, bn, c, s, mu_sp, is_sp](Node& node) {
        for (int64_t ch = 0; ch < c; ++ch) {
            const real mu = (*mu_sp)[size_t(ch)], is = (*is_sp)[size_t(ch)];
            const real* xr = &xn->value[size_t(ch * s)];
            const real* dy = &node.grad[size_t(ch * s)];
            if (gn->requires_grad) {
                gn->ensure_grad();
                real acc = 0;
                for (int64_t i = 0; i < s; ++i) acc += dy[i] * (xr[i] - mu) * is;
                gn->grad[size_t(ch)] += acc;
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                real acc = 0;
                for (int64_t i = 0; i < s; ++i) acc += dy[i];
                bn->grad[size_t(ch)] += acc;
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                real g = gn->value[size_t(ch)];
                real sum_dy = 0, sum_dyx = 0;
                for (int64_t i = 0; i < s; ++i) {
                    sum_dy += dy[i];
                    sum_dyx += dy[i] * (xr[i] - mu) * is;
                }
                for (int64_t i = 0; i < s; ++i) {
                    real xhat = (xr[i] - mu) * is;
                    xn->grad[size_t(ch * s + i)] +=
                        g * is * (dy[i] - sum_dy / real(s) - xhat * sum_dyx / real(s));
                }
            }
        }
    });
}

// ---- conv3d ---------------------------------------------------------------

namespace {

struct ConvDims {
    int64_t cin, cout, k0, k1, k2, d0, d1, d2, o0, o1, o2;
    int stride, pad;
    int64_t kvol() const { return k0 * k1 * k2; }
    int64_t out_spatial() const { return o0 * o1 * o2; }
};

// Builds im2col columns for output rows o0 in [b0, e0).
void im2col_slab(const ConvDims& cd, const real* x, int64_t b0, int64_t e0, real* col) {
    const int64_t cols = (e0 - b0) * cd.o1 * cd.o2;
    const int64_t kv = cd.kvol();
    for (int64_t ci = 0; ci < cd.cin; ++ci) {
        const real* xc = x + ci * cd.d0 * cd.d1 * cd.d2;
        for (int64_t t0 = 0; t0 < cd.k0; ++t0)
            for (int64_t t1 = 0; t1 < cd.k1; ++t1)
                for (int64_t t2 = 0; t2 < cd.k2; ++t2) {
                    real* row = col + (ci * kv + (t0 * cd.k1 + t1) * cd.k2 + t2) * cols;
                    int64_t idx = 0;
                    for (int64_t a0 = b0; a0 < e0; ++a0) {
                        int64_t i0 = a0 * cd.stride - cd.pad + t0;
                        for (int64_t a1 = 0; a1 < cd.o1; ++a1) {
                            int64_t i1 = a1 * cd.stride - cd.pad + t1;
                            if (i0 < 0 || i0 >= cd.d0 || i1 < 0 || i1 >= cd.d1) {
                                for (int64_t a2 = 0; a2 < cd.o2; ++a2) row[idx++] = 0;
                                continue;
                            }
                            const real* base = xc + (i0 * cd.d1 + i1) * cd.d2;
                            if (cd.stride == 1) {
                                // valid a2 range is contiguous: copy in bulk
                                int64_t lo = std::max<int64_t>(0, cd.pad - t2);
                                int64_t hi = std::min(cd.o2, cd.d2 + cd.pad - t2);
                                for (int64_t a2 = 0; a2 < lo; ++a2) row[idx + a2] = 0;
                                if (hi > lo)
                                    std::memcpy(row + idx + lo, base + lo - cd.pad + t2,
                                                size_t(hi - lo) * sizeof(real));
                                for (int64_t a2 = hi; a2 < cd.o2; ++a2) row[idx + a2] = 0;
                                idx += cd.o2;
                            } else {
                                for (int64_t a2 = 0; a2 < cd.o2; ++a2) {
                                    int64_t i2 = a2 * cd.stride - cd.pad + t2;
                                    row[idx++] = (i2 < 0 || i2 >= cd.d2) ? real(0) : base[i2];
                                }
                            }
                        }
                    }
                }
    }
}

// Scatter-adds columns back to the input gradient for the same slab.
void col2im_slab(const ConvDims& cd, const real* col, int64_t b0, int64_t e0, real* dx) {
    const int64_t cols = (e0 - b0) * cd.o1 * cd.o2;
    const int64_t kv = cd.kvol();
    for (int64_t ci = 0; ci < cd.cin; ++ci) {
        real* xc = dx + ci * cd.d0 * cd.d1 * cd.d2;
        for (int64_t t0 = 0; t0 < cd.k0; ++t0)
            for (int64_t t1 = 0; t1 < cd.k1; ++t1)
                for (int64_t t2 = 0; t2 < cd.k2; ++t2) {
                    const real* row = col + (ci * kv + (t0 * cd.k1 + t1) * cd.k2 + t2) * cols;
                    int64_t idx = 0;
                    for (int64_t a0 = b0; a0 < e0; ++a0) {
                        int64_t i0 = a0 * cd.stride - cd.pad + t0;
                        for (int64_t a1 = 0; a1 < cd.o1; ++a1) {
                            int64_t i1 = a1 * cd.stride - cd.pad + t1;
                            if (i0 < 0 || i0 >= cd.d0 || i1 < 0 || i1 >= cd.d1) {
                                idx += cd.o2;
                                continue;
                            }
                            real* base = xc + (i0 * cd.d1 + i1) * cd.d2;
                            if (cd.stride == 1) {
                                int64_t lo = std::max<int64_t>(0, cd.pad - t2);
                                int64_t hi = std::min(cd.o2, cd.d2 + cd.pad - t2);
                                real* dst = base - cd.pad + t2;
                                for (int64_t a2 = lo; a2 < hi; ++a2) dst[a2] += row[idx + a2];
                                idx += cd.o2;
                            } else {
                                for (int64_t a2 = 0; a2 < cd.o2; ++a2) {
                                    int64_t i2 = a2 * cd.stride - cd.pad + t2;
                                    if (i2 >= 0 && i2 < cd.d2) base[i2] += row[idx];
                                    ++idx;
                                }
                            }
                        }
                    }
                }
    }
}

int64_t conv_slab_rows(const ConvDims& cd) {
    // Keep the transient column buffer around 16 MB.
    int64_t per_row = cd.cin * cd.kvol() * cd.o1 * cd.o2;
    int64_t rows = std::max<int64_t>(1, int64_t(4 * 1024 * 1024) / std::max<int64_t>(1, per_row));
    return std::min(rows, cd.o0);
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    UTSR_REQUIRE(x.ndim() == 4, "conv3d: input must be [Cin, D0, D1, D2], got " + shape_str(x.shape()));
    UTSR_REQUIRE(w.ndim() == 5, "conv3d: kernel must be [Cout, Cin, k0, k1, k2]");
    UTSR_REQUIRE(x.dim(0) == w.dim(1), "conv3d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    UTSR_REQUIRE(stride >= 1 && pad >= 0, "conv3d: bad stride/pad");
    ConvDims cd{};
    cd.cin = x.dim(0);
    cd.cout = w.dim(0);
    cd.k0 = w.dim(2);
    cd.k1 = w.dim(3);
    cd.k2 = w.dim(4);
    cd.d0 = x.dim(1);
    cd.d1 = x.dim(2);
    cd.d2 = x.dim(3);
    cd.stride = stride;
    cd.pad = pad;
    UTSR_REQUIRE(cd.k0 <= cd.d0 + 2 * pad && cd.k1 <= cd.d1 + 2 * pad && cd.k2 <= cd.d2 + 2 * pad,
                 "conv3d: kernel larger than padded input");
    cd.o0 = (cd.d0 + 2 * pad - cd.k0) / stride + 1;
    cd.o1 = (cd.d1 + 2 * pad - cd.k1) / stride + 1;
    cd.o2 = (cd.d2 + 2 * pad - cd.k2) / stride + 1;
    if (b.defined()) UTSR_REQUIRE(b.numel() == cd.cout, "conv3d: bias extent mismatch");

    const int64_t kdim = cd.cin * cd.kvol();
    std::vector<real> v(size_t(cd.cout * cd.out_spatial()));

    // 1x1x1 stride-1 convolutions are a plain channel mix: the input matrix
    // [Cin, S] already is the im2col matrix, so skip the copy entirely.
    if (cd.kvol() == 1 && stride == 1 && pad == 0) {
        const int64_t s = cd.out_spatial();
        gemm(false, false, cd.cout, s, cd.cin, real(1), w.data().data(), cd.cin, x.data().data(), s,
             real(0), v.data(), s);
        if (b.defined()) {
            for (int64_t co = 0; co < cd.cout; ++co) {
                real bb = b.data()[size_t(co)];
                real* p = &v[size_t(co * s)];
                for (int64_t i = 0; i < s; ++i) p[i] += bb;
            }
        }
        Shape out{cd.cout, cd.o0, cd.o1, cd.o2};
        auto xn = x.node();
        auto wn = w.node();
        NodePtr bn = b.defined() ? b.node() : nullptr;
        std::vector<Tensor> parents{x, w};
        if (b.defined()) parents.push_back(b);
        return make_node(out, std::move(v), parents, [xn, wn, bn, cd, s](Node& node) {
            if (wn->requires_grad) {
                wn->ensure_grad();
                gemm(false, true, cd.cout, cd.cin, s, real(1), node.grad.data(), s,
                     xn->value.data(), s, real(1), wn->grad.data(), cd.cin);
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                gemm(true, false, cd.cin, s, cd.cout, real(1), wn->value.data(), cd.cin,
                     node.grad.data(), s, real(1), xn->grad.data(), s);
            }
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t co = 0; co < cd.cout; ++co) {
                    real acc = 0;
                    const real* p = &node.grad[size_t(co * s)];
                    for (int64_t i = 0; i < s; ++i) acc += p[i];
                    bn->grad[size_t(co)] += acc;
                }
            }
        });
    }

    const int64_t slab = conv_slab_rows(cd);
    std::vector<real> col(size_t(kdim * slab * cd.o1 * cd.o2));
    for (int64_t b0 = 0; b0 < cd.o0; b0 += slab) {
        int64_t e0 = std::min(cd.o0, b0 + slab);
        int64_t cols = (e0 - b0) * cd.o1 * cd.o2;
        im2col_slab(cd, x.data().data(), b0, e0, col.data());
        // output rows are strided by the full spatial extent (ldc)
        gemm(false, false, cd.cout, cols, kdim, real(1), w.data().data(), kdim, col.data(), cols,
             real(0), &v[size_t(b0 * cd.o1 * cd.o2)], cd.out_spatial());
    }
    if (b.defined()) {
        for (int64_t co = 0; co < cd.cout; ++co) {
            real bb = b.data()[size_t(co)];
            real* p = &v[size_t(co * cd.out_spatial())];
            for (int64_t i = 0; i < cd.out_spatial(); ++i) p[i] += bb;
        }
    }
    Shape out{cd.cout, cd.o0, cd.o1, cd.o2};
    auto xn = x.node();
    auto wn = w.node();
    NodePtr bn = b.defined() ? b.node() : nullptr;
    std::vector<Tensor> parents{x, w};
    if (b.defined()) parents.push_back(b);
    return make_node(out, std::move(v), parents, [xn, wn, bn, cd, kdim](Node& node) {
        const int64_t slab = conv_slab_rows(cd);
        std::vector<real> col(size_t(kdim * slab * cd.o1 * cd.o2));
        if (wn->requires_grad) wn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (int64_t b0 = 0; b0 < cd.o0; b0 += slab) {
            int64_t e0 = std::min(cd.o0, b0 + slab);
            int64_t cols = (e0 - b0) * cd.o1 * cd.o2;
            // the output-grad slab is [Cout, cols] with row stride out_spatial
            const real* dy = &node.grad[size_t(b0 * cd.o1 * cd.o2)];
            if (wn->requires_grad) {
                im2col_slab(cd, xn->value.data(), b0, e0, col.data());
                gemm(false, true, cd.cout, kdim, cols, real(1), dy, cd.out_spatial(), col.data(),
                     cols, real(1), wn->grad.data(), kdim);
            }
            if (xn->requires_grad) {
                gemm(true, false, kdim, cols, cd.cout, real(1), wn->value.data(), kdim, dy,
                     cd.out_spatial(), real(0), col.data(), cols);
                col2im_slab(cd, col.data(), b0, e0, xn->grad.data());
            }
        }
        if (bn && bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t co = 0; co < cd.cout; ++co) {
                real acc = 0;
                const real* p = &node.grad[size_t(co * cd.out_spatial())];
                for (int64_t i = 0; i < cd.out_spatial(); ++i) acc += p[i];
                bn->grad[size_t(co)] += acc;
            }
        }
    });
}

// ---- structured data movement ----------------------------------------------

Tensor to_windows(const Tensor& x, std::shared_ptr<const std::vector<int64_t>> sp_idx,
                  int64_t num_win, int64_t tokens) {
    UTSR_REQUIRE(x.ndim() >= 2, "to_windows: input must be [C, spatial...]");
    const int64_t c = x.dim(0), s = x.numel() / c;
    UTSR_REQUIRE(int64_t(sp_idx->size()) == num_win * tokens, "to_windows: index size mismatch");
    std::vector<real> v(size_t(num_win * tokens * c));
    const auto& xv = x.data();
    for (int64_t t = 0; t < num_win * tokens; ++t) {
        int64_t src = (*sp_idx)[size_t(t)];
        real* dst = &v[size_t(t * c)];
        if (src < 0) {
            std::fill(dst, dst + c, real(0));
        } else {
            for (int64_t ch = 0; ch < c; ++ch) dst[ch] = xv[size_t(ch * s + src)];
        }
    }
    auto xn = x.node();
    return make_node({num_win, tokens, c}, std::move(v), {x}, [xn, sp_idx, num_win, tokens, c, s](Node& node) {
        xn->ensure_grad();
        for (int64_t t = 0; t < num_win * tokens; ++t) {
            int64_t src = (*sp_idx)[size_t(t)];
            if (src < 0) continue;
            const real* g = &node.grad[size_t(t * c)];
            for (int64_t ch = 0; ch < c; ++ch) xn->grad[size_t(ch * s + src)] += g[ch];
        }
    });
}

Tensor from_windows(const Tensor& win, std::shared_ptr<const std::vector<int64_t>> sp_idx, Shape spatial) {
    UTSR_REQUIRE(win.ndim() == 3, "from_windows: input must be [numWin, tokens, C]");
    const int64_t nw = win.dim(0), tok = win.dim(1), c = win.dim(2);
    UTSR_REQUIRE(int64_t(sp_idx->size()) == nw * tok, "from_windows: index size mismatch");
    const int64_t s = shape_numel(spatial);
    Shape out{c};
    for (int64_t d : spatial) out.push_back(d);
    std::vector<real> v(size_t(c * s), real(0));
    const auto& wv = win.data();
    for (int64_t t = 0; t < nw * tok; ++t) {
        int64_t dst = (*sp_idx)[size_t(t)];
        if (dst < 0) continue;
        const real* src = &wv[size_t(t * c)];
        for (int64_t ch = 0; ch < c; ++ch) v[size_t(ch * s + dst)] += src[ch];
    }
    auto wn = win.node();
    return make_node(out, std::move(v), {win}, [wn, sp_idx, nw, tok, c, s](Node& node) {
        wn->ensure_grad();
        for (int64_t t = 0; t < nw * tok; ++t) {
            int64_t dst = (*sp_idx)[size_t(t)];
            if (dst < 0) continue;
            real* g = &wn->grad[size_t(t * c)];
            for (int64_t ch = 0; ch < c; ++ch) g[ch] += node.grad[size_t(ch * s + dst)];
        }
    });
}

namespace {
void roll_copy(const Shape& sh, const real* src, real* dst, int s0, int s1, int s2) {
    const int64_t c = sh[0], n0 = sh[1], n1 = sh[2], n2 = sh[3];
    auto wrap = [](int64_t i, int64_t n) { return ((i % n) + n) % n; };
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i0 = 0; i0 < n0; ++i0) {
            int64_t j0 = wrap(i0 + s0, n0);
            for (int64_t i1 = 0; i1 < n1; ++i1) {
                int64_t j1 = wrap(i1 + s1, n1);
                const real* sp = src + ((ch * n0 + j0) * n1 + j1) * n2;
                real* dp = dst + ((ch * n0 + i0) * n1 + i1) * n2;
                for (int64_t i2 = 0; i2 < n2; ++i2) dp[i2] = sp[wrap(i2 + s2, n2)];
            }
        }
}
}  // namespace

Tensor roll3d(const Tensor& x, int s0, int s1, int s2) {
    UTSR_REQUIRE(x.ndim() == 4, "roll3d: expects [C, D0, D1, D2]");
    std::vector<real> v(size_t(x.numel()));
    roll_copy(x.shape(), x.data().data(), v.data(), s0, s1, s2);
    auto xn = x.node();
    Shape sh = x.shape();
    return make_node(x.shape(), std::move(v), {x}, [xn, sh, s0, s1, s2](Node& node) {
        xn->ensure_grad();
        std::vector<real> g(node.grad.size());
        roll_copy(sh, node.grad.data(), g.data(), -s0, -s1, -s2);
        for (size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
    });
}

Tensor pixel_shuffle(const Tensor& x, int l) {
    UTSR_REQUIRE(x.ndim() == 4, "pixel_shuffle: expects [C*l^3, D0, D1, D2]");
    const int64_t l3 = int64_t(l) * l * l;
    UTSR_REQUIRE(x.dim(0) % l3 == 0, "pixel_shuffle: channel count not divisible by l^3");
    const int64_t c = x.dim(0) / l3, n0 = x.dim(1), n1 = x.dim(2), n2 = x.dim(3);
    Shape out{c, n0 * l, n1 * l, n2 * l};
    std::vector<real> v(size_t(x.numel()));
    const auto& xv = x.data();
    const int64_t m0 = n0 * l, m1 = n1 * l, m2 = n2 * l;
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i0 = 0; i0 < m0; ++i0)
            for (int64_t i1 = 0; i1 < m1; ++i1)
                for (int64_t i2 = 0; i2 < m2; ++i2) {
                    int64_t o0 = i0 % l, o1 = i1 % l, o2 = i2 % l;
                    int64_t sc = ch * l3 + (o2 * l + o1) * l + o0;
                    v[size_t(((ch * m0 + i0) * m1 + i1) * m2 + i2)] =
                        xv[size_t(((sc * n0 + i0 / l) * n1 + i1 / l) * n2 + i2 / l)];
                }
    auto xn = x.node();
    return make_node(out, std::move(v), {x}, [xn, c, l, l3, n0, n1, n2, m0, m1, m2](Node& node) {
        xn->ensure_grad();
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t i0 = 0; i0 < m0; ++i0)
                for (int64_t i1 = 0; i1 < m1; ++i1)
                    for (int64_t i2 = 0; i2 < m2; ++i2) {
                        int64_t o0 = i0 % l, o1 = i1 % l, o2 = i2 % l;
                        int64_t sc = ch * l3 + (o2 * l + o1) * l + o0;
                        xn->grad[size_t(((sc * n0 + i0 / l) * n1 + i1 / l) * n2 + i2 / l)] +=
                            node.grad[size_t(((ch * m0 + i0) * m1 + i1) * m2 + i2)];
                    }
    });
}

Tensor scale_cols(const Tensor& x, const Tensor& g) {
    UTSR_REQUIRE(x.ndim() == 2, "scale_cols: x must be [N, C]");
    const int64_t n = x.dim(0), c = x.dim(1);
    UTSR_REQUIRE(g.numel() == c, "scale_cols: gate extent mismatch");
    std::vector<real> v(size_t(x.numel()));
    const auto& xv = x.data();
    const auto& gv = g.data();
    for (int64_t r = 0; r < n; ++r)
        for (int64_t j = 0; j < c; ++j) v[size_t(r * c + j)] = xv[size_t(r * c + j)] * gv[size_t(j)];
    auto xn = x.node();
    auto gn = g.node();
    return make_node(x.shape(), std::move(v), {x, g}, [xn, gn, n, c](Node& node) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (int64_t r = 0; r < n; ++r)
                for (int64_t j = 0; j < c; ++j)
                    xn->grad[size_t(r * c + j)] += node.grad[size_t(r * c + j)] * gn->value[size_t(j)];
        }
        if (gn->requires_grad) {
            gn->ensure_grad();
            for (int64_t r = 0; r < n; ++r)
                for (int64_t j = 0; j < c; ++j)
                    gn->grad[size_t(j)] += node.grad[size_t(r * c + j)] * xn->value[size_t(r * c + j)];
        }
    });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
    const int64_t c = x.dim(x.ndim() - 1);
    UTSR_REQUIRE(b.numel() == c, "add_bias: bias extent " + std::to_string(b.numel()) +
                                     " vs last axis " + std::to_string(c));
    const int64_t rows = x.numel() / c;
    std::vector<real> v(size_t(x.numel()));
    const auto& xv = x.data();
    const auto& bv = b.data();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < c; ++j) v[size_t(r * c + j)] = xv[size_t(r * c + j)] + bv[size_t(j)];
    auto xn = x.node();
    auto bn = b.node();
    return make_node(x.shape(), std::move(v), {x, b}, [xn, bn, rows, c](Node& node) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (size_t i = 0; i < node.grad.size(); ++i) xn->grad[i] += node.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < c; ++j) bn->grad[size_t(j)] += node.grad[size_t(r * c + j)];
        }
    });
}

Tensor attn_bias_add(const Tensor& logits, const Tensor& bias, const Tensor& mask, int64_t num_win) {
    UTSR_REQUIRE(logits.ndim() == 3 && bias.ndim() == 3, "attn_bias_add: rank mismatch");
    const int64_t bh = logits.dim(0), nq = logits.dim(1), nk = logits.dim(2);
    UTSR_REQUIRE(bh % num_win == 0, "attn_bias_add: batch not divisible by window count");
    const int64_t heads = bh / num_win;
    UTSR_REQUIRE(bias.dim(0) == heads && bias.dim(1) == nq && bias.dim(2) == nk,
                 "attn_bias_add: bias shape mismatch " + shape_str(bias.shape()));
    if (mask.defined())
        UTSR_REQUIRE(mask.ndim() == 3 && mask.dim(0) == num_win && mask.dim(1) == nq && mask.dim(2) == nk,
                     "attn_bias_add: mask shape mismatch");
    std::vector<real> v(size_t(logits.numel()));
    const auto& lv = logits.data();
    const auto& bv = bias.data();
    const real* mv = mask.defined() ? mask.data().data() : nullptr;
    const int64_t plane = nq * nk;
    for (int64_t b = 0; b < bh; ++b) {
        const int64_t w = b / heads, h = b % heads;
        const real* lp = &lv[size_t(b * plane)];
        const real* bp = &bv[size_t(h * plane)];
        const real* mp = mv ? mv + w * plane : nullptr;
        real* op = &v[size_t(b * plane)];
        for (int64_t i = 0; i < plane; ++i) op[i] = lp[i] + bp[i] + (mp ? mp[i] : real(0));
    }
    auto ln = logits.node();
    auto bn = bias.node();
    NodePtr mn = mask.defined() ? mask.node() : nullptr;
    std::vector<Tensor> parents{logits, bias};
    if (mask.defined()) parents.push_back(mask);
    return make_node(logits.shape(), std::move(v), parents, [ln, bn, mn, bh, heads, plane](Node& node) {
        if (ln->requires_grad) {
            ln->ensure_grad();
            for (size_t i = 0; i < node.grad.size(); ++i) ln->grad[i] += node.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t b = 0; b < bh; ++b) {
                const int64_t h = b % heads;
                const real* g = &node.grad[size_t(b * plane)];
                real* dst = &bn->grad[size_t(h * plane)];
                for (int64_t i = 0; i < plane; ++i) dst[i] += g[i];
            }
        }
        if (mn && mn->requires_grad) {
            mn->ensure_grad();
            for (int64_t b = 0; b < bh; ++b) {
                const int64_t w = b / heads;
                const real* g = &node.grad[size_t(b * plane)];
                real* dst = &mn->grad[size_t(w * plane)];
                for (int64_t i = 0; i < plane; ++i) dst[i] += g[i];
            }
        }
    });
}

// ---- box sum ---------------------------------------------------------------

namespace {
// Sliding cropped sum along the axis with extent n and stride `inner`,
// repeated `outer` times. In-place on buf via a scratch line.
void box_sum_axis(real* buf, int64_t outer, int64_t n, int64_t inner, int radius, double* line) {
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            real* base = buf + o * n * inner + i;
            // double prefix sums: the later subtraction cancels most of the
            // prefix magnitude, so accumulation noise would dominate at f32
            double acc = 0;
            for (int64_t j = 0; j < n; ++j) {
                acc += double(base[j * inner]);
                line[j] = acc;
            }
            for (int64_t j = n - 1; j >= 0; --j) {
                int64_t hi = std::min(n - 1, j + radius);
                int64_t lo = j - radius;  // window [lo, hi]
                base[j * inner] = real(line[hi] - (lo > 0 ? line[lo - 1] : 0.0));
            }
        }
}
}  // namespace

Tensor box_sum(const Tensor& x, int radius) {
    UTSR_REQUIRE(x.ndim() == 4, "box_sum: expects [C, D0, D1, D2]");
    UTSR_REQUIRE(radius >= 0, "box_sum: negative radius");
    const int64_t c = x.dim(0), n0 = x.dim(1), n1 = x.dim(2), n2 = x.dim(3);
    std::vector<real> v = x.data();
    std::vector<double> line(size_t(std::max({n0, n1, n2})));
    box_sum_axis(v.data(), c, n0, n1 * n2, radius, line.data());
    box_sum_axis(v.data(), c * n0, n1, n2, radius, line.data());
    box_sum_axis(v.data(), c * n0 * n1, n2, 1, radius, line.data());
    auto xn = x.node();
    return make_node(x.shape(), std::move(v), {x}, [xn, c, n0, n1, n2, radius](Node& node) {
        xn->ensure_grad();
        // The operator is symmetric, so the adjoint is the operator itself.
        std::vector<real> g = node.grad;
        std::vector<double> line(size_t(std::max({n0, n1, n2})));
        box_sum_axis(g.data(), c, n0, n1 * n2, radius, line.data());
        box_sum_axis(g.data(), c * n0, n1, n2, radius, line.data());
        box_sum_axis(g.data(), c * n0 * n1, n2, 1, radius, line.data());
        for (size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
    });
}

// ---- warp -------------------------------------------------------------------

Tensor warp3d(const Tensor& img, const Tensor& field) {
    UTSR_REQUIRE(img.ndim() == 4 && field.ndim() == 4 && field.dim(0) == 3,
                 "warp3d: expects img [C, D0, D1, D2] and field [3, D0, D1, D2]");
    UTSR_REQUIRE(img.dim(1) == field.dim(1) && img.dim(2) == field.dim(2) && img.dim(3) == field.dim(3),
                 "warp3d: spatial extents differ, " + shape_str(img.shape()) + " vs " + shape_str(field.shape()));
    const int64_t c = img.dim(0), n0 = img.dim(1), n1 = img.dim(2), n2 = img.dim(3);
    const int64_t s = n0 * n1 * n2;
    std::vector<real> v(size_t(c * s));
    const real* iv = img.data().data();
    const real* fv = field.data().data();
    auto prep = [](real coord, int64_t n, int64_t& i0, real& f) {
        coord = std::min(std::max(coord, real(0)), real(n - 1));
        // left-cell rule at exact integers
        i0 = int64_t(std::ceil(double(coord))) - 1;
        i0 = std::min(std::max<int64_t>(i0, 0), std::max<int64_t>(n - 2, 0));
        f = coord - real(i0);
        if (n == 1) f = 0;
    };
    for (int64_t p0 = 0; p0 < n0; ++p0)
        for (int64_t p1 = 0; p1 < n1; ++p1)
            for (int64_t p2 = 0; p2 < n2; ++p2) {
                const int64_t p = (p0 * n1 + p1) * n2 + p2;
                int64_t i0, i1, i2;
                real f0, f1, f2;
                prep(real(p2) + fv[0 * s + p], n2, i2, f2);
                prep(real(p1) + fv[1 * s + p], n1, i1, f1);
                prep(real(p0) + fv[2 * s + p], n0, i0, f0);
                const int64_t j0 = std::min(i0 + 1, n0 - 1), j1 = std::min(i1 + 1, n1 - 1),
                              j2 = std::min(i2 + 1, n2 - 1);
                for (int64_t ch = 0; ch < c; ++ch) {
                    const real* b = iv + ch * s;
                    real c00 = b[(i0 * n1 + i1) * n2 + i2] * (1 - f2) + b[(i0 * n1 + i1) * n2 + j2] * f2;
                    real c01 = b[(i0 * n1 + j1) * n2 + i2] * (1 - f2) + b[(i0 * n1 + j1) * n2 + j2] * f2;
                    real c10 = b[(j0 * n1 + i1) * n2 + i2] * (1 - f2) + b[(j0 * n1 + i1) * n2 + j2] * f2;
                    real c11 = b[(j0 * n1 + j1) * n2 + i2] * (1 - f2) + b[(j0 * n1 + j1) * n2 + j2] * f2;
                    real c0 = c00 * (1 - f1) + c01 * f1;
                    real c1 = c10 * (1 - f1) + c11 * f1;
                    v[size_t(ch * s + p)] = c0 * (1 - f0) + c1 * f0;
                }
            }
    auto in = img.node();
    auto fn = field.node();
    return make_node(img.shape(), std::move(v), {img, field}, [in, fn, c, n0, n1, n2, s, prep](Node& node) {
        const real* fv = fn->value.data();
        const real* iv = in->value.data();
        const bool gi = in->requires_grad, gf = fn->requires_grad;
        if (gi) in->ensure_grad();
        if (gf) fn->ensure_grad();
        for (int64_t p0 = 0; p0 < n0; ++p0)
            for (int64_t p1 = 0; p1 < n1; ++p1)
                for (int64_t p2 = 0; p2 < n2; ++p2) {
                    const int64_t p = (p0 * n1 + p1) * n2 + p2;
                    int64_t i0, i1, i2;
                    real f0, f1, f2;
                    real c2 = real(p2) + fv[0 * s + p];
                    real c1v = real(p1) + fv[1 * s + p];
                    real c0v = real(p0) + fv[2 * s + p];
                    prep(c2, n2, i2, f2);
                    prep(c1v, n1, i1, f1);
                    prep(c0v, n0, i0, f0);
                    // clamped coordinates have zero derivative past the border
                    const bool in2 = c2 > 0 && c2 < real(n2 - 1 + 1e-30) && n2 > 1;
                    const bool in1 = c1v > 0 && c1v < real(n1 - 1 + 1e-30) && n1 > 1;
                    const bool in0 = c0v > 0 && c0v < real(n0 - 1 + 1e-30) && n0 > 1;
                    const int64_t j0 = std::min(i0 + 1, n0 - 1), j1 = std::min(i1 + 1, n1 - 1),
                                  j2 = std::min(i2 + 1, n2 - 1);
                    real d0 = 0, d1 = 0, d2 = 0;
                    for (int64_t ch = 0; ch < c; ++ch) {
                        const real g = node.grad[size_t(ch * s + p)];
                        if (g == 0) continue;
                        const real* b = iv + ch * s;
                        const real v000 = b[(i0 * n1 + i1) * n2 + i2], v001 = b[(i0 * n1 + i1) * n2 + j2];
                        const real v010 = b[(i0 * n1 + j1) * n2 + i2], v011 = b[(i0 * n1 + j1) * n2 + j2];
                        const real v100 = b[(j0 * n1 + i1) * n2 + i2], v101 = b[(j0 * n1 + i1) * n2 + j2];
                        const real v110 = b[(j0 * n1 + j1) * n2 + i2], v111 = b[(j0 * n1 + j1) * n2 + j2];
                        if (gi) {
                            real* ig = &in->grad[size_t(ch * s)];
                            ig[(i0 * n1 + i1) * n2 + i2] += g * (1 - f0) * (1 - f1) * (1 - f2);
                            ig[(i0 * n1 + i1) * n2 + j2] += g * (1 - f0) * (1 - f1) * f2;
                            ig[(i0 * n1 + j1) * n2 + i2] += g * (1 - f0) * f1 * (1 - f2);
                            ig[(i0 * n1 + j1) * n2 + j2] += g * (1 - f0) * f1 * f2;
                            ig[(j0 * n1 + i1) * n2 + i2] += g * f0 * (1 - f1) * (1 - f2);
                            ig[(j0 * n1 + i1) * n2 + j2] += g * f0 * (1 - f1) * f2;
                            ig[(j0 * n1 + j1) * n2 + i2] += g * f0 * f1 * (1 - f2);
                            ig[(j0 * n1 + j1) * n2 + j2] += g * f0 * f1 * f2;
                        }
                        if (gf) {
                            if (in2)
                                d2 += g * ((v001 - v000) * (1 - f0) * (1 - f1) + (v011 - v010) * (1 - f0) * f1 +
                                           (v101 - v100) * f0 * (1 - f1) + (v111 - v110) * f0 * f1);
                            if (in1)
                                d1 += g * ((v010 - v000) * (1 - f0) * (1 - f2) + (v011 - v001) * (1 - f0) * f2 +
                                           (v110 - v100) * f0 * (1 - f2) + (v111 - v101) * f0 * f2);
                            if (in0)
                                d0 += g * ((v100 - v000) * (1 - f1) * (1 - f2) + (v101 - v001) * (1 - f1) * f2 +
                                           (v110 - v010) * f1 * (1 - f2) + (v111 - v011) * f1 * f2);
                        }
                    }
                    if (gf) {
                        fn->grad[size_t(0 * s + p)] += d2;
                        fn->grad[size_t(1 * s + p)] += d1;
                        fn->grad[size_t(2 * s + p)] += d0;
                    }
                }
    });
}

// ---- trilinear upsampling ----------------------------------------------------

namespace {
struct UpAxis {
    std::vector<int64_t> i0;
    std::vector<real> w1;  // weight of i0+1
};
UpAxis up_axis(int64_t n) {
    UpAxis a;
    a.i0.resize(size_t(2 * n));
    a.w1.resize(size_t(2 * n));
    for (int64_t o = 0; o < 2 * n; ++o) {
        double cacc = double(o) / 2.0 - 0.25;
        double cl = std::min(std::max(cacc, 0.0), double(n - 1));
        int64_t i = std::min(int64_t(std::floor(cl)), std::max<int64_t>(n - 2, 0));
        a.i0[size_t(o)] = i;
        a.w1[size_t(o)] = n > 1 ? real(cl - double(i)) : real(0);
    }
    return a;
}
}  // namespace

Tensor trilinear_up2(const Tensor& x) {
    UTSR_REQUIRE(x.ndim() == 4, "trilinear_up2: expects [C, D0, D1, D2]");
    const int64_t c = x.dim(0), n0 = x.dim(1), n1 = x.dim(2), n2 = x.dim(3);
    auto a0 = std::make_shared<UpAxis>(up_axis(n0));
    auto a1 = std::make_shared<UpAxis>(up_axis(n1));
    auto a2 = std::make_shared<UpAxis>(up_axis(n2));
    const int64_t m0 = 2 * n0, m1 = 2 * n1, m2 = 2 * n2;
    std::vector<real> v(size_t(c * m0 * m1 * m2));
    const auto& xv = x.data();
    for (int64_t ch = 0; ch < c; ++ch) {
        const real* b = &xv[size_t(ch * n0 * n1 * n2)];
        real* ob = &v[size_t(ch * m0 * m1 * m2)];
        for (int64_t o0 = 0; o0 < m0; ++o0) {
            int64_t i0 = a0->i0[size_t(o0)];
            real w0 = a0->w1[size_t(o0)];
            int64_t j0 = std::min(i0 + 1, n0 - 1);
            for (int64_t o1 = 0; o1 < m1; ++o1) {
                int64_t i1 = a1->i0[size_t(o1)];
                real w1 = a1->w1[size_t(o1)];
                int64_t j1 = std::min(i1 + 1, n1 - 1);
                for (int64_t o2 = 0; o2 < m2; ++o2) {
                    int64_t i2 = a2->i0[size_t(o2)];
                    real w2 = a2->w1[size_t(o2)];
                    int64_t j2 = std::min(i2 + 1, n2 - 1);
                    real c00 = b[(i0 * n1 + i1) * n2 + i2] * (1 - w2) + b[(i0 * n1 + i1) * n2 + j2] * w2;
                    real c01 = b[(i0 * n1 + j1) * n2 + i2] * (1 - w2) + b[(i0 * n1 + j1) * n2 + j2] * w2;
                    real c10 = b[(j0 * n1 + i1) * n2 + i2] * (1 - w2) + b[(j0 * n1 + i1) * n2 + j2] * w2;
                    real c11 = b[(j0 * n1 + j1) * n2 + i2] * (1 - w2) + b[(j0 * n1 + j1) * n2 + j2] * w2;
                    ob[(o0 * m1 + o1) * m2 + o2] =
                        (c00 * (1 - w1) + c01 * w1) * (1 - w0) + (c10 * (1 - w1) + c11 * w1) * w0;
                }
            }
        }
    }
    auto xn = x.node();
    return make_node({c, m0, m1, m2}, std::move(v), {x}, [xn, a0, a1, a2, c, n0, n1, n2, m0, m1, m2](Node& node) {
        xn->ensure_grad();
        for (int64_t ch = 0; ch < c; ++ch) {
            real* b = &xn->grad[size_t(ch * n0 * n1 * n2)];
            const real* gb = &node.grad[size_t(ch * m0 * m1 * m2)];
            for (int64_t o0 = 0; o0 < m0; ++o0) {
                int64_t i0 = a0->i0[size_t(o0)];
                real w0 = a0->w1[size_t(o0)];
                int64_t j0 = std::min(i0 + 1, n0 - 1);
                for (int64_t o1 = 0; o1 < m1; ++o1) {
                    int64_t i1 = a1->i0[size_t(o1)];
                    real w1 = a1->w1[size_t(o1)];
                    int64_t j1 = std::min(i1 + 1, n1 - 1);
                    for (int64_t o2 = 0; o2 < m2; ++o2) {
                        int64_t i2 = a2->i0[size_t(o2)];
                        real w2 = a2->w1[size_t(o2)];
                        int64_t j2 = std::min(i2 + 1, n2 - 1);
                        real g = gb[(o0 * m1 + o1) * m2 + o2];
                        b[(i0 * n1 + i1) * n2 + i2] += g * (1 - w0) * (1 - w1) * (1 - w2);
                        b[(i0 * n1 + i1) * n2 + j2] += g * (1 - w0) * (1 - w1) * w2;
                        b[(i0 * n1 + j1) * n2 + i2] += g * (1 - w0) * w1 * (1 - w2);
                        b[(i0 * n1 + j1) * n2 + j2] += g * (1 - w0) * w1 * w2;
                        b[(j0 * n1 + i1) * n2 + i2] += g * w0 * (1 - w1) * (1 - w2);
                        b[(j0 * n1 + i1) * n2 + j2] += g * w0 * (1 - w1) * w2;
                        b[(j0 * n1 + j1) * n2 + i2] += g * w0 * w1 * (1 - w2);
                        b[(j0 * n1 + j1) * n2 + j2] += g * w0 * w1 * w2;
                    }
                }
            }
        }
    });
}

// ---- mutual-information helpers ----------------------------------------------

Tensor parzen_weights(const Tensor& x, const std::vector<real>& centers, real sigma) {
    const int64_t n = x.numel(), nb = int64_t(centers.size());
    UTSR_REQUIRE(nb >= 2 && sigma > 0, "parzen_weights: need >=2 bins and positive sigma");
    std::vector<real> v(size_t(n * nb));
    const auto& xv = x.data();
    const real inv2s2 = real(0.5) / (sigma * sigma);
    for (int64_t i = 0; i < n; ++i) {
        real s = 0;
        for (int64_t b = 0; b < nb; ++b) {
            real d = xv[size_t(i)] - centers[size_t(b)];
            real w = std::exp(-d * d * inv2s2);
            v[size_t(i * nb + b)] = w;
            s += w;
        }
        real inv = real(1) / (s + real(1e-12));
        for (int64_t b = 0; b < nb; ++b) v[size_t(i * nb + b)] *= inv;
    }
    auto xn = x.node();
    auto cn = std::make_shared<std::vector<real>>(centers);
    return make_node({n, nb}, std::move(v), {x}, [xn, cn, n, nb, sigma](Node& node) {
        xn->ensure_grad();
        const real inv_s2 = real(1) / (sigma * sigma);
        const real inv2s2 = real(0.5) * inv_s2;
        std::vector<real> w(size_t(nb) + 0), wp(size_t(nb) + 0);
        for (int64_t i = 0; i < n; ++i) {
            real s = 0, sp = 0;
            const real xi = xn->value[size_t(i)];
            for (int64_t b = 0; b < nb; ++b) {
                real d = xi - (*cn)[size_t(b)];
                w[size_t(b)] = std::exp(-d * d * inv2s2);
                wp[size_t(b)] = w[size_t(b)] * (-d) * inv_s2;  // dw/dx
                s += w[size_t(b)];
                sp += wp[size_t(b)];
            }
            s += real(1e-12);
            real acc = 0;
            for (int64_t b = 0; b < nb; ++b) {
                real dy = node.grad[size_t(i * nb + b)];
                acc += dy * (wp[size_t(b)] / s - w[size_t(b)] * sp / (s * s));
            }
            xn->grad[size_t(i)] += acc;
        }
    });
}

Tensor mi_from_joint(const Tensor& joint) {
    UTSR_REQUIRE(joint.ndim() == 2, "mi_from_joint: expects a 2-D joint table");
    const int64_t r = joint.dim(0), c = joint.dim(1);
    const auto& p = joint.data();
    const real eps = real(1e-12);
    std::vector<real> pr(size_t(r), 0), pc(size_t(c), 0);
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) {
            pr[size_t(i)] += p[size_t(i * c + j)];
            pc[size_t(j)] += p[size_t(i * c + j)];
        }
    real mi = 0;
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) {
            real pij = p[size_t(i * c + j)];
            if (pij > eps) mi += pij * std::log(pij / ((pr[size_t(i)] + eps) * (pc[size_t(j)] + eps)));
        }
    auto jn = joint.node();
    return make_node({1}, {mi}, {joint}, [jn, r, c, eps](Node& node) {
        jn->ensure_grad();
        const auto& p = jn->value;
        std::vector<real> pr(size_t(r), 0), pc(size_t(c), 0);
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) {
                pr[size_t(i)] += p[size_t(i * c + j)];
                pc[size_t(j)] += p[size_t(i * c + j)];
            }
        const real g = node.grad[0];
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) {
                real pij = std::max(p[size_t(i * c + j)], eps);
                jn->grad[size_t(i * c + j)] +=
                    g * (std::log(pij / ((pr[size_t(i)] + eps) * (pc[size_t(j)] + eps))) - real(1));
            }
    });
}

// ---- grad check ---------------------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, real eps) {
    Tensor probe = Tensor::from_data(x.shape(), x.data(), true);
    Tensor y = f(probe);
    UTSR_REQUIRE(y.numel() == 1, "grad_check: f must return a scalar");
    backward(y);
    std::vector<real> analytic = probe.grad();
    double max_err = 0;
    auto& data = probe.data();
    for (int64_t i = 0; i < probe.numel(); ++i) {
        real keep = data[size_t(i)];
        data[size_t(i)] = keep + eps;
        double hi = double(f(probe).item());
        data[size_t(i)] = keep - eps;
        double lo = double(f(probe).item());
        data[size_t(i)] = keep;
        double central = (hi - lo) / (2.0 * double(eps));
        double an = double(analytic[size_t(i)]);
        double err = std::abs(an - central) / (std::abs(an) + std::abs(central) + 1e-8);
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace utsr
