#include "xmod/autodiff.hpp"

#include <malloc.h>

#include <algorithm>
#include <bit>
#include <type_traits>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "blas.hpp"
#include "xmod/wavelet.hpp"

namespace xmod::ad {

namespace {

thread_local bool g_grad_enabled = true;

// Graph tensors are large and short-lived; keeping freed blocks in the heap instead of returning
// them to the kernel avoids a page fault storm on every op.
const bool g_heap_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
}();

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> record(Tensor<T> value, std::vector<NodePtr<T>> inputs, const char* op, std::function<void(Node<T>&)> fn) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->op = op;
    const bool need = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(), [](const NodePtr<T>& p) {
                          return p && p->requires_grad;
                      });
    if (need) {
        n->requires_grad = true;
        n->inputs = std::move(inputs);
        n->backward_fn = std::move(fn);
    }
    return Var<T>(std::move(n));
}

template <typename T>
bool wants(const Node<T>& self, std::size_t i) {
    return i < self.inputs.size() && self.inputs[i] && self.inputs[i]->requires_grad;
}

int norm_axis(int axis, int rank, const char* what) {
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw ShapeError(std::string(what) + ": axis out of range");
    return axis;
}

// outer x mid x inner decomposition around one axis.
struct AxisSplit {
    std::int64_t outer = 1, mid = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
    AxisSplit r;
    for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
    r.mid = s[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

// ---- broadcasting ----

struct Broadcast {
    Shape out;
    std::vector<std::int64_t> dims, sa, sb;
    bool same = false;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* what) {
    Broadcast p;
    if (a == b) {
        p.out = a;
        p.same = true;
        return p;
    }
    const std::size_t r = std::max(a.size(), b.size());
    p.out.assign(r, 1);
    std::vector<std::int64_t> da(r, 1), db(r, 1);
    for (std::size_t i = 0; i < a.size(); ++i) da[r - a.size() + i] = a[i];
    for (std::size_t i = 0; i < b.size(); ++i) db[r - b.size() + i] = b[i];
    for (std::size_t i = 0; i < r; ++i) {
        if (da[i] != db[i] && da[i] != 1 && db[i] != 1) {
            throw ShapeError(std::string(what) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        p.out[i] = da[i] == 1 ? db[i] : da[i];
    }
    // Contiguous strides, zeroed on broadcast axes.
    std::vector<std::int64_t> sa(r), sb(r);
    std::int64_t ka = 1, kb = 1;
    for (std::size_t i = r; i-- > 0;) {
        sa[i] = da[i] == p.out[i] ? ka : 0;
        sb[i] = db[i] == p.out[i] ? kb : 0;
        ka *= da[i];
        kb *= db[i];
    }
    // Merge neighbouring axes that stay contiguous in both operands.
    for (std::size_t i = 0; i < r; ++i) {
        if (p.out[i] == 1) continue;
        if (!p.dims.empty() && p.sa.back() == sa[i] * p.out[i] && p.sb.back() == sb[i] * p.out[i]) {
            p.dims.back() *= p.out[i];
            p.sa.back() = sa[i];
            p.sb.back() = sb[i];
        } else {
            p.dims.push_back(p.out[i]);
            p.sa.push_back(sa[i]);
            p.sb.push_back(sb[i]);
        }
    }
    return p;
}

template <typename F>
void broadcast_loop(const Broadcast& p, std::int64_t total, F&& f) {
    if (p.same) {
        for (std::int64_t i = 0; i < total; ++i) f(i, i, i);
        return;
    }
    const std::size_t r = p.dims.size();
    if (r == 0) {
        if (total > 0) f(0, 0, 0);
        return;
    }
    const std::int64_t inner = p.dims[r - 1], ia = p.sa[r - 1], ib = p.sb[r - 1];
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t o = 0; o < total; o += inner) {
        for (std::int64_t j = 0; j < inner; ++j) f(o + j, oa + j * ia, ob + j * ib);
        for (std::size_t d = r - 1; d-- > 0;) {
            ++idx[d];
            oa += p.sa[d];
            ob += p.sb[d];
            if (idx[d] < p.dims[d]) break;
            oa -= p.sa[d] * p.dims[d];
            ob -= p.sb[d] * p.dims[d];
            idx[d] = 0;
        }
    }
}

enum class BinOp { Add, Sub, Mul, Div };

template <typename T>
Var<T> binary(const Var<T>& a, const Var<T>& b, BinOp op, const char* name) {
    auto plan = std::make_shared<Broadcast>(plan_broadcast(a.shape(), b.shape(), name));
    Tensor<T> out(plan->out);
    const T* pa = a.value().ptr();
    const T* pb = b.value().ptr();
    T* po = out.ptr();
    switch (op) {
    case BinOp::Add: broadcast_loop(*plan, out.size(), [&](auto o, auto i, auto j) { po[o] = pa[i] + pb[j]; }); break;
    case BinOp::Sub: broadcast_loop(*plan, out.size(), [&](auto o, auto i, auto j) { po[o] = pa[i] - pb[j]; }); break;
    case BinOp::Mul: broadcast_loop(*plan, out.size(), [&](auto o, auto i, auto j) { po[o] = pa[i] * pb[j]; }); break;
    case BinOp::Div: broadcast_loop(*plan, out.size(), [&](auto o, auto i, auto j) { po[o] = pa[i] / pb[j]; }); break;
    }
    return record<T>(std::move(out), {a.node(), b.node()}, name, [plan, op](Node<T>& self) {
        const T* g = self.grad.ptr();
        const std::int64_t total = self.value.size();
        const bool wa = wants(self, 0), wb = wants(self, 1);
        const T* va = self.inputs[0]->value.ptr();
        const T* vb = self.inputs[1]->value.ptr();
        T* ga = wa ? self.inputs[0]->grad_buffer().ptr() : nullptr;
        T* gb = wb ? self.inputs[1]->grad_buffer().ptr() : nullptr;
        auto run = [&](auto f) { broadcast_loop(*plan, total, f); };
        switch (op) {
        case BinOp::Add:
            if (ga) run([&](auto o, auto i, auto) { ga[i] += g[o]; });
            if (gb) run([&](auto o, auto, auto j) { gb[j] += g[o]; });
            break;
        case BinOp::Sub:
            if (ga) run([&](auto o, auto i, auto) { ga[i] += g[o]; });
            if (gb) run([&](auto o, auto, auto j) { gb[j] -= g[o]; });
            break;
        case BinOp::Mul:
            if (ga) run([&](auto o, auto i, auto j) { ga[i] += g[o] * vb[j]; });
            if (gb) run([&](auto o, auto i, auto j) { gb[j] += g[o] * va[i]; });
            break;
        case BinOp::Div:
            if (ga) run([&](auto o, auto i, auto j) { ga[i] += g[o] / vb[j]; });
            if (gb) run([&](auto o, auto i, auto j) { gb[j] -= g[o] * va[i] / (vb[j] * vb[j]); });
            break;
        }
    });
}

// y = f(x) elementwise; dy/dx expressed through (x, y).
template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& x, const char* name, F f, D d) {
    Tensor<T> out(x.shape());
    const T* px = x.value().ptr();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = f(px[i]);
    return record<T>(std::move(out), {x.node()}, name, [d](Node<T>& self) {
        auto& in = *self.inputs[0];
        T* gx = in.grad_buffer().ptr();
        const T* g = self.grad.ptr();
        const T* vx = in.value.ptr();
        const T* vy = self.value.ptr();
        for (std::int64_t i = 0; i < self.value.size(); ++i) gx[i] += g[i] * d(vx[i], vy[i]);
    });
}

template <typename T>
T stable_sigmoid(T x) {
    if (x >= 0) return T{1} / (T{1} + std::exp(-x));
    const T e = std::exp(x);
    return e / (T{1} + e);
}

// Branch-free exp for 32-bit floats (Cephes polynomial, about 1 ulp) so hot loops vectorize;
// 64-bit keeps the library exp.
template <typename T>
inline T fast_exp(T x) {
    if constexpr (std::is_same_v<T, float>) {
        x = x < -87.3f ? -87.3f : x;
        x = x > 88.7f ? 88.7f : x;
        const float n = std::floor(x * 1.44269504088896341f + 0.5f);
        x -= n * 0.693359375f;
        x -= n * -2.12194440e-4f;
        float y = 1.9875691500e-4f;
        y = y * x + 1.3981999507e-3f;
        y = y * x + 8.3334519073e-3f;
        y = y * x + 4.1665795894e-2f;
        y = y * x + 1.6666665459e-1f;
        y = y * x + 5.0000001201e-1f;
        y = y * x * x + x + 1.0f;
        return y * std::bit_cast<float>((static_cast<std::int32_t>(n) + 127) << 23);
    } else {
        return std::exp(x);
    }
}

template <typename T>
inline T fast_sigmoid(T x) {
    if constexpr (std::is_same_v<T, float>) return 1.0f / (1.0f + fast_exp(-x));
    else return stable_sigmoid(x);
}

// Generic axis permutation: dst[out_index] (op)= src[in_index].
template <typename T, bool Accumulate>
void permute_apply(const T* src, const Shape& in_shape, const std::vector<int>& axes, T* dst, bool inverse) {
    const std::size_t r = in_shape.size();
    std::vector<std::int64_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
    Shape out_shape(r);
    std::vector<std::int64_t> stride(r);
    for (std::size_t i = 0; i < r; ++i) {
        out_shape[i] = in_shape[static_cast<std::size_t>(axes[i])];
        stride[i] = in_stride[static_cast<std::size_t>(axes[i])];
    }
    const std::int64_t total = shape_numel(in_shape);
    if (r == 0) {
        if (Accumulate) dst[0] += src[0]; else dst[0] = src[0];
        return;
    }
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t off = 0;
    const std::int64_t inner = out_shape[r - 1], inner_stride = stride[r - 1];
    for (std::int64_t o = 0; o < total; o += inner) {
        for (std::int64_t j = 0; j < inner; ++j) {
            // Forward: out[o + j] = in[off + j * stride]; inverse scatters the other way.
            const std::int64_t a = o + j, b = off + j * inner_stride;
            if (!inverse) {
                if (Accumulate) dst[a] += src[b]; else dst[a] = src[b];
            } else {
                if (Accumulate) dst[b] += src[a]; else dst[b] = src[a];
            }
        }
        for (std::size_t d = r - 1; d-- > 0;) {
            ++idx[d];
            off += stride[d];
            if (idx[d] < out_shape[d]) break;
            off -= stride[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

// Copies a k x k same-padded patch matrix of one (C, H, W) image: rows c*k*k + ky*k + kx, cols y*W + x.
template <typename T>
void im2col(const T* x, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t k, T* col) {
    const std::int64_t pad = k / 2, hw = h * w;
    for (std::int64_t ci = 0; ci < c; ++ci) {
        for (std::int64_t ky = 0; ky < k; ++ky) {
            for (std::int64_t kx = 0; kx < k; ++kx) {
                T* row = col + ((ci * k + ky) * k + kx) * hw;
                const std::int64_t dy = ky - pad, dx = kx - pad;
                const std::int64_t x0 = std::max<std::int64_t>(0, -dx), x1 = std::min(w, w - dx);
                for (std::int64_t y = 0; y < h; ++y) {
                    T* dst = row + y * w;
                    const std::int64_t sy = y + dy;
                    if (sy < 0 || sy >= h || x0 >= x1) {
                        std::fill(dst, dst + w, T{0});
                        continue;
                    }
                    const T* src = x + (ci * h + sy) * w + dx;
                    std::fill(dst, dst + x0, T{0});
                    std::copy(src + x0, src + x1, dst + x0);
                    std::fill(dst + x1, dst + w, T{0});
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t k, T* x) {
    const std::int64_t pad = k / 2, hw = h * w;
    for (std::int64_t ci = 0; ci < c; ++ci) {
        for (std::int64_t ky = 0; ky < k; ++ky) {
            for (std::int64_t kx = 0; kx < k; ++kx) {
                const T* row = col + ((ci * k + ky) * k + kx) * hw;
                const std::int64_t dy = ky - pad, dx = kx - pad;
                const std::int64_t x0 = std::max<std::int64_t>(0, -dx), x1 = std::min(w, w - dx);
                for (std::int64_t y = 0; y < h; ++y) {
                    const std::int64_t sy = y + dy;
                    if (sy < 0 || sy >= h) continue;
                    T* dst = x + (ci * h + sy) * w + dx;
                    const T* src = row + y * w;
                    for (std::int64_t xx = x0; xx < x1; ++xx) dst[xx] += src[xx];
                }
            }
        }
    }
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
void backward(const Var<T>& root) {
    if (!root) throw std::invalid_argument("backward on an empty variable");
    if (root.value().size() != 1) throw ShapeError("backward needs a scalar root, got " + shape_str(root.shape()));
    if (!root.requires_grad()) return;

    // Iterative post-order DFS for a topological order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<T>* child = node->inputs[next++].get();
            if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root.node()->grad_buffer().fill(T{1});
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (!n->backward_fn) continue;
        if (n->grad.empty()) n->grad_buffer();
        n->backward_fn(*n);
        // Interior gradients are no longer needed once propagated.
        if (n != root.node().get()) n->grad = Tensor<T>();
    }
}

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b) { return binary(a, b, BinOp::Add, "add"); }
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b) { return binary(a, b, BinOp::Sub, "sub"); }
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b) { return binary(a, b, BinOp::Mul, "mul"); }
template <typename T> Var<T> div(const Var<T>& a, const Var<T>& b) { return binary(a, b, BinOp::Div, "div"); }

template <typename T>
Var<T> neg(const Var<T>& x) {
    return unary(x, "neg", [](T v) { return -v; }, [](T, T) { return T{-1}; });
}

template <typename T>
Var<T> scale(const Var<T>& x, double c) {
    const T k = static_cast<T>(c);
    return unary(x, "scale", [k](T v) { return k * v; }, [k](T, T) { return k; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, double c) {
    const T k = static_cast<T>(c);
    return unary(x, "add_scalar", [k](T v) { return v + k; }, [](T, T) { return T{1}; });
}

template <typename T>
Var<T> square(const Var<T>& x) {
    return unary(x, "square", [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

template <typename T>
Var<T> sqrt(const Var<T>& x) {
    return unary(x, "sqrt", [](T v) { return std::sqrt(v); }, [](T, T y) { return T{0.5} / y; });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
    return unary(x, "exp", [](T v) { return fast_exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& x) {
    return unary(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    return unary(x, "sigmoid", [](T v) { return fast_sigmoid(v); }, [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
    return unary(
        x, "silu", [](T v) { return v * fast_sigmoid(v); },
        [](T v, T) {
            const T s = fast_sigmoid(v);
            return s * (T{1} + v * (T{1} - s));
        });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
    return unary(x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    return unary(x, "relu", [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
    T acc{0};
    for (T v : x.value().data()) acc += v;
    return record<T>(Tensor<T>::scalar(acc), {x.node()}, "sum", [](Node<T>& self) {
        auto& gx = self.inputs[0]->grad_buffer();
        const T g = self.grad[0];
        for (auto& v : gx.data()) v += g;
    });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
    const auto n = x.value().size();
    if (n == 0) throw ShapeError("mean of an empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(n));
}

template <typename T>
Var<T> sum_axis(const Var<T>& x, int axis) {
    axis = norm_axis(axis, x.rank(), "sum_axis");
    const AxisSplit sp = split_at(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + axis);
    Tensor<T> out(out_shape);
    const T* px = x.value().ptr();
    for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t m = 0; m < sp.mid; ++m)
            for (std::int64_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += px[(o * sp.mid + m) * sp.inner + i];
    return record<T>(std::move(out), {x.node()}, "sum_axis", [sp](Node<T>& self) {
        T* gx = self.inputs[0]->grad_buffer().ptr();
        const T* g = self.grad.ptr();
        for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t m = 0; m < sp.mid; ++m)
                for (std::int64_t i = 0; i < sp.inner; ++i) gx[(o * sp.mid + m) * sp.inner + i] += g[o * sp.inner + i];
    });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool ta, bool tb) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    std::int64_t batch = 1, m = 0, k = 0, n = 0;
    bool shared_b = false;
    Shape out_shape;
    if (sb.size() == 2) {
        shared_b = true;
        if (sa.size() < 2) throw ShapeError("matmul: left operand needs rank >= 2");
        if (ta && sa.size() != 2) throw ShapeError("matmul: transposed left operand must be rank 2");
        const std::int64_t k_b = tb ? sb[1] : sb[0];
        n = tb ? sb[0] : sb[1];
        if (ta) {
            m = sa[1];
            k = sa[0];
        } else {
            k = sa.back();
            m = shape_numel(sa) / std::max<std::int64_t>(k, 1);
        }
        if (k != k_b) throw ShapeError("matmul: inner dimensions differ, " + shape_str(sa) + " x " + shape_str(sb));
        out_shape = ta ? Shape{m, n} : sa;
        out_shape.back() = n;
    } else if (sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0]) {
        batch = sa[0];
        m = ta ? sa[2] : sa[1];
        k = ta ? sa[1] : sa[2];
        const std::int64_t k_b = tb ? sb[2] : sb[1];
        n = tb ? sb[1] : sb[2];
        if (k != k_b) throw ShapeError("matmul: inner dimensions differ, " + shape_str(sa) + " x " + shape_str(sb));
        out_shape = {batch, m, n};
    } else {
        throw ShapeError("matmul: unsupported operand shapes " + shape_str(sa) + " x " + shape_str(sb));
    }
    Tensor<T> out(out_shape);
    const std::int64_t stride_a = m * k, stride_b = shared_b ? 0 : k * n, stride_c = m * n;
    for (std::int64_t i = 0; i < batch; ++i) {
        detail::gemm(ta, tb, m, n, k, T{1}, a.value().ptr() + i * stride_a, b.value().ptr() + i * stride_b, T{0},
                     out.ptr() + i * stride_c);
    }
    return record<T>(std::move(out), {a.node(), b.node()}, "matmul", [=](Node<T>& self) {
        const T* A = self.inputs[0]->value.ptr();
        const T* B = self.inputs[1]->value.ptr();
        const T* G = self.grad.ptr();
        T* gA = wants(self, 0) ? self.inputs[0]->grad_buffer().ptr() : nullptr;
        T* gB = wants(self, 1) ? self.inputs[1]->grad_buffer().ptr() : nullptr;
        for (std::int64_t i = 0; i < batch; ++i) {
            const T* Ai = A + i * stride_a;
            const T* Bi = B + i * stride_b;
            const T* Gi = G + i * stride_c;
            if (gA) {
                if (!ta) detail::gemm(false, !tb, m, k, n, T{1}, Gi, Bi, T{1}, gA + i * stride_a);
                else detail::gemm(tb, true, k, m, n, T{1}, Bi, Gi, T{1}, gA + i * stride_a);
            }
            if (gB) {
                if (!tb) detail::gemm(!ta, false, k, n, m, T{1}, Ai, Gi, T{1}, gB + i * stride_b);
                else detail::gemm(true, ta, n, k, m, T{1}, Gi, Ai, T{1}, gB + i * stride_b);
            }
        }
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    const Shape& sw = weight.shape();
    if (sw.size() != 2) throw ShapeError("linear: weight must be (in, out), got " + shape_str(sw));
    const std::int64_t in = sw[0], out_dim = sw[1];
    if (x.rank() < 1 || x.shape().back() != in) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(sw));
    }
    if (bias && (bias.rank() != 1 || bias.dim(0) != out_dim)) throw ShapeError("linear: bias must be (out)");
    const std::int64_t rows = x.value().size() / std::max<std::int64_t>(in, 1);
    Shape out_shape = x.shape();
    out_shape.back() = out_dim;
    Tensor<T> out(out_shape);
    if (bias) {
        for (std::int64_t r = 0; r < rows; ++r) std::copy_n(bias.value().ptr(), out_dim, out.ptr() + r * out_dim);
    }
    detail::gemm(false, false, rows, out_dim, in, T{1}, x.value().ptr(), weight.value().ptr(), bias ? T{1} : T{0},
                 out.ptr());
    return record<T>(std::move(out), {x.node(), weight.node(), bias.node()}, "linear", [=](Node<T>& self) {
        const T* G = self.grad.ptr();
        if (wants(self, 0)) {
            detail::gemm(false, true, rows, in, out_dim, T{1}, G, self.inputs[1]->value.ptr(), T{1},
                         self.inputs[0]->grad_buffer().ptr());
        }
        if (wants(self, 1)) {
            detail::gemm(true, false, in, out_dim, rows, T{1}, self.inputs[0]->value.ptr(), G, T{1},
                         self.inputs[1]->grad_buffer().ptr());
        }
        if (wants(self, 2)) {
            T* gb = self.inputs[2]->grad_buffer().ptr();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < out_dim; ++j) gb[j] += G[r * out_dim + j];
        }
    });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    const Shape& sx = x.shape();
    const Shape& sw = weight.shape();
    if (sx.size() != 4) throw ShapeError("conv2d: input must be (N, C, H, W), got " + shape_str(sx));
    if (sw.size() != 4 || sw[2] != sw[3] || sw[2] % 2 == 0 || sw[1] != sx[1]) {
        throw ShapeError("conv2d: weight " + shape_str(sw) + " incompatible with input " + shape_str(sx));
    }
    if (bias && (bias.rank() != 1 || bias.dim(0) != sw[0])) throw ShapeError("conv2d: bias must be (Cout)");
    const std::int64_t nb = sx[0], cin = sx[1], h = sx[2], w = sx[3], cout = sw[0], k = sw[2];
    const std::int64_t hw = h * w, ckk = cin * k * k;
    Tensor<T> out(Shape{nb, cout, h, w});
    std::vector<T> col(k == 1 ? 0 : static_cast<std::size_t>(ckk * hw));
    for (std::int64_t n = 0; n < nb; ++n) {
        const T* xn = x.value().ptr() + n * cin * hw;
        T* yn = out.ptr() + n * cout * hw;
        if (bias) {
            for (std::int64_t c = 0; c < cout; ++c) std::fill_n(yn + c * hw, hw, bias.value()[c]);
        }
        const T* cols = xn;
        if (k != 1) {
            im2col(xn, cin, h, w, k, col.data());
            cols = col.data();
        }
        detail::gemm(false, false, cout, hw, ckk, T{1}, weight.value().ptr(), cols, bias ? T{1} : T{0}, yn);
    }
    return record<T>(std::move(out), {x.node(), weight.node(), bias.node()}, "conv2d", [=](Node<T>& self) {
        const bool wx = wants(self, 0), ww = wants(self, 1), wb = wants(self, 2);
        const T* X = self.inputs[0]->value.ptr();
        const T* W = self.inputs[1]->value.ptr();
        T* gX = wx ? self.inputs[0]->grad_buffer().ptr() : nullptr;
        T* gW = ww ? self.inputs[1]->grad_buffer().ptr() : nullptr;
        T* gB = wb ? self.inputs[2]->grad_buffer().ptr() : nullptr;
        std::vector<T> colbuf(k == 1 ? 0 : static_cast<std::size_t>(ckk * hw));
        std::vector<T> gcol(k == 1 || !wx ? 0 : static_cast<std::size_t>(ckk * hw));
        for (std::int64_t n = 0; n < nb; ++n) {
            const T* Gn = self.grad.ptr() + n * cout * hw;
            const T* xn = X + n * cin * hw;
            if (gW) {
                const T* cols = xn;
                if (k != 1) {
                    im2col(xn, cin, h, w, k, colbuf.data());
                    cols = colbuf.data();
                }
                detail::gemm(false, true, cout, ckk, hw, T{1}, Gn, cols, T{1}, gW);
            }
            if (gX) {
                if (k == 1) {
                    detail::gemm(true, false, ckk, hw, cout, T{1}, W, Gn, T{1}, gX + n * cin * hw);
                } else {
                    detail::gemm(true, false, ckk, hw, cout, T{1}, W, Gn, T{0}, gcol.data());
                    col2im_add(gcol.data(), cin, h, w, k, gX + n * cin * hw);
                }
            }
            if (gB) {
                for (std::int64_t c = 0; c < cout; ++c) {
                    T acc{0};
                    for (std::int64_t i = 0; i < hw; ++i) acc += Gn[c * hw + i];
                    gB[c] += acc;
                }
            }
        }
    });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    std::int64_t known = 1;
    int infer = -1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) throw ShapeError("reshape: more than one inferred dimension");
            infer = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0) shape[static_cast<std::size_t>(infer)] = known ? x.value().size() / known : 0;
    Tensor<T> out = x.value().reshaped(std::move(shape));
    return record<T>(std::move(out), {x.node()}, "reshape", [](Node<T>& self) {
        T* gx = self.inputs[0]->grad_buffer().ptr();
        const T* g = self.grad.ptr();
        for (std::int64_t i = 0; i < self.grad.size(); ++i) gx[i] += g[i];
    });
}

template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<int>& axes) {
    const Shape& s = x.shape();
    if (axes.size() != s.size()) throw ShapeError("permute: axes do not match rank");
    std::vector<int> check(axes);
    std::sort(check.begin(), check.end());
    for (std::size_t i = 0; i < check.size(); ++i) {
        if (check[i] != static_cast<int>(i)) throw ShapeError("permute: axes are not a permutation");
    }
    Shape out_shape(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[static_cast<std::size_t>(axes[i])];
    Tensor<T> out(out_shape);
    permute_apply<T, false>(x.value().ptr(), s, axes, out.ptr(), false);
    return record<T>(std::move(out), {x.node()}, "permute", [axes](Node<T>& self) {
        auto& in = *self.inputs[0];
        permute_apply<T, true>(self.grad.ptr(), in.value.shape(), axes, in.grad_buffer().ptr(), true);
    });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat of nothing");
    const Shape& s0 = xs[0].shape();
    axis = norm_axis(axis, static_cast<int>(s0.size()), "concat");
    Shape out_shape = s0;
    out_shape[static_cast<std::size_t>(axis)] = 0;
    std::vector<std::int64_t> mids;
    for (const auto& v : xs) {
        Shape s = v.shape();
        if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (static_cast<int>(i) != axis && s[i] != s0[i]) throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
        }
        mids.push_back(s[static_cast<std::size_t>(axis)]);
        out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
    }
    const AxisSplit sp = split_at(out_shape, axis);
    Tensor<T> out(out_shape);
    std::vector<NodePtr<T>> nodes;
    std::int64_t offset = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        const T* src = xs[k].value().ptr();
        const std::int64_t chunk = mids[k] * sp.inner;
        for (std::int64_t o = 0; o < sp.outer; ++o) {
            std::copy_n(src + o * chunk, chunk, out.ptr() + o * sp.mid * sp.inner + offset * sp.inner);
        }
        offset += mids[k];
        nodes.push_back(xs[k].node());
    }
    return record<T>(std::move(out), std::move(nodes), "concat", [sp, mids](Node<T>& self) {
        std::int64_t offset = 0;
        for (std::size_t k = 0; k < mids.size(); ++k) {
            const std::int64_t chunk = mids[k] * sp.inner;
            if (wants(self, k)) {
                T* gx = self.inputs[k]->grad_buffer().ptr();
                for (std::int64_t o = 0; o < sp.outer; ++o) {
                    const T* g = self.grad.ptr() + o * sp.mid * sp.inner + offset * sp.inner;
                    for (std::int64_t i = 0; i < chunk; ++i) gx[o * chunk + i] += g[i];
                }
            }
            offset += mids[k];
        }
    });
}

template <typename T>
Var<T> slice(const Var<T>& x, int axis, std::int64_t start, std::int64_t length) {
    axis = norm_axis(axis, x.rank(), "slice");
    const AxisSplit sp = split_at(x.shape(), axis);
    if (start < 0 || length < 0 || start + length > sp.mid) throw ShapeError("slice: range out of bounds");
    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(axis)] = length;
    Tensor<T> out(out_shape);
    const std::int64_t chunk = length * sp.inner;
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        std::copy_n(x.value().ptr() + (o * sp.mid + start) * sp.inner, chunk, out.ptr() + o * chunk);
    }
    return record<T>(std::move(out), {x.node()}, "slice", [sp, start, chunk](Node<T>& self) {
        T* gx = self.inputs[0]->grad_buffer().ptr();
        for (std::int64_t o = 0; o < sp.outer; ++o) {
            const T* g = self.grad.ptr() + o * chunk;
            T* dst = gx + (o * sp.mid + start) * sp.inner;
            for (std::int64_t i = 0; i < chunk; ++i) dst[i] += g[i];
        }
    });
}

template <typename T>
Var<T> pad_reflect(const Var<T>& x, std::int64_t bottom, std::int64_t right) {
    if (x.rank() < 2) throw ShapeError("pad_reflect needs rank >= 2");
    const std::int64_t h = x.dim(-2), w = x.dim(-1);
    if (bottom < 0 || right < 0 || (bottom > 0 && bottom >= h) || (right > 0 && right >= w)) {
        throw ShapeError("pad_reflect: padding must be smaller than the dimension");
    }
    if (bottom == 0 && right == 0) return x;
    const std::int64_t oh = h + bottom, ow = w + right, planes = x.value().size() / (h * w);
    auto src_index = [h, w](std::int64_t y, std::int64_t xx) {
        const std::int64_t sy = y < h ? y : 2 * (h - 1) - y;
        const std::int64_t sx = xx < w ? xx : 2 * (w - 1) - xx;
        return sy * w + sx;
    };
    Shape out_shape = x.shape();
    out_shape[out_shape.size() - 2] = oh;
    out_shape[out_shape.size() - 1] = ow;
    Tensor<T> out(out_shape);
    for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t y = 0; y < oh; ++y)
            for (std::int64_t xx = 0; xx < ow; ++xx) out[(p * oh + y) * ow + xx] = x.value()[p * h * w + src_index(y, xx)];
    return record<T>(std::move(out), {x.node()}, "pad_reflect", [=](Node<T>& self) {
        T* gx = self.inputs[0]->grad_buffer().ptr();
        for (std::int64_t p = 0; p < planes; ++p)
            for (std::int64_t y = 0; y < oh; ++y)
                for (std::int64_t xx = 0; xx < ow; ++xx) gx[p * h * w + src_index(y, xx)] += self.grad[(p * oh + y) * ow + xx];
    });
}

template <typename T>
Var<T> pixel_unshuffle(const Var<T>& x, int r) {
    if (x.rank() != 4) throw ShapeError("pixel_unshuffle expects (N, C, H, W)");
    if (r < 1) throw std::invalid_argument("pixel_unshuffle factor must be positive");
    const auto& s = x.shape();
    if (s[2] % r != 0 || s[3] % r != 0) throw ShapeError("pixel_unshuffle: " + shape_str(s) + " not divisible by " + std::to_string(r));
    if (r == 1) return x;
    auto y = reshape(x, {s[0], s[1], s[2] / r, r, s[3] / r, r});
    y = permute(y, {0, 1, 3, 5, 2, 4});
    return reshape(y, {s[0], s[1] * r * r, s[2] / r, s[3] / r});
}

template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, int r) {
    if (x.rank() != 4) throw ShapeError("pixel_shuffle expects (N, C, H, W)");
    if (r < 1) throw std::invalid_argument("pixel_shuffle factor must be positive");
    const auto& s = x.shape();
    if (s[1] % (r * r) != 0) throw ShapeError("pixel_shuffle: channels not divisible by r^2");
    if (r == 1) return x;
    auto y = reshape(x, {s[0], s[1] / (r * r), r, r, s[2], s[3]});
    y = permute(y, {0, 1, 4, 2, 5, 3});
    return reshape(y, {s[0], s[1] / (r * r), s[2] * r, s[3] * r});
}

template <typename T>
Var<T> softmax_last(const Var<T>& x) {
    if (x.rank() < 1) throw ShapeError("softmax needs rank >= 1");
    const std::int64_t d = x.shape().back();
    const std::int64_t rows = d ? x.value().size() / d : 0;
    Tensor<T> out(x.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* src = x.value().ptr() + r * d;
        T* dst = out.ptr() + r * d;
        const T mx = *std::max_element(src, src + d);
        for (std::int64_t j = 0; j < d; ++j) dst[j] = fast_exp(src[j] - mx);
        T total{0};
        for (std::int64_t j = 0; j < d; ++j) total += dst[j];
        const T inv = T{1} / total;
        for (std::int64_t j = 0; j < d; ++j) dst[j] *= inv;
    }
    return record<T>(std::move(out), {x.node()}, "softmax", [rows, d](Node<T>& self) {
        T* gx = self.inputs[0]->grad_buffer().ptr();
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* y = self.value.ptr() + r * d;
            const T* g = self.grad.ptr() + r * d;
            T dot{0};
            for (std::int64_t j = 0; j < d; ++j) dot += g[j] * y[j];
            for (std::int64_t j = 0; j < d; ++j) gx[r * d + j] += y[j] * (g[j] - dot);
        }
    });
}

template <typename T>
Var<T> packed_attention(const Var<T>& qkv, int heads) {
    if (qkv.rank() != 3 || qkv.dim(2) % 3 != 0) throw ShapeError("packed_attention expects (N, L, 3d), got " + shape_str(qkv.shape()));
    const std::int64_t nb = qkv.dim(0), l = qkv.dim(1), d = qkv.dim(2) / 3;
    if (heads < 1 || d % heads != 0) throw ShapeError("packed_attention: heads must divide the width");
    const std::int64_t hd = d / heads, row = 3 * d;
    const T scl = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using View = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;
    using MutView = Eigen::Map<Mat, 0, Eigen::OuterStride<>>;
    // Attention weights are kept for the backward pass, one L x L block per (sample, head).
    auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(nb * heads * l * l));
    Tensor<T> out(Shape{nb, l, d});
    const T* src = qkv.value().ptr();
    for (std::int64_t n = 0; n < nb; ++n) {
        for (std::int64_t h = 0; h < heads; ++h) {
            const T* base = src + n * l * row + h * hd;
            View q(base, l, hd, Eigen::OuterStride<>(row));
            View k(base + d, l, hd, Eigen::OuterStride<>(row));
            View v(base + 2 * d, l, hd, Eigen::OuterStride<>(row));
            Eigen::Map<Mat> p(probs->data() + (n * heads + h) * l * l, l, l);
            p.noalias() = scl * (q * k.transpose());
            for (std::int64_t i = 0; i < l; ++i) {
                T* r = p.data() + i * l;
                const T mx = *std::max_element(r, r + l);
                for (std::int64_t j = 0; j < l; ++j) r[j] = fast_exp(r[j] - mx);
                T total{0};
                for (std::int64_t j = 0; j < l; ++j) total += r[j];
                const T inv = T{1} / total;
                for (std::int64_t j = 0; j < l; ++j) r[j] *= inv;
            }
            MutView o(out.ptr() + n * l * d + h * hd, l, hd, Eigen::OuterStride<>(d));
            o.noalias() = p * v;
        }
    }
    return record<T>(std::move(out), {qkv.node()}, "attention", [=](Node<T>& self) {
        const T* X = self.inputs[0]->value.ptr();
        T* gX = self.inputs[0]->grad_buffer().ptr();
        const T* G = self.grad.ptr();
        Mat dp(l, l);
        for (std::int64_t n = 0; n < nb; ++n) {
            for (std::int64_t h = 0; h < heads; ++h) {
                const std::int64_t off = n * l * row + h * hd;
                View q(X + off, l, hd, Eigen::OuterStride<>(row));
                View k(X + off + d, l, hd, Eigen::OuterStride<>(row));
                View v(X + off + 2 * d, l, hd, Eigen::OuterStride<>(row));
                MutView gq(gX + off, l, hd, Eigen::OuterStride<>(row));
                MutView gk(gX + off + d, l, hd, Eigen::OuterStride<>(row));
                MutView gv(gX + off + 2 * d, l, hd, Eigen::OuterStride<>(row));
                View go(G + n * l * d + h * hd, l, hd, Eigen::OuterStride<>(d));
                Eigen::Map<const Mat> p(probs->data() + (n * heads + h) * l * l, l, l);
                gv.noalias() += p.transpose() * go;
                dp.noalias() = go * v.transpose();
                // Softmax backward, with the logit scale folded in.
                for (std::int64_t i = 0; i < l; ++i) {
                    const T* pr = p.data() + i * l;
                    T* dr = dp.data() + i * l;
                    T dot{0};
                    for (std::int64_t j = 0; j < l; ++j) dot += pr[j] * dr[j];
                    for (std::int64_t j = 0; j < l; ++j) dr[j] = scl * pr[j] * (dr[j] - dot);
                }
                gq.noalias() += dp * k;
                gk.noalias() += dp.transpose() * q;
            }
        }
    });
}

template <typename T>
Var<T> rms_norm(const Var<T>& x, int axis, const Var<T>& scale_var, double eps) {
    axis = norm_axis(axis, x.rank(), "rms_norm");
    const AxisSplit sp = split_at(x.shape(), axis);
    if (scale_var && (scale_var.rank() != 1 || scale_var.dim(0) != sp.mid)) {
        throw ShapeError("rms_norm: scale must have length " + std::to_string(sp.mid));
    }
    const T* px = x.value().ptr();
    const T* ps = scale_var ? scale_var.value().ptr() : nullptr;
    const std::int64_t mid = sp.mid, inner = sp.inner;
    auto inv = std::make_shared<std::vector<T>>(static_cast<std::size_t>(sp.outer * inner));
    Tensor<T> out(x.shape());
    // The reduced axis is walked in the outer loop so the contiguous inner axis stays vectorized.
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        T* r = inv->data() + o * inner;
        std::fill(r, r + inner, T{0});
        for (std::int64_t m = 0; m < mid; ++m) {
            const T* row = px + (o * mid + m) * inner;
            for (std::int64_t i = 0; i < inner; ++i) r[i] += row[i] * row[i];
        }
        for (std::int64_t i = 0; i < inner; ++i) r[i] = T{1} / std::sqrt(r[i] / static_cast<T>(mid) + static_cast<T>(eps));
        for (std::int64_t m = 0; m < mid; ++m) {
            const T* row = px + (o * mid + m) * inner;
            T* dst = out.ptr() + (o * mid + m) * inner;
            const T sc = ps ? ps[m] : T{1};
            for (std::int64_t i = 0; i < inner; ++i) dst[i] = row[i] * r[i] * sc;
        }
    }
    return record<T>(std::move(out), {x.node(), scale_var.node()}, "rms_norm", [sp, inv](Node<T>& self) {
        const std::int64_t mid = sp.mid, inner = sp.inner;
        const T* X = self.inputs[0]->value.ptr();
        const bool has_scale = self.inputs.size() > 1 && self.inputs[1];
        const T* S = has_scale ? self.inputs[1]->value.ptr() : nullptr;
        T* gX = wants(self, 0) ? self.inputs[0]->grad_buffer().ptr() : nullptr;
        T* gS = wants(self, 1) ? self.inputs[1]->grad_buffer().ptr() : nullptr;
        const T* G = self.grad.ptr();
        std::vector<T> dot(static_cast<std::size_t>(inner));
        for (std::int64_t o = 0; o < sp.outer; ++o) {
            const T* r = inv->data() + o * inner;
            std::fill(dot.begin(), dot.end(), T{0});
            for (std::int64_t m = 0; m < mid; ++m) {
                const std::int64_t base = (o * mid + m) * inner;
                const T sc = S ? S[m] : T{1};
                T gs_acc{0};
                for (std::int64_t i = 0; i < inner; ++i) {
                    const T gx = G[base + i] * X[base + i];
                    dot[static_cast<std::size_t>(i)] += gx * sc;
                    gs_acc += gx * r[i];
                }
                if (gS) gS[m] += gs_acc;
            }
            if (!gX) continue;
            for (std::int64_t m = 0; m < mid; ++m) {
                const std::int64_t base = (o * mid + m) * inner;
                const T sc = S ? S[m] : T{1};
                for (std::int64_t i = 0; i < inner; ++i) {
                    const T c = r[i] * r[i] * r[i] * dot[static_cast<std::size_t>(i)] / static_cast<T>(mid);
                    gX[base + i] += r[i] * G[base + i] * sc - c * X[base + i];
                }
            }
        }
    });
}

template <typename T>
Var<T> group_norm(const Var<T>& x, int groups, const Var<T>& gamma, const Var<T>& beta, double eps) {
    if (x.rank() < 2) throw ShapeError("group_norm expects (N, C, ...)");
    const std::int64_t nb = x.dim(0), c = x.dim(1);
    if (groups < 1 || c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
    if ((gamma && gamma.shape() != Shape{c}) || (beta && beta.shape() != Shape{c})) {
        throw ShapeError("group_norm: affine parameters must be (C)");
    }
    const std::int64_t spatial = x.value().size() / std::max<std::int64_t>(nb * c, 1);
    const std::int64_t cpg = c / groups, gsize = cpg * spatial;
    auto stats = std::make_shared<std::vector<T>>(static_cast<std::size_t>(2 * nb * groups));  // mean, inv_std
    Tensor<T> out(x.shape());
    const T* px = x.value().ptr();
    for (std::int64_t n = 0; n < nb; ++n) {
        for (std::int64_t g = 0; g < groups; ++g) {
            const T* src = px + (n * c + g * cpg) * spatial;
            double mu = 0.0;
            for (std::int64_t i = 0; i < gsize; ++i) mu += src[i];
            mu /= static_cast<double>(gsize);
            double var = 0.0;
            for (std::int64_t i = 0; i < gsize; ++i) var += (src[i] - mu) * (src[i] - mu);
            var /= static_cast<double>(gsize);
            const T m = static_cast<T>(mu), r = static_cast<T>(1.0 / std::sqrt(var + eps));
            (*stats)[static_cast<std::size_t>(2 * (n * groups + g))] = m;
            (*stats)[static_cast<std::size_t>(2 * (n * groups + g) + 1)] = r;
            for (std::int64_t cc = 0; cc < cpg; ++cc) {
                const std::int64_t ch = g * cpg + cc;
                const T ga = gamma ? gamma.value()[ch] : T{1};
                const T be = beta ? beta.value()[ch] : T{0};
                const std::int64_t base = (n * c + ch) * spatial;
                for (std::int64_t i = 0; i < spatial; ++i) out[base + i] = (px[base + i] - m) * r * ga + be;
            }
        }
    }
    return record<T>(std::move(out), {x.node(), gamma.node(), beta.node()}, "group_norm",
                     [=](Node<T>& self) {
        const T* X = self.inputs[0]->value.ptr();
        const T* G = self.grad.ptr();
        const bool has_gamma = self.inputs[1] != nullptr;
        const T* Ga = has_gamma ? self.inputs[1]->value.ptr() : nullptr;
        T* gX = wants(self, 0) ? self.inputs[0]->grad_buffer().ptr() : nullptr;
        T* gGa = wants(self, 1) ? self.inputs[1]->grad_buffer().ptr() : nullptr;
        T* gBe = wants(self, 2) ? self.inputs[2]->grad_buffer().ptr() : nullptr;
        for (std::int64_t n = 0; n < nb; ++n) {
            for (std::int64_t g = 0; g < groups; ++g) {
                const T m = (*stats)[static_cast<std::size_t>(2 * (n * groups + g))];
                const T r = (*stats)[static_cast<std::size_t>(2 * (n * groups + g) + 1)];
                T sum_gh{0}, sum_gh_xh{0};
                for (std::int64_t cc = 0; cc < cpg; ++cc) {
                    const std::int64_t ch = g * cpg + cc;
                    const T ga = Ga ? Ga[ch] : T{1};
                    const std::int64_t base = (n * c + ch) * spatial;
                    T acc_g{0}, acc_gx{0};
                    for (std::int64_t i = 0; i < spatial; ++i) {
                        const T xh = (X[base + i] - m) * r;
                        acc_g += G[base + i];
                        acc_gx += G[base + i] * xh;
                    }
                    if (gGa) gGa[ch] += acc_gx;
                    if (gBe) gBe[ch] += acc_g;
                    sum_gh += acc_g * ga;
                    sum_gh_xh += acc_gx * ga;
                }
                if (!gX) continue;
                const T mean_gh = sum_gh / static_cast<T>(gsize), mean_ghx = sum_gh_xh / static_cast<T>(gsize);
                for (std::int64_t cc = 0; cc < cpg; ++cc) {
                    const std::int64_t ch = g * cpg + cc;
                    const T ga = Ga ? Ga[ch] : T{1};
                    const std::int64_t base = (n * c + ch) * spatial;
                    for (std::int64_t i = 0; i < spatial; ++i) {
                        const T xh = (X[base + i] - m) * r;
                        gX[base + i] += r * (G[base + i] * ga - mean_gh - xh * mean_ghx);
                    }
                }
            }
        }
    });
}

namespace {

// dst (h x w) += L (h x h) * src (h x w) * R (w x w); the matrices may be used transposed.
template <typename T>
void sandwich(const T* L, bool tl, const T* src, const T* R, bool tr, std::int64_t h, std::int64_t w, T* dst,
              std::vector<T>& tmp) {
    tmp.resize(static_cast<std::size_t>(h * w));
    detail::gemm(tl, false, h, w, h, T{1}, L, src, T{0}, tmp.data());
    detail::gemm(false, tr, h, w, w, T{1}, tmp.data(), R, T{1}, dst);
}

// Quadrant plane <-> four band channels 4c + {LL, LH, HL, HH}.
template <typename T>
void bands_to_plane(const T* bands, std::int64_t hh, std::int64_t hw, T* plane) {
    const std::int64_t w = 2 * hw, bs = hh * hw;
    for (std::int64_t r = 0; r < hh; ++r) {
        for (std::int64_t c = 0; c < hw; ++c) {
            plane[r * w + c] = bands[r * hw + c];
            plane[(hh + r) * w + c] = bands[bs + r * hw + c];
            plane[r * w + hw + c] = bands[2 * bs + r * hw + c];
            plane[(hh + r) * w + hw + c] = bands[3 * bs + r * hw + c];
        }
    }
}

template <typename T>
void plane_to_bands(const T* plane, std::int64_t hh, std::int64_t hw, T* bands, bool accumulate) {
    const std::int64_t w = 2 * hw, bs = hh * hw;
    auto put = [accumulate](T& d, T v) { d = accumulate ? d + v : v; };
    for (std::int64_t r = 0; r < hh; ++r) {
        for (std::int64_t c = 0; c < hw; ++c) {
            put(bands[r * hw + c], plane[r * w + c]);
            put(bands[bs + r * hw + c], plane[(hh + r) * w + c]);
            put(bands[2 * bs + r * hw + c], plane[r * w + hw + c]);
            put(bands[3 * bs + r * hw + c], plane[(hh + r) * w + hw + c]);
        }
    }
}

}  // namespace

template <typename T>
Var<T> wavelet_analysis(const Var<T>& x) {
    if (x.rank() != 4) throw ShapeError("wavelet_analysis expects (N, C, H, W)");
    const auto& s = x.shape();
    const std::int64_t nb = s[0], c = s[1], h = s[2], w = s[3], hh = h / 2, hw = w / 2;
    if (h % 2 || w % 2 || h < 2 || w < 2) throw ShapeError("wavelet_analysis needs even spatial dims, got " + shape_str(s));
    Tensor<T> out(Shape{nb, 4 * c, hh, hw});
    std::vector<T> plane(static_cast<std::size_t>(h * w));
    for (std::int64_t p = 0; p < nb * c; ++p) {
        std::copy_n(x.value().ptr() + p * h * w, h * w, plane.data());
        wavelet::analyze_plane(plane.data(), h, w);
        plane_to_bands(plane.data(), hh, hw, out.ptr() + p * h * w, false);
    }
    return record<T>(std::move(out), {x.node()}, "wavelet_analysis", [=](Node<T>& self) {
        // Y = A_h X A_w^T, so dX = A_h^T dY A_w.
        const T* Ah = wavelet::analysis_matrix<T>(h).ptr();
        const T* Aw = wavelet::analysis_matrix<T>(w).ptr();
        T* gx = self.inputs[0]->grad_buffer().ptr();
        std::vector<T> gplane(static_cast<std::size_t>(h * w)), tmp;
        for (std::int64_t p = 0; p < nb * c; ++p) {
            bands_to_plane(self.grad.ptr() + p * h * w, hh, hw, gplane.data());
            sandwich(Ah, true, gplane.data(), Aw, false, h, w, gx + p * h * w, tmp);
        }
    });
}

template <typename T>
Var<T> wavelet_synthesis(const Var<T>& bands) {
    if (bands.rank() != 4 || bands.dim(1) % 4 != 0) throw ShapeError("wavelet_synthesis expects (N, 4C, H/2, W/2)");
    const auto& s = bands.shape();
    const std::int64_t nb = s[0], c = s[1] / 4, hh = s[2], hw = s[3], h = 2 * hh, w = 2 * hw;
    Tensor<T> out(Shape{nb, c, h, w});
    for (std::int64_t p = 0; p < nb * c; ++p) {
        T* plane = out.ptr() + p * h * w;
        bands_to_plane(bands.value().ptr() + p * h * w, hh, hw, plane);
        wavelet::synthesize_plane(plane, h, w);
    }
    return record<T>(std::move(out), {bands.node()}, "wavelet_synthesis", [=](Node<T>& self) {
        // X = S_h Y S_w^T, so dY = S_h^T dX S_w.
        const T* Sh = wavelet::synthesis_matrix<T>(h).ptr();
        const T* Sw = wavelet::synthesis_matrix<T>(w).ptr();
        T* gb = self.inputs[0]->grad_buffer().ptr();
        std::vector<T> gplane(static_cast<std::size_t>(h * w)), tmp;
        for (std::int64_t p = 0; p < nb * c; ++p) {
            std::fill(gplane.begin(), gplane.end(), T{0});
            sandwich(Sh, true, self.grad.ptr() + p * h * w, Sw, false, h, w, gplane.data(), tmp);
            plane_to_bands(gplane.data(), hh, hw, gb + p * h * w, true);
        }
    });
}

template <typename T>
Var<T> opaque(const Var<T>& x, const std::string& name, const std::function<Tensor<T>(const Tensor<T>&)>& fn) {
    auto out = record<T>(fn(x.value()), {x.node()}, "opaque", [name](Node<T>&) { throw UnsupportedOpError(name); });
    out.node()->op = name;
    out.node()->differentiable = false;
    return out;
}

#define XMOD_AD_INSTANTIATE(T)                                                                        \
    template void backward<T>(const Var<T>&);                                                         \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                             \
    template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                             \
    template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                             \
    template Var<T> div<T>(const Var<T>&, const Var<T>&);                                             \
    template Var<T> neg<T>(const Var<T>&);                                                            \
    template Var<T> scale<T>(const Var<T>&, double);                                                  \
    template Var<T> add_scalar<T>(const Var<T>&, double);                                             \
    template Var<T> square<T>(const Var<T>&);                                                         \
    template Var<T> sqrt<T>(const Var<T>&);                                                           \
    template Var<T> exp<T>(const Var<T>&);                                                            \
    template Var<T> log<T>(const Var<T>&);                                                            \
    template Var<T> sigmoid<T>(const Var<T>&);                                                        \
    template Var<T> silu<T>(const Var<T>&);                                                           \
    template Var<T> tanh<T>(const Var<T>&);                                                           \
    template Var<T> relu<T>(const Var<T>&);                                                           \
    template Var<T> sum<T>(const Var<T>&);                                                            \
    template Var<T> mean<T>(const Var<T>&);                                                           \
    template Var<T> sum_axis<T>(const Var<T>&, int);                                                  \
    template Var<T> matmul<T>(const Var<T>&, const Var<T>&, bool, bool);                              \
    template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                           \
    template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&);                           \
    template Var<T> reshape<T>(const Var<T>&, Shape);                                                 \
    template Var<T> permute<T>(const Var<T>&, const std::vector<int>&);                               \
    template Var<T> concat<T>(const std::vector<Var<T>>&, int);                                       \
    template Var<T> slice<T>(const Var<T>&, int, std::int64_t, std::int64_t);                         \
    template Var<T> pad_reflect<T>(const Var<T>&, std::int64_t, std::int64_t);                        \
    template Var<T> pixel_unshuffle<T>(const Var<T>&, int);                                           \
    template Var<T> pixel_shuffle<T>(const Var<T>&, int);                                             \
    template Var<T> softmax_last<T>(const Var<T>&);                                                   \
    template Var<T> packed_attention<T>(const Var<T>&, int);                                          \
    template Var<T> rms_norm<T>(const Var<T>&, int, const Var<T>&, double);                           \
    template Var<T> group_norm<T>(const Var<T>&, int, const Var<T>&, const Var<T>&, double);          \
    template Var<T> wavelet_analysis<T>(const Var<T>&);                                               \
    template Var<T> wavelet_synthesis<T>(const Var<T>&);                                              \
    template Var<T> opaque<T>(const Var<T>&, const std::string&, const std::function<Tensor<T>(const Tensor<T>&)>&);

XMOD_AD_INSTANTIATE(float)
XMOD_AD_INSTANTIATE(double)

}  // namespace xmod::ad
