#pragma once

#include <algorithm>
#include <cassert>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "dtmi/rng.hpp"

// Reverse-mode autodiff over dense row-major tensors. The graph is taped
// dynamically: every op returns a fresh node holding its value and, when
// gradients are enabled, a closure that scatters the node's gradient into
// its parents. Scalar type is a template parameter: float for training,
// double for finite-difference verification.

namespace dtmi {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

template <class S>
struct TensorImpl;

template <class S>
using Tensor = std::shared_ptr<TensorImpl<S>>;

template <class S>
struct TensorImpl {
    Shape shape;
    std::vector<S> v;  // values, row-major
    std::vector<S> g;  // gradient, allocated lazily
    bool requires_grad = false;
    std::vector<Tensor<S>> parents;
    std::function<void(TensorImpl<S>&)> backward_fn;

    std::size_t numel() const { return v.size(); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }

    void ensure_grad() {
        if (g.size() != v.size()) g.assign(v.size(), S(0));
    }
    void zero_grad() { g.assign(v.size(), S(0)); }
};

// Gradient taping is on by default; NoGradGuard disables it in a scope
// (inference paths drop the tape so intermediates free eagerly).
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
};

template <class S>
Tensor<S> make_tensor(Shape shape, S fill = S(0)) {
    auto t = std::make_shared<TensorImpl<S>>();
    t->shape = std::move(shape);
    t->v.assign(shape_numel(t->shape), fill);
    return t;
}

template <class S>
Tensor<S> make_tensor(Shape shape, std::vector<S> data) {
    auto t = std::make_shared<TensorImpl<S>>();
    t->shape = std::move(shape);
    check(data.size() == shape_numel(t->shape), "make_tensor: data size mismatch");
    t->v = std::move(data);
    return t;
}

template <class S>
Tensor<S> scalar_tensor(S value) {
    auto t = make_tensor<S>({1});
    t->v[0] = value;
    return t;
}

namespace detail {

template <class S>
bool taping(const Tensor<S>& a) {
    return grad_mode_flag() && a->requires_grad;
}

template <class S>
bool taping(const Tensor<S>& a, const Tensor<S>& b) {
    return grad_mode_flag() && (a->requires_grad || b->requires_grad);
}

// Row-major strides.
inline std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size());
    std::size_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<std::size_t>(i)] = acc;
        acc *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
    }
    return st;
}

// Broadcast plan: shapes aligned on trailing axes, each axis equal or 1.
struct BcPlan {
    Shape out_shape;
    std::vector<std::size_t> a_strides, b_strides;  // 0 on broadcast axes
    bool same_shape = false;
};

inline BcPlan broadcast_plan(const Shape& a, const Shape& b) {
    BcPlan plan;
    if (a == b) {
        plan.out_shape = a;
        plan.same_shape = true;
        return plan;
    }
    const int nd = std::max(static_cast<int>(a.size()), static_cast<int>(b.size()));
    Shape ae(static_cast<std::size_t>(nd), 1), be(static_cast<std::size_t>(nd), 1);
    std::copy(a.begin(), a.end(), ae.end() - static_cast<long>(a.size()));
    std::copy(b.begin(), b.end(), be.end() - static_cast<long>(b.size()));
    plan.out_shape.resize(static_cast<std::size_t>(nd));
    for (int i = 0; i < nd; ++i) {
        const int da = ae[static_cast<std::size_t>(i)];
        const int db = be[static_cast<std::size_t>(i)];
        check(da == db || da == 1 || db == 1,
              "broadcast: incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
        plan.out_shape[static_cast<std::size_t>(i)] = std::max(da, db);
    }
    auto sa = strides_of(ae);
    auto sb = strides_of(be);
    plan.a_strides.resize(static_cast<std::size_t>(nd));
    plan.b_strides.resize(static_cast<std::size_t>(nd));
    for (int i = 0; i < nd; ++i) {
        plan.a_strides[static_cast<std::size_t>(i)] = ae[static_cast<std::size_t>(i)] == 1 ? 0 : sa[static_cast<std::size_t>(i)];
        plan.b_strides[static_cast<std::size_t>(i)] = be[static_cast<std::size_t>(i)] == 1 ? 0 : sb[static_cast<std::size_t>(i)];
    }
    return plan;
}

// Visit every output index of a broadcast, calling f(out_i, a_i, b_i).
template <class F>
void for_each_bc(const BcPlan& plan, F&& f) {
    const int nd = static_cast<int>(plan.out_shape.size());
    std::vector<int> idx(static_cast<std::size_t>(nd), 0);
    const std::size_t total = shape_numel(plan.out_shape);
    std::size_t ai = 0, bi = 0;
    for (std::size_t oi = 0; oi < total; ++oi) {
        f(oi, ai, bi);
        // increment multi-index
        for (int d = nd - 1; d >= 0; --d) {
            auto du = static_cast<std::size_t>(d);
            ++idx[du];
            ai += plan.a_strides[du];
            bi += plan.b_strides[du];
            if (idx[du] < plan.out_shape[du]) break;
            ai -= plan.a_strides[du] * static_cast<std::size_t>(plan.out_shape[du]);
            bi -= plan.b_strides[du] * static_cast<std::size_t>(plan.out_shape[du]);
            idx[du] = 0;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise / broadcast arithmetic

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    auto plan = detail::broadcast_plan(a->shape, b->shape);
    auto out = make_tensor<S>(plan.out_shape);
    if (plan.same_shape) {
        for (std::size_t i = 0; i < out->v.size(); ++i) out->v[i] = a->v[i] + b->v[i];
    } else {
        detail::for_each_bc(plan, [&](std::size_t oi, std::size_t ai, std::size_t bi) {
            out->v[oi] = a->v[ai] + b->v[bi];
        });
    }
    if (detail::taping(a, b)) {
        out->requires_grad = true;
        out->parents = {a, b};
        auto* pa = a.get();
        auto* pb = b.get();
        out->backward_fn = [pa, pb, plan](TensorImpl<S>& self) {
            if (pa->requires_grad) pa->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            if (plan.same_shape) {
                for (std::size_t i = 0; i < self.g.size(); ++i) {
                    if (pa->requires_grad) pa->g[i] += self.g[i];
                    if (pb->requires_grad) pb->g[i] += self.g[i];
                }
            } else {
                detail::for_each_bc(plan, [&](std::size_t oi, std::size_t ai, std::size_t bi) {
                    if (pa->requires_grad) pa->g[ai] += self.g[oi];
                    if (pb->requires_grad) pb->g[bi] += self.g[oi];
                });
            }
        };
    }
    return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    auto plan = detail::broadcast_plan(a->shape, b->shape);
    auto out = make_tensor<S>(plan.out_shape);
    if (plan.same_shape) {
        for (std::size_t i = 0; i < out->v.size(); ++i) out->v[i] = a->v[i] * b->v[i];
    } else {
        detail::for_each_bc(plan, [&](std::size_t oi, std::size_t ai, std::size_t bi) {
            out->v[oi] = a->v[ai] * b->v[bi];
        });
    }
    if (detail::taping(a, b)) {
        out->requires_grad = true;
        out->parents = {a, b};
        auto* pa = a.get();
        auto* pb = b.get();
        out->backward_fn = [pa, pb, plan](TensorImpl<S>& self) {
            if (pa->requires_grad) pa->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            if (plan.same_shape) {
                for (std::size_t i = 0; i < self.g.size(); ++i) {
                    if (pa->requires_grad) pa->g[i] += self.g[i] * pb->v[i];
                    if (pb->requires_grad) pb->g[i] += self.g[i] * pa->v[i];
                }
            } else {
                detail::for_each_bc(plan, [&](std::size_t oi, std::size_t ai, std::size_t bi) {
                    if (pa->requires_grad) pa->g[ai] += self.g[oi] * pb->v[bi];
                    if (pb->requires_grad) pb->g[bi] += self.g[oi] * pa->v[ai];
                });
            }
        };
    }
    return out;
}

// out = scale * x + shift, elementwise with constants.
template <class S>
Tensor<S> affine(const Tensor<S>& x, S scale, S shift) {
    auto out = make_tensor<S>(x->shape);
    for (std::size_t i = 0; i < out->v.size(); ++i) out->v[i] = scale * x->v[i] + shift;
    if (detail::taping(x)) {
        out->requires_grad = true;
        out->parents = {x};
        auto* px = x.get();
        out->backward_fn = [px, scale](TensorImpl<S>& self) {
            px->ensure_grad();
            for (std::size_t i = 0; i < self.g.size(); ++i) px->g[i] += scale * self.g[i];
        };
    }
    return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    return add(a, affine(b, S(-1), S(0)));
}

template <class S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <class S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <class S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// shape ops

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
    check(shape_numel(new_shape) == x->numel(),
          "reshape: numel mismatch " + shape_str(x->shape) + " -> " + shape_str(new_shape));
    auto out = std::make_shared<TensorImpl<S>>();
    out->shape = std::move(new_shape);
    out->v = x->v;
    if (detail::taping(x)) {
        out->requires_grad = true;
        out->parents = {x};
        auto* px = x.get();
        out->backward_fn = [px](TensorImpl<S>& self) {
            px->ensure_grad();
            for (std::size_t i = 0; i < self.g.size(); ++i) px->g[i] += self.g[i];
        };
    }
    return out;
}

template <class S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& perm) {
    const int nd = x->ndim();
    check(static_cast<int>(perm.size()) == nd, "permute: rank mismatch");
    Shape out_shape(static_cast<std::size_t>(nd));
    for (int i = 0; i < nd; ++i) out_shape[static_cast<std::size_t>(i)] = x->dim(perm[static_cast<std::size_t>(i)]);
    auto out = make_tensor<S>(out_shape);
    const auto in_strides = detail::strides_of(x->shape);
    // stride of output axis i in the input buffer
    std::vector<std::size_t> gather(static_cast<std::size_t>(nd));
    for (int i = 0; i < nd; ++i) gather[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

    std::vector<int> idx(static_cast<std::size_t>(nd), 0);
    std::size_t src = 0;
    const std::size_t total = out->numel();
    for (std::size_t oi = 0; oi < total; ++oi) {
        out->v[oi] = x->v[src];
        for (int d = nd - 1; d >= 0; --d) {
            auto du = static_cast<std::size_t>(d);
            ++idx[du];
            src += gather[du];
            if (idx[du] < out_shape[du]) break;
            src -= gather[du] * static_cast<std::size_t>(out_shape[du]);
            idx[du] = 0;
        }
    }
    if (detail::taping(x)) {
        out->requires_grad = true;
        out->parents = {x};
        auto* px = x.get();
        out->backward_fn = [px, gather, out_shape, nd](TensorImpl<S>& self) {
            px->ensure_grad();
            std::vector<int> idx2(static_cast<std::size_t>(nd), 0);
            std::size_t src = 0;
            for (std::size_t oi = 0; oi < self.g.size(); ++oi) {
                px->g[src] += self.g[oi];
                for (int d = nd - 1; d >= 0; --d) {
                    auto du = static_cast<std::size_t>(d);
                    ++idx2[du];
                    src += gather[du];
                    if (idx2[du] < out_shape[du]) break;
                    src -= gather[du] * static_cast<std::size_t>(out_shape[du]);
                    idx2[du] = 0;
                }
            }
        };
    }
    return out;
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& items, int axis) {
    check(!items.empty(), "concat: empty input list");
    const int nd = items[0]->ndim();
    check(axis >= 0 && axis < nd, "concat: bad axis");
    Shape out_shape = items[0]->shape;
    int cat_dim = 0;
    for (const auto& t : items) {
        check(t->ndim() == nd, "concat: rank mismatch");
        for (int i = 0; i < nd; ++i) {
            if (i != axis) check(t->dim(i) == out_shape[static_cast<std::size_t>(i)], "concat: shape mismatch on axis " + std::to_string(i));
        }
        cat_dim += t->dim(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = cat_dim;
    auto out = make_tensor<S>(out_shape);

    // outer = product of dims before axis, inner = product after
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(out_shape[static_cast<std::size_t>(i)]);
    for (int i = axis + 1; i < nd; ++i) inner *= static_cast<std::size_t>(out_shape[static_cast<std::size_t>(i)]);

    std::size_t offset = 0;
    for (const auto& t : items) {
        const std::size_t chunk = static_cast<std::size_t>(t->dim(axis)) * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(t->v.begin() + static_cast<long>(o * chunk),
                        chunk,
                        out->v.begin() + static_cast<long>(o * static_cast<std::size_t>(cat_dim) * inner + offset));
        }
        offset += chunk;
    }

    bool any_grad = false;
    for (const auto& t : items) any_grad = any_grad || t->requires_grad;
    if (grad_mode_flag() && any_grad) {
        out->requires_grad = true;
        out->parents = items;
        std::vector<TensorImpl<S>*> raw;
        raw.reserve(items.size());
        for (const auto& t : items) raw.push_back(t.get());
        const std::size_t total_inner = static_cast<std::size_t>(cat_dim) * inner;
        out->backward_fn = [raw, outer, inner, total_inner, axis](TensorImpl<S>& self) {
            std::size_t offset2 = 0;
            for (auto* t : raw) {
                const std::size_t chunk = static_cast<std::size_t>(t->shape[static_cast<std::size_t>(axis)]) * inner;
                if (t->requires_grad) {
                    t->ensure_grad();
                    for (std::size_t o = 0; o < outer; ++o) {
                        const S* src = self.g.data() + o * total_inner + offset2;
                        S* dst = t->g.data() + o * chunk;
                        for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                    }
                }
                offset2 += chunk;
            }
        };
    }
    return out;
}

template <class S>
Tensor<S> slice(const Tensor<S>& x, int axis, int start, int len) {
    const int nd = x->ndim();
    check(axis >= 0 && axis < nd, "slice: bad axis");
    check(start >= 0 && len > 0 && start + len <= x->dim(axis), "slice: out of range");
    Shape out_shape = x->shape;
    out_shape[static_cast<std::size_t>(axis)] = len;
    auto out = make_tensor<S>(out_shape);

    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(x->dim(i));
    for (int i = axis + 1; i < nd; ++i) inner *= static_cast<std::size_t>(x->dim(i));
    const std::size_t in_chunk = static_cast<std::size_t>(x->dim(axis)) * inner;
    const std::size_t out_chunk = static_cast<std::size_t>(len) * inner;
    const std::size_t skip = static_cast<std::size_t>(start) * inner;

    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(x->v.begin() + static_cast<long>(o * in_chunk + skip),
                    out_chunk,
                    out->v.begin() + static_cast<long>(o * out_chunk));
    }
    if (detail::taping(x)) {
        out->requires_grad = true;
        out->parents = {x};
        auto* px = x.get();
        out->backward_fn = [px, outer, in_chunk, out_chunk, skip](TensorImpl<S>& self) {
            px->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                const S* src = self.g.data() + o * out_chunk;
                S* dst = px->g.data() + o * in_chunk + skip;
                for (std::size_t i = 0; i < out_chunk; ++i) dst[i] += src[i];
            }
        };
    }
    return out;
}

// Zero-pad the H/W axes (dims 1,2) of a [B,H,W,C] tensor at bottom/right.
template <class S>
Tensor<S> pad_bottom_right(const Tensor<S>& x, int new_h, int new_w) {
    check(x->ndim() == 4, "pad_bottom_right: expected [B,H,W,C]");
    const int b = x->dim(0), h = x->dim(1), w = x->dim(2), c = x->dim(3);
    check(new_h >= h && new_w >= w, "pad_bottom_right: target smaller than input");
    if (new_h == h && new_w == w) return x;
    auto out = make_tensor<S>({b, new_h, new_w, c});
    const std::size_t cs = static_cast<std::size_t>(c);
    for (int bi = 0; bi < b; ++bi)
        for (int y = 0; y < h; ++y) {
            const S* src = x->v.data() + ((static_cast<std::size_t>(bi) * h + y) * w) * cs;
            S* dst = out->v.data() + ((static_cast<std::size_t>(bi) * new_h + y) * new_w) * cs;
            std::copy_n(src, static_cast<std::size_t>(w) * cs, dst);
        }
    if (detail::taping(x)) {
        out->requires_grad = true;
        out->parents = {x};
        auto* px = x.get();
        out->backward_fn = [px, b, h, w, c, new_h, new_w](TensorImpl<S>& self) {
            px->ensure_grad();
            const std::size_t cs = static_cast<std::size_t>(c);
            for (int bi = 0; bi < b; ++bi)
                for (int y = 0; y < h; ++y) {
                    const S* src = self.g.data() + ((static_cast<std::size_t>(bi) * new_h + y) * new_w) * cs;
                    S* dst = px->g.data() + ((static_cast<std::size_t>(bi) * h + y) * w) * cs;
                    for (std::size_t i = 0; i < static_cast<std::size_t>(w) * cs; ++i) dst[i] += src[i];
                }
        };
    }
    return out;
}

// Cyclic shift of the H/W axes of a [B,H,W,C] tensor. Positive shifts move
// content toward larger indices (wrap-around).
template <class S>
Tensor<S> roll_hw(const Tensor<S>& x, int shift_y, int shift_x) {
    check(x->ndim() == 4, "roll_hw: expected [B,H,W,C]");
    const int b = x->dim(0), h = x->dim(1), w = x->dim(2), c = x->dim(3);
    if (shift_y == 0 && shift_x == 0) return x;
    auto mod = [](int a, int m) { return ((a % m) + m) % m; };
    auto out = make_tensor<S>(x->shape);
    const std::size_t cs = static_cast<std::size_t>(c);
    for (int bi = 0; bi < b; ++bi)
        for (int y = 0; y < h; ++y) {
            const int sy = mod(y - shift_y, h);
            for (int xx = 0; xx < w; ++xx) {
                const int sx = mod(xx - shift_x, w);
                const S* src = x->v.data() + ((static_cast<std::size_t>(bi) * h + sy) * w + sx) * cs;
                S* dst = out->v.data() + ((static_cast<std::size_t>(bi) * h + y) * w + xx) * cs;
                std::copy_n(src, cs, dst);
            }
        }
    if (detail::taping(x)) {
        out->requires_grad = true;
        out->parents = {x};
        auto* px = x.get();
        out->backward_fn = [px, b, h, w, c, shift_y, shift_x, mod](TensorImpl<S>& self) {
            px->ensure_grad();
            const std::size_t cs = static_cast<std::size_t>(c);
            for (int bi = 0; bi < b; ++bi)
                for (int y = 0; y < h; ++y) {
                    const int sy = mod(y - shift_y, h);
                    for (int xx = 0; xx < w; ++xx) {
                        const int sx = mod(xx - shift_x, w);
                        const S* src = self.g.data() + ((static_cast<std::size_t>(bi) * h + y) * w + xx) * cs;
                        S* dst = px->g.data() + ((static_cast<std::size_t>(bi) * h + sy) * w + sx) * cs;
                        for (std::size_t i = 0; i < cs; ++i) dst[i] += src[i];
                    }
                }
        };
    }
    return out;
}

// Row gather from a 2-D table: out[i,:] = table[idx[i],:]. Used for learned
// relative-position bias lookup; backward scatter-adds rows.
template <class S>
Tensor<S> gather_rows(const Tensor<S>& table, const std::vector<int>& idx) {
    check(table->ndim() == 2, "gather_rows: table must be 2-D");
    const int rows = table->dim(0), cols = table->dim(1);
    auto out = make_tensor<S>({static_cast<int>(idx.size()), cols});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        check(idx[i] >= 0 && idx[i] < rows, "gather_rows: index out of range");
        std::copy_n(table->v.begin() + static_cast<long>(idx[i]) * cols, cols,
                    out->v.begin() + static_cast<long>(i) * cols);
    }
    if (detail::taping(table)) {
        out->requires_grad = true;
        out->parents = {table};
        auto* pt = table.get();
        out->backward_fn = [pt, idx, cols](TensorImpl<S>& self) {
            pt->ensure_grad();
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const S* src = self.g.data() + i * static_cast<std::size_t>(cols);
                S* dst = pt->g.data() + static_cast<std::size_t>(idx[i]) * static_cast<std::size_t>(cols);
                for (int cjj = 0; cjj < cols; ++cjj) dst[cjj] += src[cjj];
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// matrix products (Eigen GEMM kernels)

namespace detail {
template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using EMap = Eigen::Map<EMat<S>>;
template <class S>
using ECMap = Eigen::Map<const EMat<S>>;
}  // namespace detail

// x: [..., K] -> [..., N] with weight [K, N] and optional bias [N].
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    check(x->ndim() >= 1 && w->ndim() == 2, "linear: bad ranks");
    const int k = x->dim(x->ndim() - 1);
    check(k == w->dim(0), "linear: inner dim mismatch");
    const int n = w->dim(1);
    const std::size_t rows = x->numel() / static_cast<std::size_t>(k);
    Shape out_shape = x->shape;
    out_shape.back() = n;
    auto out = make_tensor<S>(out_shape);

    detail::ECMap<S> xm(x->v.data(), static_cast<long>(rows), k);
    detail::ECMap<S> wm(w->v.data(), k, n);
    detail::EMap<S> om(out->v.data(), static_cast<long>(rows), n);
    om.noalias() = xm * wm;
    if (b) {
        check(b->ndim() == 1 && b->dim(0) == n, "linear: bias shape mismatch");
        for (std::size_t r = 0; r < rows; ++r) {
            S* row = out->v.data() + r * static_cast<std::size_t>(n);
            for (int j = 0; j < n; ++j) row[j] += b->v[static_cast<std::size_t>(j)];
        }
    }

    const bool tape = grad_mode_flag() &&
                      (x->requires_grad || w->requires_grad || (b && b->requires_grad));
    if (tape) {
        out->requires_grad = true;
        out->parents = {x, w};
        if (b) out->parents.push_back(b);
        auto* px = x.get();
        auto* pw = w.get();
        auto* pb = b ? b.get() : nullptr;
        out->backward_fn = [px, pw, pb, rows, k, n](TensorImpl<S>& self) {
            detail::ECMap<S> gm(self.g.data(), static_cast<long>(rows), n);
            detail::ECMap<S> xm2(px->v.data(), static_cast<long>(rows), k);
            detail::ECMap<S> wm2(pw->v.data(), k, n);
            if (px->requires_grad) {
                px->ensure_grad();
                detail::EMap<S> gx(px->g.data(), static_cast<long>(rows), k);
                gx.noalias() += gm * wm2.transpose();
            }
            if (pw->requires_grad) {
                pw->ensure_grad();
                detail::EMap<S> gw(pw->g.data(), k, n);
                gw.noalias() += xm2.transpose() * gm;
            }
            if (pb && pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (int j = 0; j < n; ++j) pb->g[static_cast<std::size_t>(j)] += self.g[r * static_cast<std::size_t>(n) + static_cast<std::size_t>(j)];
            }
        };
    }
    return out;
}

// Batched matmul on 3-D tensors: a [G,M,K] x b [G,K,N] (or b transposed:
// [G,N,K] with trans_b) -> [G,M,N].
template <class S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b, bool trans_b = false) {
    check(a->ndim() == 3 && b->ndim() == 3, "bmm: expected 3-D inputs");
    const int g = a->dim(0), m = a->dim(1), k = a->dim(2);
    check(b->dim(0) == g, "bmm: batch mismatch");
    const int n = trans_b ? b->dim(1) : b->dim(2);
    check((trans_b ? b->dim(2) : b->dim(1)) == k, "bmm: inner dim mismatch");
    auto out = make_tensor<S>({g, m, n});

    const std::size_t as = static_cast<std::size_t>(m) * k;
    const std::size_t bs = static_cast<std::size_t>(b->dim(1)) * b->dim(2);
    const std::size_t os = static_cast<std::size_t>(m) * n;
    for (int gi = 0; gi < g; ++gi) {
        detail::ECMap<S> am(a->v.data() + gi * as, m, k);
        detail::EMap<S> om(out->v.data() + gi * os, m, n);
        if (trans_b) {
            detail::ECMap<S> bm(b->v.data() + gi * bs, n, k);
            om.noalias() = am * bm.transpose();
        } else {
            detail::ECMap<S> bm(b->v.data() + gi * bs, k, n);
            om.noalias() = am * bm;
        }
    }
    if (detail::taping(a, b)) {
        out->requires_grad = true;
        out->parents = {a, b};
        auto* pa = a.get();
        auto* pb = b.get();
        out->backward_fn = [pa, pb, g, m, k, n, as, bs, os, trans_b](TensorImpl<S>& self) {
            if (pa->requires_grad) pa->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            for (int gi = 0; gi < g; ++gi) {
                detail::ECMap<S> gm(self.g.data() + gi * os, m, n);
                detail::ECMap<S> am(pa->v.data() + gi * as, m, k);
                if (trans_b) {
                    detail::ECMap<S> bm(pb->v.data() + gi * bs, n, k);
                    if (pa->requires_grad) {
                        detail::EMap<S> ga(pa->g.data() + gi * as, m, k);
                        ga.noalias() += gm * bm;
                    }
                    if (pb->requires_grad) {
                        detail::EMap<S> gb(pb->g.data() + gi * bs, n, k);
                        gb.noalias() += gm.transpose() * am;
                    }
                } else {
                    detail::ECMap<S> bm(pb->v.data() + gi * bs, k, n);
                    if (pa->requires_grad) {
                        detail::EMap<S> ga(pa->g.data() + gi * as, m, k);
                        ga.noalias() += gm * bm.transpose();
                    }
                    if (pb->requires_grad) {
                        detail::EMap<S> gb(pb->g.data() + gi * bs, k, n);
                        gb.noalias() += am.transpose() * gm;
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// nonlinearities

namespace detail {
template <class S, class FwdF, class BwdF>
Tensor<S> unary_op(const Tensor<S>& x, FwdF fwd, BwdF bwd_coeff) {
    auto out = make_tensor<S>(x->shape);
    for (std::size_t i = 0; i < out->v.size(); ++i) out->v[i] = fwd(x->v[i]);
    if (taping(x)) {
        out->requires_grad = true;
        out->parents = {x};
        auto* px = x.get();
        out->backward_fn = [px, bwd_coeff](TensorImpl<S>& self) {
            px->ensure_grad();
            for (std::size_t i = 0; i < self.g.size(); ++i)
                px->g[i] += self.g[i] * bwd_coeff(px->v[i], self.v[i]);
        };
    }
    return out;
}
}  // namespace detail

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
    return detail::unary_op(
        x, [](S v) { return v > S(0) ? v : S(0); },
        [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
    return detail::unary_op(
        x,
        [](S v) {
            // numerically symmetric form
            if (v >= S(0)) {
                const S e = std::exp(-v);
                return S(1) / (S(1) + e);
            }
            const S e = std::exp(v);
            return e / (S(1) + e);
        },
        [](S, S y) { return y * (S(1) - y); });
}

// Exact GELU, 0.5 x (1 + erf(x / sqrt(2))). Smooth, so finite-difference
// gradient checks are well conditioned.
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return detail::unary_op(
        x,
        [](S v) {
            return static_cast<S>(0.5 * static_cast<double>(v) *
                                  (1.0 + std::erf(static_cast<double>(v) * inv_sqrt2)));
        },
        [](S v, S) {
            const double vd = static_cast<double>(v);
            const double cdf = 0.5 * (1.0 + std::erf(vd * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * vd * vd);
            return static_cast<S>(cdf + vd * pdf);
        });
}

// ---------------------------------------------------------------------------
// softmax / layer norm / reductions

template <class S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
    const int n = x->dim(x->ndim() - 1);
    const std::size_t rows = x->numel() / static_cast<std::size_t>(n);
    auto out = make_tensor<S>(x->shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const S* in = x->v.data() + r * static_cast<std::size_t>(n);
        S* o = out->v.data() + r * static_cast<std::size_t>(n);
        S mx = in[0];
        for (int i = 1; i < n; ++i) mx = std::max(mx, in[i]);
        S sum = S(0);
        for (int i = 0; i < n; ++i) {
            o[i] = std::exp(in[i] - mx);
            sum += o[i];
        }
        const S inv = S(1) / sum;
        for (int i = 0; i < n; ++i) o[i] *= inv;
    }
    if (detail::taping(x)) {
        out->requires_grad = true;
        out->parents = {x};
        auto* px = x.get();
        out->backward_fn = [px, rows, n](TensorImpl<S>& self) {
            px->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const S* y = self.v.data() + r * static_cast<std::size_t>(n);
                const S* gy = self.g.data() + r * static_cast<std::size_t>(n);
                S* gx = px->g.data() + r * static_cast<std::size_t>(n);
                S dot = S(0);
                for (int i = 0; i < n; ++i) dot += gy[i] * y[i];
                for (int i = 0; i < n; ++i) gx[i] += y[i] * (gy[i] - dot);
            }
        };
    }
    return out;
}

template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-5)) {
    const int n = x->dim(x->ndim() - 1);
    check(gamma->ndim() == 1 && gamma->dim(0) == n, "layer_norm: gamma shape");
    check(beta->ndim() == 1 && beta->dim(0) == n, "layer_norm: beta shape");
    const std::size_t rows = x->numel() / static_cast<std::size_t>(n);
    auto out = make_tensor<S>(x->shape);
    std::vector<S> mean(rows), inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const S* in = x->v.data() + r * static_cast<std::size_t>(n);
        S mu = S(0);
        for (int i = 0; i < n; ++i) mu += in[i];
        mu /= static_cast<S>(n);
        S var = S(0);
        for (int i = 0; i < n; ++i) {
            const S d = in[i] - mu;
            var += d * d;
        }
        var /= static_cast<S>(n);
        const S is = S(1) / std::sqrt(var + eps);
        mean[r] = mu;
        inv_std[r] = is;
        S* o = out->v.data() + r * static_cast<std::size_t>(n);
        for (int i = 0; i < n; ++i) o[i] = (in[i] - mu) * is * gamma->v[static_cast<std::size_t>(i)] + beta->v[static_cast<std::size_t>(i)];
    }
    const bool tape = grad_mode_flag() &&
                      (x->requires_grad || gamma->requires_grad || beta->requires_grad);
    if (tape) {
        out->requires_grad = true;
        out->parents = {x, gamma, beta};
        auto* px = x.get();
        auto* pg = gamma.get();
        auto* pb = beta.get();
        out->backward_fn = [px, pg, pb, rows, n, mean, inv_std](TensorImpl<S>& self) {
            if (px->requires_grad) px->ensure_grad();
            if (pg->requires_grad) pg->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const S* in = px->v.data() + r * static_cast<std::size_t>(n);
                const S* gy = self.g.data() + r * static_cast<std::size_t>(n);
                const S mu = mean[r], is = inv_std[r];
                if (pg->requires_grad || pb->requires_grad) {
                    for (int i = 0; i < n; ++i) {
                        const S xhat = (in[i] - mu) * is;
                        if (pg->requires_grad) pg->g[static_cast<std::size_t>(i)] += gy[i] * xhat;
                        if (pb->requires_grad) pb->g[static_cast<std::size_t>(i)] += gy[i];
                    }
                }
                if (px->requires_grad) {
                    // dx = (is/n) * (n*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
                    S sum_dxhat = S(0), sum_dxhat_xhat = S(0);
                    for (int i = 0; i < n; ++i) {
                        const S xhat = (in[i] - mu) * is;
                        const S dxhat = gy[i] * pg->v[static_cast<std::size_t>(i)];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    S* gx = px->g.data() + r * static_cast<std::size_t>(n);
                    for (int i = 0; i < n; ++i) {
                        const S xhat = (in[i] - mu) * is;
                        const S dxhat = gy[i] * pg->v[static_cast<std::size_t>(i)];
                        gx[i] += is * (dxhat - sum_dxhat / static_cast<S>(n) -
                                       xhat * sum_dxhat_xhat / static_cast<S>(n));
                    }
                }
            }
        };
    }
    return out;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& x) {
    auto out = make_tensor<S>({1});
    S acc = S(0);
    for (S v : x->v) acc += v;
    out->v[0] = acc / static_cast<S>(x->numel());
    if (detail::taping(x)) {
        out->requires_grad = true;
        out->parents = {x};
        auto* px = x.get();
        out->backward_fn = [px](TensorImpl<S>& self) {
            px->ensure_grad();
            const S c = self.g[0] / static_cast<S>(px->v.size());
            for (std::size_t i = 0; i < px->g.size(); ++i) px->g[i] += c;
        };
    }
    return out;
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
    auto out = make_tensor<S>({1});
    S acc = S(0);
    for (S v : x->v) acc += v;
    out->v[0] = acc;
    if (detail::taping(x)) {
        out->requires_grad = true;
        out->parents = {x};
        auto* px = x.get();
        out->backward_fn = [px](TensorImpl<S>& self) {
            px->ensure_grad();
            for (std::size_t i = 0; i < px->g.size(); ++i) px->g[i] += self.g[0];
        };
    }
    return out;
}

// [B,C,H,W] -> [B,C], mean over the spatial axes.
template <class S>
Tensor<S> mean_spatial(const Tensor<S>& x) {
    check(x->ndim() == 4, "mean_spatial: expected [B,C,H,W]");
    const int b = x->dim(0), c = x->dim(1);
    const std::size_t hw = static_cast<std::size_t>(x->dim(2)) * x->dim(3);
    auto out = make_tensor<S>({b, c});
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            const S* in = x->v.data() + (static_cast<std::size_t>(bi) * c + ci) * hw;
            S acc = S(0);
            for (std::size_t i = 0; i < hw; ++i) acc += in[i];
            out->v[static_cast<std::size_t>(bi) * c + ci] = acc / static_cast<S>(hw);
        }
    if (detail::taping(x)) {
        out->requires_grad = true;
        out->parents = {x};
        auto* px = x.get();
        out->backward_fn = [px, b, c, hw](TensorImpl<S>& self) {
            px->ensure_grad();
            for (int bi = 0; bi < b; ++bi)
                for (int ci = 0; ci < c; ++ci) {
                    const S g0 = self.g[static_cast<std::size_t>(bi) * c + ci] / static_cast<S>(hw);
                    S* gx = px->g.data() + (static_cast<std::size_t>(bi) * c + ci) * hw;
                    for (std::size_t i = 0; i < hw; ++i) gx[i] += g0;
                }
        };
    }
    return out;
}

// [B,C,H,W] -> [B,1,H,W], max over the channel axis (ties: lowest channel).
template <class S>
Tensor<S> channel_max(const Tensor<S>& x) {
    check(x->ndim() == 4, "channel_max: expected [B,C,H,W]");
    const int b = x->dim(0), c = x->dim(1), h = x->dim(2), w = x->dim(3);
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    auto out = make_tensor<S>({b, 1, h, w});
    std::vector<int> argmax(static_cast<std::size_t>(b) * hw, 0);
    for (int bi = 0; bi < b; ++bi) {
        const S* base = x->v.data() + static_cast<std::size_t>(bi) * c * hw;
        for (std::size_t p = 0; p < hw; ++p) {
            S best = base[p];
            int bc = 0;
            for (int ci = 1; ci < c; ++ci) {
                const S v = base[static_cast<std::size_t>(ci) * hw + p];
                if (v > best) {
                    best = v;
                    bc = ci;
                }
            }
            out->v[static_cast<std::size_t>(bi) * hw + p] = best;
            argmax[static_cast<std::size_t>(bi) * hw + p] = bc;
        }
    }
    if (detail::taping(x)) {
        out->requires_grad = true;
        out->parents = {x};
        auto* px = x.get();
        out->backward_fn = [px, b, hw, argmax](TensorImpl<S>& self) {
            px->ensure_grad();
            const int c2 = px->shape[1];
            (void)c2;
            for (int bi = 0; bi < b; ++bi) {
                for (std::size_t p = 0; p < hw; ++p) {
                    const int bc = argmax[static_cast<std::size_t>(bi) * hw + p];
                    px->g[(static_cast<std::size_t>(bi) * static_cast<std::size_t>(px->shape[1]) + static_cast<std::size_t>(bc)) * hw + p] +=
                        self.g[static_cast<std::size_t>(bi) * hw + p];
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv2d (stride 1, zero padding) via im2col + GEMM

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int pad) {
    check(x->ndim() == 4 && w->ndim() == 4, "conv2d: expected 4-D input and weight");
    const int bs = x->dim(0), ci = x->dim(1), h = x->dim(2), ww = x->dim(3);
    const int co = w->dim(0), kh = w->dim(2), kw = w->dim(3);
    check(w->dim(1) == ci, "conv2d: channel mismatch");
    const int oh = h + 2 * pad - kh + 1;
    const int ow = ww + 2 * pad - kw + 1;
    check(oh > 0 && ow > 0, "conv2d: output would be empty");
    auto out = make_tensor<S>({bs, co, oh, ow});

    const int patch = ci * kh * kw;
    const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
    std::vector<S> col(static_cast<std::size_t>(patch) * ohw);

    auto fill_col = [&](const S* img) {
        // col[(c*kh*kw + ky*kw + kx), oy*ow + ox] = img[c, oy+ky-pad, ox+kx-pad]
        std::size_t row = 0;
        for (int c = 0; c < ci; ++c)
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx, ++row) {
                    S* dst = col.data() + row * ohw;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy + ky - pad;
                        if (iy < 0 || iy >= h) {
                            std::fill_n(dst + static_cast<std::size_t>(oy) * ow, ow, S(0));
                            continue;
                        }
                        const S* src = img + (static_cast<std::size_t>(c) * h + iy) * ww;
                        S* drow = dst + static_cast<std::size_t>(oy) * ow;
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox + kx - pad;
                            drow[ox] = (ix >= 0 && ix < ww) ? src[ix] : S(0);
                        }
                    }
                }
    };

    for (int bi = 0; bi < bs; ++bi) {
        fill_col(x->v.data() + static_cast<std::size_t>(bi) * ci * h * ww);
        detail::ECMap<S> wm(w->v.data(), co, patch);
        detail::ECMap<S> cm(col.data(), patch, static_cast<long>(ohw));
        detail::EMap<S> om(out->v.data() + static_cast<std::size_t>(bi) * co * ohw, co, static_cast<long>(ohw));
        om.noalias() = wm * cm;
        if (b) {
            for (int c = 0; c < co; ++c) {
                S* row = out->v.data() + (static_cast<std::size_t>(bi) * co + c) * ohw;
                const S bv = b->v[static_cast<std::size_t>(c)];
                for (std::size_t i = 0; i < ohw; ++i) row[i] += bv;
            }
        }
    }

    const bool tape = grad_mode_flag() &&
                      (x->requires_grad || w->requires_grad || (b && b->requires_grad));
    if (tape) {
        out->requires_grad = true;
        out->parents = {x, w};
        if (b) out->parents.push_back(b);
        auto* px = x.get();
        auto* pw = w.get();
        auto* pb = b ? b.get() : nullptr;
        out->backward_fn = [px, pw, pb, bs, ci, h, ww, co, kh, kw, pad, oh, ow](TensorImpl<S>& self) {
            const int patch = ci * kh * kw;
            const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
            std::vector<S> col(static_cast<std::size_t>(patch) * ohw);
            std::vector<S> dcol(static_cast<std::size_t>(patch) * ohw);
            if (px->requires_grad) px->ensure_grad();
            if (pw->requires_grad) pw->ensure_grad();
            if (pb && pb->requires_grad) pb->ensure_grad();

            for (int bi = 0; bi < bs; ++bi) {
                const S* img = px->v.data() + static_cast<std::size_t>(bi) * ci * h * ww;
                const S* gout = self.g.data() + static_cast<std::size_t>(bi) * co * ohw;

                if (pw->requires_grad) {
                    // rebuild col for this image
                    std::size_t row = 0;
                    for (int c = 0; c < ci; ++c)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx, ++row) {
                                S* dst = col.data() + row * ohw;
                                for (int oy = 0; oy < oh; ++oy) {
                                    const int iy = oy + ky - pad;
                                    if (iy < 0 || iy >= h) {
                                        std::fill_n(dst + static_cast<std::size_t>(oy) * ow, ow, S(0));
                                        continue;
                                    }
                                    const S* src = img + (static_cast<std::size_t>(c) * h + iy) * ww;
                                    S* drow = dst + static_cast<std::size_t>(oy) * ow;
                                    for (int ox = 0; ox < ow; ++ox) {
                                        const int ix = ox + kx - pad;
                                        drow[ox] = (ix >= 0 && ix < ww) ? src[ix] : S(0);
                                    }
                                }
                            }
                    detail::ECMap<S> gm(gout, co, static_cast<long>(ohw));
                    detail::ECMap<S> cm(col.data(), patch, static_cast<long>(ohw));
                    detail::EMap<S> gw(pw->g.data(), co, patch);
                    gw.noalias() += gm * cm.transpose();
                }
                if (px->requires_grad) {
                    detail::ECMap<S> wm(pw->v.data(), co, patch);
                    detail::ECMap<S> gm(gout, co, static_cast<long>(ohw));
                    detail::EMap<S> dc(dcol.data(), patch, static_cast<long>(ohw));
                    dc.noalias() = wm.transpose() * gm;
                    // col2im scatter
                    S* gx = px->g.data() + static_cast<std::size_t>(bi) * ci * h * ww;
                    std::size_t row = 0;
                    for (int c = 0; c < ci; ++c)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx, ++row) {
                                const S* src = dcol.data() + row * ohw;
                                for (int oy = 0; oy < oh; ++oy) {
                                    const int iy = oy + ky - pad;
                                    if (iy < 0 || iy >= h) continue;
                                    S* drow = gx + (static_cast<std::size_t>(c) * h + iy) * ww;
                                    const S* srow = src + static_cast<std::size_t>(oy) * ow;
                                    for (int ox = 0; ox < ow; ++ox) {
                                        const int ix = ox + kx - pad;
                                        if (ix >= 0 && ix < ww) drow[ix] += srow[ox];
                                    }
                                }
                            }
                }
                if (pb && pb->requires_grad) {
                    for (int c = 0; c < co; ++c) {
                        const S* row = gout + static_cast<std::size_t>(c) * ohw;
                        S acc = S(0);
                        for (std::size_t i = 0; i < ohw; ++i) acc += row[i];
                        pb->g[static_cast<std::size_t>(c)] += acc;
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// bilinear resize on [B,C,H,W]

// Sample positions follow the half-pixel convention: the source coordinate of
// output pixel o is (o + 0.5) * (in/out) - 0.5, clamped into the image. Equal
// sizes reproduce the input exactly.
template <class S>
Tensor<S> bilinear2d(const Tensor<S>& x, int oh, int ow) {
    check(x->ndim() == 4, "bilinear2d: expected [B,C,H,W]");
    const int b = x->dim(0), c = x->dim(1), h = x->dim(2), w = x->dim(3);
    if (oh == h && ow == w) return x;
    auto out = make_tensor<S>({b, c, oh, ow});

    struct Axis {
        int i0, i1;
        S w1;  // weight of i1; weight of i0 is 1-w1
    };
    auto build = [](int in, int on) {
        std::vector<Axis> ax(static_cast<std::size_t>(on));
        const double scale = static_cast<double>(in) / on;
        for (int o = 0; o < on; ++o) {
            double p = (o + 0.5) * scale - 0.5;
            p = std::min(std::max(p, 0.0), static_cast<double>(in - 1));
            const int i0 = static_cast<int>(std::floor(p));
            const int i1 = std::min(i0 + 1, in - 1);
            ax[static_cast<std::size_t>(o)] = {i0, i1, static_cast<S>(p - i0)};
        }
        return ax;
    };
    const auto ay = build(h, oh);
    const auto axx = build(w, ow);

    const std::size_t in_hw = static_cast<std::size_t>(h) * w;
    const std::size_t out_hw = static_cast<std::size_t>(oh) * ow;
    for (int bc = 0; bc < b * c; ++bc) {
        const S* src = x->v.data() + static_cast<std::size_t>(bc) * in_hw;
        S* dst = out->v.data() + static_cast<std::size_t>(bc) * out_hw;
        for (int oy = 0; oy < oh; ++oy) {
            const auto& Y = ay[static_cast<std::size_t>(oy)];
            const S* r0 = src + static_cast<std::size_t>(Y.i0) * w;
            const S* r1 = src + static_cast<std::size_t>(Y.i1) * w;
            for (int ox = 0; ox < ow; ++ox) {
                const auto& X = axx[static_cast<std::size_t>(ox)];
                const S top = r0[X.i0] * (S(1) - X.w1) + r0[X.i1] * X.w1;
                const S bot = r1[X.i0] * (S(1) - X.w1) + r1[X.i1] * X.w1;
                dst[static_cast<std::size_t>(oy) * ow + ox] = top * (S(1) - Y.w1) + bot * Y.w1;
            }
        }
    }
    if (detail::taping(x)) {
        out->requires_grad = true;
        out->parents = {x};
        auto* px = x.get();
        out->backward_fn = [px, b, c, h, w, oh, ow, ay, axx](TensorImpl<S>& self) {
            px->ensure_grad();
            const std::size_t in_hw = static_cast<std::size_t>(h) * w;
            const std::size_t out_hw = static_cast<std::size_t>(oh) * ow;
            for (int bc = 0; bc < b * c; ++bc) {
                S* gx = px->g.data() + static_cast<std::size_t>(bc) * in_hw;
                const S* gy = self.g.data() + static_cast<std::size_t>(bc) * out_hw;
                for (int oy = 0; oy < oh; ++oy) {
                    const auto& Y = ay[static_cast<std::size_t>(oy)];
                    for (int ox = 0; ox < ow; ++ox) {
                        const auto& X = axx[static_cast<std::size_t>(ox)];
                        const S g = gy[static_cast<std::size_t>(oy) * ow + ox];
                        gx[static_cast<std::size_t>(Y.i0) * w + X.i0] += g * (S(1) - Y.w1) * (S(1) - X.w1);
                        gx[static_cast<std::size_t>(Y.i0) * w + X.i1] += g * (S(1) - Y.w1) * X.w1;
                        gx[static_cast<std::size_t>(Y.i1) * w + X.i0] += g * Y.w1 * (S(1) - X.w1);
                        gx[static_cast<std::size_t>(Y.i1) * w + X.i1] += g * Y.w1 * X.w1;
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// dropout / losses

template <class S>
Tensor<S> dropout(const Tensor<S>& x, double rate, Rng& rng) {
    if (rate <= 0.0) return x;
    check(rate < 1.0, "dropout: rate must be < 1");
    auto out = make_tensor<S>(x->shape);
    std::vector<S> mask(x->numel());
    const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = rng.bernoulli(rate) ? S(0) : keep_scale;
        out->v[i] = x->v[i] * mask[i];
    }
    if (detail::taping(x)) {
        out->requires_grad = true;
        out->parents = {x};
        auto* px = x.get();
        out->backward_fn = [px, mask](TensorImpl<S>& self) {
            px->ensure_grad();
            for (std::size_t i = 0; i < self.g.size(); ++i) px->g[i] += self.g[i] * mask[i];
        };
    }
    return out;
}

// Mean binary cross-entropy. Predictions are clamped to [eps, 1-eps] before
// the logs; pixels caught by the clamp get zero gradient.
template <class S>
Tensor<S> bce_mean(const Tensor<S>& pred, const Tensor<S>& target, S eps = S(1e-7)) {
    check(pred->shape == target->shape, "bce_mean: shape mismatch " + shape_str(pred->shape) +
                                            " vs " + shape_str(target->shape));
    for (S t : target->v)
        check(t >= S(0) && t <= S(1), "bce_mean: target outside [0,1]");
    auto out = make_tensor<S>({1});
    const std::size_t n = pred->numel();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double p = std::min(std::max(static_cast<double>(pred->v[i]), static_cast<double>(eps)),
                                  1.0 - static_cast<double>(eps));
        const double t = static_cast<double>(target->v[i]);
        acc -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    }
    out->v[0] = static_cast<S>(acc / static_cast<double>(n));
    if (detail::taping(pred)) {
        out->requires_grad = true;
        out->parents = {pred, target};
        auto* pp = pred.get();
        auto* pt = target.get();
        out->backward_fn = [pp, pt, n, eps](TensorImpl<S>& self) {
            pp->ensure_grad();
            const S g0 = self.g[0] / static_cast<S>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const S p = pp->v[i];
                if (p <= eps || p >= S(1) - eps) continue;
                const S t = pt->v[i];
                pp->g[i] += g0 * (-t / p + (S(1) - t) / (S(1) - p));
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// backward pass

template <class S>
void backward(const Tensor<S>& root) {
    check(root->numel() == 1, "backward: root must be scalar");
    check(root->requires_grad, "backward: root does not require grad");

    // iterative DFS postorder -> producers first, reversed gives consumers first
    std::vector<TensorImpl<S>*> order;
    std::unordered_set<TensorImpl<S>*> visited;
    std::vector<std::pair<TensorImpl<S>*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, child] = stack.back();
        if (child < node->parents.size()) {
            TensorImpl<S>* next = node->parents[child].get();
            ++child;
            if (next->requires_grad && visited.insert(next).second) stack.emplace_back(next, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->g[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl<S>* node = *it;
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
}

}  // namespace dtmi
