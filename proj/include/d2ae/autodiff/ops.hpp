#pragma once

// Differentiable primitives. Every op checks operand shapes, records its forward value on
// the operand graph and, when the graph is recording, a closure that pushes the output
// gradient back to whichever parents still want it.

#include <Eigen/Core>

#include <cmath>
#include <memory>
#include <string>

#include "d2ae/autodiff/graph.hpp"

namespace d2ae {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

[[noreturn]] inline void shape_fail(const std::string& op, const Shape& a, const Shape& b) {
    throw ShapeError(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] inline void shape_fail(const std::string& op, const Shape& a, const std::string& want) {
    throw ShapeError(op + ": shape " + shape_str(a) + ", expected " + want);
}

template <typename T>
void same_graph(const Var<T>& a, const Var<T>& b, const char* op) {
    if (&a.graph() != &b.graph()) throw std::invalid_argument(std::string(op) + ": operands on different graphs");
}

template <typename T, typename F, typename G>
Var<T> unary(const char* op, Var<T> x, F&& fwd, G&& bwd) {
    const Tensor<T>& xv = x.value();
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    const std::size_t xid = x.id();
    return x.graph().record(op, std::move(out), {xid},
                            [xid, bwd](Graph<T>& g, std::size_t self, const Tensor<T>& gout) {
                                if (!g.wants_grad(xid)) return;
                                const Tensor<T>& in = g.value(xid);
                                const Tensor<T>& y = g.value(self);
                                Tensor<T>& gx = g.grad_buffer(xid);
                                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += bwd(in[i], y[i], gout[i]);
                            });
}

}  // namespace detail

/// Matrix product of rank-2 tensors: a·b, or a·bᵀ when `transpose_b`.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool transpose_b = false) {
    using namespace detail;
    same_graph(a, b, "matmul");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2) shape_fail("matmul", sa, sb);
    const std::size_t m = sa[0], k = sa[1];
    const std::size_t kb = transpose_b ? sb[1] : sb[0];
    const std::size_t n = transpose_b ? sb[0] : sb[1];
    if (k != kb) shape_fail("matmul", sa, sb);
    Tensor<T> out(Shape{m, n});
    ConstMatMap<T> A(a.value().ptr(), m, k);
    ConstMatMap<T> B(b.value().ptr(), sb[0], sb[1]);
    MatMap<T> C(out.ptr(), m, n);
    if (transpose_b) C.noalias() = A * B.transpose();
    else C.noalias() = A * B;
    const std::size_t aid = a.id(), bid = b.id();
    return a.graph().record("matmul", std::move(out), {aid, bid},
                            [=](Graph<T>& g, std::size_t, const Tensor<T>& gout) {
                                ConstMatMap<T> dC(gout.ptr(), m, n);
                                ConstMatMap<T> A(g.value(aid).ptr(), m, k);
                                ConstMatMap<T> B(g.value(bid).ptr(), sb[0], sb[1]);
                                if (g.wants_grad(aid)) {
                                    MatMap<T> dA(g.grad_buffer(aid).ptr(), m, k);
                                    if (transpose_b) dA.noalias() += dC * B;
                                    else dA.noalias() += dC * B.transpose();
                                }
                                if (g.wants_grad(bid)) {
                                    MatMap<T> dB(g.grad_buffer(bid).ptr(), sb[0], sb[1]);
                                    if (transpose_b) dB.noalias() += dC.transpose() * A;
                                    else dB.noalias() += A.transpose() * dC;
                                }
                            });
}

/// Adds a per-channel bias `b` (length C) along axis 1 of `x` (shape (N, C, ...)).
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> b) {
    using namespace detail;
    same_graph(x, b, "add_bias");
    const Shape& sx = x.shape();
    if (sx.size() < 2 || b.shape().size() != 1 || b.shape()[0] != sx[1]) shape_fail("add_bias", sx, b.shape());
    const std::size_t n = sx[0], c = sx[1], inner = x.value().size() / (n * c);
    Tensor<T> out = x.value();
    const Tensor<T>& bv = b.value();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            T* row = out.ptr() + (i * c + j) * inner;
            for (std::size_t p = 0; p < inner; ++p) row[p] += bv[j];
        }
    const std::size_t xid = x.id(), bid = b.id();
    return x.graph().record("add_bias", std::move(out), {xid, bid},
                            [=](Graph<T>& g, std::size_t, const Tensor<T>& gout) {
                                if (g.wants_grad(xid)) g.grad_buffer(xid) += gout;
                                if (g.wants_grad(bid)) {
                                    Tensor<T>& gb = g.grad_buffer(bid);
                                    for (std::size_t i = 0; i < n; ++i)
                                        for (std::size_t j = 0; j < c; ++j) {
                                            const T* row = gout.ptr() + (i * c + j) * inner;
                                            T acc{0};
                                            for (std::size_t p = 0; p < inner; ++p) acc += row[p];
                                            gb[j] += acc;
                                        }
                                }
                            });
}

/// 2-D cross-correlation, x: (N, Ci, H, W), w: (Co, Ci, k, k), zero padding k/2.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::size_t stride = 1) {
    using namespace detail;
    same_graph(x, w, "conv2d");
    const Shape& sx = x.shape();
    const Shape& sw = w.shape();
    if (sx.size() != 4 || sw.size() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0)
        shape_fail("conv2d", sx, sw);
    if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
    const std::size_t n = sx[0], ci = sx[1], h = sx[2], wd = sx[3];
    const std::size_t co = sw[0], k = sw[2], pad = k / 2;
    const std::size_t ho = (h + 2 * pad - k) / stride + 1;
    const std::size_t wo = (wd + 2 * pad - k) / stride + 1;
    const std::size_t plane = ho * wo, kk = ci * k * k, cols = n * plane;

    auto col = std::make_shared<RowMat<T>>(kk, cols);
    {
        const T* xp = x.value().ptr();
        T* cp = col->data();
        for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                    T* row = cp + ((c * k + ky) * k + kx) * cols;
                    for (std::size_t s = 0; s < n; ++s) {
                        const T* img = xp + (s * ci + c) * h * wd;
                        T* dst = row + s * plane;
                        for (std::size_t oy = 0; oy < ho; ++oy) {
                            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                            for (std::size_t ox = 0; ox < wo; ++ox) {
                                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                const bool inside = iy >= 0 && iy < static_cast<long>(h) && ix >= 0 &&
                                                    ix < static_cast<long>(wd);
                                dst[oy * wo + ox] = inside ? img[iy * wd + ix] : T{0};
                            }
                        }
                    }
                }
    }
    RowMat<T> y(co, cols);
    y.noalias() = ConstMatMap<T>(w.value().ptr(), co, kk) * (*col);
    Tensor<T> out(Shape{n, co, ho, wo});
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t o = 0; o < co; ++o)
            std::copy_n(y.data() + o * cols + s * plane, plane, out.ptr() + (s * co + o) * plane);

    const std::size_t xid = x.id(), wid = w.id();
    if (!x.graph().recording()) col.reset();
    return x.graph().record(
        "conv2d", std::move(out), {xid, wid}, [=](Graph<T>& g, std::size_t, const Tensor<T>& gout) {
            RowMat<T> dy(co, cols);
            for (std::size_t s = 0; s < n; ++s)
                for (std::size_t o = 0; o < co; ++o)
                    std::copy_n(gout.ptr() + (s * co + o) * plane, plane, dy.data() + o * cols + s * plane);
            if (g.wants_grad(wid)) {
                MatMap<T> dw(g.grad_buffer(wid).ptr(), co, kk);
                dw.noalias() += dy * col->transpose();
            }
            if (g.wants_grad(xid)) {
                RowMat<T> dcol(kk, cols);
                dcol.noalias() = ConstMatMap<T>(g.value(wid).ptr(), co, kk).transpose() * dy;
                T* gx = g.grad_buffer(xid).ptr();
                for (std::size_t c = 0; c < ci; ++c)
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const T* row = dcol.data() + ((c * k + ky) * k + kx) * cols;
                            for (std::size_t s = 0; s < n; ++s) {
                                T* img = gx + (s * ci + c) * h * wd;
                                const T* src = row + s * plane;
                                for (std::size_t oy = 0; oy < ho; ++oy) {
                                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                                    for (std::size_t ox = 0; ox < wo; ++ox) {
                                        const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                        if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                                        img[iy * wd + ix] += src[oy * wo + ox];
                                    }
                                }
                            }
                        }
            }
        });
}

/// Nearest-neighbour upsampling of (N, C, H, W) by an integer factor.
template <typename T>
Var<T> upsample_nearest(Var<T> x, std::size_t factor = 2) {
    const Shape& sx = x.shape();
    if (sx.size() != 4 || factor == 0) detail::shape_fail("upsample_nearest", sx, "(N,C,H,W)");
    const std::size_t planes = sx[0] * sx[1], h = sx[2], w = sx[3];
    const std::size_t oh = h * factor, ow = w * factor;
    Tensor<T> out(Shape{sx[0], sx[1], oh, ow});
    const T* xp = x.value().ptr();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j)
                out[(p * oh + i) * ow + j] = xp[(p * h + i / factor) * w + j / factor];
    const std::size_t xid = x.id();
    return x.graph().record("upsample_nearest", std::move(out), {xid},
                            [=](Graph<T>& g, std::size_t, const Tensor<T>& gout) {
                                if (!g.wants_grad(xid)) return;
                                T* gx = g.grad_buffer(xid).ptr();
                                for (std::size_t p = 0; p < planes; ++p)
                                    for (std::size_t i = 0; i < oh; ++i)
                                        for (std::size_t j = 0; j < ow; ++j)
                                            gx[(p * h + i / factor) * w + j / factor] += gout[(p * oh + i) * ow + j];
                            });
}

/// Mean over the spatial axes: (N, C, H, W) -> (N, C).
template <typename T>
Var<T> global_avg_pool(Var<T> x) {
    const Shape& sx = x.shape();
    if (sx.size() != 4) detail::shape_fail("global_avg_pool", sx, "(N,C,H,W)");
    const std::size_t rows = sx[0] * sx[1], plane = sx[2] * sx[3];
    const T inv = T{1} / static_cast<T>(plane);
    Tensor<T> out(Shape{sx[0], sx[1]});
    for (std::size_t r = 0; r < rows; ++r) {
        T acc{0};
        for (std::size_t p = 0; p < plane; ++p) acc += x.value()[r * plane + p];
        out[r] = acc * inv;
    }
    const std::size_t xid = x.id();
    return x.graph().record("global_avg_pool", std::move(out), {xid},
                            [=](Graph<T>& g, std::size_t, const Tensor<T>& gout) {
                                if (!g.wants_grad(xid)) return;
                                Tensor<T>& gx = g.grad_buffer(xid);
                                for (std::size_t r = 0; r < rows; ++r)
                                    for (std::size_t p = 0; p < plane; ++p) gx[r * plane + p] += gout[r] * inv;
                            });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
    if (shape_size(shape) != x.value().size()) detail::shape_fail("reshape", x.shape(), shape);
    const std::size_t xid = x.id();
    return x.graph().record("reshape", x.value().reshaped(std::move(shape)), {xid},
                            [xid](Graph<T>& g, std::size_t, const Tensor<T>& gout) {
                                if (!g.wants_grad(xid)) return;
                                Tensor<T>& gx = g.grad_buffer(xid);
                                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gout[i];
                            });
}

/// Concatenation along axis 1 (channels). Leading and trailing extents must agree.
template <typename T>
Var<T> concat(Var<T> a, Var<T> b) {
    using namespace detail;
    same_graph(a, b, "concat");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sa.size() != sb.size() || sa[0] != sb[0]) shape_fail("concat", sa, sb);
    for (std::size_t d = 2; d < sa.size(); ++d)
        if (sa[d] != sb[d]) shape_fail("concat", sa, sb);
    const std::size_t n = sa[0];
    const std::size_t ra = a.value().size() / n, rb = b.value().size() / n;
    Shape so = sa;
    so[1] = sa[1] + sb[1];
    Tensor<T> out(so);
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.value().ptr() + i * ra, ra, out.ptr() + i * (ra + rb));
        std::copy_n(b.value().ptr() + i * rb, rb, out.ptr() + i * (ra + rb) + ra);
    }
    const std::size_t aid = a.id(), bid = b.id();
    return a.graph().record("concat", std::move(out), {aid, bid},
                            [=](Graph<T>& g, std::size_t, const Tensor<T>& gout) {
                                if (g.wants_grad(aid)) {
                                    T* ga = g.grad_buffer(aid).ptr();
                                    for (std::size_t i = 0; i < n; ++i)
                                        for (std::size_t j = 0; j < ra; ++j) ga[i * ra + j] += gout[i * (ra + rb) + j];
                                }
                                if (g.wants_grad(bid)) {
                                    T* gb = g.grad_buffer(bid).ptr();
                                    for (std::size_t i = 0; i < n; ++i)
                                        for (std::size_t j = 0; j < rb; ++j)
                                            gb[i * rb + j] += gout[i * (ra + rb) + ra + j];
                                }
                            });
}

namespace detail {

template <typename T, typename F, typename GA, typename GB>
Var<T> binary(const char* op, Var<T> a, Var<T> b, F&& fwd, GA&& da, GB&& db) {
    same_graph(a, b, op);
    if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);
    const std::size_t aid = a.id(), bid = b.id();
    return a.graph().record(op, std::move(out), {aid, bid},
                            [=](Graph<T>& g, std::size_t, const Tensor<T>& gout) {
                                const Tensor<T>& x = g.value(aid);
                                const Tensor<T>& y = g.value(bid);
                                if (g.wants_grad(aid)) {
                                    Tensor<T>& ga = g.grad_buffer(aid);
                                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += da(x[i], y[i], gout[i]);
                                }
                                if (g.wants_grad(bid)) {
                                    Tensor<T>& gb = g.grad_buffer(bid);
                                    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += db(x[i], y[i], gout[i]);
                                }
                            });
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    return detail::binary<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T g) { return g; }, [](T, T, T g) { return g; });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    return detail::binary<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T g) { return g; }, [](T, T, T g) { return -g; });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    return detail::binary<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
        [](T x, T, T g) { return g * x; });
}

template <typename T>
Var<T> scale(Var<T> x, T s) {
    return detail::unary<T>(
        "scale", x, [s](T v) { return v * s; }, [s](T, T, T g) { return g * s; });
}

template <typename T>
Var<T> relu(Var<T> x) {
    return detail::unary<T>(
        "relu", x, [](T v) { return v > T{0} ? v : T{0}; }, [](T in, T, T g) { return in > T{0} ? g : T{0}; });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
    return detail::unary<T>(
        "sigmoid", x, [](T v) { return T{1} / (T{1} + std::exp(-v)); },
        [](T, T y, T g) { return g * y * (T{1} - y); });
}

template <typename T>
Var<T> exp(Var<T> x) {
    return detail::unary<T>(
        "exp", x, [](T v) { return std::exp(v); }, [](T, T y, T g) { return g * y; });
}

template <typename T>
Var<T> log(Var<T> x) {
    return detail::unary<T>(
        "log", x, [](T v) { return std::log(v); }, [](T in, T, T g) { return g / in; });
}

/// max(x, floor) elementwise; no gradient flows through clamped entries.
template <typename T>
Var<T> clamp_min(Var<T> x, T floor) {
    return detail::unary<T>(
        "clamp_min", x, [floor](T v) { return v < floor ? floor : v; },
        [floor](T in, T, T g) { return in < floor ? T{0} : g; });
}

/// Softmax over the last axis.
template <typename T>
Var<T> softmax(Var<T> x) {
    const Shape& sx = x.shape();
    if (sx.empty()) detail::shape_fail("softmax", sx, "rank >= 1");
    const std::size_t cols = sx.back(), rows = x.value().size() / cols;
    Tensor<T> out(sx);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.value().ptr() + r * cols;
        T* o = out.ptr() + r * cols;
        T mx = in[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
        T z{0};
        for (std::size_t j = 0; j < cols; ++j) {
            o[j] = std::exp(in[j] - mx);
            z += o[j];
        }
        for (std::size_t j = 0; j < cols; ++j) o[j] /= z;
    }
    const std::size_t xid = x.id();
    return x.graph().record("softmax", std::move(out), {xid},
                            [=](Graph<T>& g, std::size_t self, const Tensor<T>& gout) {
                                if (!g.wants_grad(xid)) return;
                                const Tensor<T>& y = g.value(self);
                                Tensor<T>& gx = g.grad_buffer(xid);
                                for (std::size_t r = 0; r < rows; ++r) {
                                    const std::size_t o = r * cols;
                                    T dot{0};
                                    for (std::size_t j = 0; j < cols; ++j) dot += gout[o + j] * y[o + j];
                                    for (std::size_t j = 0; j < cols; ++j) gx[o + j] += y[o + j] * (gout[o + j] - dot);
                                }
                            });
}

template <typename T>
Var<T> sum(Var<T> x) {
    T acc{0};
    for (T v : x.value().data()) acc += v;
    const std::size_t xid = x.id();
    return x.graph().record("sum", Tensor<T>::scalar(acc), {xid},
                            [xid](Graph<T>& g, std::size_t, const Tensor<T>& gout) {
                                if (!g.wants_grad(xid)) return;
                                Tensor<T>& gx = g.grad_buffer(xid);
                                const T s = gout[0];
                                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += s;
                            });
}

template <typename T>
Var<T> mean(Var<T> x) {
    const std::size_t n = x.value().size();
    if (n == 0) detail::shape_fail("mean", x.shape(), "non-empty");
    return scale(sum(x), T{1} / static_cast<T>(n));
}

/// Σ (a - b)².
template <typename T>
Var<T> squared_difference_sum(Var<T> a, Var<T> b) {
    using namespace detail;
    same_graph(a, b, "squared_difference_sum");
    if (a.shape() != b.shape()) shape_fail("squared_difference_sum", a.shape(), b.shape());
    T acc{0};
    for (std::size_t i = 0; i < a.value().size(); ++i) {
        const T d = a.value()[i] - b.value()[i];
        acc += d * d;
    }
    const std::size_t aid = a.id(), bid = b.id();
    return a.graph().record("squared_difference_sum", Tensor<T>::scalar(acc), {aid, bid},
                            [=](Graph<T>& g, std::size_t, const Tensor<T>& gout) {
                                const Tensor<T>& x = g.value(aid);
                                const Tensor<T>& y = g.value(bid);
                                const T s = T{2} * gout[0];
                                if (g.wants_grad(aid)) {
                                    Tensor<T>& ga = g.grad_buffer(aid);
                                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * (x[i] - y[i]);
                                }
                                if (g.wants_grad(bid)) {
                                    Tensor<T>& gb = g.grad_buffer(bid);
                                    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= s * (x[i] - y[i]);
                                }
                            });
}

/// Forward identity; the result has no tape edge back to `x`.
template <typename T>
Var<T> stop_gradient(Var<T> x) {
    return x.graph().record("stop_gradient", x.value(), {}, {});
}

}  // namespace d2ae
