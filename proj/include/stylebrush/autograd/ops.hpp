#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "stylebrush/autograd/var.hpp"

namespace stylebrush::ag {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

namespace detail {

template <class T>
void accumulate(const Var<T>& v, const Tensor<T>& g) {
    if (v.requires_grad()) v.node()->accumulate(g);
}

inline std::size_t prod(const Shape& s, int begin, int end) {
    std::size_t n = 1;
    for (int i = begin; i < end; ++i) n *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
    return n;
}

inline int normalize_axis(int axis, int rank) {
    const int a = axis < 0 ? axis + rank : axis;
    require(0 <= a && a < rank, ErrorKind::shape, "axis out of range");
    return a;
}

}  // namespace detail

template <class T>
Var<T> constant(Tensor<T> value) {
    return Var<T>(std::move(value), false);
}

template <class T>
Var<T> parameter(Tensor<T> value) {
    return Var<T>(std::move(value), true);
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return make_result(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
        detail::accumulate(a, g);
        detail::accumulate(b, g);
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.value(), b.value(), "sub");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return make_result(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
        detail::accumulate(a, g);
        if (b.requires_grad()) {
            Tensor<T> neg = g;
            for (auto& v : neg.storage()) v = -v;
            b.node()->accumulate(neg);
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_result(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
        if (a.requires_grad()) {
            Tensor<T> ga = g;
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= b.value()[i];
            a.node()->accumulate(ga);
        }
        if (b.requires_grad()) {
            Tensor<T> gb = g;
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= a.value()[i];
            b.node()->accumulate(gb);
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.storage()) v *= s;
    return make_result(std::move(out), {a}, [a, s](const Tensor<T>& g) {
        Tensor<T> ga = g;
        for (auto& v : ga.storage()) v *= s;
        a.node()->accumulate(ga);
    });
}

template <class T>
Var<T> silu(const Var<T>& x) {
    Tensor<T> out = x.value();
    for (auto& v : out.storage()) v = v / (T(1) + std::exp(-v));
    return make_result(std::move(out), {x}, [x](const Tensor<T>& g) {
        Tensor<T> gx = g;
        const auto& xv = x.value();
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const T s = T(1) / (T(1) + std::exp(-xv[i]));
            gx[i] *= s * (T(1) + xv[i] * (T(1) - s));
        }
        x.node()->accumulate(gx);
    });
}

/// x + b broadcast along `axis`, where b has shape [x.dim(axis)].
template <class T>
Var<T> add_bias(const Var<T>& x, const Var<T>& b, int axis = 1) {
    const Shape& s = x.shape();
    axis = detail::normalize_axis(axis, static_cast<int>(s.size()));
    require(b.value().size() == static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]), ErrorKind::shape,
            "add_bias: bias length mismatch");
    const std::size_t outer = detail::prod(s, 0, axis), c = static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]);
    const std::size_t inner = detail::prod(s, axis + 1, static_cast<int>(s.size()));
    Tensor<T> out = x.value();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < c; ++k) {
            T* p = out.data() + (o * c + k) * inner;
            const T bv = b.value()[k];
            for (std::size_t i = 0; i < inner; ++i) p[i] += bv;
        }
    return make_result(std::move(out), {x, b}, [x, b, outer, c, inner](const Tensor<T>& g) {
        detail::accumulate(x, g);
        if (b.requires_grad()) {
            Tensor<T> gb(b.shape());
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t k = 0; k < c; ++k) {
                    const T* p = g.data() + (o * c + k) * inner;
                    T acc = 0;
                    for (std::size_t i = 0; i < inner; ++i) acc += p[i];
                    gb[k] += acc;
                }
            b.node()->accumulate(gb);
        }
    });
}

/// x[N,C,...] + e[N,C] broadcast over the trailing axes.
template <class T>
Var<T> add_per_channel(const Var<T>& x, const Var<T>& e) {
    const Shape& s = x.shape();
    require(e.shape().size() == 2 && e.dim(0) == s[0] && e.dim(1) == s[1], ErrorKind::shape,
            "add_per_channel: expected [N,C] addend");
    const std::size_t nc = static_cast<std::size_t>(s[0]) * static_cast<std::size_t>(s[1]);
    const std::size_t inner = x.value().size() / std::max<std::size_t>(nc, 1);
    Tensor<T> out = x.value();
    for (std::size_t k = 0; k < nc; ++k)
        for (std::size_t i = 0; i < inner; ++i) out[k * inner + i] += e.value()[k];
    return make_result(std::move(out), {x, e}, [x, e, nc, inner](const Tensor<T>& g) {
        detail::accumulate(x, g);
        if (e.requires_grad()) {
            Tensor<T> ge(e.shape());
            for (std::size_t k = 0; k < nc; ++k) {
                T acc = 0;
                for (std::size_t i = 0; i < inner; ++i) acc += g[k * inner + i];
                ge[k] = acc;
            }
            e.node()->accumulate(ge);
        }
    });
}

// ---------------------------------------------------------------------------
// Dense layers

/// y = x W^T + b over the last axis; W is [out, in].
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>* b = nullptr) {
    const Shape& s = x.shape();
    const int in = s.back();
    require(w.shape().size() == 2 && w.dim(1) == in, ErrorKind::shape,
            "linear: weight " + to_string(w.shape()) + " incompatible with input " + to_string(s));
    const int outc = w.dim(0);
    const int rows = static_cast<int>(x.value().size() / static_cast<std::size_t>(in));
    Shape os = s;
    os.back() = outc;
    Tensor<T> out(os);
    ConstMatMap<T> X(x.value().data(), rows, in);
    ConstMatMap<T> W(w.value().data(), outc, in);
    MatMap<T> Y(out.data(), rows, outc);
    Y.noalias() = X * W.transpose();
    if (b) {
        require(b->value().size() == static_cast<std::size_t>(outc), ErrorKind::shape, "linear: bias length");
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < outc; ++c) Y(r, c) += b->value()[static_cast<std::size_t>(c)];
    }
    Var<T> bias = b ? *b : Var<T>();
    const bool has_bias = b != nullptr;
    return make_result(std::move(out), {x, w, bias}, [x, w, bias, has_bias, rows, in, outc](const Tensor<T>& g) {
        ConstMatMap<T> G(g.data(), rows, outc);
        if (x.requires_grad()) {
            Tensor<T> gx(x.shape());
            MatMap<T>(gx.data(), rows, in).noalias() = G * ConstMatMap<T>(w.value().data(), outc, in);
            x.node()->accumulate(gx);
        }
        if (w.requires_grad()) {
            Tensor<T> gw(w.shape());
            MatMap<T>(gw.data(), outc, in).noalias() = G.transpose() * ConstMatMap<T>(x.value().data(), rows, in);
            w.node()->accumulate(gw);
        }
        if (has_bias && bias.requires_grad()) {
            Tensor<T> gb(bias.shape());
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), outc) = G.colwise().sum();
            bias.node()->accumulate(gb);
        }
    });
}

namespace detail {

struct ConvGeometry {
    int n, c, h, w, o, kh, kw, stride, pad_lo, pad_hi, oh, ow;
    int ck() const { return c * kh * kw; }
    int positions() const { return oh * ow; }
};

template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
    const int p = g.positions();
    for (int c = 0; c < g.c; ++c)
        for (int ky = 0; ky < g.kh; ++ky)
            for (int kx = 0; kx < g.kw; ++kx) {
                T* row = col + static_cast<std::size_t>((c * g.kh + ky) * g.kw + kx) * static_cast<std::size_t>(p);
                for (int oy = 0; oy < g.oh; ++oy) {
                    const int iy = oy * g.stride - g.pad_lo + ky;
                    T* dst = row + oy * g.ow;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(dst, dst + g.ow, T(0));
                        continue;
                    }
                    const T* src = x + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
                    for (int ox = 0; ox < g.ow; ++ox) {
                        const int ix = ox * g.stride - g.pad_lo + kx;
                        dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
                    }
                }
            }
}

template <class T>
void col2im(const T* col, const ConvGeometry& g, T* x) {
    const int p = g.positions();
    for (int c = 0; c < g.c; ++c)
        for (int ky = 0; ky < g.kh; ++ky)
            for (int kx = 0; kx < g.kw; ++kx) {
                const T* row = col + static_cast<std::size_t>((c * g.kh + ky) * g.kw + kx) * static_cast<std::size_t>(p);
                for (int oy = 0; oy < g.oh; ++oy) {
                    const int iy = oy * g.stride - g.pad_lo + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    T* dst = x + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
                    const T* src = row + oy * g.ow;
                    for (int ox = 0; ox < g.ow; ++ox) {
                        const int ix = ox * g.stride - g.pad_lo + kx;
                        if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
                    }
                }
            }
}

}  // namespace detail

/// 2-D convolution over x[N,C,H,W] with weight [O,C,KH,KW]. Padding is
/// `pad_lo` on the top/left and `pad_hi` on the bottom/right edges.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>* b, int stride, int pad_lo, int pad_hi) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    require(xs.size() == 4 && ws.size() == 4 && xs[1] == ws[1], ErrorKind::shape,
            "conv2d: input " + to_string(xs) + " incompatible with weight " + to_string(ws));
    detail::ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], stride, pad_lo, pad_hi, 0, 0};
    g.oh = (g.h + pad_lo + pad_hi - g.kh) / stride + 1;
    g.ow = (g.w + pad_lo + pad_hi - g.kw) / stride + 1;
    require(g.oh > 0 && g.ow > 0, ErrorKind::shape, "conv2d: input smaller than kernel");

    const int ck = g.ck(), p = g.positions();
    Tensor<T> out({g.n, g.o, g.oh, g.ow});
    AlignedVector<T> col(static_cast<std::size_t>(ck) * static_cast<std::size_t>(p));
    ConstMatMap<T> W(w.value().data(), g.o, ck);
    const std::size_t in_stride = static_cast<std::size_t>(g.c) * g.h * g.w;
    const std::size_t out_stride = static_cast<std::size_t>(g.o) * p;
    for (int n = 0; n < g.n; ++n) {
        detail::im2col(x.value().data() + n * in_stride, g, col.data());
        MatMap<T> Y(out.data() + n * out_stride, g.o, p);
        Y.noalias() = W * ConstMatMap<T>(col.data(), ck, p);
        if (b)
            for (int o = 0; o < g.o; ++o) Y.row(o).array() += b->value()[static_cast<std::size_t>(o)];
    }
    Var<T> bias = b ? *b : Var<T>();
    const bool has_bias = b != nullptr;
    return make_result(std::move(out), {x, w, bias}, [x, w, bias, has_bias, g](const Tensor<T>& grad) {
        const int ck = g.ck(), p = g.positions();
        const std::size_t in_stride = static_cast<std::size_t>(g.c) * g.h * g.w;
        const std::size_t out_stride = static_cast<std::size_t>(g.o) * p;
        AlignedVector<T> col(static_cast<std::size_t>(ck) * static_cast<std::size_t>(p));
        AlignedVector<T> dcol(x.requires_grad() ? col.size() : 0);
        Tensor<T> gx = x.requires_grad() ? Tensor<T>(x.shape()) : Tensor<T>();
        Tensor<T> gw = w.requires_grad() ? Tensor<T>(w.shape()) : Tensor<T>();
        Tensor<T> gb = (has_bias && bias.requires_grad()) ? Tensor<T>(bias.shape()) : Tensor<T>();
        ConstMatMap<T> W(w.value().data(), g.o, ck);
        for (int n = 0; n < g.n; ++n) {
            ConstMatMap<T> G(grad.data() + n * out_stride, g.o, p);
            if (!gw.empty()) {
                detail::im2col(x.value().data() + n * in_stride, g, col.data());
                MatMap<T>(gw.data(), g.o, ck).noalias() += G * ConstMatMap<T>(col.data(), ck, p).transpose();
            }
            if (!gx.empty()) {
                MatMap<T>(dcol.data(), ck, p).noalias() = W.transpose() * G;
                detail::col2im(dcol.data(), g, gx.data() + n * in_stride);
            }
            if (!gb.empty())
                for (int o = 0; o < g.o; ++o) gb[static_cast<std::size_t>(o)] += G.row(o).sum();
        }
        if (!gx.empty()) x.node()->accumulate(gx);
        if (!gw.empty()) w.node()->accumulate(gw);
        if (!gb.empty()) bias.node()->accumulate(gb);
    });
}

// ---------------------------------------------------------------------------
// Normalization

/// Group normalization over x[N,C,...] with per-channel affine parameters.
template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps = T(1e-5)) {
    const Shape& s = x.shape();
    require(s.size() >= 2 && s[1] % groups == 0, ErrorKind::shape,
            "group_norm: channels " + std::to_string(s[1]) + " not divisible by groups " + std::to_string(groups));
    const int n = s[0], c = s[1], cg = c / groups;
    const std::size_t spatial = detail::prod(s, 2, static_cast<int>(s.size()));
    const std::size_t m = static_cast<std::size_t>(cg) * spatial;
    Tensor<T> out(s);
    Tensor<T> xhat(s);
    std::vector<T> inv_std(static_cast<std::size_t>(n * groups));
    for (int i = 0; i < n; ++i)
        for (int gi = 0; gi < groups; ++gi) {
            const std::size_t base = (static_cast<std::size_t>(i) * c + static_cast<std::size_t>(gi) * cg) * spatial;
            const T* px = x.value().data() + base;
            T mean = 0;
            for (std::size_t k = 0; k < m; ++k) mean += px[k];
            mean /= static_cast<T>(m);
            T var = 0;
            for (std::size_t k = 0; k < m; ++k) var += (px[k] - mean) * (px[k] - mean);
            var /= static_cast<T>(m);
            const T is = T(1) / std::sqrt(var + eps);
            inv_std[static_cast<std::size_t>(i * groups + gi)] = is;
            for (int cc = 0; cc < cg; ++cc) {
                const int ch = gi * cg + cc;
                const T ga = gamma.value()[static_cast<std::size_t>(ch)], be = beta.value()[static_cast<std::size_t>(ch)];
                for (std::size_t k = 0; k < spatial; ++k) {
                    const std::size_t idx = base + static_cast<std::size_t>(cc) * spatial + k;
                    const T xh = (x.value()[idx] - mean) * is;
                    xhat[idx] = xh;
                    out[idx] = ga * xh + be;
                }
            }
        }
    return make_result(std::move(out), {x, gamma, beta},
                       [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, cg, groups, spatial,
                        m](const Tensor<T>& g) {
                           Tensor<T> gg(gamma.shape()), gbeta(beta.shape());
                           Tensor<T> gx = x.requires_grad() ? Tensor<T>(x.shape()) : Tensor<T>();
                           for (int i = 0; i < n; ++i)
                               for (int gi = 0; gi < groups; ++gi) {
                                   const std::size_t base =
                                       (static_cast<std::size_t>(i) * c + static_cast<std::size_t>(gi) * cg) * spatial;
                                   T sum_d = 0, sum_dx = 0;
                                   for (int cc = 0; cc < cg; ++cc) {
                                       const int ch = gi * cg + cc;
                                       const T ga = gamma.value()[static_cast<std::size_t>(ch)];
                                       for (std::size_t k = 0; k < spatial; ++k) {
                                           const std::size_t idx = base + static_cast<std::size_t>(cc) * spatial + k;
                                           gg[static_cast<std::size_t>(ch)] += g[idx] * xhat[idx];
                                           gbeta[static_cast<std::size_t>(ch)] += g[idx];
                                           const T d = g[idx] * ga;
                                           sum_d += d;
                                           sum_dx += d * xhat[idx];
                                       }
                                   }
                                   if (gx.empty()) continue;
                                   const T is = inv_std[static_cast<std::size_t>(i * groups + gi)];
                                   const T mean_d = sum_d / static_cast<T>(m), mean_dx = sum_dx / static_cast<T>(m);
                                   for (int cc = 0; cc < cg; ++cc) {
                                       const T ga = gamma.value()[static_cast<std::size_t>(gi * cg + cc)];
                                       for (std::size_t k = 0; k < spatial; ++k) {
                                           const std::size_t idx = base + static_cast<std::size_t>(cc) * spatial + k;
                                           gx[idx] = is * (g[idx] * ga - mean_d - xhat[idx] * mean_dx);
                                       }
                                   }
                               }
                           if (!gx.empty()) x.node()->accumulate(gx);
                           detail::accumulate(gamma, gg);
                           detail::accumulate(beta, gbeta);
                       });
}

/// Layer normalization over the last axis.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    const Shape& s = x.shape();
    const int c = s.back();
    require(gamma.value().size() == static_cast<std::size_t>(c), ErrorKind::shape, "layer_norm: gamma length");
    const std::size_t rows = x.value().size() / static_cast<std::size_t>(c);
    Tensor<T> out(s), xhat(s);
    std::vector<T> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* px = x.value().data() + r * c;
        T mean = 0;
        for (int k = 0; k < c; ++k) mean += px[k];
        mean /= static_cast<T>(c);
        T var = 0;
        for (int k = 0; k < c; ++k) var += (px[k] - mean) * (px[k] - mean);
        var /= static_cast<T>(c);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (int k = 0; k < c; ++k) {
            const T xh = (px[k] - mean) * is;
            xhat[r * c + k] = xh;
            out[r * c + k] = gamma.value()[static_cast<std::size_t>(k)] * xh + beta.value()[static_cast<std::size_t>(k)];
        }
    }
    return make_result(std::move(out), {x, gamma, beta},
                       [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, c](const Tensor<T>& g) {
                           Tensor<T> gg(gamma.shape()), gb(beta.shape());
                           Tensor<T> gx = x.requires_grad() ? Tensor<T>(x.shape()) : Tensor<T>();
                           for (std::size_t r = 0; r < rows; ++r) {
                               T sum_d = 0, sum_dx = 0;
                               for (int k = 0; k < c; ++k) {
                                   const std::size_t idx = r * c + k;
                                   gg[static_cast<std::size_t>(k)] += g[idx] * xhat[idx];
                                   gb[static_cast<std::size_t>(k)] += g[idx];
                                   const T d = g[idx] * gamma.value()[static_cast<std::size_t>(k)];
                                   sum_d += d;
                                   sum_dx += d * xhat[idx];
                               }
                               if (gx.empty()) continue;
                               const T md = sum_d / static_cast<T>(c), mdx = sum_dx / static_cast<T>(c);
                               for (int k = 0; k < c; ++k) {
                                   const std::size_t idx = r * c + k;
                                   gx[idx] = inv_std[r] *
                                             (g[idx] * gamma.value()[static_cast<std::size_t>(k)] - md - xhat[idx] * mdx);
                               }
                           }
                           if (!gx.empty()) x.node()->accumulate(gx);
                           detail::accumulate(gamma, gg);
                           detail::accumulate(beta, gb);
                       });
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product attention. q is [B,Lq,D]; k and v are
/// [B,Lk,D]. Heads split D evenly.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads) {
    const Shape& qs = q.shape();
    const Shape& ks = k.shape();
    require(qs.size() == 3 && ks.size() == 3 && v.shape() == ks && qs[0] == ks[0] && qs[2] == ks[2], ErrorKind::shape,
            "attention: q " + to_string(qs) + " k " + to_string(ks) + " v " + to_string(v.shape()));
    const int batch = qs[0], lq = qs[1], lk = ks[1], d = qs[2];
    require(heads > 0 && d % heads == 0, ErrorKind::shape, "attention: width not divisible by heads");
    const int dh = d / heads;
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));

    Tensor<T> out(qs);
    auto probs = std::make_shared<std::vector<RowMat<T>>>(static_cast<std::size_t>(batch * heads));
    for (int b = 0; b < batch; ++b)
        for (int h = 0; h < heads; ++h) {
            ConstStridedMap<T> Q(q.value().data() + static_cast<std::size_t>(b) * lq * d + h * dh, lq, dh,
                                 Eigen::OuterStride<>(d));
            ConstStridedMap<T> K(k.value().data() + static_cast<std::size_t>(b) * lk * d + h * dh, lk, dh,
                                 Eigen::OuterStride<>(d));
            ConstStridedMap<T> V(v.value().data() + static_cast<std::size_t>(b) * lk * d + h * dh, lk, dh,
                                 Eigen::OuterStride<>(d));
            RowMat<T> S = (Q * K.transpose()) * sc;
            for (int r = 0; r < lq; ++r) {
                const T mx = S.row(r).maxCoeff();
                S.row(r) = (S.row(r).array() - mx).exp();
                S.row(r) /= S.row(r).sum();
            }
            StridedMap<T> O(out.data() + static_cast<std::size_t>(b) * lq * d + h * dh, lq, dh, Eigen::OuterStride<>(d));
            O.noalias() = S * V;
            (*probs)[static_cast<std::size_t>(b * heads + h)] = std::move(S);
        }
    return make_result(std::move(out), {q, k, v}, [q, k, v, probs, batch, heads, lq, lk, d, dh, sc](const Tensor<T>& g) {
        Tensor<T> gq(q.shape()), gk(k.shape()), gv(v.shape());
        for (int b = 0; b < batch; ++b)
            for (int h = 0; h < heads; ++h) {
                const RowMat<T>& P = (*probs)[static_cast<std::size_t>(b * heads + h)];
                const std::size_t qo = static_cast<std::size_t>(b) * lq * d + h * dh;
                const std::size_t ko = static_cast<std::size_t>(b) * lk * d + h * dh;
                ConstStridedMap<T> G(g.data() + qo, lq, dh, Eigen::OuterStride<>(d));
                ConstStridedMap<T> Q(q.value().data() + qo, lq, dh, Eigen::OuterStride<>(d));
                ConstStridedMap<T> K(k.value().data() + ko, lk, dh, Eigen::OuterStride<>(d));
                ConstStridedMap<T> V(v.value().data() + ko, lk, dh, Eigen::OuterStride<>(d));
                StridedMap<T>(gv.data() + ko, lk, dh, Eigen::OuterStride<>(d)).noalias() += P.transpose() * G;
                RowMat<T> dP = G * V.transpose();
                const Eigen::Matrix<T, Eigen::Dynamic, 1> rs = (dP.array() * P.array()).rowwise().sum();
                RowMat<T> dS = P.array() * (dP.colwise() - rs).array();
                StridedMap<T>(gq.data() + qo, lq, dh, Eigen::OuterStride<>(d)).noalias() += (dS * K) * sc;
                StridedMap<T>(gk.data() + ko, lk, dh, Eigen::OuterStride<>(d)).noalias() += (dS.transpose() * Q) * sc;
            }
        detail::accumulate(q, gq);
        detail::accumulate(k, gk);
        detail::accumulate(v, gv);
    });
}

// ---------------------------------------------------------------------------
// Layout

/// Tensor-level axis permutation: out.shape[i] = in.shape[perm[i]].
template <class T>
Tensor<T> permute_tensor(const Tensor<T>& x, const std::vector<int>& perm) {
    const Shape& s = x.shape();
    const int r = static_cast<int>(s.size());
    require(static_cast<int>(perm.size()) == r, ErrorKind::shape, "permute: rank mismatch");
    Shape os(static_cast<std::size_t>(r));
    std::vector<std::size_t> in_strides(static_cast<std::size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        in_strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(i + 1)] * static_cast<std::size_t>(s[static_cast<std::size_t>(i + 1)]);
    std::vector<std::size_t> step(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        os[static_cast<std::size_t>(i)] = s[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        step[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    }
    Tensor<T> out(os);
    if (out.size() == 0) return out;
    std::vector<int> idx(static_cast<std::size_t>(r), 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < out.size(); ++o) {
        out[o] = x[src];
        for (int a = r - 1; a >= 0; --a) {
            auto ua = static_cast<std::size_t>(a);
            if (++idx[ua] < os[ua]) {
                src += step[ua];
                break;
            }
            src -= step[ua] * static_cast<std::size_t>(os[ua] - 1);
            idx[ua] = 0;
        }
    }
    return out;
}

template <class T>
Var<T> permute(const Var<T>& x, std::vector<int> perm) {
    std::vector<int> inverse(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inverse[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
    return make_result(permute_tensor(x.value(), perm), {x},
                       [x, inverse](const Tensor<T>& g) { x.node()->accumulate(permute_tensor(g, inverse)); });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    return make_result(x.value().reshaped(std::move(shape)), {x},
                       [x](const Tensor<T>& g) { x.node()->accumulate(g.reshaped(x.shape())); });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
    require(!parts.empty(), ErrorKind::shape, "concat of nothing");
    Shape s = parts.front().shape();
    const int r = static_cast<int>(s.size());
    axis = detail::normalize_axis(axis, r);
    int total = 0;
    for (const auto& p : parts) {
        const Shape& ps = p.shape();
        bool ok = static_cast<int>(ps.size()) == r;
        for (int i = 0; ok && i < r; ++i) ok = (i == axis) || ps[static_cast<std::size_t>(i)] == s[static_cast<std::size_t>(i)];
        require(ok, ErrorKind::shape, "concat: incompatible shapes " + to_string(s) + " and " + to_string(ps));
        total += ps[static_cast<std::size_t>(axis)];
    }
    const std::size_t outer = detail::prod(s, 0, axis), inner = detail::prod(s, axis + 1, r);
    s[static_cast<std::size_t>(axis)] = total;
    Tensor<T> out(s);
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(static_cast<std::size_t>(p.shape()[static_cast<std::size_t>(axis)]) * inner);
    const std::size_t row = static_cast<std::size_t>(total) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            std::copy_n(parts[i].value().data() + o * widths[i], widths[i], out.data() + o * row + off);
            off += widths[i];
        }
    }
    return make_result_list<T>(std::move(out), parts, [parts, widths, outer, row](const Tensor<T>& g) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            if (parts[i].requires_grad()) {
                Tensor<T> gp(parts[i].shape());
                for (std::size_t o = 0; o < outer; ++o)
                    std::copy_n(g.data() + o * row + off, widths[i], gp.data() + o * widths[i]);
                parts[i].node()->accumulate(gp);
            }
            off += widths[i];
        }
    });
}

/// Slice [begin, end) along `axis`.
template <class T>
Var<T> slice(const Var<T>& x, int axis, int begin, int end) {
    Shape s = x.shape();
    const int r = static_cast<int>(s.size());
    axis = detail::normalize_axis(axis, r);
    const int len = s[static_cast<std::size_t>(axis)];
    require(0 <= begin && begin <= end && end <= len, ErrorKind::shape, "slice: bad range");
    const std::size_t outer = detail::prod(s, 0, axis), inner = detail::prod(s, axis + 1, r);
    const std::size_t in_row = static_cast<std::size_t>(len) * inner;
    const std::size_t out_row = static_cast<std::size_t>(end - begin) * inner;
    const std::size_t off = static_cast<std::size_t>(begin) * inner;
    s[static_cast<std::size_t>(axis)] = end - begin;
    Tensor<T> out(s);
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.value().data() + o * in_row + off, out_row, out.data() + o * out_row);
    return make_result(std::move(out), {x}, [x, outer, in_row, out_row, off](const Tensor<T>& g) {
        Tensor<T> gx(x.shape());
        for (std::size_t o = 0; o < outer; ++o) std::copy_n(g.data() + o * out_row, out_row, gx.data() + o * in_row + off);
        x.node()->accumulate(gx);
    });
}

/// Tiles a batch-of-one tensor n times along the leading axis.
template <class T>
Var<T> repeat_batch(const Var<T>& x, int n) {
    require(x.dim(0) == 1, ErrorKind::shape, "repeat_batch expects a leading axis of 1");
    if (n == 1) return x;
    Shape s = x.shape();
    s[0] = n;
    Tensor<T> out(s);
    const std::size_t m = x.value().size();
    for (int i = 0; i < n; ++i) std::copy_n(x.value().data(), m, out.data() + static_cast<std::size_t>(i) * m);
    return make_result(std::move(out), {x}, [x, n, m](const Tensor<T>& g) {
        Tensor<T> gx(x.shape());
        for (int i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) gx[j] += g[static_cast<std::size_t>(i) * m + j];
        x.node()->accumulate(gx);
    });
}

template <class T>
Var<T> upsample_nearest2x(const Var<T>& x) {
    const Shape& s = x.shape();
    require(s.size() == 4, ErrorKind::shape, "upsample expects NCHW");
    const int nc = s[0] * s[1], h = s[2], w = s[3];
    Tensor<T> out({s[0], s[1], 2 * h, 2 * w});
    for (int k = 0; k < nc; ++k)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                out[(static_cast<std::size_t>(k) * 2 * h + y) * 2 * w + xx] =
                    x.value()[(static_cast<std::size_t>(k) * h + y / 2) * w + xx / 2];
    return make_result(std::move(out), {x}, [x, nc, h, w](const Tensor<T>& g) {
        Tensor<T> gx(x.shape());
        for (int k = 0; k < nc; ++k)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    gx[(static_cast<std::size_t>(k) * h + y / 2) * w + xx / 2] +=
                        g[(static_cast<std::size_t>(k) * 2 * h + y) * 2 * w + xx];
        x.node()->accumulate(gx);
    });
}

/// Mean over the spatial axes: [N,C,H,W] -> [N,C].
template <class T>
Var<T> mean_spatial(const Var<T>& x) {
    const Shape& s = x.shape();
    require(s.size() == 4, ErrorKind::shape, "mean_spatial expects NCHW");
    const std::size_t nc = static_cast<std::size_t>(s[0]) * s[1], hw = static_cast<std::size_t>(s[2]) * s[3];
    Tensor<T> out({s[0], s[1]});
    for (std::size_t k = 0; k < nc; ++k) {
        T acc = 0;
        for (std::size_t i = 0; i < hw; ++i) acc += x.value()[k * hw + i];
        out[k] = acc / static_cast<T>(hw);
    }
    return make_result(std::move(out), {x}, [x, nc, hw](const Tensor<T>& g) {
        Tensor<T> gx(x.shape());
        for (std::size_t k = 0; k < nc; ++k)
            for (std::size_t i = 0; i < hw; ++i) gx[k * hw + i] = g[k] / static_cast<T>(hw);
        x.node()->accumulate(gx);
    });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> mean(const Var<T>& x) {
    T acc = 0;
    for (T v : x.value().values()) acc += v;
    const std::size_t n = x.value().size();
    return make_result(Tensor<T>({1}, std::vector<T>{acc / static_cast<T>(n)}), {x}, [x, n](const Tensor<T>& g) {
        x.node()->accumulate(Tensor<T>(x.shape(), g[0] / static_cast<T>(n)));
    });
}

/// Mean squared error between same-shaped tensors, as a scalar of shape [1].
template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.value(), b.value(), "mse");
    const std::size_t n = a.value().size();
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const T d = a.value()[i] - b.value()[i];
        acc += d * d;
    }
    return make_result(Tensor<T>({1}, std::vector<T>{acc / static_cast<T>(n)}), {a, b}, [a, b, n](const Tensor<T>& g) {
        const T f = T(2) * g[0] / static_cast<T>(n);
        Tensor<T> ga(a.shape());
        for (std::size_t i = 0; i < n; ++i) ga[i] = f * (a.value()[i] - b.value()[i]);
        detail::accumulate(a, ga);
        if (b.requires_grad()) {
            for (auto& v : ga.storage()) v = -v;
            b.node()->accumulate(ga);
        }
    });
}

}  // namespace stylebrush::ag
