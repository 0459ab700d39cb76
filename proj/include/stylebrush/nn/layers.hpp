#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "stylebrush/autograd/ops.hpp"

namespace stylebrush::nn {

using ag::Var;

template <class T>
struct NamedParam {
    std::string name;
    Var<T> var;
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

template <class T>
std::size_t count_parameters(const ParamList<T>& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.var.value().size();
    return n;
}

/// Order-sensitive hash of every parameter's name, shape and bytes.
template <class T>
std::uint64_t checksum(const ParamList<T>& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : params) h = stylebrush::checksum(p.var.value(), h);
    return h;
}

template <class T>
void zero_grad(const ParamList<T>& params) {
    for (auto p : params) p.var.zero_grad();
}

template <class T>
Tensor<T> gaussian(Shape shape, double stddev, Rng& rng) {
    return Tensor<T>::randn(std::move(shape), rng, static_cast<T>(stddev));
}

template <class T>
struct Conv2d {
    Var<T> weight;
    Var<T> bias;
    int stride = 1;
    int pad_lo = 0;
    int pad_hi = 0;

    Conv2d() = default;

    /// Gaussian weights with stddev 1/sqrt(fan_in), zero bias. `zero`
    /// produces an all-zero ("zero convolution") layer.
    Conv2d(int in, int out, int kernel, int stride_, int pad_lo_, int pad_hi_, Rng& rng, bool zero = false)
        : stride(stride_), pad_lo(pad_lo_), pad_hi(pad_hi_) {
        const Shape ws{out, in, kernel, kernel};
        weight = ag::parameter(zero ? Tensor<T>(ws) : gaussian<T>(ws, 1.0 / std::sqrt(double(in * kernel * kernel)), rng));
        bias = ag::parameter(Tensor<T>({out}));
    }

    /// Same-size convolution for odd kernels.
    static Conv2d same(int in, int out, int kernel, Rng& rng, bool zero = false) {
        return Conv2d(in, out, kernel, 1, kernel / 2, kernel / 2, rng, zero);
    }

    Var<T> operator()(const Var<T>& x) const { return ag::conv2d(x, weight, &bias, stride, pad_lo, pad_hi); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".weight", weight});
        out.push_back({prefix + ".bias", bias});
    }
};

template <class T>
struct Linear {
    Var<T> weight;
    Var<T> bias;
    bool has_bias = true;

    Linear() = default;

    Linear(int in, int out, Rng& rng, bool with_bias = true, bool zero = false) : has_bias(with_bias) {
        weight = ag::parameter(zero ? Tensor<T>({out, in}) : gaussian<T>({out, in}, 1.0 / std::sqrt(double(in)), rng));
        if (has_bias) bias = ag::parameter(Tensor<T>({out}));
    }

    Var<T> operator()(const Var<T>& x) const { return ag::linear(x, weight, has_bias ? &bias : nullptr); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".weight", weight});
        if (has_bias) out.push_back({prefix + ".bias", bias});
    }
};

template <class T>
struct GroupNorm {
    Var<T> gamma;
    Var<T> beta;
    int groups = 1;

    GroupNorm() = default;
    GroupNorm(int channels, int groups_) : groups(groups_) {
        gamma = ag::parameter(Tensor<T>({channels}, T(1)));
        beta = ag::parameter(Tensor<T>({channels}));
    }

    Var<T> operator()(const Var<T>& x) const { return ag::group_norm(x, gamma, beta, groups); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }
};

template <class T>
struct LayerNorm {
    Var<T> gamma;
    Var<T> beta;

    LayerNorm() = default;
    explicit LayerNorm(int channels) {
        gamma = ag::parameter(Tensor<T>({channels}, T(1)));
        beta = ag::parameter(Tensor<T>({channels}));
    }

    Var<T> operator()(const Var<T>& x) const { return ag::layer_norm(x, gamma, beta); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }
};

/// Multi-head attention with separate query/key/value/output projections.
/// Queries come from `x` [B,L,D]; keys and values from `context` [B,Lk,Dc].
template <class T>
struct Attention {
    Linear<T> to_q;
    Linear<T> to_k;
    Linear<T> to_v;
    Linear<T> to_out;
    int heads = 1;

    Attention() = default;

    Attention(int width, int context_width, int heads_, Rng& rng, bool zero_out = false) : heads(heads_) {
        to_q = Linear<T>(width, width, rng, false);
        to_k = Linear<T>(context_width, width, rng, false);
        to_v = Linear<T>(context_width, width, rng, false);
        to_out = Linear<T>(width, width, rng, true, zero_out);
    }

    Var<T> operator()(const Var<T>& x, const Var<T>& context) const {
        return to_out(ag::attention(to_q(x), to_k(context), to_v(context), heads));
    }

    Var<T> operator()(const Var<T>& x) const { return (*this)(x, x); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        to_q.collect(prefix + ".to_q", out);
        to_k.collect(prefix + ".to_k", out);
        to_v.collect(prefix + ".to_v", out);
        to_out.collect(prefix + ".to_out", out);
    }
};

}  // namespace stylebrush::nn
