#pragma once

// Dense rank-4 tensor (n, c, h, w) and the reference kernels every fused or
// sparse variant in this library is checked against. All kernels are pure
// functions; naive direct summation is the authoritative semantics.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace pk {

template <typename T>
struct Tensor {
    static_assert(std::is_floating_point_v<T>);

    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> data;  // row-major, n -> c -> h -> w

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_, T fill = T(0))
        : n(n_), c(c_), h(h_), w(w_) {
        if (n_ < 0 || c_ < 0 || h_ < 0 || w_ < 0)
            throw std::invalid_argument("Tensor: negative dimension");
        data.assign(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill);
    }

    std::size_t size() const { return data.size(); }

    std::size_t index(int in, int ic, int iy, int ix) const {
        return ((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix;
    }
    T& at(int in, int ic, int iy, int ix) { return data[index(in, ic, iy, ix)]; }
    const T& at(int in, int ic, int iy, int ix) const { return data[index(in, ic, iy, ix)]; }

    bool same_shape(const Tensor& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
};

template <typename T>
struct ConvParams {
    // weights laid out (out_ch, in_ch_per_group, kh, kw), row-major
    int out_ch = 0, in_ch_per_group = 0, kh = 0, kw = 0;
    int stride = 1, padding = 0, groups = 1;
    std::vector<T> weights;
    std::vector<T> bias;  // length out_ch

    int in_ch() const { return in_ch_per_group * groups; }

    T weight(int oc, int icg, int ky, int kx) const {
        return weights[((static_cast<std::size_t>(oc) * in_ch_per_group + icg) * kh + ky) * kw + kx];
    }
    T& weight(int oc, int icg, int ky, int kx) {
        return weights[((static_cast<std::size_t>(oc) * in_ch_per_group + icg) * kh + ky) * kw + kx];
    }

    void validate() const {
        if (out_ch <= 0 || in_ch_per_group <= 0 || kh <= 0 || kw <= 0)
            throw std::invalid_argument("ConvParams: non-positive shape field");
        if (stride <= 0) throw std::invalid_argument("ConvParams: stride must be positive");
        if (padding < 0) throw std::invalid_argument("ConvParams: negative padding");
        if (groups <= 0) throw std::invalid_argument("ConvParams: groups must be positive");
        if (out_ch % groups != 0)
            throw std::invalid_argument("ConvParams: out_ch " + std::to_string(out_ch) +
                                        " not divisible by groups " + std::to_string(groups));
        if (weights.size() != static_cast<std::size_t>(out_ch) * in_ch_per_group * kh * kw)
            throw std::invalid_argument("ConvParams: weight count does not match declared shape");
        if (bias.size() != static_cast<std::size_t>(out_ch))
            throw std::invalid_argument("ConvParams: bias length != out_ch");
    }
};

template <typename T>
struct BNParams {
    std::vector<T> gamma, beta, running_mean, running_var;
    T eps = T(1e-5);

    int channels() const { return static_cast<int>(gamma.size()); }

    void validate() const {
        const auto c = gamma.size();
        if (beta.size() != c || running_mean.size() != c || running_var.size() != c)
            throw std::invalid_argument("BNParams: array lengths differ");
        // eps == 0 is allowed so exact identity normalization stays expressible
        if (!(eps >= T(0))) throw std::invalid_argument("BNParams: eps must be non-negative");
        for (T v : running_var)
            if (v < T(0)) throw std::invalid_argument("BNParams: negative running_var");
    }

    static BNParams identity(int c) {
        BNParams p;
        p.gamma.assign(c, T(1));
        p.beta.assign(c, T(0));
        p.running_mean.assign(c, T(0));
        p.running_var.assign(c, T(1));
        p.eps = T(0);
        return p;
    }
};

template <typename T>
inline Tensor<T> conv2d(const Tensor<T>& input, const ConvParams<T>& p) {
    p.validate();
    if (input.c != p.in_ch())
        throw std::invalid_argument("conv2d: input channels " + std::to_string(input.c) +
                                    " != groups*in_ch_per_group " + std::to_string(p.in_ch()));
    const int oh = (input.h + 2 * p.padding - p.kh) / p.stride + 1;
    const int ow = (input.w + 2 * p.padding - p.kw) / p.stride + 1;
    if (input.h + 2 * p.padding < p.kh)
        throw std::invalid_argument("conv2d: kernel height " + std::to_string(p.kh) +
                                    " exceeds padded input height");
    if (input.w + 2 * p.padding < p.kw)
        throw std::invalid_argument("conv2d: kernel width " + std::to_string(p.kw) +
                                    " exceeds padded input width");

    const int oc_per_group = p.out_ch / p.groups;
    Tensor<T> out(input.n, p.out_ch, oh, ow);
    for (int in = 0; in < input.n; ++in) {
        for (int oc = 0; oc < p.out_ch; ++oc) {
            const int g = oc / oc_per_group;
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    T acc = p.bias[oc];
                    for (int icg = 0; icg < p.in_ch_per_group; ++icg) {
                        const int ic = g * p.in_ch_per_group + icg;
                        for (int ky = 0; ky < p.kh; ++ky) {
                            const int iy = oy * p.stride + ky - p.padding;
                            if (iy < 0 || iy >= input.h) continue;
                            for (int kx = 0; kx < p.kw; ++kx) {
                                const int ix = ox * p.stride + kx - p.padding;
                                if (ix < 0 || ix >= input.w) continue;
                                acc += p.weight(oc, icg, ky, kx) * input.at(in, ic, iy, ix);
                            }
                        }
                    }
                    out.at(in, oc, oy, ox) = acc;
                }
            }
        }
    }
    return out;
}

template <typename T>
inline Tensor<T> batchnorm_apply(const Tensor<T>& input, const BNParams<T>& p) {
    p.validate();
    if (input.c != p.channels())
        throw std::invalid_argument("batchnorm_apply: input channels " + std::to_string(input.c) +
                                    " != param channels " + std::to_string(p.channels()));
    Tensor<T> out = input;
    for (int ic = 0; ic < input.c; ++ic) {
        const T scale = p.gamma[ic] / std::sqrt(p.running_var[ic] + p.eps);
        const T shift = p.beta[ic] - p.running_mean[ic] * scale;
        for (int in = 0; in < input.n; ++in)
            for (int iy = 0; iy < input.h; ++iy)
                for (int ix = 0; ix < input.w; ++ix)
                    out.at(in, ic, iy, ix) = input.at(in, ic, iy, ix) * scale + shift;
    }
    return out;
}

enum class Activation { Relu, Gelu, Sigmoid };

template <typename T>
inline T activate_scalar(T x, Activation kind) {
    switch (kind) {
        case Activation::Relu:
            return x > T(0) ? x : T(0);
        case Activation::Gelu:
            // exact Gaussian CDF form
            return x * T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
        case Activation::Sigmoid:
            return T(1) / (T(1) + std::exp(-x));
    }
    throw std::invalid_argument("activation: unknown kind");
}

template <typename T>
inline Tensor<T> activation(const Tensor<T>& input, Activation kind) {
    Tensor<T> out = input;
    for (T& v : out.data) v = activate_scalar(v, kind);
    return out;
}

template <typename T>
inline Tensor<T> global_avg_pool(const Tensor<T>& input) {
    if (input.h < 1 || input.w < 1)
        throw std::invalid_argument("global_avg_pool: empty spatial extent");
    Tensor<T> out(input.n, input.c, 1, 1);
    const T inv = T(1) / (static_cast<T>(input.h) * static_cast<T>(input.w));
    for (int in = 0; in < input.n; ++in)
        for (int ic = 0; ic < input.c; ++ic) {
            T acc = T(0);
            for (int iy = 0; iy < input.h; ++iy)
                for (int ix = 0; ix < input.w; ++ix) acc += input.at(in, ic, iy, ix);
            out.at(in, ic, 0, 0) = acc * inv;
        }
    return out;
}

// Nearest-neighbor upsample: each value becomes a factor x factor block.
template <typename T>
inline Tensor<T> resize_nearest_up(const Tensor<T>& input, int factor) {
    if (factor < 1) throw std::invalid_argument("resize_nearest_up: factor must be >= 1");
    if (factor == 1) return input;
    Tensor<T> out(input.n, input.c, input.h * factor, input.w * factor);
    for (int in = 0; in < input.n; ++in)
        for (int ic = 0; ic < input.c; ++ic)
            for (int oy = 0; oy < out.h; ++oy)
                for (int ox = 0; ox < out.w; ++ox)
                    out.at(in, ic, oy, ox) = input.at(in, ic, oy / factor, ox / factor);
    return out;
}

// Top-left stride sampling; spatial dims must be divisible by factor.
template <typename T>
inline Tensor<T> resize_nearest_down(const Tensor<T>& input, int factor) {
    if (factor < 1) throw std::invalid_argument("resize_nearest_down: factor must be >= 1");
    if (factor == 1) return input;
    if (input.h % factor != 0 || input.w % factor != 0)
        throw std::invalid_argument("resize_nearest_down: spatial dims " + std::to_string(input.h) +
                                    "x" + std::to_string(input.w) + " not divisible by factor " +
                                    std::to_string(factor));
    Tensor<T> out(input.n, input.c, input.h / factor, input.w / factor);
    for (int in = 0; in < input.n; ++in)
        for (int ic = 0; ic < input.c; ++ic)
            for (int oy = 0; oy < out.h; ++oy)
                for (int ox = 0; ox < out.w; ++ox)
                    out.at(in, ic, oy, ox) = input.at(in, ic, oy * factor, ox * factor);
    return out;
}

}  // namespace pk
