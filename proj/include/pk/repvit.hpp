#pragma once

// Toy-scale RepViT backbone: stem, four stages of alternating blocks with and
// without squeeze-excitation, depthwise downsample modules between stages.
// Train-form blocks carry three parallel depthwise branches (3x3+BN, 1x1+BN,
// identity BN); reparameterization folds them into a single 3x3 depthwise
// convolution with identical outputs. Also hosts the CBLinear/CBFuse
// composite-connection primitives.

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pk/rng.hpp"
#include "pk/tensor.hpp"

namespace pk {

template <typename T>
struct ConvBN {
    ConvParams<T> conv;
    BNParams<T> bn;
};

template <typename T>
struct RepBranchSet {
    ConvBN<T> dw3x3;                       // 3x3 depthwise, padding 1
    ConvBN<T> dw1x1;                       // 1x1 depthwise, padding 0
    std::optional<BNParams<T>> identity_bn;  // present iff stride == 1

    int channels() const { return dw3x3.conv.out_ch; }
    int stride() const { return dw3x3.conv.stride; }

    void validate() const {
        const auto& c3 = dw3x3.conv;
        const auto& c1 = dw1x1.conv;
        c3.validate();
        c1.validate();
        if (c3.kh != 3 || c3.kw != 3 || c3.padding != 1)
            throw std::invalid_argument("RepBranchSet: dw3x3 must be 3x3 with padding 1");
        if (c1.kh != 1 || c1.kw != 1 || c1.padding != 0)
            throw std::invalid_argument("RepBranchSet: dw1x1 must be 1x1 with padding 0");
        if (c3.groups != c3.out_ch || c3.in_ch_per_group != 1 || c1.groups != c1.out_ch ||
            c1.in_ch_per_group != 1)
            throw std::invalid_argument("RepBranchSet: branches must be depthwise");
        if (c3.out_ch != c1.out_ch)
            throw std::invalid_argument("RepBranchSet: branch channel counts differ");
        if (c3.stride != c1.stride)
            throw std::invalid_argument("RepBranchSet: branch strides differ");
        if ((c3.stride == 1) != identity_bn.has_value())
            throw std::invalid_argument(
                "RepBranchSet: identity branch present iff stride == 1");
        dw3x3.bn.validate();
        dw1x1.bn.validate();
        if (dw3x3.bn.channels() != c3.out_ch || dw1x1.bn.channels() != c1.out_ch)
            throw std::invalid_argument("RepBranchSet: BN channel mismatch");
        if (identity_bn && identity_bn->channels() != c3.out_ch)
            throw std::invalid_argument("RepBranchSet: identity BN channel mismatch");
    }
};

template <typename T>
struct SEParams {
    ConvParams<T> reduce;  // 1x1, c -> c/r
    ConvParams<T> expand;  // 1x1, c/r -> c
    int reduction_ratio = 4;
};

// Folds inference-mode BN into the preceding convolution:
//   W' = W * gamma / sqrt(var + eps), b' = beta + (b - mean) * gamma / sqrt(var + eps)
template <typename T>
inline ConvParams<T> fuse_conv_bn(const ConvParams<T>& conv, const BNParams<T>& bn) {
    conv.validate();
    bn.validate();
    if (conv.out_ch != bn.channels())
        throw std::invalid_argument("fuse_conv_bn: conv out_ch " + std::to_string(conv.out_ch) +
                                    " != bn channels " + std::to_string(bn.channels()));
    ConvParams<T> fused = conv;
    const std::size_t per_oc = static_cast<std::size_t>(conv.in_ch_per_group) * conv.kh * conv.kw;
    for (int oc = 0; oc < conv.out_ch; ++oc) {
        const T scale = bn.gamma[oc] / std::sqrt(bn.running_var[oc] + bn.eps);
        for (std::size_t i = 0; i < per_oc; ++i) fused.weights[oc * per_oc + i] *= scale;
        fused.bias[oc] = bn.beta[oc] + (conv.bias[oc] - bn.running_mean[oc]) * scale;
    }
    return fused;
}

// Collapses the three training branches into one 3x3 depthwise convolution.
template <typename T>
inline ConvParams<T> fuse_rep_branches(const RepBranchSet<T>& branches) {
    branches.validate();
    const int c = branches.channels();

    ConvParams<T> fused = fuse_conv_bn(branches.dw3x3.conv, branches.dw3x3.bn);

    // 1x1 branch embeds at the kernel center
    const ConvParams<T> f1 = fuse_conv_bn(branches.dw1x1.conv, branches.dw1x1.bn);
    for (int oc = 0; oc < c; ++oc) {
        fused.weight(oc, 0, 1, 1) += f1.weight(oc, 0, 0, 0);
        fused.bias[oc] += f1.bias[oc];
    }

    if (branches.identity_bn) {
        // identity branch as a center-one 3x3 depthwise kernel, BN folded
        ConvParams<T> id;
        id.out_ch = c;
        id.in_ch_per_group = 1;
        id.kh = id.kw = 3;
        id.stride = 1;
        id.padding = 1;
        id.groups = c;
        id.weights.assign(static_cast<std::size_t>(c) * 9, T(0));
        id.bias.assign(c, T(0));
        for (int oc = 0; oc < c; ++oc) id.weight(oc, 0, 1, 1) = T(1);
        const ConvParams<T> fid = fuse_conv_bn(id, *branches.identity_bn);
        for (int oc = 0; oc < c; ++oc) {
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx)
                    fused.weight(oc, 0, ky, kx) += fid.weight(oc, 0, ky, kx);
            fused.bias[oc] += fid.bias[oc];
        }
    }
    return fused;
}

// Sum of the training branches; the dense reference the fused kernel must match.
template <typename T>
inline Tensor<T> rep_branch_forward(const Tensor<T>& x, const RepBranchSet<T>& branches) {
    branches.validate();
    Tensor<T> out = batchnorm_apply(conv2d(x, branches.dw3x3.conv), branches.dw3x3.bn);
    const Tensor<T> b1 = batchnorm_apply(conv2d(x, branches.dw1x1.conv), branches.dw1x1.bn);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b1.data[i];
    if (branches.identity_bn) {
        const Tensor<T> bid = batchnorm_apply(x, *branches.identity_bn);
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bid.data[i];
    }
    return out;
}

template <typename T>
inline Tensor<T> se_forward(const Tensor<T>& input, const SEParams<T>& se) {
    if (se.reduce.in_ch() != input.c)
        throw std::invalid_argument("se_forward: reduce expects " +
                                    std::to_string(se.reduce.in_ch()) + " channels, input has " +
                                    std::to_string(input.c));
    if (se.expand.out_ch != input.c)
        throw std::invalid_argument("se_forward: expand emits " + std::to_string(se.expand.out_ch) +
                                    " channels, input has " + std::to_string(input.c));
    Tensor<T> gate = global_avg_pool(input);
    gate = activation(conv2d(gate, se.reduce), Activation::Relu);
    gate = activation(conv2d(gate, se.expand), Activation::Sigmoid);
    Tensor<T> out = input;
    for (int in = 0; in < input.n; ++in)
        for (int ic = 0; ic < input.c; ++ic) {
            const T s = gate.at(in, ic, 0, 0);
            for (int iy = 0; iy < input.h; ++iy)
                for (int ix = 0; ix < input.w; ++ix) out.at(in, ic, iy, ix) *= s;
        }
    return out;
}

enum class RunMode { TrainForm, DeployForm };

template <typename T>
struct RepVitBlock {
    std::optional<RepBranchSet<T>> branches;     // train form token mixer
    std::optional<ConvParams<T>> fused_token;    // deploy form token mixer
    std::optional<SEParams<T>> se;
    ConvParams<T> ffn_expand;   // 1x1, c -> c*e
    ConvParams<T> ffn_project;  // 1x1, c*e -> c
};

template <typename T>
inline Tensor<T> repvit_block_forward(const Tensor<T>& x, const RepVitBlock<T>& block,
                                      RunMode mode) {
    Tensor<T> mixed;
    if (mode == RunMode::TrainForm) {
        if (!block.branches)
            throw std::invalid_argument("repvit_block_forward: train form needs branch weights");
        mixed = rep_branch_forward(x, *block.branches);
    } else {
        if (!block.fused_token)
            throw std::invalid_argument("repvit_block_forward: deploy form needs fused weights");
        mixed = conv2d(x, *block.fused_token);
    }
    if (block.se) mixed = se_forward(mixed, *block.se);

    const bool residual = mixed.same_shape(x);
    Tensor<T> t = mixed;
    if (residual)
        for (std::size_t i = 0; i < t.size(); ++i) t.data[i] += x.data[i];

    Tensor<T> f = activation(conv2d(t, block.ffn_expand), Activation::Gelu);
    f = conv2d(f, block.ffn_project);
    for (std::size_t i = 0; i < f.size(); ++i) f.data[i] += t.data[i];
    return f;
}

template <typename T>
struct Downsample {
    ConvParams<T> dw;  // 3x3 depthwise, stride 2
    ConvParams<T> pw;  // 1x1 pointwise, channel change
};

template <typename T>
inline Tensor<T> downsample_forward(const Tensor<T>& x, const Downsample<T>& d) {
    return conv2d(activation(conv2d(x, d.dw), Activation::Gelu), d.pw);
}

struct BackboneConfig {
    std::array<int, 4> stage_channels{16, 32, 64, 128};
    std::array<int, 4> stage_depths{2, 2, 4, 2};
    int ffn_expansion = 2;
    int input_channels = 3;
    int se_reduction = 4;
    int se_phase = 0;  // block index parity carrying SE within each stage

    void validate() const {
        for (int i = 0; i < 4; ++i) {
            if (stage_depths[i] < 1)
                throw std::invalid_argument("BackboneConfig: stage depth must be >= 1");
            if (stage_channels[i] <= 0 || stage_channels[i] % se_reduction != 0)
                throw std::invalid_argument(
                    "BackboneConfig: stage channels must be positive multiples of se_reduction");
            if (i > 0 && stage_channels[i] < stage_channels[i - 1])
                throw std::invalid_argument("BackboneConfig: channels must be nondecreasing");
        }
        if (ffn_expansion < 1) throw std::invalid_argument("BackboneConfig: ffn_expansion >= 1");
        if (input_channels < 1) throw std::invalid_argument("BackboneConfig: input_channels >= 1");
        if (se_phase != 0 && se_phase != 1)
            throw std::invalid_argument("BackboneConfig: se_phase must be 0 or 1");
    }
};

template <typename T>
struct RepVitWeights {
    BackboneConfig cfg;
    RunMode form = RunMode::TrainForm;
    ConvParams<T> stem_conv1, stem_conv2;  // both 3x3 stride 2
    std::array<std::vector<RepVitBlock<T>>, 4> stages;
    std::array<Downsample<T>, 3> downsamples;
};

template <typename T>
struct FeaturePyramid {
    std::vector<Tensor<T>> levels;  // strides {4, 8, 16, 32} relative to input
};

namespace detail {

template <typename T>
inline ConvParams<T> make_conv(Rng& rng, int out_ch, int in_ch_per_group, int k, int stride,
                               int padding, int groups) {
    ConvParams<T> p;
    p.out_ch = out_ch;
    p.in_ch_per_group = in_ch_per_group;
    p.kh = p.kw = k;
    p.stride = stride;
    p.padding = padding;
    p.groups = groups;
    const double scale = 1.0 / std::sqrt(static_cast<double>(in_ch_per_group) * k * k);
    p.weights.resize(static_cast<std::size_t>(out_ch) * in_ch_per_group * k * k);
    for (auto& v : p.weights) v = static_cast<T>(rng.uniform(-0.5, 0.5) * scale);
    p.bias.resize(out_ch);
    for (auto& v : p.bias) v = static_cast<T>(rng.uniform(-0.5, 0.5) * scale);
    return p;
}

template <typename T>
inline BNParams<T> make_bn(Rng& rng, int c, bool randomize_stats) {
    BNParams<T> bn = BNParams<T>::identity(c);
    bn.eps = T(1e-5);
    if (randomize_stats) {
        for (int i = 0; i < c; ++i) {
            bn.gamma[i] = static_cast<T>(rng.uniform(0.5, 1.5));
            bn.beta[i] = static_cast<T>(rng.uniform(-0.5, 0.5));
            bn.running_mean[i] = static_cast<T>(rng.uniform(-0.5, 0.5));
            bn.running_var[i] = static_cast<T>(rng.uniform(0.25, 2.0));
        }
    }
    return bn;
}

}  // namespace detail

// Seeded toy initialization: uniform [-0.5, 0.5] scaled by 1/sqrt(fan_in).
template <typename T>
inline RepVitBlock<T> make_random_block(Rng& rng, int channels, int ffn_expansion, bool with_se,
                                        int se_reduction, bool randomize_bn_stats = true) {
    RepVitBlock<T> b;
    RepBranchSet<T> br;
    br.dw3x3.conv = detail::make_conv<T>(rng, channels, 1, 3, 1, 1, channels);
    br.dw3x3.bn = detail::make_bn<T>(rng, channels, randomize_bn_stats);
    br.dw1x1.conv = detail::make_conv<T>(rng, channels, 1, 1, 1, 0, channels);
    br.dw1x1.bn = detail::make_bn<T>(rng, channels, randomize_bn_stats);
    br.identity_bn = detail::make_bn<T>(rng, channels, randomize_bn_stats);
    b.branches = std::move(br);
    if (with_se) {
        SEParams<T> se;
        se.reduction_ratio = se_reduction;
        const int mid = channels / se_reduction;
        se.reduce = detail::make_conv<T>(rng, mid, channels, 1, 1, 0, 1);
        se.expand = detail::make_conv<T>(rng, channels, mid, 1, 1, 0, 1);
        b.se = std::move(se);
    }
    b.ffn_expand = detail::make_conv<T>(rng, channels * ffn_expansion, channels, 1, 1, 0, 1);
    b.ffn_project = detail::make_conv<T>(rng, channels, channels * ffn_expansion, 1, 1, 0, 1);
    return b;
}

template <typename T>
inline RepVitWeights<T> init_backbone(const BackboneConfig& cfg, std::uint64_t seed,
                                      bool randomize_bn_stats = false) {
    cfg.validate();
    Rng rng(seed);
    RepVitWeights<T> w;
    w.cfg = cfg;
    w.form = RunMode::TrainForm;
    const int c0 = cfg.stage_channels[0];
    const int stem_mid = std::max(1, c0 / 2);
    w.stem_conv1 = detail::make_conv<T>(rng, stem_mid, cfg.input_channels, 3, 2, 1, 1);
    w.stem_conv2 = detail::make_conv<T>(rng, c0, stem_mid, 3, 2, 1, 1);
    for (int s = 0; s < 4; ++s) {
        const int c = cfg.stage_channels[s];
        for (int d = 0; d < cfg.stage_depths[s]; ++d) {
            const bool with_se = (d % 2) == cfg.se_phase;
            w.stages[s].push_back(make_random_block<T>(rng, c, cfg.ffn_expansion, with_se,
                                                       cfg.se_reduction, randomize_bn_stats));
        }
        if (s < 3) {
            w.downsamples[s].dw = detail::make_conv<T>(rng, c, 1, 3, 2, 1, c);
            w.downsamples[s].pw =
                detail::make_conv<T>(rng, cfg.stage_channels[s + 1], c, 1, 1, 0, 1);
        }
    }
    return w;
}

template <typename T>
inline std::size_t param_count(const ConvParams<T>& p) {
    return p.weights.size() + p.bias.size();
}

template <typename T>
inline std::size_t param_count(const BNParams<T>& p) {
    return p.gamma.size() * 4 + 1;  // gamma, beta, mean, var, eps
}

template <typename T>
inline std::size_t param_count(const RepVitBlock<T>& b) {
    std::size_t n = param_count(b.ffn_expand) + param_count(b.ffn_project);
    if (b.branches) {
        n += param_count(b.branches->dw3x3.conv) + param_count(b.branches->dw3x3.bn);
        n += param_count(b.branches->dw1x1.conv) + param_count(b.branches->dw1x1.bn);
        if (b.branches->identity_bn) n += param_count(*b.branches->identity_bn);
    }
    if (b.fused_token) n += param_count(*b.fused_token);
    if (b.se) n += param_count(b.se->reduce) + param_count(b.se->expand);
    return n;
}

template <typename T>
inline std::size_t param_count(const RepVitWeights<T>& w) {
    std::size_t n = param_count(w.stem_conv1) + param_count(w.stem_conv2);
    for (const auto& stage : w.stages)
        for (const auto& b : stage) n += param_count(b);
    for (const auto& d : w.downsamples) n += param_count(d.dw) + param_count(d.pw);
    return n;
}

template <typename T>
inline FeaturePyramid<T> backbone_forward(const Tensor<T>& input, const RepVitWeights<T>& w,
                                          RunMode mode) {
    w.cfg.validate();
    if (input.c != w.cfg.input_channels)
        throw std::invalid_argument("backbone_forward: input channels " + std::to_string(input.c) +
                                    " != config input_channels " +
                                    std::to_string(w.cfg.input_channels));
    if (input.h % 32 != 0 || input.w % 32 != 0)
        throw std::invalid_argument("backbone_forward: spatial dims " + std::to_string(input.h) +
                                    "x" + std::to_string(input.w) + " must be divisible by 32");
    if (mode == RunMode::DeployForm && w.form != RunMode::DeployForm)
        throw std::invalid_argument("backbone_forward: weights are not in deploy form");

    Tensor<T> x = activation(conv2d(input, w.stem_conv1), Activation::Gelu);
    x = activation(conv2d(x, w.stem_conv2), Activation::Gelu);

    FeaturePyramid<T> pyr;
    for (int s = 0; s < 4; ++s) {
        for (const auto& block : w.stages[s]) x = repvit_block_forward(x, block, mode);
        pyr.levels.push_back(x);
        if (s < 3) x = downsample_forward(x, w.downsamples[s]);
    }
    return pyr;
}

// Train-form -> deploy-form weight conversion. Rejects double fusion.
template <typename T>
inline RepVitWeights<T> reparam_backbone(const RepVitWeights<T>& train) {
    if (train.form == RunMode::DeployForm)
        throw std::invalid_argument("reparam_backbone: weights are already in deploy form");
    RepVitWeights<T> deploy = train;
    deploy.form = RunMode::DeployForm;
    for (auto& stage : deploy.stages) {
        for (auto& block : stage) {
            if (!block.branches)
                throw std::invalid_argument("reparam_backbone: block missing branch weights");
            block.fused_token = fuse_rep_branches(*block.branches);
            block.branches.reset();
        }
    }
    return deploy;
}

// 1x1 projection followed by a channel-wise split.
template <typename T>
inline std::vector<Tensor<T>> cb_linear(const Tensor<T>& feature, const ConvParams<T>& proj,
                                        const std::vector<int>& split_sizes) {
    if (proj.kh != 1 || proj.kw != 1)
        throw std::invalid_argument("cb_linear: projection must be 1x1");
    int total = 0;
    for (int s : split_sizes) {
        if (s <= 0) throw std::invalid_argument("cb_linear: split sizes must be positive");
        total += s;
    }
    if (total != proj.out_ch)
        throw std::invalid_argument("cb_linear: split sizes sum to " + std::to_string(total) +
                                    " but projection emits " + std::to_string(proj.out_ch));
    const Tensor<T> projected = conv2d(feature, proj);
    std::vector<Tensor<T>> outs;
    int base = 0;
    for (int s : split_sizes) {
        Tensor<T> part(projected.n, s, projected.h, projected.w);
        for (int in = 0; in < projected.n; ++in)
            for (int ic = 0; ic < s; ++ic)
                for (int iy = 0; iy < projected.h; ++iy)
                    for (int ix = 0; ix < projected.w; ++ix)
                        part.at(in, ic, iy, ix) = projected.at(in, base + ic, iy, ix);
        outs.push_back(std::move(part));
        base += s;
    }
    return outs;
}

// Resize every feature (nearest) to the target's spatial size and sum.
template <typename T>
inline Tensor<T> cb_fuse(const std::vector<Tensor<T>>& features, std::size_t target_index) {
    if (features.empty()) throw std::invalid_argument("cb_fuse: empty feature list");
    if (target_index >= features.size())
        throw std::invalid_argument("cb_fuse: target index out of range");
    const Tensor<T>& target = features[target_index];
    Tensor<T> out(target.n, target.c, target.h, target.w);
    for (const Tensor<T>& f : features) {
        if (f.c != target.c)
            throw std::invalid_argument("cb_fuse: channel mismatch (" + std::to_string(f.c) +
                                        " vs " + std::to_string(target.c) + ")");
        Tensor<T> aligned;
        if (f.h == target.h && f.w == target.w) {
            aligned = f;
        } else if (f.h > target.h) {
            if (f.h % target.h != 0 || f.w % target.w != 0 || f.h / target.h != f.w / target.w)
                throw std::invalid_argument("cb_fuse: non-integral downsample factor");
            aligned = resize_nearest_down(f, f.h / target.h);
        } else {
            if (target.h % f.h != 0 || target.w % f.w != 0 || target.h / f.h != target.w / f.w)
                throw std::invalid_argument("cb_fuse: non-integral upsample factor");
            aligned = resize_nearest_up(f, target.h / f.h);
        }
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += aligned.data[i];
    }
    return out;
}

}  // namespace pk
