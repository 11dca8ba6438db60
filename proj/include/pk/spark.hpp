#pragma once

// Sparse masked modeling: per-patch masking, sparse convolution that only
// produces values at kept positions, hierarchical OR-pooled mask propagation,
// densification with a learned per-channel embedding, masked reconstruction
// loss, and a gradient-free (SPSA) toy pretraining loop.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pk/repvit.hpp"
#include "pk/rng.hpp"
#include "pk/tensor.hpp"

namespace pk {

struct MaskGrid {
    int patch_size = 32;
    int gh = 0, gw = 0;
    std::vector<std::uint8_t> grid;  // true = KEPT (unmasked)
    double mask_ratio = 0.0;
    std::uint64_t seed = 0;

    bool kept(int gy, int gx) const { return grid[static_cast<std::size_t>(gy) * gw + gx] != 0; }
    void set(int gy, int gx, bool keep) {
        grid[static_cast<std::size_t>(gy) * gw + gx] = keep ? 1 : 0;
    }
    int kept_count() const {
        int n = 0;
        for (auto v : grid) n += v ? 1 : 0;
        return n;
    }
    double kept_fraction() const {
        return grid.empty() ? 1.0 : static_cast<double>(kept_count()) / grid.size();
    }
};

struct MaskEmbedding {
    std::vector<double> values;  // one per channel
};

inline MaskGrid generate_mask(int h, int w, int patch_size, double mask_ratio,
                              std::uint64_t seed) {
    if (patch_size <= 0) throw std::invalid_argument("generate_mask: patch_size must be positive");
    if (h % patch_size != 0 || w % patch_size != 0)
        throw std::invalid_argument("generate_mask: image dims " + std::to_string(h) + "x" +
                                    std::to_string(w) + " not divisible by patch_size " +
                                    std::to_string(patch_size));
    if (mask_ratio < 0 || mask_ratio > 1)
        throw std::invalid_argument("generate_mask: mask_ratio outside [0, 1]");
    MaskGrid m;
    m.patch_size = patch_size;
    m.gh = h / patch_size;
    m.gw = w / patch_size;
    m.mask_ratio = mask_ratio;
    m.seed = seed;
    m.grid.resize(static_cast<std::size_t>(m.gh) * m.gw);
    Rng rng(seed);
    for (auto& cell : m.grid) cell = rng.bernoulli(mask_ratio) ? 0 : 1;
    return m;
}

// OR pooling: a coarser cell stays kept if any covered cell is kept.
inline MaskGrid mask_downsample(const MaskGrid& mask, int factor) {
    if (factor < 1) throw std::invalid_argument("mask_downsample: factor must be >= 1");
    if (factor == 1) return mask;
    if (mask.gh % factor != 0 || mask.gw % factor != 0)
        throw std::invalid_argument("mask_downsample: grid " + std::to_string(mask.gh) + "x" +
                                    std::to_string(mask.gw) + " not divisible by factor " +
                                    std::to_string(factor));
    MaskGrid out = mask;
    out.gh = mask.gh / factor;
    out.gw = mask.gw / factor;
    out.patch_size = mask.patch_size * factor;
    out.grid.assign(static_cast<std::size_t>(out.gh) * out.gw, 0);
    for (int gy = 0; gy < mask.gh; ++gy)
        for (int gx = 0; gx < mask.gw; ++gx)
            if (mask.kept(gy, gx)) out.set(gy / factor, gx / factor, true);
    return out;
}

namespace detail {

// Maps the grid onto a feature map of the given spatial size. Feature maps
// coarser than the grid get an OR-pooled copy.
inline MaskGrid mask_for_resolution(const MaskGrid& mask, int h, int w) {
    if (h % mask.gh == 0 && w % mask.gw == 0 && h / mask.gh == w / mask.gw) return mask;
    if (mask.gh % h == 0 && mask.gw % w == 0 && mask.gh / h == mask.gw / w)
        return mask_downsample(mask, mask.gh / h);
    throw std::invalid_argument("mask/feature resolution mismatch: grid " +
                                std::to_string(mask.gh) + "x" + std::to_string(mask.gw) +
                                " vs feature " + std::to_string(h) + "x" + std::to_string(w));
}

inline bool pos_kept(const MaskGrid& grid_at_res, int h, int w, int y, int x) {
    const int cell_h = h / grid_at_res.gh;
    const int cell_w = w / grid_at_res.gw;
    return grid_at_res.kept(y / cell_h, x / cell_w);
}

}  // namespace detail

template <typename T>
inline Tensor<T> apply_mask(const Tensor<T>& input, const MaskGrid& mask, T fill = T(0)) {
    const MaskGrid m = detail::mask_for_resolution(mask, input.h, input.w);
    Tensor<T> out = input;
    for (int in = 0; in < input.n; ++in)
        for (int ic = 0; ic < input.c; ++ic)
            for (int iy = 0; iy < input.h; ++iy)
                for (int ix = 0; ix < input.w; ++ix)
                    if (!detail::pos_kept(m, input.h, input.w, iy, ix))
                        out.at(in, ic, iy, ix) = fill;
    return out;
}

// Reference semantics: zero-fill masked inputs, dense conv, re-mask the output
// at its own resolution. The implementation skips masked output positions
// instead of computing and discarding them; tests pin it to the dense oracle.
template <typename T>
inline Tensor<T> sparse_conv2d(const Tensor<T>& input, const ConvParams<T>& p,
                               const MaskGrid& mask) {
    p.validate();
    if (p.stride != 1 && p.stride != 2)
        throw std::invalid_argument("sparse_conv2d: stride must be 1 or 2");
    const Tensor<T> zeroed = apply_mask(input, mask);
    const int oh = (input.h + 2 * p.padding - p.kh) / p.stride + 1;
    const int ow = (input.w + 2 * p.padding - p.kw) / p.stride + 1;
    const MaskGrid out_mask = detail::mask_for_resolution(mask, oh, ow);

    const int oc_per_group = p.out_ch / p.groups;
    Tensor<T> out(input.n, p.out_ch, oh, ow);
    for (int in = 0; in < input.n; ++in)
        for (int oc = 0; oc < p.out_ch; ++oc) {
            const int g = oc / oc_per_group;
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    if (!detail::pos_kept(out_mask, oh, ow, oy, ox)) continue;
                    T acc = p.bias[oc];
                    for (int icg = 0; icg < p.in_ch_per_group; ++icg) {
                        const int ic = g * p.in_ch_per_group + icg;
                        for (int ky = 0; ky < p.kh; ++ky) {
                            const int iy = oy * p.stride + ky - p.padding;
                            if (iy < 0 || iy >= input.h) continue;
                            for (int kx = 0; kx < p.kw; ++kx) {
                                const int ix = ox * p.stride + kx - p.padding;
                                if (ix < 0 || ix >= input.w) continue;
                                acc += p.weight(oc, icg, ky, kx) * zeroed.at(in, ic, iy, ix);
                            }
                        }
                    }
                    out.at(in, oc, oy, ox) = acc;
                }
        }
    return out;
}

// Kept positions pass through; masked positions take the per-channel embedding.
template <typename T>
inline Tensor<T> densify(const Tensor<T>& features, const MaskGrid& mask,
                         const MaskEmbedding& emb) {
    if (static_cast<int>(emb.values.size()) != features.c)
        throw std::invalid_argument("densify: embedding length " +
                                    std::to_string(emb.values.size()) + " != channels " +
                                    std::to_string(features.c));
    const MaskGrid m = detail::mask_for_resolution(mask, features.h, features.w);
    Tensor<T> out = features;
    for (int in = 0; in < features.n; ++in)
        for (int ic = 0; ic < features.c; ++ic)
            for (int iy = 0; iy < features.h; ++iy)
                for (int ix = 0; ix < features.w; ++ix)
                    if (!detail::pos_kept(m, features.h, features.w, iy, ix))
                        out.at(in, ic, iy, ix) = static_cast<T>(emb.values[ic]);
    return out;
}

// MSE restricted to masked positions. With per_patch_norm, every target patch
// is standardized per channel (mean 0, var 1, eps 1e-6) before the residual.
template <typename T>
inline double masked_recon_loss(const Tensor<T>& pred, const Tensor<T>& target,
                                const MaskGrid& mask, bool per_patch_norm) {
    if (!pred.same_shape(target))
        throw std::invalid_argument("masked_recon_loss: pred/target shape mismatch");
    const MaskGrid m = detail::mask_for_resolution(mask, pred.h, pred.w);
    const int cell_h = pred.h / m.gh;
    const int cell_w = pred.w / m.gw;

    double sum = 0.0;
    std::size_t count = 0;
    for (int in = 0; in < pred.n; ++in)
        for (int ic = 0; ic < pred.c; ++ic)
            for (int gy = 0; gy < m.gh; ++gy)
                for (int gx = 0; gx < m.gw; ++gx) {
                    if (m.kept(gy, gx)) continue;
                    double mean = 0.0, var = 0.0;
                    if (per_patch_norm) {
                        for (int py = 0; py < cell_h; ++py)
                            for (int px = 0; px < cell_w; ++px)
                                mean += target.at(in, ic, gy * cell_h + py, gx * cell_w + px);
                        mean /= cell_h * cell_w;
                        for (int py = 0; py < cell_h; ++py)
                            for (int px = 0; px < cell_w; ++px) {
                                const double d =
                                    target.at(in, ic, gy * cell_h + py, gx * cell_w + px) - mean;
                                var += d * d;
                            }
                        var /= cell_h * cell_w;
                    }
                    const double denom = per_patch_norm ? std::sqrt(var + 1e-6) : 1.0;
                    for (int py = 0; py < cell_h; ++py)
                        for (int px = 0; px < cell_w; ++px) {
                            const int iy = gy * cell_h + py, ix = gx * cell_w + px;
                            const double t =
                                per_patch_norm ? (target.at(in, ic, iy, ix) - mean) / denom
                                               : static_cast<double>(target.at(in, ic, iy, ix));
                            const double d = static_cast<double>(pred.at(in, ic, iy, ix)) - t;
                            sum += d * d;
                            ++count;
                        }
                }
    return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

// Backbone forward with every convolution run sparsely against the mask.
template <typename T>
inline FeaturePyramid<T> sparse_backbone_forward(const Tensor<T>& input,
                                                 const RepVitWeights<T>& w, RunMode mode,
                                                 const MaskGrid& mask) {
    w.cfg.validate();
    if (input.h % 32 != 0 || input.w % 32 != 0)
        throw std::invalid_argument("sparse_backbone_forward: spatial dims must be divisible by 32");

    auto conv = [&mask](const Tensor<T>& x, const ConvParams<T>& p) {
        return sparse_conv2d(x, p, mask);
    };
    auto block_fwd = [&](const Tensor<T>& x, const RepVitBlock<T>& block) {
        Tensor<T> mixed;
        if (mode == RunMode::TrainForm) {
            if (!block.branches)
                throw std::invalid_argument("sparse_backbone_forward: missing branch weights");
            const auto& br = *block.branches;
            mixed = batchnorm_apply(conv(x, br.dw3x3.conv), br.dw3x3.bn);
            const Tensor<T> b1 = batchnorm_apply(conv(x, br.dw1x1.conv), br.dw1x1.bn);
            for (std::size_t i = 0; i < mixed.size(); ++i) mixed.data[i] += b1.data[i];
            if (br.identity_bn) {
                const Tensor<T> bid = batchnorm_apply(x, *br.identity_bn);
                for (std::size_t i = 0; i < mixed.size(); ++i) mixed.data[i] += bid.data[i];
            }
        } else {
            if (!block.fused_token)
                throw std::invalid_argument("sparse_backbone_forward: missing fused weights");
            mixed = conv(x, *block.fused_token);
        }
        if (block.se) {
            Tensor<T> gate = global_avg_pool(mixed);
            gate = activation(conv2d(gate, block.se->reduce), Activation::Relu);
            gate = activation(conv2d(gate, block.se->expand), Activation::Sigmoid);
            for (int in = 0; in < mixed.n; ++in)
                for (int ic = 0; ic < mixed.c; ++ic)
                    for (int iy = 0; iy < mixed.h; ++iy)
                        for (int ix = 0; ix < mixed.w; ++ix)
                            mixed.at(in, ic, iy, ix) *= gate.at(in, ic, 0, 0);
        }
        Tensor<T> t = mixed;
        for (std::size_t i = 0; i < t.size(); ++i) t.data[i] += x.data[i];
        Tensor<T> f = activation(conv(t, block.ffn_expand), Activation::Gelu);
        f = conv(f, block.ffn_project);
        for (std::size_t i = 0; i < f.size(); ++i) f.data[i] += t.data[i];
        return f;
    };

    Tensor<T> x = activation(conv(input, w.stem_conv1), Activation::Gelu);
    x = activation(conv(x, w.stem_conv2), Activation::Gelu);

    FeaturePyramid<T> pyr;
    for (int s = 0; s < 4; ++s) {
        for (const auto& block : w.stages[s]) x = block_fwd(x, block);
        pyr.levels.push_back(x);
        if (s < 3) {
            x = conv(activation(conv(x, w.downsamples[s].dw), Activation::Gelu),
                     w.downsamples[s].pw);
        }
    }
    return pyr;
}

template <typename T>
struct SparkDecoder {
    ConvParams<T> conv_a;    // c4 -> mid, 3x3
    ConvParams<T> conv_b;    // mid -> mid, 3x3
    ConvParams<T> conv_out;  // mid -> image channels, 3x3
};

template <typename T>
inline SparkDecoder<T> init_spark_decoder(const BackboneConfig& cfg, int mid, std::uint64_t seed) {
    Rng rng(seed);
    SparkDecoder<T> d;
    d.conv_a = detail::make_conv<T>(rng, mid, cfg.stage_channels[3], 3, 1, 1, 1);
    d.conv_b = detail::make_conv<T>(rng, mid, mid, 3, 1, 1, 1);
    d.conv_out = detail::make_conv<T>(rng, cfg.input_channels, mid, 3, 1, 1, 1);
    return d;
}

// Sparse encode, densify every pyramid level, decode the deepest level back to
// input resolution (upsample factors 4, 4, 2 undo the stride-32 reduction).
template <typename T>
inline Tensor<T> spark_encode_decode(const Tensor<T>& image, const MaskGrid& mask,
                                     const RepVitWeights<T>& encoder,
                                     const SparkDecoder<T>& decoder,
                                     const std::vector<MaskEmbedding>& level_embeddings) {
    FeaturePyramid<T> pyr = sparse_backbone_forward(image, encoder, encoder.form, mask);
    if (level_embeddings.size() != pyr.levels.size())
        throw std::invalid_argument("spark_encode_decode: need one embedding per pyramid level");
    for (std::size_t l = 0; l < pyr.levels.size(); ++l)
        pyr.levels[l] = densify(pyr.levels[l], mask, level_embeddings[l]);

    Tensor<T> x = activation(conv2d(resize_nearest_up(pyr.levels[3], 4), decoder.conv_a),
                             Activation::Gelu);
    x = activation(conv2d(resize_nearest_up(x, 4), decoder.conv_b), Activation::Gelu);
    return conv2d(resize_nearest_up(x, 2), decoder.conv_out);
}

// ---------------------------------------------------------------------------
// Micro masked autoencoder + SPSA pretraining demo

template <typename T>
struct MicroSparkModel {
    ConvParams<T> enc1, enc2;  // 3x3 stride 2 each
    MaskEmbedding emb;         // at the stride-4 bottleneck
    ConvParams<T> dec1, dec2;  // 3x3 stride 1, each preceded by 2x upsample

    std::size_t parameter_count() const {
        return enc1.weights.size() + enc1.bias.size() + enc2.weights.size() + enc2.bias.size() +
               emb.values.size() + dec1.weights.size() + dec1.bias.size() + dec2.weights.size() +
               dec2.bias.size();
    }

    std::vector<double> pack() const {
        std::vector<double> v;
        auto push_conv = [&v](const ConvParams<T>& p) {
            for (T x : p.weights) v.push_back(x);
            for (T x : p.bias) v.push_back(x);
        };
        push_conv(enc1);
        push_conv(enc2);
        for (double x : emb.values) v.push_back(x);
        push_conv(dec1);
        push_conv(dec2);
        return v;
    }

    void unpack(const std::vector<double>& v) {
        std::size_t i = 0;
        auto pull_conv = [&v, &i](ConvParams<T>& p) {
            for (T& x : p.weights) x = static_cast<T>(v[i++]);
            for (T& x : p.bias) x = static_cast<T>(v[i++]);
        };
        pull_conv(enc1);
        pull_conv(enc2);
        for (double& x : emb.values) x = v[i++];
        pull_conv(dec1);
        pull_conv(dec2);
        if (i != v.size())
            throw std::invalid_argument("MicroSparkModel::unpack: parameter count mismatch");
    }
};

template <typename T>
inline MicroSparkModel<T> init_micro_model(int in_ch, int c1, int c2, std::uint64_t seed) {
    Rng rng(seed);
    MicroSparkModel<T> m;
    m.enc1 = detail::make_conv<T>(rng, c1, in_ch, 3, 2, 1, 1);
    m.enc2 = detail::make_conv<T>(rng, c2, c1, 3, 2, 1, 1);
    m.emb.values.resize(c2);
    for (double& v : m.emb.values) v = rng.uniform(-0.1, 0.1);
    m.dec1 = detail::make_conv<T>(rng, c1, c2, 3, 1, 1, 1);
    m.dec2 = detail::make_conv<T>(rng, in_ch, c1, 3, 1, 1, 1);
    return m;
}

template <typename T>
inline Tensor<T> micro_model_forward(const MicroSparkModel<T>& m, const Tensor<T>& image,
                                     const MaskGrid& mask) {
    Tensor<T> x = activation(sparse_conv2d(image, m.enc1, mask), Activation::Gelu);
    x = activation(sparse_conv2d(x, m.enc2, mask), Activation::Gelu);
    x = densify(x, mask, m.emb);
    x = activation(conv2d(resize_nearest_up(x, 2), m.dec1), Activation::Gelu);
    return conv2d(resize_nearest_up(x, 2), m.dec2);
}

struct PretrainOptions {
    int patch_size = 8;
    double mask_ratio = 0.6;
    // raw targets: two-point gradient estimates descend much more reliably on
    // the offset-bearing demo images than on standardized patches
    bool per_patch_norm = false;
    double step_base = 0.05;
    double step_decay = 0.999;
    double perturbation = 0.01;
    double update_clip = 1.0;  // bound on |L+ - L-| / (2 * perturbation)
    std::size_t max_parameters = 2000;
};

// Simultaneous-perturbation stochastic approximation on the masked
// reconstruction loss; two forward passes per step, no autodiff. Each trace
// entry is the mean of the two probe losses at that step.
template <typename T>
inline std::vector<double> spark_pretrain_toy(MicroSparkModel<T>& model,
                                              const std::vector<Tensor<T>>& images, int steps,
                                              std::uint64_t seed,
                                              const PretrainOptions& opt = {}) {
    if (steps < 1) throw std::invalid_argument("spark_pretrain_toy: steps must be >= 1");
    if (images.empty()) throw std::invalid_argument("spark_pretrain_toy: no images");
    if (model.parameter_count() > opt.max_parameters)
        throw std::invalid_argument("spark_pretrain_toy: parameter budget exceeded (" +
                                    std::to_string(model.parameter_count()) + " > " +
                                    std::to_string(opt.max_parameters) + ")");

    std::vector<MaskGrid> masks;
    for (std::size_t i = 0; i < images.size(); ++i)
        masks.push_back(generate_mask(images[i].h, images[i].w, opt.patch_size, opt.mask_ratio,
                                      seed + 1000 + i));

    Rng rng(seed);
    std::vector<double> theta = model.pack();
    std::vector<double> trace;
    trace.reserve(steps);

    auto eval_at = [&](const std::vector<double>& params, std::size_t img_idx) {
        model.unpack(params);
        const Tensor<T> recon = micro_model_forward(model, images[img_idx], masks[img_idx]);
        return masked_recon_loss(recon, images[img_idx], masks[img_idx], opt.per_patch_norm);
    };

    std::vector<double> plus(theta.size()), minus(theta.size());
    std::vector<int> delta(theta.size());
    for (int t = 0; t < steps; ++t) {
        const std::size_t img_idx = static_cast<std::size_t>(t) % images.size();
        for (std::size_t i = 0; i < theta.size(); ++i) delta[i] = rng.sign();
        for (std::size_t i = 0; i < theta.size(); ++i) {
            plus[i] = theta[i] + opt.perturbation * delta[i];
            minus[i] = theta[i] - opt.perturbation * delta[i];
        }
        const double l_plus = eval_at(plus, img_idx);
        const double l_minus = eval_at(minus, img_idx);
        trace.push_back(0.5 * (l_plus + l_minus));

        const double step = opt.step_base * std::pow(opt.step_decay, t);
        // clipping keeps the two-point estimate from blowing up the iterate
        const double scale = std::clamp((l_plus - l_minus) / (2.0 * opt.perturbation),
                                        -opt.update_clip, opt.update_clip);
        for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= step * scale * delta[i];
    }
    model.unpack(theta);
    return trace;
}

// Deterministic synthetic image set for the CLI demo and tests.
template <typename T>
inline std::vector<Tensor<T>> synthetic_images(int count, int size, std::uint64_t seed) {
    std::vector<Tensor<T>> images;
    Rng rng(seed);
    for (int i = 0; i < count; ++i) {
        Tensor<T> img(1, 1, size, size);
        const double fy = rng.uniform(0.1, 0.5);
        const double fx = rng.uniform(0.1, 0.5);
        const double phase = rng.uniform(0.0, 6.28);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                img.at(0, 0, y, x) =
                    static_cast<T>(0.5 + std::sin(fy * y + phase) * std::cos(fx * x) +
                                   0.25 * std::sin(0.5 * (x + y)));
        images.push_back(std::move(img));
    }
    return images;
}

}  // namespace pk
