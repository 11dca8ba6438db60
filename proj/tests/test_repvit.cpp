#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pk/repvit.hpp"
#include "pk/rng.hpp"
#include "pk/tensor.hpp"

using namespace pk;

namespace {

template <typename T>
Tensor<T> random_tensor(Rng& rng, int n, int c, int h, int w, double lo = -1, double hi = 1) {
    Tensor<T> t(n, c, h, w);
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    REQUIRE(a.same_shape(b));
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
    return m;
}

template <typename T>
double max_rel_diff(const Tensor<T>& a, const Tensor<T>& b) {
    REQUIRE(a.same_shape(b));
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a.data[i], y = b.data[i];
        m = std::max(m, std::abs(x - y) / std::max({std::abs(x), std::abs(y), 1.0}));
    }
    return m;
}

template <typename T>
RepBranchSet<T> random_branches(Rng& rng, int channels) {
    RepBranchSet<T> br;
    br.dw3x3.conv = detail::make_conv<T>(rng, channels, 1, 3, 1, 1, channels);
    br.dw3x3.bn = detail::make_bn<T>(rng, channels, true);
    br.dw1x1.conv = detail::make_conv<T>(rng, channels, 1, 1, 1, 0, channels);
    br.dw1x1.bn = detail::make_bn<T>(rng, channels, true);
    br.identity_bn = detail::make_bn<T>(rng, channels, true);
    return br;
}

}  // namespace

TEST_CASE("fuse_conv_bn hand example") {
    // 1 channel, 1x1 conv with w=2, b=1; BN gamma=3, beta=0.5, mean=1, var=4, eps=0
    ConvParams<double> conv;
    conv.out_ch = conv.in_ch_per_group = conv.kh = conv.kw = 1;
    conv.weights = {2.0};
    conv.bias = {1.0};
    BNParams<double> bn;
    bn.gamma = {3.0};
    bn.beta = {0.5};
    bn.running_mean = {1.0};
    bn.running_var = {4.0};
    bn.eps = 0.0;
    const auto fused = fuse_conv_bn(conv, bn);
    CHECK_THAT(fused.weights[0], Catch::Matchers::WithinAbs(3.0, 1e-15));   // 2*3/2
    CHECK_THAT(fused.bias[0], Catch::Matchers::WithinAbs(0.5, 1e-15));      // 0.5 + (1-1)*1.5
}

TEST_CASE("fuse_conv_bn identity BN leaves the conv untouched") {
    Rng rng(3);
    auto conv = detail::make_conv<double>(rng, 4, 2, 3, 1, 1, 1);
    const auto fused = fuse_conv_bn(conv, BNParams<double>::identity(4));
    CHECK(fused.weights == conv.weights);
    CHECK(fused.bias == conv.bias);
}

TEST_CASE("fuse_conv_bn matches conv-then-BN on 1000 random draws") {
    Rng rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
        const int c_in = 1 + static_cast<int>(rng.below(4));
        const int c_out = 1 + static_cast<int>(rng.below(4));
        auto conv = detail::make_conv<double>(rng, c_out, c_in, 3, 1, 1, 1);
        auto bn = detail::make_bn<double>(rng, c_out, true);
        const auto fused = fuse_conv_bn(conv, bn);
        const auto x = random_tensor<double>(rng, 1, c_in, 5, 5);
        const auto want = batchnorm_apply(conv2d(x, conv), bn);
        const auto got = conv2d(x, fused);
        REQUIRE(max_rel_diff(got, want) <= 1e-12);
    }
}

TEST_CASE("fuse_conv_bn rejects channel mismatch") {
    Rng rng(9);
    auto conv = detail::make_conv<double>(rng, 4, 2, 3, 1, 1, 1);
    REQUIRE_THROWS_AS(fuse_conv_bn(conv, BNParams<double>::identity(3)), std::invalid_argument);
}

TEST_CASE("fuse_rep_branches: identity-only configuration gives a center-one kernel") {
    const int c = 3;
    RepBranchSet<double> br;
    br.dw3x3.conv = ConvParams<double>{};
    br.dw3x3.conv.out_ch = c;
    br.dw3x3.conv.in_ch_per_group = 1;
    br.dw3x3.conv.kh = br.dw3x3.conv.kw = 3;
    br.dw3x3.conv.padding = 1;
    br.dw3x3.conv.groups = c;
    br.dw3x3.conv.weights.assign(c * 9, 0.0);
    br.dw3x3.conv.bias.assign(c, 0.0);
    br.dw3x3.bn = BNParams<double>::identity(c);
    br.dw1x1.conv = br.dw3x3.conv;
    br.dw1x1.conv.kh = br.dw1x1.conv.kw = 1;
    br.dw1x1.conv.padding = 0;
    br.dw1x1.conv.weights.assign(c, 0.0);
    br.dw1x1.bn = BNParams<double>::identity(c);
    // zero out the conv branches through gamma = 0 as well, keep identity BN real
    for (auto& g : br.dw3x3.bn.gamma) g = 0.0;
    for (auto& g : br.dw1x1.bn.gamma) g = 0.0;
    br.identity_bn = BNParams<double>::identity(c);

    const auto fused = fuse_rep_branches(br);
    for (int oc = 0; oc < c; ++oc) {
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx)
                CHECK(fused.weight(oc, 0, ky, kx) == ((ky == 1 && kx == 1) ? 1.0 : 0.0));
        CHECK(fused.bias[oc] == 0.0);
    }
}

TEST_CASE("fused branch kernel reproduces the multi-branch forward, double precision") {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const int c = 2 + static_cast<int>(rng.below(6));
        const auto br = random_branches<double>(rng, c);
        const auto fused = fuse_rep_branches(br);
        const auto x = random_tensor<double>(rng, 1, c, 8, 8);
        REQUIRE(max_abs_diff(conv2d(x, fused), rep_branch_forward(x, br)) <= 1e-10);
    }
}

TEST_CASE("fused branch kernel reproduces the multi-branch forward, single precision") {
    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        const int c = 2 + static_cast<int>(rng.below(6));
        const auto br = random_branches<float>(rng, c);
        const auto fused = fuse_rep_branches(br);
        const auto x = random_tensor<float>(rng, 1, c, 8, 8);
        REQUIRE(max_abs_diff(conv2d(x, fused), rep_branch_forward(x, br)) <= 1e-5);
    }
}

TEST_CASE("branch set validation") {
    Rng rng(17);
    auto br = random_branches<double>(rng, 4);
    SECTION("valid set passes") { REQUIRE_NOTHROW(br.validate()); }
    SECTION("stride-1 set without identity BN rejected") {
        br.identity_bn.reset();
        REQUIRE_THROWS_AS(br.validate(), std::invalid_argument);
    }
    SECTION("wrong 1x1 padding rejected") {
        br.dw1x1.conv.padding = 1;
        REQUIRE_THROWS_AS(br.validate(), std::invalid_argument);
    }
    SECTION("non-depthwise branch rejected") {
        br.dw3x3.conv.groups = 1;
        br.dw3x3.conv.in_ch_per_group = 4;
        br.dw3x3.conv.weights.resize(4ull * 4 * 9, 0.0);
        REQUIRE_THROWS_AS(br.validate(), std::invalid_argument);
    }
}

TEST_CASE("se_forward hand example: constant input, known gate") {
    // 1 channel; reduce and expand are 1x1 identity-ish convs with zero weight,
    // so the gate is sigmoid(bias_expand) after relu(bias_reduce).
    SEParams<double> se;
    se.reduction_ratio = 1;
    se.reduce.out_ch = se.reduce.in_ch_per_group = se.reduce.kh = se.reduce.kw = 1;
    se.reduce.weights = {0.0};
    se.reduce.bias = {2.0};
    se.expand = se.reduce;
    se.expand.weights = {0.0};
    se.expand.bias = {0.0};
    Tensor<double> x(1, 1, 2, 2, 3.0);
    const auto y = se_forward(x, se);
    for (double v : y.data) CHECK_THAT(v, Catch::Matchers::WithinAbs(1.5, 1e-12));  // sigmoid(0)=0.5
}

TEST_CASE("se gate stays within (0,1): output magnitude never exceeds input") {
    Rng rng(19);
    for (int trial = 0; trial < 50; ++trial) {
        const int c = 4;
        SEParams<double> se;
        se.reduction_ratio = 4;
        se.reduce = detail::make_conv<double>(rng, 1, c, 1, 1, 0, 1);
        se.expand = detail::make_conv<double>(rng, c, 1, 1, 1, 0, 1);
        const auto x = random_tensor<double>(rng, 2, c, 3, 3);
        const auto y = se_forward(x, se);
        for (std::size_t i = 0; i < x.size(); ++i) {
            CHECK(std::abs(y.data[i]) <= std::abs(x.data[i]) + 1e-15);
            CHECK(y.data[i] * x.data[i] >= 0.0);  // sign preserved
        }
    }
}

TEST_CASE("block with all-zero weights and intact residuals is the identity") {
    const int c = 4;
    RepVitBlock<double> b;
    RepBranchSet<double> br;
    auto zero_conv = [](int out_ch, int in_cpg, int k, int pad, int groups) {
        ConvParams<double> p;
        p.out_ch = out_ch;
        p.in_ch_per_group = in_cpg;
        p.kh = p.kw = k;
        p.padding = pad;
        p.groups = groups;
        p.weights.assign(static_cast<std::size_t>(out_ch) * in_cpg * k * k, 0.0);
        p.bias.assign(out_ch, 0.0);
        return p;
    };
    br.dw3x3.conv = zero_conv(c, 1, 3, 1, c);
    br.dw3x3.bn = BNParams<double>::identity(c);
    br.dw1x1.conv = zero_conv(c, 1, 1, 0, c);
    br.dw1x1.bn = BNParams<double>::identity(c);
    auto id_off = BNParams<double>::identity(c);
    for (auto& g : id_off.gamma) g = 0.0;  // identity branch silenced too
    br.identity_bn = id_off;
    b.branches = br;
    b.ffn_expand = zero_conv(c * 2, c, 1, 0, 1);
    b.ffn_project = zero_conv(c, c * 2, 1, 0, 1);

    Rng rng(23);
    const auto x = random_tensor<double>(rng, 1, c, 6, 6);
    const auto y = repvit_block_forward(x, b, RunMode::TrainForm);
    REQUIRE(max_abs_diff(y, x) == 0.0);
}

TEST_CASE("train and deploy block forwards agree after fusion") {
    Rng rng(29);
    for (int trial = 0; trial < 30; ++trial) {
        const int c = 4 + 4 * static_cast<int>(rng.below(3));
        auto block = make_random_block<float>(rng, c, 2, trial % 2 == 0, 4);
        const auto x = random_tensor<float>(rng, 1, c, 8, 8);
        const auto train_out = repvit_block_forward(x, block, RunMode::TrainForm);
        block.fused_token = fuse_rep_branches(*block.branches);
        block.branches.reset();
        const auto deploy_out = repvit_block_forward(x, block, RunMode::DeployForm);
        REQUIRE(max_abs_diff(train_out, deploy_out) <= 1e-5);
    }
}

TEST_CASE("backbone pyramid shapes for a 64x64 input") {
    const auto w = init_backbone<float>(BackboneConfig{}, 42);
    Rng rng(31);
    const auto x = random_tensor<float>(rng, 1, 3, 64, 64);
    const auto pyr = backbone_forward(x, w, RunMode::TrainForm);
    REQUIRE(pyr.levels.size() == 4);
    const int chans[4] = {16, 32, 64, 128};
    const int sizes[4] = {16, 8, 4, 2};
    for (int i = 0; i < 4; ++i) {
        CHECK(pyr.levels[i].c == chans[i]);
        CHECK(pyr.levels[i].h == sizes[i]);
        CHECK(pyr.levels[i].w == sizes[i]);
    }
}

TEST_CASE("backbone rejects bad inputs") {
    const auto w = init_backbone<float>(BackboneConfig{}, 1);
    REQUIRE_THROWS_AS(backbone_forward(Tensor<float>(1, 3, 60, 64), w, RunMode::TrainForm),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(backbone_forward(Tensor<float>(1, 1, 64, 64), w, RunMode::TrainForm),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(backbone_forward(Tensor<float>(1, 3, 64, 64), w, RunMode::DeployForm),
                      std::invalid_argument);
}

TEST_CASE("reparameterized backbone matches the train form and sheds parameters") {
    const auto train = init_backbone<double>(BackboneConfig{}, 99, true);
    const auto deploy = reparam_backbone(train);
    CHECK(param_count(deploy) < param_count(train));
    Rng rng(37);
    const auto x = random_tensor<double>(rng, 1, 3, 64, 64);
    const auto a = backbone_forward(x, train, RunMode::TrainForm);
    const auto b = backbone_forward(x, deploy, RunMode::DeployForm);
    for (int i = 0; i < 4; ++i) REQUIRE(max_abs_diff(a.levels[i], b.levels[i]) <= 1e-10);
}

TEST_CASE("double fusion is rejected") {
    const auto train = init_backbone<float>(BackboneConfig{}, 5);
    const auto deploy = reparam_backbone(train);
    REQUIRE_THROWS_AS(reparam_backbone(deploy), std::invalid_argument);
}

TEST_CASE("backbone initialization is deterministic in the seed") {
    const auto a = init_backbone<double>(BackboneConfig{}, 1234, true);
    const auto b = init_backbone<double>(BackboneConfig{}, 1234, true);
    const auto c = init_backbone<double>(BackboneConfig{}, 1235, true);
    CHECK(a.stem_conv1.weights == b.stem_conv1.weights);
    CHECK(a.stages[2][1].ffn_expand.weights == b.stages[2][1].ffn_expand.weights);
    CHECK(a.stem_conv1.weights != c.stem_conv1.weights);
}

TEST_CASE("cb_linear splits a projection and concatenation round-trips bit-exactly") {
    Rng rng(41);
    const auto x = random_tensor<double>(rng, 1, 6, 4, 4);
    auto proj = detail::make_conv<double>(rng, 9, 6, 1, 1, 0, 1);
    const auto parts = cb_linear(x, proj, {2, 3, 4});
    REQUIRE(parts.size() == 3);
    CHECK(parts[0].c == 2);
    CHECK(parts[1].c == 3);
    CHECK(parts[2].c == 4);
    const auto whole = conv2d(x, proj);
    int base = 0;
    for (const auto& part : parts) {
        for (int ic = 0; ic < part.c; ++ic)
            for (int iy = 0; iy < part.h; ++iy)
                for (int ix = 0; ix < part.w; ++ix)
                    REQUIRE(part.at(0, ic, iy, ix) == whole.at(0, base + ic, iy, ix));
        base += part.c;
    }
}

TEST_CASE("cb_linear rejects a bad split") {
    Rng rng(43);
    const auto x = random_tensor<double>(rng, 1, 6, 4, 4);
    auto proj = detail::make_conv<double>(rng, 9, 6, 1, 1, 0, 1);
    REQUIRE_THROWS_AS(cb_linear(x, proj, {2, 3}), std::invalid_argument);
    REQUIRE_THROWS_AS(cb_linear(x, proj, {9, 0}), std::invalid_argument);
}

TEST_CASE("cb_fuse aligns resolutions and sums") {
    Tensor<double> coarse(1, 2, 2, 2, 1.0);
    Tensor<double> fine(1, 2, 4, 4, 2.0);
    const std::vector<Tensor<double>> both{coarse, fine};
    SECTION("upsample coarse into fine") {
        const auto out = cb_fuse(both, 1);
        REQUIRE(out.h == 4);
        for (double v : out.data) CHECK(v == 3.0);
    }
    SECTION("downsample fine into coarse") {
        const auto out = cb_fuse(both, 0);
        REQUIRE(out.h == 2);
        for (double v : out.data) CHECK(v == 3.0);
    }
    SECTION("channel mismatch rejected") {
        const std::vector<Tensor<double>> bad{coarse, Tensor<double>(1, 3, 4, 4, 0.0)};
        REQUIRE_THROWS_AS(cb_fuse(bad, 0), std::invalid_argument);
    }
    SECTION("fusing a single feature with itself as target is the identity") {
        const std::vector<Tensor<double>> one{fine};
        const auto out = cb_fuse(one, 0);
        CHECK(max_abs_diff(out, fine) == 0.0);
    }
}
