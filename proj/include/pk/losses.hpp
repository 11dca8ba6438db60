#pragma once

// Bounding-box regression loss family: IoU, GIoU, DIoU, CIoU, NWD, alpha-IoU,
// EIoU, SIoU, WIoU, MPDIoU, Shape-IoU, Powerful-IoU and the Focaler remapping,
// plus analytic gradients for the IoU/GIoU/CIoU/Focaler-CIoU subset and a
// central finite-difference verifier that covers every variant.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pk/box.hpp"

namespace pk {

enum class LossVariant {
    IoU,
    GIoU,
    DIoU,
    CIoU,
    NWD,
    AlphaIoU,
    EIoU,
    SIoU,
    WIoU,
    MPDIoU,
    ShapeIoU,
    PowerfulIoU,
    FocalerIoU,
};

// Guard applied to denominators that can legally reach zero (degenerate boxes).
inline constexpr double kDenomGuard = 1e-9;

struct LossConfig {
    LossVariant variant = LossVariant::CIoU;
    double alpha_pow = 3.0;     // alpha-IoU exponent
    double nwd_c = 12.8;        // NWD normalizing constant
    double siou_theta = 4.0;
    double wiou_alpha = 1.9;
    double wiou_delta = 3.0;
    double shape_scale = 0.0;
    double piou_lambda = 1.3;
    bool piou_v2 = false;
    double focaler_d = 0.0;
    double focaler_u = 0.95;
    LossVariant focaler_base = LossVariant::CIoU;
    double image_w = 0, image_h = 0;  // required for MPDIoU

    // When set, CIoU evaluates with this fixed trade-off coefficient instead
    // of recomputing it. loss_grad_fd_alpha_frozen uses it so the FD oracle
    // differentiates the same functional the analytic gradient does (alpha is
    // constant under differentiation).
    std::optional<double> ciou_alpha_frozen;

    void validate() const {
        if (!(focaler_d >= 0 && focaler_d < focaler_u && focaler_u <= 1.0))
            throw std::invalid_argument("LossConfig: need 0 <= focaler_d < focaler_u <= 1");
        if (!(nwd_c > 0)) throw std::invalid_argument("LossConfig: nwd_c must be positive");
        if (variant == LossVariant::MPDIoU && !(image_w > 0 && image_h > 0))
            throw std::invalid_argument("LossConfig: MPDIoU requires positive image_w and image_h");
    }
};

struct WiouState {
    double running_mean_liou = 1.0;
    double momentum = 0.9;
    bool initialized = false;
};

// EMA of the plain IoU loss; first observation seeds the mean.
inline WiouState wiou_update(const WiouState& state, double l_iou) {
    if (l_iou < 0) throw std::invalid_argument("wiou_update: negative l_iou");
    WiouState next = state;
    if (!state.initialized) {
        next.running_mean_liou = l_iou;
        next.initialized = true;
    } else {
        next.running_mean_liou =
            state.momentum * state.running_mean_liou + (1.0 - state.momentum) * l_iou;
    }
    return next;
}

inline const std::vector<std::pair<std::string, LossVariant>>& loss_variant_names() {
    static const std::vector<std::pair<std::string, LossVariant>> names = {
        {"iou", LossVariant::IoU},           {"giou", LossVariant::GIoU},
        {"diou", LossVariant::DIoU},         {"ciou", LossVariant::CIoU},
        {"nwd", LossVariant::NWD},           {"alpha", LossVariant::AlphaIoU},
        {"eiou", LossVariant::EIoU},         {"siou", LossVariant::SIoU},
        {"wiou", LossVariant::WIoU},         {"mpdiou", LossVariant::MPDIoU},
        {"shapeiou", LossVariant::ShapeIoU}, {"piou", LossVariant::PowerfulIoU},
        {"focaler", LossVariant::FocalerIoU},
    };
    return names;
}

inline std::string loss_variant_name(LossVariant v) {
    for (const auto& [name, var] : loss_variant_names())
        if (var == v) return name;
    return "?";
}

inline std::optional<LossVariant> parse_loss_variant(const std::string& s) {
    for (const auto& [name, var] : loss_variant_names())
        if (name == s) return var;
    return std::nullopt;
}

inline double focaler_map(double iou, double d, double u) {
    return std::clamp((iou - d) / (u - d), 0.0, 1.0);
}

namespace detail {

inline double guarded(double x) { return std::max(x, kDenomGuard); }

inline double siou_loss(const BoxGeometry& g, const LossConfig& cfg) {
    const double sigma = std::sqrt(g.center_dist_sq);
    double lambda = 0.0;
    if (sigma > 0) {
        const double sin_alpha = std::min(std::abs(g.dy), sigma) / sigma;
        lambda = 1.0 - 2.0 * std::pow(std::sin(std::asin(sin_alpha) - std::numbers::pi / 4.0), 2.0);
    }
    const double rho_x = std::pow(g.dx / guarded(g.cw), 2.0);
    const double rho_y = std::pow(g.dy / guarded(g.ch), 2.0);
    const double delta =
        (1.0 - std::exp(-(2.0 - lambda) * rho_x)) + (1.0 - std::exp(-(2.0 - lambda) * rho_y));
    const double omega_w = std::abs(g.w_p - g.w_g) / guarded(std::max(g.w_p, g.w_g));
    const double omega_h = std::abs(g.h_p - g.h_g) / guarded(std::max(g.h_p, g.h_g));
    const double shape = std::pow(1.0 - std::exp(-omega_w), cfg.siou_theta) +
                         std::pow(1.0 - std::exp(-omega_h), cfg.siou_theta);
    return 1.0 - g.iou + (delta + shape) / 2.0;
}

inline double shape_iou_loss(const Box& pred, const Box& gt, const BoxGeometry& g,
                             const LossConfig& cfg) {
    (void)pred;
    (void)gt;
    const double s = cfg.shape_scale;
    const double ws = std::pow(guarded(g.w_g), s);
    const double hs = std::pow(guarded(g.h_g), s);
    const double ww = 2.0 * ws / (ws + hs);
    const double hh = 2.0 * hs / (ws + hs);
    const double c2 = guarded(g.enclose_diag_sq);
    const double dist = (hh * g.dx * g.dx + ww * g.dy * g.dy) / c2;
    const double omega_w = hh * std::abs(g.w_p - g.w_g) / guarded(std::max(g.w_p, g.w_g));
    const double omega_h = ww * std::abs(g.h_p - g.h_g) / guarded(std::max(g.h_p, g.h_g));
    const double shape =
        std::pow(1.0 - std::exp(-omega_w), 4.0) + std::pow(1.0 - std::exp(-omega_h), 4.0);
    return 1.0 - g.iou + dist + 0.5 * shape;
}

inline double powerful_iou_loss(const Box& pred, const Box& gt, const BoxGeometry& g,
                                const LossConfig& cfg) {
    const double p = (std::abs(pred.x1 - gt.x1) / guarded(g.w_g) +
                      std::abs(pred.x2 - gt.x2) / guarded(g.w_g) +
                      std::abs(pred.y1 - gt.y1) / guarded(g.h_g) +
                      std::abs(pred.y2 - gt.y2) / guarded(g.h_g)) /
                     4.0;
    const double v1 = (1.0 - g.iou) + (1.0 - std::exp(-p * p));
    if (!cfg.piou_v2) return v1;
    const double q = std::exp(-p);
    const double lq = cfg.piou_lambda * q;
    return 3.0 * lq * std::exp(-lq * lq) * v1;
}

inline double ciou_alpha(const BoxGeometry& g) {
    const double phi = std::atan(g.w_g / guarded(g.h_g)) - std::atan(g.w_p / guarded(g.h_p));
    const double v = (4.0 / (std::numbers::pi * std::numbers::pi)) * phi * phi;
    return v / guarded((1.0 - g.iou) + v);
}

inline double ciou_aspect_term(const BoxGeometry& g, std::optional<double> alpha_frozen) {
    // v with alpha folded in; alpha treated as constant under differentiation
    const double phi = std::atan(g.w_g / guarded(g.h_g)) - std::atan(g.w_p / guarded(g.h_p));
    const double v = (4.0 / (std::numbers::pi * std::numbers::pi)) * phi * phi;
    const double alpha = alpha_frozen ? *alpha_frozen : ciou_alpha(g);
    return alpha * v;
}

}  // namespace detail

inline double loss_value(const Box& pred, const Box& gt, const LossConfig& cfg,
                         const WiouState* state = nullptr) {
    cfg.validate();
    const BoxGeometry g = box_geometry(pred, gt);

    switch (cfg.variant) {
        case LossVariant::IoU:
            return 1.0 - g.iou;
        case LossVariant::GIoU: {
            const double c_area = g.enclose.area();
            const double giou = g.iou - (c_area - g.union_area) / detail::guarded(c_area);
            return 1.0 - giou;
        }
        case LossVariant::DIoU:
            return 1.0 - g.iou + g.center_dist_sq / detail::guarded(g.enclose_diag_sq);
        case LossVariant::CIoU:
            return 1.0 - g.iou + g.center_dist_sq / detail::guarded(g.enclose_diag_sq) +
                   detail::ciou_aspect_term(g, cfg.ciou_alpha_frozen);
        case LossVariant::NWD: {
            const double w2 = g.dx * g.dx + g.dy * g.dy +
                              0.25 * (g.w_p - g.w_g) * (g.w_p - g.w_g) +
                              0.25 * (g.h_p - g.h_g) * (g.h_p - g.h_g);
            return 1.0 - std::exp(-std::sqrt(w2) / cfg.nwd_c);
        }
        case LossVariant::AlphaIoU:
            return 1.0 - std::pow(g.iou, cfg.alpha_pow);
        case LossVariant::EIoU:
            return 1.0 - g.iou + g.center_dist_sq / detail::guarded(g.enclose_diag_sq) +
                   (g.w_p - g.w_g) * (g.w_p - g.w_g) / detail::guarded(g.cw * g.cw) +
                   (g.h_p - g.h_g) * (g.h_p - g.h_g) / detail::guarded(g.ch * g.ch);
        case LossVariant::SIoU:
            return detail::siou_loss(g, cfg);
        case LossVariant::WIoU: {
            if (state == nullptr)
                throw std::invalid_argument("loss_value: WIoU requires a WiouState");
            const double l_iou = 1.0 - g.iou;
            const double r_focus = std::exp(g.center_dist_sq /
                                            detail::guarded(g.cw * g.cw + g.ch * g.ch));
            const double mean = state->initialized ? state->running_mean_liou : 1.0;
            const double beta = l_iou / detail::guarded(mean);
            const double r =
                beta / (cfg.wiou_delta * std::pow(cfg.wiou_alpha, beta - cfg.wiou_delta));
            return r * r_focus * l_iou;
        }
        case LossVariant::MPDIoU: {
            const double d1 = (pred.x1 - gt.x1) * (pred.x1 - gt.x1) +
                              (pred.y1 - gt.y1) * (pred.y1 - gt.y1);
            const double d2 = (pred.x2 - gt.x2) * (pred.x2 - gt.x2) +
                              (pred.y2 - gt.y2) * (pred.y2 - gt.y2);
            const double norm = cfg.image_w * cfg.image_w + cfg.image_h * cfg.image_h;
            return 1.0 - g.iou + (d1 + d2) / norm;
        }
        case LossVariant::ShapeIoU:
            return detail::shape_iou_loss(pred, gt, g, cfg);
        case LossVariant::PowerfulIoU:
            return detail::powerful_iou_loss(pred, gt, g, cfg);
        case LossVariant::FocalerIoU: {
            if (cfg.focaler_base == LossVariant::FocalerIoU ||
                cfg.focaler_base == LossVariant::WIoU)
                throw std::invalid_argument("loss_value: unsupported focaler_base variant");
            LossConfig base_cfg = cfg;
            base_cfg.variant = cfg.focaler_base;
            const double base = loss_value(pred, gt, base_cfg, nullptr);
            return base + g.iou - focaler_map(g.iou, cfg.focaler_d, cfg.focaler_u);
        }
    }
    throw std::invalid_argument("loss_value: unknown variant");
}

struct GradResult {
    std::array<double, 4> grad{};  // d(loss)/d(x1, y1, x2, y2) of pred
    bool nondifferentiable = false;  // true -> values are a one-sided subgradient
    bool clamped = false;            // FD only: a perturbed box was clamped to validity
};

inline bool loss_grad_analytic_supported(const LossConfig& cfg) {
    switch (cfg.variant) {
        case LossVariant::IoU:
        case LossVariant::GIoU:
        case LossVariant::CIoU:
            return true;
        case LossVariant::FocalerIoU:
            return cfg.focaler_base == LossVariant::CIoU;
        default:
            return false;
    }
}

inline GradResult loss_grad_analytic(const Box& pred, const Box& gt, const LossConfig& cfg) {
    cfg.validate();
    if (!loss_grad_analytic_supported(cfg))
        throw std::invalid_argument("loss_grad_analytic: no analytic form for variant '" +
                                    loss_variant_name(cfg.variant) + "'");
    pred.validate();
    gt.validate();
    if (!(pred.area() > 0 && gt.area() > 0))
        throw std::invalid_argument("loss_grad_analytic: boxes must have positive area");

    GradResult res;
    const BoxGeometry g = box_geometry(pred, gt);
    using V4 = std::array<double, 4>;  // d/d(x1, y1, x2, y2)

    // intersection extents; right-sided subgradients at edge-aligned ties
    const double tw = std::min(pred.x2, gt.x2) - std::max(pred.x1, gt.x1);
    const double th = std::min(pred.y2, gt.y2) - std::max(pred.y1, gt.y1);
    if (pred.x1 == gt.x1 || pred.x2 == gt.x2 || pred.y1 == gt.y1 || pred.y2 == gt.y2 ||
        tw == 0 || th == 0)
        res.nondifferentiable = true;

    const double iw = std::max(0.0, tw);
    const double ih = std::max(0.0, th);
    V4 diw{}, dih{};
    if (tw > 0 || (tw == 0 && th > 0)) {
        diw[0] = (pred.x1 >= gt.x1) ? -1.0 : 0.0;
        diw[2] = (pred.x2 < gt.x2) ? 1.0 : 0.0;
    }
    if (th > 0 || (th == 0 && tw > 0)) {
        dih[1] = (pred.y1 >= gt.y1) ? -1.0 : 0.0;
        dih[3] = (pred.y2 < gt.y2) ? 1.0 : 0.0;
    }

    V4 d_inter{};
    for (int i = 0; i < 4; ++i) d_inter[i] = diw[i] * ih + iw * dih[i];

    // pred area
    const V4 d_area_p{-g.h_p, -g.w_p, g.h_p, g.w_p};
    V4 d_union{};
    for (int i = 0; i < 4; ++i) d_union[i] = d_area_p[i] - d_inter[i];

    const double u = g.union_area;
    V4 d_iou{};
    for (int i = 0; i < 4; ++i) d_iou[i] = (d_inter[i] * u - g.inter_area * d_union[i]) / (u * u);

    if (cfg.variant == LossVariant::IoU) {
        for (int i = 0; i < 4; ++i) res.grad[i] = -d_iou[i];
        return res;
    }

    // enclosing box extents; right-sided subgradients at ties
    V4 dcw{}, dch{};
    dcw[0] = (pred.x1 < gt.x1) ? -1.0 : 0.0;
    dcw[2] = (pred.x2 >= gt.x2) ? 1.0 : 0.0;
    dch[1] = (pred.y1 < gt.y1) ? -1.0 : 0.0;
    dch[3] = (pred.y2 >= gt.y2) ? 1.0 : 0.0;

    if (cfg.variant == LossVariant::GIoU) {
        const double c_area = g.cw * g.ch;
        V4 dc{};
        for (int i = 0; i < 4; ++i) dc[i] = dcw[i] * g.ch + g.cw * dch[i];
        for (int i = 0; i < 4; ++i) {
            const double d_pen = (u * dc[i] - c_area * d_union[i]) / (c_area * c_area);
            res.grad[i] = -d_iou[i] + d_pen;
        }
        return res;
    }

    // CIoU and Focaler-over-CIoU share the CIoU core
    const double c2 = detail::guarded(g.enclose_diag_sq);
    V4 d_rho2{g.dx, g.dy, g.dx, g.dy};
    V4 d_c2{};
    for (int i = 0; i < 4; ++i) d_c2[i] = 2.0 * g.cw * dcw[i] + 2.0 * g.ch * dch[i];

    V4 d_dist{};
    for (int i = 0; i < 4; ++i)
        d_dist[i] = (d_rho2[i] * c2 - g.center_dist_sq * d_c2[i]) / (c2 * c2);

    const double hp = detail::guarded(g.h_p);
    const double k = 4.0 / (std::numbers::pi * std::numbers::pi);
    const double phi = std::atan(g.w_g / detail::guarded(g.h_g)) - std::atan(g.w_p / hp);
    const double v = k * phi * phi;
    const double alpha = v / detail::guarded((1.0 - g.iou) + v);
    const double denom = hp * hp + g.w_p * g.w_p;
    // d atan(w_p/h_p): d/dw = h/(h^2+w^2), d/dh = -w/(h^2+w^2)
    const double datan_dw = hp / denom;
    const double datan_dh = (g.h_p > kDenomGuard) ? -g.w_p / denom : 0.0;
    const V4 d_wp{-1.0, 0.0, 1.0, 0.0};
    const V4 d_hp{0.0, -1.0, 0.0, 1.0};
    V4 d_v{};
    for (int i = 0; i < 4; ++i)
        d_v[i] = 2.0 * k * phi * (-(datan_dw * d_wp[i] + datan_dh * d_hp[i]));

    V4 d_ciou{};
    for (int i = 0; i < 4; ++i) d_ciou[i] = -d_iou[i] + d_dist[i] + alpha * d_v[i];

    if (cfg.variant == LossVariant::CIoU) {
        res.grad = d_ciou;
        return res;
    }

    // Focaler-CIoU: L = L_ciou + iou - clamp((iou - d)/(u - d), 0, 1)
    double map_slope = 0.0;
    if (g.iou > cfg.focaler_d && g.iou < cfg.focaler_u)
        map_slope = 1.0 / (cfg.focaler_u - cfg.focaler_d);
    else if (g.iou == cfg.focaler_d || g.iou == cfg.focaler_u)
        res.nondifferentiable = true;
    for (int i = 0; i < 4; ++i) res.grad[i] = d_ciou[i] + (1.0 - map_slope) * d_iou[i];
    return res;
}

inline GradResult loss_grad_fd(const Box& pred, const Box& gt, const LossConfig& cfg, double h,
                               const WiouState* state = nullptr) {
    if (!(h > 0)) throw std::invalid_argument("loss_grad_fd: step must be positive");
    GradResult res;
    for (int i = 0; i < 4; ++i) {
        double lo[4] = {pred.x1, pred.y1, pred.x2, pred.y2};
        double hi[4] = {pred.x1, pred.y1, pred.x2, pred.y2};
        lo[i] -= h;
        hi[i] += h;
        // keep the perturbed boxes valid: clamp against the opposite edge
        auto clamp_valid = [&res](double v[4]) {
            if (v[2] < v[0]) {
                v[0] = v[2] = (v[0] + v[2]) * 0.5;
                res.clamped = true;
            }
            if (v[3] < v[1]) {
                v[1] = v[3] = (v[1] + v[3]) * 0.5;
                res.clamped = true;
            }
        };
        clamp_valid(lo);
        clamp_valid(hi);
        const double f_lo = loss_value(Box{lo[0], lo[1], lo[2], lo[3]}, gt, cfg, state);
        const double f_hi = loss_value(Box{hi[0], hi[1], hi[2], hi[3]}, gt, cfg, state);
        res.grad[i] = (f_hi - f_lo) / (2.0 * h);
    }
    return res;
}

// FD oracle matching the analytic CIoU convention: alpha is pinned at the
// base point before perturbing. For non-CIoU variants this is plain FD.
inline GradResult loss_grad_fd_alpha_frozen(const Box& pred, const Box& gt, const LossConfig& cfg,
                                            double h, const WiouState* state = nullptr) {
    LossConfig frozen = cfg;
    if (cfg.variant == LossVariant::CIoU ||
        (cfg.variant == LossVariant::FocalerIoU && cfg.focaler_base == LossVariant::CIoU))
        frozen.ciou_alpha_frozen = detail::ciou_alpha(box_geometry(pred, gt));
    return loss_grad_fd(pred, gt, frozen, h, state);
}

}  // namespace pk
