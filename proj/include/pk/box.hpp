#pragma once

// Axis-aligned boxes in xyxy pixel coordinates and the shared geometric
// decomposition every regression loss consumes.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace pk {

struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double cx() const { return (x1 + x2) * 0.5; }
    double cy() const { return (y1 + y2) * 0.5; }

    void validate() const {
        if (x2 < x1 || y2 < y1)
            throw std::invalid_argument("Box: negative extent (" + std::to_string(x1) + "," +
                                        std::to_string(y1) + "," + std::to_string(x2) + "," +
                                        std::to_string(y2) + ")");
    }
};

struct BoxGeometry {
    double iou = 0;
    double inter_area = 0, union_area = 0;
    Box enclose;
    double enclose_diag_sq = 0;  // c^2
    double center_dist_sq = 0;   // rho^2
    double dx = 0, dy = 0;       // signed center offsets, pred - gt
    double w_p = 0, h_p = 0, w_g = 0, h_g = 0;
    double cw = 0, ch = 0;  // enclosing box extents
};

inline double box_iou(const Box& a, const Box& b) {
    const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

inline BoxGeometry box_geometry(const Box& pred, const Box& gt) {
    pred.validate();
    gt.validate();
    BoxGeometry g;
    g.w_p = pred.width();
    g.h_p = pred.height();
    g.w_g = gt.width();
    g.h_g = gt.height();

    const double iw = std::max(0.0, std::min(pred.x2, gt.x2) - std::max(pred.x1, gt.x1));
    const double ih = std::max(0.0, std::min(pred.y2, gt.y2) - std::max(pred.y1, gt.y1));
    g.inter_area = iw * ih;
    g.union_area = pred.area() + gt.area() - g.inter_area;
    g.iou = g.union_area > 0 ? g.inter_area / g.union_area : 0.0;

    g.enclose = Box{std::min(pred.x1, gt.x1), std::min(pred.y1, gt.y1),
                    std::max(pred.x2, gt.x2), std::max(pred.y2, gt.y2)};
    g.cw = g.enclose.width();
    g.ch = g.enclose.height();
    g.enclose_diag_sq = g.cw * g.cw + g.ch * g.ch;

    g.dx = pred.cx() - gt.cx();
    g.dy = pred.cy() - gt.cy();
    g.center_dist_sq = g.dx * g.dx + g.dy * g.dy;
    return g;
}

}  // namespace pk
