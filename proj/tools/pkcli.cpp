// Command-line surface: weight fusion, loss comparison, gradient checks,
// mask demos, toy masked pretraining, and detection evaluation.
//
// Exit codes: 0 success, 1 validation failure, 2 usage error, 3 I/O or format
// error.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pk/det_eval.hpp"
#include "pk/io_formats.hpp"
#include "pk/losses.hpp"
#include "pk/repvit.hpp"
#include "pk/spark.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kValidationFailure = 1;
constexpr int kUsageError = 2;
constexpr int kIoError = 3;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

pk::Box parse_box(const std::string& csv) {
    std::vector<double> vals;
    std::string cur;
    std::istringstream in(csv);
    while (std::getline(in, cur, ',')) {
        try {
            vals.push_back(std::stod(cur));
        } catch (...) {
            throw UsageError("bad box coordinate '" + cur + "'");
        }
    }
    if (vals.size() != 4) throw UsageError("box must be x1,y1,x2,y2");
    pk::Box b{vals[0], vals[1], vals[2], vals[3]};
    try {
        b.validate();
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
    return b;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

std::string fmt_sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3e", v);
    return buf;
}

// ---------------------------------------------------------------------------

int cmd_fuse(const std::string& in_path, const std::string& out_path, std::uint64_t seed) {
    const pk::WeightContainer container = pk::load_weights(pk::read_file(in_path));
    if (container.form != "train") {
        std::fprintf(stderr, "fuse: input container is already in deploy form\n");
        return kUsageError;
    }
    const auto train = pk::backbone_from_container<double>(container);
    const auto deploy = pk::reparam_backbone(train);

    pk::Rng rng(seed);
    pk::Tensor<double> probe(1, train.cfg.input_channels, 64, 64);
    for (auto& v : probe.data) v = rng.uniform(-1.0, 1.0);
    const auto pyr_train = pk::backbone_forward(probe, train, pk::RunMode::TrainForm);
    const auto pyr_deploy = pk::backbone_forward(probe, deploy, pk::RunMode::DeployForm);
    double max_dev = 0;
    for (std::size_t l = 0; l < pyr_train.levels.size(); ++l)
        for (std::size_t i = 0; i < pyr_train.levels[l].size(); ++i)
            max_dev = std::max(max_dev, std::abs(pyr_train.levels[l].data[i] -
                                                 pyr_deploy.levels[l].data[i]));

    pk::write_file(out_path, pk::save_weights(pk::backbone_to_container(deploy)));
    std::printf("train parameters:  %zu\n", pk::param_count(train));
    std::printf("deploy parameters: %zu\n", pk::param_count(deploy));
    std::printf("max forward deviation: %s\n", fmt_sci(max_dev).c_str());
    return kOk;
}

int cmd_loss(const std::string& variant_name, const pk::Box& pred, const pk::Box& gt,
             pk::LossConfig cfg, bool want_grad, bool have_img_dims) {
    std::vector<pk::LossVariant> variants;
    if (variant_name == "all") {
        if (!have_img_dims) {
            cfg.image_w = 640;  // all-mode default canvas for MPDIoU
            cfg.image_h = 640;
        }
        for (const auto& [name, v] : pk::loss_variant_names()) variants.push_back(v);
    } else {
        const auto v = pk::parse_loss_variant(variant_name);
        if (!v) {
            std::string names;
            for (const auto& [name, var] : pk::loss_variant_names()) names += " " + name;
            std::fprintf(stderr, "loss: unknown variant '%s'; valid:%s\n", variant_name.c_str(),
                         names.c_str());
            return kUsageError;
        }
        if (*v == pk::LossVariant::MPDIoU && !have_img_dims) {
            std::fprintf(stderr, "loss: mpdiou requires --img-w and --img-h\n");
            return kUsageError;
        }
        variants.push_back(*v);
    }

    const pk::WiouState state;  // fresh state: running mean treated as 1.0
    std::printf("%-10s %10s", "variant", "loss");
    if (want_grad) std::printf("  %s", "gradient (analytic | fd)");
    std::printf("\n");
    for (pk::LossVariant v : variants) {
        cfg.variant = v;
        const double loss = pk::loss_value(pred, gt, cfg, &state);
        std::printf("%-10s %10s", pk::loss_variant_name(v).c_str(), fmt(loss).c_str());
        if (want_grad) {
            std::printf("  ");
            if (pk::loss_grad_analytic_supported(cfg)) {
                const auto g = pk::loss_grad_analytic(pred, gt, cfg);
                std::printf("[%s %s %s %s]", fmt(g.grad[0]).c_str(), fmt(g.grad[1]).c_str(),
                            fmt(g.grad[2]).c_str(), fmt(g.grad[3]).c_str());
            } else {
                std::printf("[--]");
            }
            const auto gf = pk::loss_grad_fd(pred, gt, cfg, 1e-5, &state);
            std::printf(" | [%s %s %s %s]", fmt(gf.grad[0]).c_str(), fmt(gf.grad[1]).c_str(),
                        fmt(gf.grad[2]).c_str(), fmt(gf.grad[3]).c_str());
        }
        std::printf("\n");
    }
    return kOk;
}

int cmd_gradcheck(const std::string& variant_name, int trials, std::uint64_t seed, double tol,
                  pk::LossConfig cfg) {
    if (trials < 1) {
        std::fprintf(stderr, "gradcheck: --trials must be >= 1\n");
        return kUsageError;
    }
    std::vector<pk::LossVariant> variants;
    if (variant_name == "all") {
        variants = {pk::LossVariant::IoU, pk::LossVariant::GIoU, pk::LossVariant::CIoU,
                    pk::LossVariant::FocalerIoU};
    } else {
        const auto v = pk::parse_loss_variant(variant_name);
        pk::LossConfig probe = cfg;
        if (v) probe.variant = *v;
        if (!v || !pk::loss_grad_analytic_supported(probe)) {
            std::fprintf(stderr,
                         "gradcheck: variant '%s' has no analytic gradient "
                         "(available: iou giou ciou focaler)\n",
                         variant_name.c_str());
            return kUsageError;
        }
        variants.push_back(*v);
    }

    bool all_ok = true;
    for (pk::LossVariant v : variants) {
        cfg.variant = v;
        pk::Rng rng(seed);
        double worst = 0;
        for (int t = 0; t < trials; ++t) {
            // non-degenerate overlapping-ish pairs, extents well above the FD step
            const double x1 = rng.uniform(0, 50), y1 = rng.uniform(0, 50);
            const pk::Box pred{x1, y1, x1 + rng.uniform(5, 40), y1 + rng.uniform(5, 40)};
            const double gx1 = x1 + rng.uniform(-10, 10), gy1 = y1 + rng.uniform(-10, 10);
            const pk::Box gt{gx1, gy1, gx1 + rng.uniform(5, 40), gy1 + rng.uniform(5, 40)};

            const auto ga = pk::loss_grad_analytic(pred, gt, cfg);
            if (ga.nondifferentiable) continue;
            const auto gf = pk::loss_grad_fd_alpha_frozen(pred, gt, cfg, 1e-5);
            double na = 0, diff = 0;
            for (int i = 0; i < 4; ++i) {
                na += gf.grad[i] * gf.grad[i];
                diff += (ga.grad[i] - gf.grad[i]) * (ga.grad[i] - gf.grad[i]);
            }
            const double rel = std::sqrt(diff) / std::max(std::sqrt(na), 1e-12);
            worst = std::max(worst, rel);
        }
        const bool ok = worst <= tol;
        all_ok = all_ok && ok;
        std::printf("%-10s worst relative error %s  %s\n", pk::loss_variant_name(v).c_str(),
                    fmt_sci(worst).c_str(), ok ? "ok" : "FAIL");
    }
    return all_ok ? kOk : kValidationFailure;
}

std::vector<double> parse_thresholds(const std::string& spec) {
    // "a:b:step"
    std::vector<double> parts;
    std::string cur;
    std::istringstream in(spec);
    while (std::getline(in, cur, ':')) {
        try {
            parts.push_back(std::stod(cur));
        } catch (...) {
            throw UsageError("bad threshold range '" + spec + "'");
        }
    }
    if (parts.size() != 3 || parts[2] <= 0 || parts[1] < parts[0])
        throw UsageError("threshold range must be a:b:step with step > 0");
    std::vector<double> out;
    for (double t = parts[0]; t <= parts[1] + 1e-9; t += parts[2]) out.push_back(t);
    return out;
}

nlohmann::ordered_json eval_to_json(const pk::EvalResult& r) {
    nlohmann::ordered_json j;
    j["precision"] = r.precision;
    j["recall"] = r.recall;
    j["map50"] = r.map50;
    j["map50_95"] = r.map50_95;
    j["counts"] = {{"tp", r.tp}, {"fp", r.fp}, {"fn", r.fn}};
    nlohmann::ordered_json per_class = nlohmann::ordered_json::object();
    for (const auto& [cls, aps] : r.per_class_ap) {
        nlohmann::ordered_json m = nlohmann::ordered_json::object();
        for (const auto& [thr, ap] : aps) m[fmt(thr)] = ap;
        per_class[std::to_string(cls)] = std::move(m);
    }
    j["per_class_ap"] = std::move(per_class);
    return j;
}

int cmd_eval(const std::string& gt_path, const std::string& dt_path, const std::string& thr_spec,
             const std::string& format, const pk::RunConfig& run_cfg) {
    const std::string gt_text = pk::read_file(gt_path);
    const auto gts = pk::load_annotations(gt_text);
    const auto dets = pk::load_detections(pk::read_file(dt_path));
    std::vector<int> classes = pk::class_ids_from_categories(gt_text);
    if (classes.empty()) throw pk::FormatError("annotation file: no categories");

    pk::EvalConfig cfg = pk::EvalConfig::defaults();
    if (!thr_spec.empty()) cfg.iou_thresholds = parse_thresholds(thr_spec);
    cfg.pr_score_threshold = run_cfg.eval_score_threshold;
    cfg.pr_iou_threshold = run_cfg.eval_iou_threshold;
    cfg.interpolation = run_cfg.ap_interpolation == "continuous"
                            ? pk::ApInterpolation::Continuous
                            : pk::ApInterpolation::Points101;

    const pk::EvalResult r = pk::evaluate(dets, gts, classes, cfg);
    if (format == "json") {
        std::printf("%s\n", eval_to_json(r).dump(2).c_str());
    } else {
        std::printf("%10s %10s %10s %10s\n", "Precision", "Recall", "mAP50", "mAP50:95");
        std::printf("%10s %10s %10s %10s\n", fmt(r.precision).c_str(), fmt(r.recall).c_str(),
                    fmt(r.map50).c_str(), fmt(r.map50_95).c_str());
    }
    return kOk;
}

int cmd_mask(int h, int w, int patch, double ratio, std::uint64_t seed, bool as_json) {
    pk::MaskGrid m;
    try {
        m = pk::generate_mask(h, w, patch, ratio, seed);
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "mask: %s\n", e.what());
        return kUsageError;
    }
    if (as_json) {
        nlohmann::ordered_json j;
        j["patch_size"] = m.patch_size;
        j["grid_h"] = m.gh;
        j["grid_w"] = m.gw;
        j["mask_ratio"] = m.mask_ratio;
        j["seed"] = m.seed;
        auto rows = nlohmann::ordered_json::array();
        for (int gy = 0; gy < m.gh; ++gy) {
            auto row = nlohmann::ordered_json::array();
            for (int gx = 0; gx < m.gw; ++gx) row.push_back(m.kept(gy, gx));
            rows.push_back(std::move(row));
        }
        j["kept"] = std::move(rows);
        std::printf("%s\n", j.dump(2).c_str());
    } else {
        for (int gy = 0; gy < m.gh; ++gy) {
            std::string row;
            for (int gx = 0; gx < m.gw; ++gx) row += m.kept(gy, gx) ? '.' : '#';
            std::printf("%s\n", row.c_str());
        }
        std::printf("masked fraction: %s\n", fmt(1.0 - m.kept_fraction()).c_str());
    }
    return kOk;
}

int cmd_pretrain_demo(int steps, std::uint64_t seed) {
    if (steps < 1) {
        std::fprintf(stderr, "pretrain-demo: --steps must be >= 1\n");
        return kUsageError;
    }
    auto model = pk::init_micro_model<double>(1, 4, 8, seed);
    const auto images = pk::synthetic_images<double>(4, 32, seed + 7);
    const auto trace = pk::spark_pretrain_toy(model, images, steps, seed);
    for (std::size_t t = 0; t < trace.size(); ++t)
        std::printf("step %4zu  loss %s\n", t, fmt(trace[t]).c_str());
    const double ratio = trace.back() / trace.front();
    std::printf("final/initial ratio: %s\n", fmt(ratio).c_str());
    return trace.back() < trace.front() ? kOk : kValidationFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PK numerical toolkit: losses, reparameterization, sparse masking, detection "
                 "metrics"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    std::string config_path, format = "table";
    app.add_option("--seed", seed, "global RNG seed");
    app.add_option("--config", config_path, "run configuration file (key = value)");
    app.add_option("--format", format, "output format: table | json")
        ->check(CLI::IsMember({"table", "json"}));

    auto* fuse = app.add_subcommand("fuse", "fold train-form branches into deploy form");
    std::string fuse_in, fuse_out;
    fuse->add_option("--in", fuse_in, "train-form weight container")->required();
    fuse->add_option("--out", fuse_out, "output deploy-form container")->required();

    auto* loss = app.add_subcommand("loss", "evaluate regression losses on a box pair");
    std::string loss_variant = "all", loss_pred, loss_gt;
    double img_w = 0, img_h = 0;
    bool want_grad = false;
    loss->add_option("--variant", loss_variant, "loss variant name or 'all'");
    loss->add_option("--pred", loss_pred, "predicted box x1,y1,x2,y2")->required();
    loss->add_option("--gt", loss_gt, "ground-truth box x1,y1,x2,y2")->required();
    auto* opt_img_w = loss->add_option("--img-w", img_w, "image width (MPDIoU)");
    auto* opt_img_h = loss->add_option("--img-h", img_h, "image height (MPDIoU)");
    loss->add_flag("--grad", want_grad, "also print analytic and FD gradients");

    auto* gradcheck = app.add_subcommand("gradcheck", "analytic-vs-FD gradient verification");
    std::string gc_variant = "all";
    int gc_trials = 100;
    double gc_tol = 1e-4;
    gradcheck->add_option("--variant", gc_variant, "variant name or 'all'");
    gradcheck->add_option("--trials", gc_trials, "random pairs per variant");
    gradcheck->add_option("--tol", gc_tol, "relative error tolerance");
    std::uint64_t gc_seed_default = 42;
    gradcheck->add_option("--seed", gc_seed_default, "pair generator seed");

    auto* eval = app.add_subcommand("eval", "detection metric evaluation");
    std::string eval_gt, eval_dt, eval_thrs;
    eval->add_option("--gt", eval_gt, "annotation file")->required();
    eval->add_option("--dt", eval_dt, "detection file")->required();
    eval->add_option("--iou-thrs", eval_thrs, "threshold range a:b:step");

    auto* mask = app.add_subcommand("mask", "per-patch mask demo");
    mask->set_help_flag("--help", "print help");  // frees -h for the height option
    int mask_h = 224, mask_w = 224, mask_patch = 32;
    double mask_ratio = 0.6;
    std::uint64_t mask_seed = 0;
    bool mask_json = false;
    mask->add_option("--h", mask_h, "image height");
    mask->add_option("--w", mask_w, "image width");
    mask->add_option("--patch", mask_patch, "patch size");
    mask->add_option("--ratio", mask_ratio, "masking probability");
    mask->add_option("--seed", mask_seed, "mask seed");
    mask->add_flag("--json", mask_json, "emit the grid as JSON");

    auto* pretrain = app.add_subcommand("pretrain-demo", "gradient-free masked pretraining demo");
    int pre_steps = 200;
    std::uint64_t pre_seed = 1;
    pretrain->add_option("--steps", pre_steps, "SPSA steps");
    pretrain->add_option("--seed", pre_seed, "demo seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsageError;
    }

    try {
        pk::RunConfig run_cfg;
        if (!config_path.empty()) run_cfg = pk::load_config(pk::read_file(config_path));

        if (*fuse) return cmd_fuse(fuse_in, fuse_out, seed);
        if (*loss) {
            pk::LossConfig cfg = run_cfg.loss;
            const bool have_dims = opt_img_w->count() > 0 && opt_img_h->count() > 0;
            if (have_dims) {
                cfg.image_w = img_w;
                cfg.image_h = img_h;
            }
            return cmd_loss(loss_variant, parse_box(loss_pred), parse_box(loss_gt), cfg,
                            want_grad, have_dims || (cfg.image_w > 0 && cfg.image_h > 0));
        }
        if (*gradcheck)
            return cmd_gradcheck(gc_variant, gc_trials, gc_seed_default, gc_tol, run_cfg.loss);
        if (*eval) return cmd_eval(eval_gt, eval_dt, eval_thrs, format, run_cfg);
        if (*mask) return cmd_mask(mask_h, mask_w, mask_patch, mask_ratio, mask_seed, mask_json);
        if (*pretrain) return cmd_pretrain_demo(pre_steps, pre_seed);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsageError;
    } catch (const pk::FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kIoError;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsageError;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kIoError;
    }
    return kUsageError;
}
