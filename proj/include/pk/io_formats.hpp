#pragma once

// Persistence: the "PKW1" JSON weight container, COCO-like detection and
// annotation files, and the key=value run configuration format. Every loader
// turns malformed input into a FormatError diagnostic, never a crash.

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pk/det_eval.hpp"
#include "pk/losses.hpp"
#include "pk/repvit.hpp"

namespace pk {

class FormatError : public std::runtime_error {
  public:
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Weight container

struct WeightTensor {
    std::string name;
    std::vector<int> shape;
    std::string dtype = "f64";  // "f32" | "f64"
    std::vector<double> data;   // flat row-major; f32 values are float-exact
};

struct WeightContainer {
    int format_version = 1;
    std::string form = "train";  // "train" | "deploy"
    std::vector<WeightTensor> tensors;

    const WeightTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

inline void validate_container(const WeightContainer& c) {
    if (c.format_version != 1)
        throw FormatError("weight container: unsupported format_version " +
                          std::to_string(c.format_version));
    if (c.form != "train" && c.form != "deploy")
        throw FormatError("weight container: form must be 'train' or 'deploy', got '" + c.form +
                          "'");
    std::set<std::string> names;
    for (const auto& t : c.tensors) {
        if (!names.insert(t.name).second)
            throw FormatError("weight container: duplicate tensor name '" + t.name + "'");
        if (t.dtype != "f32" && t.dtype != "f64")
            throw FormatError("weight container: tensor '" + t.name + "' has unknown dtype '" +
                              t.dtype + "'");
        std::size_t expect = 1;
        for (int d : t.shape) {
            if (d < 0)
                throw FormatError("weight container: tensor '" + t.name +
                                  "' has a negative shape entry");
            expect *= static_cast<std::size_t>(d);
        }
        if (t.data.size() != expect)
            throw FormatError("weight container: tensor '" + t.name + "' declares " +
                              std::to_string(expect) + " elements but carries " +
                              std::to_string(t.data.size()));
        if (c.form == "deploy" &&
            (t.name.find(".dw1x1.") != std::string::npos ||
             t.name.find(".identity_bn.") != std::string::npos))
            throw FormatError("weight container: deploy form must not contain branch tensor '" +
                              t.name + "'");
    }
}

inline std::string save_weights(const WeightContainer& c) {
    validate_container(c);
    nlohmann::ordered_json j;
    j["magic"] = "PKW1";
    j["format_version"] = c.format_version;
    j["form"] = c.form;
    j["tensors"] = nlohmann::ordered_json::array();
    for (const auto& t : c.tensors) {
        nlohmann::ordered_json jt;
        jt["name"] = t.name;
        jt["shape"] = t.shape;
        jt["dtype"] = t.dtype;
        jt["data"] = t.data;
        j["tensors"].push_back(std::move(jt));
    }
    return j.dump();
}

inline WeightContainer load_weights(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("weight container: ") + e.what());
    }
    try {
        if (!j.is_object() || !j.contains("magic") || j["magic"] != "PKW1")
            throw FormatError("weight container: missing or bad magic (expected \"PKW1\")");
        WeightContainer c;
        c.format_version = j.at("format_version").get<int>();
        c.form = j.at("form").get<std::string>();
        for (const auto& jt : j.at("tensors")) {
            WeightTensor t;
            t.name = jt.at("name").get<std::string>();
            t.shape = jt.at("shape").get<std::vector<int>>();
            t.dtype = jt.at("dtype").get<std::string>();
            t.data = jt.at("data").get<std::vector<double>>();
            c.tensors.push_back(std::move(t));
        }
        validate_container(c);
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("weight container: ") + e.what());
    }
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write file: " + path);
    out << text;
}

// ---------------------------------------------------------------------------
// Backbone <-> container conversion. Structural metadata travels as
// "config.*" tensors so a container is self-describing.

namespace detail {

template <typename T>
inline const char* dtype_name() {
    return sizeof(T) == 4 ? "f32" : "f64";
}

template <typename T>
inline void push_conv(WeightContainer& c, const std::string& prefix, const ConvParams<T>& p) {
    WeightTensor w;
    w.name = prefix + ".weight";
    w.shape = {p.out_ch, p.in_ch_per_group, p.kh, p.kw};
    w.dtype = dtype_name<T>();
    for (T v : p.weights) w.data.push_back(static_cast<double>(v));
    c.tensors.push_back(std::move(w));
    WeightTensor b;
    b.name = prefix + ".bias";
    b.shape = {p.out_ch};
    b.dtype = dtype_name<T>();
    for (T v : p.bias) b.data.push_back(static_cast<double>(v));
    c.tensors.push_back(std::move(b));
}

template <typename T>
inline void push_bn(WeightContainer& c, const std::string& prefix, const BNParams<T>& p) {
    auto push = [&c, &prefix](const char* field, const std::vector<T>& v) {
        WeightTensor t;
        t.name = prefix + "." + field;
        t.shape = {static_cast<int>(v.size())};
        t.dtype = dtype_name<T>();
        for (T x : v) t.data.push_back(static_cast<double>(x));
        c.tensors.push_back(std::move(t));
    };
    push("gamma", p.gamma);
    push("beta", p.beta);
    push("running_mean", p.running_mean);
    push("running_var", p.running_var);
    WeightTensor e;
    e.name = prefix + ".eps";
    e.shape = {1};
    e.dtype = dtype_name<T>();
    e.data = {static_cast<double>(p.eps)};
    c.tensors.push_back(std::move(e));
}

inline const WeightTensor& require_tensor(const WeightContainer& c, const std::string& name) {
    const WeightTensor* t = c.find(name);
    if (!t) throw FormatError("weight container: missing tensor '" + name + "'");
    return *t;
}

template <typename T>
inline void pull_conv(const WeightContainer& c, const std::string& prefix, ConvParams<T>& p) {
    const WeightTensor& w = require_tensor(c, prefix + ".weight");
    if (w.shape != std::vector<int>{p.out_ch, p.in_ch_per_group, p.kh, p.kw})
        throw FormatError("weight container: tensor '" + w.name + "' has unexpected shape");
    for (std::size_t i = 0; i < p.weights.size(); ++i) p.weights[i] = static_cast<T>(w.data[i]);
    const WeightTensor& b = require_tensor(c, prefix + ".bias");
    if (b.data.size() != p.bias.size())
        throw FormatError("weight container: tensor '" + b.name + "' has unexpected shape");
    for (std::size_t i = 0; i < p.bias.size(); ++i) p.bias[i] = static_cast<T>(b.data[i]);
}

template <typename T>
inline void pull_bn(const WeightContainer& c, const std::string& prefix, BNParams<T>& p) {
    auto pull = [&c, &prefix](const char* field, std::vector<T>& v) {
        const WeightTensor& t = require_tensor(c, prefix + "." + field);
        if (t.data.size() != v.size())
            throw FormatError("weight container: tensor '" + t.name + "' has unexpected shape");
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(t.data[i]);
    };
    pull("gamma", p.gamma);
    pull("beta", p.beta);
    pull("running_mean", p.running_mean);
    pull("running_var", p.running_var);
    p.eps = static_cast<T>(require_tensor(c, prefix + ".eps").data.at(0));
}

inline void push_config(WeightContainer& c, const BackboneConfig& cfg) {
    auto push = [&c](const std::string& name, std::vector<double> vals) {
        WeightTensor t;
        t.name = name;
        t.shape = {static_cast<int>(vals.size())};
        t.dtype = "f64";
        t.data = std::move(vals);
        c.tensors.push_back(std::move(t));
    };
    push("config.stage_channels", {double(cfg.stage_channels[0]), double(cfg.stage_channels[1]),
                                   double(cfg.stage_channels[2]), double(cfg.stage_channels[3])});
    push("config.stage_depths", {double(cfg.stage_depths[0]), double(cfg.stage_depths[1]),
                                 double(cfg.stage_depths[2]), double(cfg.stage_depths[3])});
    push("config.ffn_expansion", {double(cfg.ffn_expansion)});
    push("config.input_channels", {double(cfg.input_channels)});
    push("config.se_reduction", {double(cfg.se_reduction)});
    push("config.se_phase", {double(cfg.se_phase)});
}

inline BackboneConfig pull_config(const WeightContainer& c) {
    BackboneConfig cfg;
    const auto& ch = require_tensor(c, "config.stage_channels");
    const auto& dp = require_tensor(c, "config.stage_depths");
    if (ch.data.size() != 4 || dp.data.size() != 4)
        throw FormatError("weight container: config tensors must have 4 entries");
    for (int i = 0; i < 4; ++i) {
        cfg.stage_channels[i] = static_cast<int>(ch.data[i]);
        cfg.stage_depths[i] = static_cast<int>(dp.data[i]);
    }
    cfg.ffn_expansion = static_cast<int>(require_tensor(c, "config.ffn_expansion").data.at(0));
    cfg.input_channels = static_cast<int>(require_tensor(c, "config.input_channels").data.at(0));
    cfg.se_reduction = static_cast<int>(require_tensor(c, "config.se_reduction").data.at(0));
    cfg.se_phase = static_cast<int>(require_tensor(c, "config.se_phase").data.at(0));
    return cfg;
}

}  // namespace detail

template <typename T>
inline WeightContainer backbone_to_container(const RepVitWeights<T>& w) {
    WeightContainer c;
    c.form = (w.form == RunMode::DeployForm) ? "deploy" : "train";
    detail::push_config(c, w.cfg);
    detail::push_conv(c, "stem.conv1", w.stem_conv1);
    detail::push_conv(c, "stem.conv2", w.stem_conv2);
    for (int s = 0; s < 4; ++s) {
        for (std::size_t b = 0; b < w.stages[s].size(); ++b) {
            const auto& block = w.stages[s][b];
            const std::string p =
                "stage" + std::to_string(s) + ".block" + std::to_string(b);
            if (block.branches) {
                detail::push_conv(c, p + ".token.dw3x3", block.branches->dw3x3.conv);
                detail::push_bn(c, p + ".token.dw3x3.bn", block.branches->dw3x3.bn);
                detail::push_conv(c, p + ".token.dw1x1", block.branches->dw1x1.conv);
                detail::push_bn(c, p + ".token.dw1x1.bn", block.branches->dw1x1.bn);
                if (block.branches->identity_bn)
                    detail::push_bn(c, p + ".token.identity_bn", *block.branches->identity_bn);
            }
            if (block.fused_token) detail::push_conv(c, p + ".token.fused", *block.fused_token);
            if (block.se) {
                detail::push_conv(c, p + ".se.reduce", block.se->reduce);
                detail::push_conv(c, p + ".se.expand", block.se->expand);
            }
            detail::push_conv(c, p + ".ffn.expand", block.ffn_expand);
            detail::push_conv(c, p + ".ffn.project", block.ffn_project);
        }
        if (s < 3) {
            const std::string p = "down" + std::to_string(s);
            detail::push_conv(c, p + ".dw", w.downsamples[s].dw);
            detail::push_conv(c, p + ".pw", w.downsamples[s].pw);
        }
    }
    validate_container(c);
    return c;
}

template <typename T>
inline RepVitWeights<T> backbone_from_container(const WeightContainer& c) {
    validate_container(c);
    const BackboneConfig cfg = detail::pull_config(c);
    // zero-seeded skeleton, then overwrite every array from the container
    RepVitWeights<T> w = init_backbone<T>(cfg, 0);
    w.form = (c.form == "deploy") ? RunMode::DeployForm : RunMode::TrainForm;

    detail::pull_conv(c, "stem.conv1", w.stem_conv1);
    detail::pull_conv(c, "stem.conv2", w.stem_conv2);
    for (int s = 0; s < 4; ++s) {
        for (std::size_t b = 0; b < w.stages[s].size(); ++b) {
            auto& block = w.stages[s][b];
            const std::string p =
                "stage" + std::to_string(s) + ".block" + std::to_string(b);
            if (w.form == RunMode::TrainForm) {
                detail::pull_conv(c, p + ".token.dw3x3", block.branches->dw3x3.conv);
                detail::pull_bn(c, p + ".token.dw3x3.bn", block.branches->dw3x3.bn);
                detail::pull_conv(c, p + ".token.dw1x1", block.branches->dw1x1.conv);
                detail::pull_bn(c, p + ".token.dw1x1.bn", block.branches->dw1x1.bn);
                detail::pull_bn(c, p + ".token.identity_bn", *block.branches->identity_bn);
            } else {
                ConvParams<T> fused = block.branches->dw3x3.conv;  // 3x3 depthwise skeleton
                detail::pull_conv(c, p + ".token.fused", fused);
                block.fused_token = std::move(fused);
                block.branches.reset();
            }
            if (block.se) {
                detail::pull_conv(c, p + ".se.reduce", block.se->reduce);
                detail::pull_conv(c, p + ".se.expand", block.se->expand);
            }
            detail::pull_conv(c, p + ".ffn.expand", block.ffn_expand);
            detail::pull_conv(c, p + ".ffn.project", block.ffn_project);
        }
        if (s < 3) {
            const std::string p = "down" + std::to_string(s);
            detail::pull_conv(c, p + ".dw", w.downsamples[s].dw);
            detail::pull_conv(c, p + ".pw", w.downsamples[s].pw);
        }
    }
    return w;
}

// ---------------------------------------------------------------------------
// Detection / annotation files (COCO-like subset)

namespace detail {

struct RecordFile {
    std::map<std::string, std::pair<double, double>> images;  // id -> (width, height)
};

inline nlohmann::json parse_json(const std::string& text, const char* what) {
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string(what) + ": " + e.what());
    }
}

inline std::string id_to_string(const nlohmann::json& j) {
    if (j.is_string()) return j.get<std::string>();
    if (j.is_number_integer()) return std::to_string(j.get<std::int64_t>());
    throw FormatError("record file: image id must be a string or integer");
}

inline RecordFile load_images(const nlohmann::json& j, const char* what) {
    RecordFile f;
    try {
        for (const auto& img : j.at("images")) {
            const std::string id = id_to_string(img.at("id"));
            if (!f.images.emplace(id, std::make_pair(img.at("width").get<double>(),
                                                     img.at("height").get<double>()))
                     .second)
                throw FormatError(std::string(what) + ": duplicate image id '" + id + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string(what) + ": " + e.what());
    }
    return f;
}

inline Box bbox_to_box(const nlohmann::json& jb, const char* what) {
    if (!jb.is_array() || jb.size() != 4)
        throw FormatError(std::string(what) + ": bbox must be [x, y, w, h]");
    const double x = jb[0].get<double>(), y = jb[1].get<double>();
    const double w = jb[2].get<double>(), h = jb[3].get<double>();
    if (w < 0 || h < 0)
        throw FormatError(std::string(what) + ": bbox has negative width or height");
    return Box{x, y, x + w, y + h};
}

}  // namespace detail

inline std::vector<GroundTruth> load_annotations(const std::string& text) {
    const nlohmann::json j = detail::parse_json(text, "annotation file");
    const detail::RecordFile f = detail::load_images(j, "annotation file");
    std::vector<GroundTruth> out;
    try {
        for (const auto& a : j.at("annotations")) {
            GroundTruth g;
            g.image_id = detail::id_to_string(a.at("image_id"));
            if (f.images.find(g.image_id) == f.images.end())
                throw FormatError("annotation file: annotation references unknown image '" +
                                  g.image_id + "'");
            g.class_id = a.at("category_id").get<int>();
            g.box = detail::bbox_to_box(a.at("bbox"), "annotation file");
            out.push_back(std::move(g));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("annotation file: ") + e.what());
    }
    return out;
}

inline std::vector<Detection> load_detections(const std::string& text) {
    const nlohmann::json j = detail::parse_json(text, "detection file");
    const detail::RecordFile f = detail::load_images(j, "detection file");
    std::vector<Detection> out;
    try {
        for (const auto& a : j.at("detections")) {
            Detection d;
            d.image_id = detail::id_to_string(a.at("image_id"));
            if (f.images.find(d.image_id) == f.images.end())
                throw FormatError("detection file: detection references unknown image '" +
                                  d.image_id + "'");
            d.class_id = a.at("category_id").get<int>();
            d.box = detail::bbox_to_box(a.at("bbox"), "detection file");
            if (!a.contains("score"))
                throw FormatError("detection file: detection is missing a score");
            d.score = a.at("score").get<double>();
            if (d.score < 0 || d.score > 1)
                throw FormatError("detection file: score outside [0, 1]");
            out.push_back(std::move(d));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("detection file: ") + e.what());
    }
    return out;
}

inline std::vector<int> class_ids_from_categories(const std::string& text) {
    const nlohmann::json j = detail::parse_json(text, "record file");
    std::vector<int> classes;
    try {
        for (const auto& c : j.at("categories")) classes.push_back(c.at("id").get<int>());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("record file: ") + e.what());
    }
    return classes;
}

// ---------------------------------------------------------------------------
// Run configuration: "key = value" lines, '#' comments, unknown keys rejected

struct RunConfig {
    LossConfig loss;
    double mask_ratio = 0.6;
    int patch_size = 32;
    double eval_score_threshold = 0.25;
    double eval_iou_threshold = 0.50;
    std::string ap_interpolation = "101pt";  // "101pt" | "continuous"
};

inline RunConfig load_config(const std::string& text) {
    RunConfig cfg;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;

    auto fail = [&line_no](const std::string& msg) {
        throw FormatError("config line " + std::to_string(line_no) + ": " + msg);
    };
    auto parse_double = [&fail](const std::string& key, const std::string& v) {
        try {
            std::size_t pos = 0;
            const double d = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("");
            return d;
        } catch (...) {
            fail("value '" + v + "' for key '" + key + "' is not a number");
            return 0.0;
        }
    };

    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) fail("expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (!seen.insert(key).second) fail("duplicate key '" + key + "'");

        if (key == "loss_variant") {
            const auto v = parse_loss_variant(value);
            if (!v) fail("unknown loss variant '" + value + "'");
            cfg.loss.variant = *v;
        } else if (key == "focaler_base") {
            const auto v = parse_loss_variant(value);
            if (!v) fail("unknown loss variant '" + value + "'");
            cfg.loss.focaler_base = *v;
        } else if (key == "alpha_pow") {
            cfg.loss.alpha_pow = parse_double(key, value);
        } else if (key == "nwd_c") {
            cfg.loss.nwd_c = parse_double(key, value);
        } else if (key == "siou_theta") {
            cfg.loss.siou_theta = parse_double(key, value);
        } else if (key == "wiou_alpha") {
            cfg.loss.wiou_alpha = parse_double(key, value);
        } else if (key == "wiou_delta") {
            cfg.loss.wiou_delta = parse_double(key, value);
        } else if (key == "shape_scale") {
            cfg.loss.shape_scale = parse_double(key, value);
        } else if (key == "piou_lambda") {
            cfg.loss.piou_lambda = parse_double(key, value);
        } else if (key == "piou_v2") {
            if (value == "on" || value == "true" || value == "1")
                cfg.loss.piou_v2 = true;
            else if (value == "off" || value == "false" || value == "0")
                cfg.loss.piou_v2 = false;
            else
                fail("value '" + value + "' for key 'piou_v2' is not a flag");
        } else if (key == "focaler_d") {
            cfg.loss.focaler_d = parse_double(key, value);
        } else if (key == "focaler_u") {
            cfg.loss.focaler_u = parse_double(key, value);
        } else if (key == "image_w") {
            cfg.loss.image_w = parse_double(key, value);
        } else if (key == "image_h") {
            cfg.loss.image_h = parse_double(key, value);
        } else if (key == "mask_ratio") {
            cfg.mask_ratio = parse_double(key, value);
        } else if (key == "patch_size") {
            cfg.patch_size = static_cast<int>(parse_double(key, value));
        } else if (key == "eval_score_threshold") {
            cfg.eval_score_threshold = parse_double(key, value);
        } else if (key == "eval_iou_threshold") {
            cfg.eval_iou_threshold = parse_double(key, value);
        } else if (key == "ap_interpolation") {
            if (value != "101pt" && value != "continuous")
                fail("ap_interpolation must be '101pt' or 'continuous'");
            cfg.ap_interpolation = value;
        } else {
            fail("unknown key '" + key + "'");
        }
    }
    return cfg;
}

}  // namespace pk
