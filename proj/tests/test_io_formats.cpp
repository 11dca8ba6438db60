#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <string>

#include "pk/io_formats.hpp"
#include "pk/rng.hpp"

using namespace pk;

namespace {

const std::string kFixtures = FIXTURE_DIR;

WeightContainer random_container(Rng& rng) {
    WeightContainer c;
    c.form = rng.bernoulli(0.5) ? "train" : "deploy";
    const int n = 1 + static_cast<int>(rng.below(6));
    for (int i = 0; i < n; ++i) {
        WeightTensor t;
        t.name = "tensor" + std::to_string(i);
        const int d0 = 1 + static_cast<int>(rng.below(4));
        const int d1 = 1 + static_cast<int>(rng.below(4));
        t.shape = {d0, d1};
        t.dtype = rng.bernoulli(0.5) ? "f32" : "f64";
        for (int k = 0; k < d0 * d1; ++k) {
            double v = rng.uniform(-10, 10);
            if (t.dtype == "f32") v = static_cast<double>(static_cast<float>(v));
            t.data.push_back(v);
        }
        c.tensors.push_back(std::move(t));
    }
    return c;
}

}  // namespace

TEST_CASE("weight container round-trips bit-exactly") {
    Rng rng(2718);
    for (int trial = 0; trial < 100; ++trial) {
        const auto c = random_container(rng);
        const auto back = load_weights(save_weights(c));
        REQUIRE(back.format_version == c.format_version);
        REQUIRE(back.form == c.form);
        REQUIRE(back.tensors.size() == c.tensors.size());
        for (std::size_t i = 0; i < c.tensors.size(); ++i) {
            CHECK(back.tensors[i].name == c.tensors[i].name);
            CHECK(back.tensors[i].shape == c.tensors[i].shape);
            CHECK(back.tensors[i].dtype == c.tensors[i].dtype);
            REQUIRE(back.tensors[i].data == c.tensors[i].data);  // bit-equal
        }
        // and the serialized text itself is stable
        CHECK(save_weights(back) == save_weights(c));
    }
}

TEST_CASE("every malformed fixture raises FormatError, never crashes") {
    namespace fs = std::filesystem;
    int checked = 0;
    for (const auto& entry : fs::directory_iterator(kFixtures + "/malformed")) {
        const std::string name = entry.path().filename().string();
        const std::string text = read_file(entry.path().string());
        CAPTURE(name);
        if (name.rfind("weights_", 0) == 0) {
            REQUIRE_THROWS_AS(load_weights(text), FormatError);
        } else if (name.rfind("ann_", 0) == 0) {
            REQUIRE_THROWS_AS(load_annotations(text), FormatError);
        } else if (name.rfind("det_", 0) == 0) {
            REQUIRE_THROWS_AS(load_detections(text), FormatError);
        } else if (name.rfind("config_", 0) == 0) {
            REQUIRE_THROWS_AS(load_config(text), FormatError);
        } else {
            FAIL("unclassified fixture " << name);
        }
        ++checked;
    }
    CHECK(checked >= 10);
}

TEST_CASE("backbone weights survive the container round-trip") {
    BackboneConfig cfg;
    cfg.stage_channels = {4, 4, 8, 8};
    cfg.stage_depths = {1, 2, 1, 1};
    cfg.input_channels = 1;
    const auto w = init_backbone<double>(cfg, 31415, true);
    const auto c = load_weights(save_weights(backbone_to_container(w)));
    const auto back = backbone_from_container<double>(c);

    CHECK(back.cfg.stage_channels == cfg.stage_channels);
    CHECK(back.cfg.stage_depths == cfg.stage_depths);
    CHECK(back.cfg.input_channels == cfg.input_channels);
    CHECK(back.form == RunMode::TrainForm);
    CHECK(back.stem_conv1.weights == w.stem_conv1.weights);
    CHECK(back.stages[1][1].branches->dw3x3.bn.running_var ==
          w.stages[1][1].branches->dw3x3.bn.running_var);

    // same forward on a probe input
    Tensor<double> x(1, 1, 64, 64);
    Rng rng(3);
    for (auto& v : x.data) v = rng.uniform(-1, 1);
    const auto a = backbone_forward(x, w, RunMode::TrainForm);
    const auto b = backbone_forward(x, back, RunMode::TrainForm);
    for (int l = 0; l < 4; ++l) REQUIRE(a.levels[l].data == b.levels[l].data);
}

TEST_CASE("deploy-form container carries fused tensors and no branch tensors") {
    BackboneConfig cfg;
    cfg.stage_channels = {4, 4, 8, 8};
    cfg.stage_depths = {1, 1, 1, 1};
    cfg.input_channels = 1;
    const auto deploy = reparam_backbone(init_backbone<double>(cfg, 7, true));
    const auto c = backbone_to_container(deploy);
    CHECK(c.form == "deploy");
    CHECK(c.find("stage0.block0.token.fused.weight") != nullptr);
    for (const auto& t : c.tensors) {
        CHECK(t.name.find(".dw1x1.") == std::string::npos);
        CHECK(t.name.find(".identity_bn.") == std::string::npos);
    }
    const auto back = backbone_from_container<double>(c);
    CHECK(back.form == RunMode::DeployForm);
}

TEST_CASE("committed weight fixture loads and describes itself") {
    const auto c = load_weights(read_file(kFixtures + "/weights_train_small.json"));
    CHECK(c.form == "train");
    const auto w = backbone_from_container<double>(c);
    CHECK(w.cfg.stage_channels == std::array<int, 4>{4, 4, 8, 8});
    CHECK(w.cfg.input_channels == 1);
}

TEST_CASE("annotation file loads one record per annotation") {
    const std::string text = R"({
      "images": [{"id": "a", "width": 64, "height": 64},
                 {"id": "b", "width": 64, "height": 64},
                 {"id": "c", "width": 64, "height": 64}],
      "annotations": [
        {"image_id": "a", "category_id": 0, "bbox": [0, 0, 10, 10]},
        {"image_id": "a", "category_id": 1, "bbox": [5, 5, 10, 10]},
        {"image_id": "b", "category_id": 0, "bbox": [1, 1, 2, 2]},
        {"image_id": "b", "category_id": 0, "bbox": [3, 3, 2, 2]},
        {"image_id": "c", "category_id": 1, "bbox": [10, 20, 30, 40]}]})";
    const auto gts = load_annotations(text);
    REQUIRE(gts.size() == 5);
    CHECK(gts[0].image_id == "a");
    CHECK(gts[4].class_id == 1);
}

TEST_CASE("bbox [x, y, w, h] converts to corner coordinates") {
    const std::string text = R"({
      "images": [{"id": "a", "width": 64, "height": 64}],
      "annotations": [{"image_id": "a", "category_id": 0, "bbox": [10, 20, 30, 40]}]})";
    const auto gts = load_annotations(text);
    REQUIRE(gts.size() == 1);
    CHECK(gts[0].box.x1 == 10.0);
    CHECK(gts[0].box.y1 == 20.0);
    CHECK(gts[0].box.x2 == 40.0);
    CHECK(gts[0].box.y2 == 60.0);
}

TEST_CASE("integer image ids are accepted and normalized") {
    const std::string text = R"({
      "images": [{"id": 7, "width": 64, "height": 64}],
      "annotations": [{"image_id": 7, "category_id": 0, "bbox": [0, 0, 5, 5]}]})";
    const auto gts = load_annotations(text);
    REQUIRE(gts.size() == 1);
    CHECK(gts[0].image_id == "7");
}

TEST_CASE("detection file round trip through the committed fixtures") {
    const auto gts = load_annotations(read_file(kFixtures + "/gt.json"));
    const auto dets = load_detections(read_file(kFixtures + "/dt.json"));
    const auto classes = class_ids_from_categories(read_file(kFixtures + "/gt.json"));
    REQUIRE(gts.size() == 3);
    REQUIRE(dets.size() == 3);
    REQUIRE(classes == std::vector<int>{0, 1});
    CHECK(dets[0].score == 0.9);
    const auto r = evaluate(dets, gts, classes);
    CHECK(r.map50 > 0.0);
    CHECK(r.map50 <= 1.0);
}

TEST_CASE("config parsing") {
    SECTION("empty text yields the defaults") {
        const auto cfg = load_config("");
        CHECK(cfg.loss.variant == LossVariant::CIoU);
        CHECK(cfg.mask_ratio == 0.6);
        CHECK(cfg.patch_size == 32);
        CHECK(cfg.eval_score_threshold == 0.25);
        CHECK(cfg.ap_interpolation == "101pt");
    }
    SECTION("values, comments, and blank lines") {
        const auto cfg = load_config(
            "# comment\n\nloss_variant = giou\nfocaler_u = 0.95 # trailing\nmask_ratio=0.4\n");
        CHECK(cfg.loss.variant == LossVariant::GIoU);
        CHECK(cfg.loss.focaler_u == 0.95);
        CHECK(cfg.mask_ratio == 0.4);
    }
    SECTION("bad number diagnostics name the line and key") {
        try {
            load_config("mask_ratio = 0.5\nfocaler_u = banana\n");
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("line 2") != std::string::npos);
            CHECK(msg.find("focaler_u") != std::string::npos);
            CHECK(msg.find("banana") != std::string::npos);
        }
    }
    SECTION("duplicate key rejected") {
        REQUIRE_THROWS_AS(load_config("patch_size = 8\npatch_size = 16\n"), FormatError);
    }
    SECTION("unknown key rejected") {
        REQUIRE_THROWS_AS(load_config("warp_factor = 9\n"), FormatError);
    }
    SECTION("committed fixture parses") {
        const auto cfg = load_config(read_file(kFixtures + "/run.cfg"));
        CHECK(cfg.loss.variant == LossVariant::CIoU);
        CHECK(cfg.eval_iou_threshold == 0.50);
    }
}

TEST_CASE("read_file on a missing path raises FormatError") {
    REQUIRE_THROWS_AS(read_file(kFixtures + "/definitely_not_here.json"), FormatError);
}
