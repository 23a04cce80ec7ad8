#include <gtest/gtest.h>

#include <filesystem>

#include "firm/error.hpp"
#include "firm/experiment.hpp"
#include "firm/io.hpp"

using namespace firm;
using namespace firm::eval;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json tiny_image_config() {
    return json::parse(R"({
        "dataset": {"source": "toy", "toy": {"train_count": 16, "test_inliers": 8, "test_anomalies": 8}},
        "outliers": {"source": "rotations"},
        "policy": "firm",
        "encoder": {"arch": "mlp-small", "d": 8, "d_head": 4, "head_layers": 1, "head_width": 8, "mlp_hidden": 16},
        "train": {"epochs": 3, "warmup_epochs": 1, "batch_pairs": 16},
        "scores": ["con", "con-norm", "shift", "ens", "proto", "kde"],
        "score": {"crops_per_rotation": 2},
        "eval_every": 1,
        "seed": 5
    })");
}

json tiny_patch_config() {
    return json::parse(R"({
        "dataset": {"source": "toy-industrial",
                    "toy_industrial": {"image_size": 32, "train_count": 4, "test_inliers": 3, "test_anomalies": 3}},
        "outliers": {"source": "perlin-inject"},
        "policy": "firm",
        "encoder": {"arch": "conv-small", "d": 8, "d_head": 4, "head_layers": 1, "head_width": 8,
                    "conv_channels": [4, 4, 8]},
        "train": {"epochs": 2, "warmup_epochs": 1, "batch_pairs": 8},
        "patch": {"train_patch": 16, "eval_patch": 16, "stride": 8, "foreground": {"morph_radius": 1}, "heatmaps": 2},
        "eval_every": 1,
        "seed": 2
    })");
}

fs::path out_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    return dir;
}

json strip_timing(json report) {
    report.erase("timing");
    return report;
}

}  // namespace

TEST(ExperimentConfig, UnknownKeysRejected) {
    auto j = tiny_image_config();
    j["extra"] = true;
    EXPECT_THROW(experiment_config_from_json(j), ConfigError);
    j = tiny_image_config();
    j["dataset"]["toy"]["colour"] = 1;
    EXPECT_THROW(experiment_config_from_json(j), ConfigError);
    j = tiny_image_config();
    j["scores"] = {"mahalanobis"};
    EXPECT_THROW(experiment_config_from_json(j), ConfigError);
}

TEST(ExperimentConfig, JsonRoundTrip) {
    const auto cfg = experiment_config_from_json(tiny_patch_config());
    EXPECT_EQ(to_json(experiment_config_from_json(to_json(cfg))), to_json(cfg));
}

TEST(ExperimentConfig, MissingDirectoryFailsBeforeWork) {
    auto j = tiny_image_config();
    j["dataset"] = {{"source", "mvtec"}, {"root", "/nonexistent/firm"}};
    EXPECT_THROW(experiment_config_from_json(j), ConfigError);
    j = tiny_image_config();
    j["outliers"] = {{"source", "external-pool"}, {"pool_dir", "/nonexistent/pool"}};
    EXPECT_THROW(experiment_config_from_json(j), ConfigError);
    auto cfg = experiment_config_from_json(tiny_image_config());
    cfg.outliers = OutlierSource::External;
    cfg.pool_dir = "/nonexistent/pool";
    const auto dir = out_dir("firm_test_exp_missing");
    cfg.output_dir = dir.string();
    EXPECT_THROW(run_experiment(cfg), ConfigError);
    EXPECT_FALSE(fs::exists(dir));
}

TEST(Experiment, ImageModeWritesOutputs) {
    auto cfg = experiment_config_from_json(tiny_image_config());
    const auto dir = out_dir("firm_test_exp_image");
    cfg.output_dir = dir.string();
    const auto result = run_experiment(cfg);
    for (auto f : {"report.json", "scores.csv", "curve.csv", "curve.svg", "model.firm"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
    const auto report = json::parse(io::read_text((dir / "report.json").string()));
    EXPECT_EQ(report.at("auroc").size(), 6u);
    EXPECT_EQ(report.at("curve").at("epochs"), json({0, 1, 2, 3}));
    EXPECT_EQ(report.at("curve").at("eval_every"), 1);
    EXPECT_TRUE(report.at("aulc").is_number());
    EXPECT_EQ(report.at("epochs").size(), 3u);
    EXPECT_TRUE(report.contains("timing"));
    EXPECT_EQ(report.at("seed"), 5);
    ASSERT_TRUE(result.model.has_value());
    EXPECT_EQ(result.model->epoch(), 3);
    const auto csv = io::read_text((dir / "scores.csv").string());
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "id,label,con,con-norm,shift,ens,proto,kde");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 17);
    fs::remove_all(dir);
}

TEST(Experiment, EveryPolicyAndOutlierSourceRuns) {
    for (const char* policy : {"ntxent", "supcon", "rot-supcon", "firm"}) {
        auto j = tiny_image_config();
        j["policy"] = policy;
        j["scores"] = {"con"};
        EXPECT_NO_THROW(run_experiment(experiment_config_from_json(j))) << policy;
    }
    for (const char* source : {"cutpaste", "perlin-inject"}) {
        auto j = tiny_image_config();
        j["outliers"]["source"] = source;
        j["scores"] = {"con"};
        EXPECT_NO_THROW(run_experiment(experiment_config_from_json(j))) << source;
    }
}

TEST(Experiment, ExternalPoolSource) {
    const auto pool = out_dir("firm_test_exp_pool");
    fs::create_directories(pool);
    for (int i = 0; i < 3; ++i) io::write_png((pool / (std::to_string(i) + ".png")).string(), Image(10, 10, 1, 0.2f * i));
    auto j = tiny_image_config();
    j["outliers"] = {{"source", "external-pool"}, {"pool_dir", pool.string()}};
    j["scores"] = {"con"};
    EXPECT_NO_THROW(run_experiment(experiment_config_from_json(j)));
    fs::remove_all(pool);
}

TEST(Experiment, StageFailureLeavesMarker) {
    const auto pool = out_dir("firm_test_exp_empty_pool");
    fs::create_directories(pool);
    auto cfg = experiment_config_from_json(tiny_image_config());
    cfg.outliers = OutlierSource::External;
    cfg.pool_dir = pool.string();
    const auto dir = out_dir("firm_test_exp_failed");
    cfg.output_dir = dir.string();
    try {
        run_experiment(cfg);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_EQ(std::string(e.what()).rfind("[data]", 0), 0u);
    }
    EXPECT_TRUE(fs::exists(dir / "FAILED"));
    fs::remove_all(dir);
    fs::remove_all(pool);
}

TEST(Experiment, DeterministicImageMode) {
    auto cfg = experiment_config_from_json(tiny_image_config());
    const auto a = run_experiment(cfg);
    const auto b = run_experiment(cfg);
    EXPECT_EQ(strip_timing(a.report), strip_timing(b.report));
    EXPECT_EQ(a.score_columns, b.score_columns);
}

TEST(Experiment, PatchModeWritesHeatmapsDeterministically) {
    auto cfg = experiment_config_from_json(tiny_patch_config());
    const auto d1 = out_dir("firm_test_exp_patch1"), d2 = out_dir("firm_test_exp_patch2");
    cfg.output_dir = d1.string();
    const auto a = run_experiment(cfg);
    cfg.output_dir = d2.string();
    const auto b = run_experiment(cfg);
    EXPECT_TRUE(a.report.at("pixel_auroc").is_number());
    EXPECT_EQ(strip_timing(a.report), strip_timing(b.report));
    for (auto f : {"000.pgm", "000.pgm.json", "001.pgm"}) {
        ASSERT_TRUE(fs::exists(d1 / "heatmaps" / f)) << f;
        EXPECT_EQ(io::read_text((d1 / "heatmaps" / f).string()), io::read_text((d2 / "heatmaps" / f).string()));
    }
    EXPECT_FALSE(fs::exists(d1 / "heatmaps" / "002.pgm"));
    EXPECT_EQ(io::read_text((d1 / "scores.csv").string()), io::read_text((d2 / "scores.csv").string()));
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST(Experiment, PatchModeRejectsImageScores) {
    auto j = tiny_patch_config();
    j["scores"] = {"shift"};
    EXPECT_THROW(experiment_config_from_json(j), ConfigError);
}

TEST(Experiment, CurveSvgIsWellFormed) {
    const auto svg = learning_curve_svg({{0, 5, 10}, {0.5, 0.7, 0.9}}, "demo");
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find("polyline"), std::string::npos);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
}
