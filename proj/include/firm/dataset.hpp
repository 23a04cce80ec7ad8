#pragma once

#include <optional>
#include <string>
#include <vector>

#include "firm/core.hpp"
#include "firm/metrics.hpp"

namespace firm::eval {

enum class Layout { MVTec, Semantic };

Layout parse_layout(const std::string& name);

struct IngestConfig {
    Layout layout = Layout::MVTec;
    std::string normal_class = "good";  // semantic layout only
    int image_size = 0;                 // square resize target, 0 keeps native size
    int channels = 0;                   // 0 keeps the PNG's own format
};

struct TestSample {
    Image image;
    Truth truth = Truth::Inlier;
    std::string id;
    std::string defect_type;
    std::optional<Mask> ground_truth;
};

struct Dataset {
    std::vector<LabeledSample> train;  // inliers only, label 1
    std::vector<TestSample> test;
};

/// MVTec layout: root/train/good/*.png, root/test/<type>/*.png (type "good"
/// is inlier), optional root/ground_truth/<type>/<stem>_mask.png.
/// Semantic layout: root/train/<class>/*.png and root/test/<class>/*.png,
/// where only the normal class is used for training.
/// Files are read in lexicographic order. Throws DataError on missing
/// directories or unreadable images.
Dataset ingest_dataset(const std::string& root, const IngestConfig& cfg);

struct ToyConfig {
    int image_size = 16;
    int train_count = 128;
    int test_inliers = 100;
    int test_anomalies = 100;
    int normal_shape = 0;  // index into toy_shape_names()
    double noise = 0.05;
    std::uint64_t seed = 0;
};

const std::vector<std::string>& toy_shape_names();

Image draw_toy_shape(int shape, int size, Rng& rng, double noise);

/// Stroke-drawn glyphs on a dark background; the normal glyph is the
/// inlier class and the other glyphs are test anomalies.
Dataset make_toy_dataset(const ToyConfig& cfg);

struct ToyIndustrialConfig {
    int image_size = 64;
    int train_count = 16;
    int test_inliers = 8;
    int test_anomalies = 8;
    std::uint64_t seed = 0;
};

/// Textured bright disk on a dark background; anomalies carry dark scratches
/// or spots inside the object and ground-truth masks.
Dataset make_toy_industrial_dataset(const ToyIndustrialConfig& cfg);

/// Writes a dataset in MVTec layout (anomalies under test/defect, masks
/// under ground_truth/defect).
void write_mvtec_layout(const Dataset& data, const std::string& root);

}  // namespace firm::eval
