#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "firm/core.hpp"
#include "firm/dataset.hpp"
#include "firm/encoder.hpp"
#include "firm/patch.hpp"
#include "firm/scoring.hpp"
#include "firm/synth.hpp"

namespace firm::eval {

struct AugmentConfig {
    bool enabled = true;
    double crop_scale_lo = 0.8;  // random resized crop area range is [lo, 1]
    int max_shift = 1;
    double brightness = 0.1;
    double contrast = 0.1;
    double noise = 0.02;
};

Augmenter make_augmenter(const AugmentConfig& cfg);

enum class OutlierSource { Rotations, CutPaste, Perlin, External };

struct DatasetSpec {
    std::string source = "toy";  // toy | toy-industrial | mvtec | semantic
    std::string root;
    std::string normal_class = "good";
    int image_size = 0;
    int channels = 0;
    ToyConfig toy;
    ToyIndustrialConfig toy_industrial;
};

struct PatchTrainConfig {
    int train_patch = 16;
    int eval_patch = 16;
    int stride = 8;
    double tau_fore = 0.9;
    double tau_over = 0.15;
    patch::CoverageRule coverage = patch::CoverageRule::PatchFraction;
    patch::ForegroundConfig foreground;
    int heatmaps = 4;  // test images that get a heatmap written
};

struct ExperimentConfig {
    DatasetSpec dataset;
    OutlierSource outliers = OutlierSource::Rotations;
    std::string pool_dir;
    synth::CutPasteParams cutpaste;
    synth::PerlinParams perlin;
    synth::Blend inject_blend = synth::Blend::Hard;
    std::string policy = "firm";  // ntxent | supcon | rot-supcon | firm
    encoder::EncoderConfig encoder;
    encoder::TrainConfig train;
    AugmentConfig augment;
    std::vector<std::string> scores{"con"};
    scoring::ScoreConfig score;
    std::optional<PatchTrainConfig> patch;
    int eval_every = 10;
    std::uint64_t seed = 0;
    std::string output_dir;
};

/// Parses the experiment JSON; unknown keys raise ConfigError.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& cfg);

/// Checks values and referenced paths. Throws ConfigError.
void validate(const ExperimentConfig& cfg);

struct ExperimentResult {
    nlohmann::json report;
    ScoredSet scored;  // primary score
    std::vector<std::string> score_names;
    std::vector<std::vector<double>> score_columns;
    LearningCurve curve;
    std::optional<encoder::EncoderState> model;
};

/// Train, build banks, score, compute metrics. When output_dir is set, writes
/// report.json, scores.csv, curve.csv, curve.svg, model.firm and, in patch
/// mode, heatmaps/. Stage failures are rethrown with the stage name prefixed
/// and leave a FAILED marker in the output directory.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

/// Anomaly-high scores for every test image under one named score.
std::vector<double> score_images(encoder::EncoderState& state, const std::vector<LabeledSample>& train,
                                 const std::vector<TestSample>& test, const std::string& score,
                                 const scoring::ScoreConfig& cfg, Rng& rng);

// Reference patch bank over the inference grid of the training images.
scoring::MemoryBank build_patch_bank(encoder::EncoderState& state, const std::vector<LabeledSample>& train,
                                     int patch, int stride);

scoring::FeatureFn feature_function(encoder::EncoderState& state);

std::string scores_csv(const std::vector<TestSample>& test, const std::vector<std::string>& names,
                       const std::vector<std::vector<double>>& columns);

std::string learning_curve_svg(const LearningCurve& curve, const std::string& title);

}  // namespace firm::eval
