#pragma once

#include <span>
#include <string>
#include <vector>

#include "firm/image.hpp"

namespace firm::eval {

enum class Truth { Inlier, Anomaly };

/// Anomaly-high scores with ground truth.
struct ScoredSet {
    std::vector<double> scores;
    std::vector<Truth> labels;
    std::vector<std::string> ids;
};

/// P(anomaly score > inlier score) with ties counted 1/2, via midranks.
/// Throws std::invalid_argument when either class is missing.
double auroc(std::span<const double> scores, std::span<const Truth> labels);
inline double auroc(const ScoredSet& set) { return auroc(set.scores, set.labels); }

struct LearningCurve {
    std::vector<int> epochs;
    std::vector<double> aurocs;
};

void validate(const LearningCurve& curve);

/// Trapezoidal area under AUROC-vs-epoch divided by the epoch span.
double aulc(const LearningCurve& curve);

/// AUROC over flattened per-pixel scores against a ground-truth mask.
double pixel_auroc(std::span<const double> map, const Mask& truth);

}  // namespace firm::eval
