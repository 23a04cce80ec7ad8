#pragma once

#include <string>
#include <utility>
#include <vector>

#include "firm/core.hpp"
#include "firm/image.hpp"

namespace firm::patch {

struct MaskPair {
    Mask foreground;
    Mask anomaly;  // subset of foreground
};

void validate(const MaskPair& masks);

enum class CoverageRule {
    PatchFraction,  // |patch ∩ m| / |patch|
    MaskFraction,   // |patch ∩ m| / |m|
};

struct PatchConfig {
    int patch = 32;
    int stride = 16;
    double tau_fore = 0.9;
    double tau_over = 0.15;
    CoverageRule coverage = CoverageRule::PatchFraction;
};

// Checks 0 < S < P <= min(H,W) and both thresholds in (0,1].
void validate(const PatchConfig& cfg, int height, int width);

struct Origin {
    int row = 0;
    int col = 0;
    bool operator==(const Origin&) const = default;
};

struct Patch {
    Image pixels;
    Origin origin;
};

enum class ThresholdMode { Otsu, Fixed };

struct ForegroundConfig {
    ThresholdMode mode = ThresholdMode::Otsu;
    double fixed_threshold = 0.5;
    int morph_radius = 3;
    bool invert = false;  // foreground darker than background
};

struct ForegroundResult {
    Mask mask;
    double threshold = 0.0;
    bool empty = false;
};

// Threshold on a 256-bin histogram of values in [0,1]; pixels strictly above it are foreground.
double otsu_threshold(const std::vector<float>& gray);

Mask dilate(const Mask& m, int radius);
Mask erode(const Mask& m, int radius);
/// Opening followed by closing with a disk of the given radius.
Mask open_close(const Mask& m, int radius);

ForegroundResult foreground_mask(const Image& img, const ForegroundConfig& cfg);

enum class PairKind { Normal, Outlier };

/// Two P x P views of `img`. Normal: the first patch meets the foreground
/// coverage threshold and the second overlaps it by at least tau_over.
/// Outlier: the pair overlaps by tau_over and one of them touches the anomaly mask.
/// Throws DataError("patch sampling failed: ...") when no placement exists.
std::pair<Patch, Patch> sample_positive_patch_pair(const Image& img, const MaskPair& masks,
                                                   PairKind kind, const PatchConfig& cfg, Rng& rng);

// Overlap area between two P x P patches divided by P*P.
double patch_overlap(Origin a, Origin b, int patch);

struct GridDims {
    int rows = 0;
    int cols = 0;
    int count() const { return rows * cols; }
};

GridDims grid_dims(int height, int width, int patch, int stride);

/// Row-major grid of patches at origins {0, S, 2S, ...} up to H-P and W-P.
std::vector<Patch> extract_patch_grid(const Image& img, int patch, int stride);

}  // namespace firm::patch
