#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "firm/core.hpp"
#include "firm/image.hpp"

namespace firm::synth {

/// Counter-clockwise right-angle rotations.
enum class RotationTag { R0 = 0, R90 = 1, R180 = 2, R270 = 3 };

RotationTag rotation_from_degrees(int degrees);
int rotation_degrees(RotationTag tag);
// Group label carried by outliers made with this rotation: 90 -> 2, 180 -> 3, 270 -> 4.
int rotation_group_label(RotationTag tag);

// Exact pixel permutation. Throws std::invalid_argument("rotation requires square input").
Image rotate_image(const Image& img, RotationTag tag);

enum class Blend { Hard, LinearFeather };

Blend parse_blend(const std::string& name);

struct Range {
    double lo;
    double hi;
};

struct CutPasteParams {
    Range area_ratio{0.02, 0.15};
    Range aspect{0.3, 3.3};
    Blend blend = Blend::Hard;
    int feather_px = 2;
};

void validate(const CutPasteParams& p);

/// Copies a random rectangle onto another random location of the same image.
/// The returned mask covers the destination rectangle; pixels outside it are untouched.
std::pair<Image, Mask> cutpaste_perturb(const Image& img, const CutPasteParams& params, Rng& rng);

struct PerlinParams {
    int grid_octaves = 2;
    double threshold = 0.5;
    int base_cells = 4;  // lattice cells along the shorter side at the first octave
    std::uint64_t seed = 0;
};

void validate(const PerlinParams& p);

/// Gradient-noise field rescaled to [0,1].
std::vector<double> perlin_field(int height, int width, const PerlinParams& params, Rng& rng);

/// Binarized noise intersected with the foreground; empty foreground gives an empty mask.
Mask perlin_anomaly_mask(const Mask& foreground, const PerlinParams& params, Rng& rng);
Mask perlin_anomaly_mask(const Mask& foreground, const PerlinParams& params);

/// Replaces pixels inside the mask with donor pixels. LinearFeather ramps the
/// donor weight from the mask border inwards over `feather_px` pixels.
Image inject_anomaly(const Image& img, const Image& donor, const Mask& anomaly, Blend blend,
                     int feather_px = 2);

struct ExternalPool {
    std::vector<Image> images;
    std::vector<std::string> ids;

    std::size_t size() const { return images.size(); }
};

// Loads every *.png in `dir` (lexicographic order) resized to height x width.
ExternalPool load_external_pool(const std::string& dir, int height, int width, int channels);

LabeledSample sample_external_outlier(const ExternalPool& pool, Rng& rng,
                                      int outlier_label = kOutlierLabel);

}  // namespace firm::synth
