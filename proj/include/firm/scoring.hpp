#pragma once

#include <array>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "firm/core.hpp"
#include "firm/image.hpp"
#include "firm/patch.hpp"

namespace firm::scoring {

enum class BankLevel { Image, Patch };

/// Immutable matrix of unit-norm reference embeddings.
class MemoryBank {
public:
    MemoryBank() = default;
    // Normalizes every row; throws NumericalError on a degenerate row.
    static MemoryBank build(std::span<const Vec> raw, BankLevel level, std::vector<std::string> ids = {},
                            std::vector<patch::Origin> origins = {});

    int size() const { return rows_; }
    int dim() const { return dim_; }
    BankLevel level() const { return level_; }
    std::span<const double> row(int i) const {
        return {values_.data() + static_cast<std::size_t>(i) * dim_, static_cast<std::size_t>(dim_)};
    }
    const std::vector<std::string>& ids() const { return ids_; }
    const std::vector<patch::Origin>& origins() const { return origins_; }

private:
    int rows_ = 0;
    int dim_ = 0;
    BankLevel level_ = BankLevel::Image;
    std::vector<double> values_;
    std::vector<std::string> ids_;
    std::vector<patch::Origin> origins_;
};

struct Neighbor {
    int index;
    double similarity;
};

/// k most similar rows by cosine, most similar first; equal similarities
/// resolve to the lower bank index.
std::vector<Neighbor> nearest(std::span<const double> query, const MemoryBank& bank, int k);

/// Sum of cosine similarities to the k nearest rows. Query must be unit-norm.
double s_con(std::span<const double> query, const MemoryBank& bank, int k);

/// s_con of the normalized feature scaled by the feature norm.
double s_con_norm(std::span<const double> raw_feature, const MemoryBank& bank, int k);

using FeatureFn = std::function<Vec(const Image&)>;

/// One bank per rotation (0, 90, 180, 270 degrees) built from rotated references.
struct RotationBanks {
    std::array<std::optional<MemoryBank>, 4> banks;
};

RotationBanks build_rotation_banks(std::span<const Image> references, const FeatureFn& feature);

double s_shift(const Image& image, const FeatureFn& feature, const RotationBanks& banks, int k);

enum class Polarity { AnomalyHigh, SimilarityRaw };

struct ScoreConfig {
    int k = 1;
    Polarity polarity = Polarity::AnomalyHigh;
    std::optional<double> kde_gamma;  // default: 1 / median pairwise squared distance
    int crops_per_rotation = 10;
    double crop_scale_lo = 0.5;
    double crop_scale_hi = 1.0;
};

/// Random resized crop: area fraction drawn from [lo, hi], resized back to the input size.
Image random_resized_crop(const Image& img, double scale_lo, double scale_hi, Rng& rng);

/// Mean of s_con over 4 rotations x crops_per_rotation random crops.
double s_ens(const Image& image, const FeatureFn& feature, const RotationBanks& banks,
             const ScoreConfig& cfg, Rng& rng);

struct Prototype {
    Vec c;
};

// Normalized mean of the bank rows; NumericalError when the mean vanishes.
Prototype build_prototype(const MemoryBank& bank);

/// 1 - cos(query, c); already anomaly-oriented, range [0, 2].
double s_proto(std::span<const double> query, const Prototype& proto);

/// -(1/gamma) log sum_y exp(-gamma |x - y|^2); higher means lower density.
double kde_score(std::span<const double> query, std::span<const Vec> bank, double gamma);

double median_heuristic_gamma(std::span<const Vec> bank);

/// Converts a similarity-type score so that larger means more anomalous.
inline double anomaly_oriented(double similarity, Polarity p) {
    return p == Polarity::AnomalyHigh ? -similarity : similarity;
}

struct ImageScore {
    double aggregate = 0.0;
    Vec patch_similarity;  // raw s_con(p, bank, 1) per grid patch, row-major
    patch::GridDims grid;
};

/// AnomalyHigh: max over patches of (1 - similarity). SimilarityRaw: max similarity.
ImageScore image_score(const Image& image, const FeatureFn& feature, const MemoryBank& patch_bank,
                       int patch, int stride, Polarity polarity = Polarity::AnomalyHigh);

struct GridGeometry {
    int rows = 0;
    int cols = 0;
    int patch = 0;
    int stride = 0;
};

std::vector<double> gaussian_kernel(int size, double sigma);

/// Separable blur with mirrored borders (edge pixel not repeated).
std::vector<double> gaussian_blur(const std::vector<double>& map, int height, int width, int size,
                                  double sigma);

inline constexpr int kLocalizationKernel = 15;
inline constexpr double kLocalizationSigma = 4.0;

/// Row-major grid -> bilinear resize to height x width with grid samples
/// anchored at patch centers -> 15x15 Gaussian blur with sigma 4.
std::vector<double> localization_map(std::span<const double> patch_scores, const GridGeometry& geom,
                                     int height, int width);

}  // namespace firm::scoring
