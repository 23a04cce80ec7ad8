#pragma once

#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "firm/image.hpp"

namespace firm {

using Rng = std::mt19937_64;
using Vec = std::vector<double>;

/// Label 1 marks an inlier. Any other value is a synthetic-outlier group tag.
inline constexpr int kInlierLabel = 1;
inline constexpr int kOutlierLabel = 2;  // shared tag when outliers are not grouped

inline bool is_inlier(int label) { return label == kInlierLabel; }

struct LabeledSample {
    Image image;
    int label = kInlierLabel;
    std::string source_id;
};

// Throws DataError when the label or pixel range invariants are broken.
void validate_sample(const LabeledSample& s);

/// 2n augmented views. pair_of is an involution without fixed points, and
/// paired views carry the same label.
struct MultiviewBatch {
    std::vector<Image> instances;
    std::vector<int> labels;
    std::vector<int> pair_of;

    int size() const { return static_cast<int>(labels.size()); }
    int pairs() const { return size() / 2; }
};

// Checks the pairing invariants; throws std::invalid_argument on violation.
void validate_batch_structure(std::span<const int> labels, std::span<const int> pair_of);

using Augmenter = std::function<Image(const Image&, Rng&)>;

/// Views 2k and 2k+1 are independent augmentations of samples[k].
MultiviewBatch build_multiview_batch(std::span<const LabeledSample> samples,
                                     const Augmenter& augment, Rng& rng);

enum class PositiveSetPolicy {
    SinglePositive,  // {i+}
    SameLabel,       // same label, anchor excluded
    Firm,            // {i+} plus every other inlier when the anchor is an inlier
};

PositiveSetPolicy parse_policy(const std::string& name);
std::string policy_name(PositiveSetPolicy p);

/// Sorted positive indices for `anchor`; never includes the anchor.
std::vector<int> positive_set(PositiveSetPolicy policy, std::span<const int> labels,
                              std::span<const int> pair_of, int anchor);

inline std::vector<int> positive_set(PositiveSetPolicy policy, const MultiviewBatch& batch,
                                     int anchor) {
    return positive_set(policy, batch.labels, batch.pair_of, anchor);
}

struct Embedding {
    Vec values;
    bool normalized = false;
};

inline constexpr double kDegenerateNorm = 1e-12;
inline constexpr double kUnitNormTolerance = 1e-6;

double l2_norm(std::span<const double> v);
double dot(std::span<const double> a, std::span<const double> b);

// Throws NumericalError("degenerate embedding") when the norm is below 1e-12.
Embedding normalize_embedding(std::span<const double> v);

bool is_unit_norm(std::span<const double> v, double tol = kUnitNormTolerance);

}  // namespace firm
