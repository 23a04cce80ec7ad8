#pragma once

#include <span>
#include <vector>

#include "firm/core.hpp"

namespace firm::losses {

struct LossConfig {
    double temperature = 0.2;
};

struct LossReport {
    double value = 0.0;
    Vec per_anchor;
    std::vector<Vec> gradients;     // empty unless requested
    std::vector<int> skipped_anchors;  // anchors with an empty positive set
};

/// Single-positive NT-Xent over unit-norm embeddings.
/// Throws std::invalid_argument("embeddings must be unit-norm") otherwise.
LossReport ntxent_loss(std::span<const Vec> z, std::span<const int> pair_of, double temperature);

/// Multi-positive contrastive loss: each anchor averages -log softmax over its
/// positive set. Anchors with no positives contribute zero and are listed in
/// skipped_anchors.
LossReport contrastive_loss(std::span<const Vec> z, std::span<const int> labels,
                            std::span<const int> pair_of, PositiveSetPolicy policy,
                            double temperature, bool with_gradient = false);

/// dL/dz_i with each z_i treated as a free vector.
std::vector<Vec> loss_gradient(std::span<const Vec> z, std::span<const int> labels,
                               std::span<const int> pair_of, PositiveSetPolicy policy,
                               double temperature);

/// Loss on raw (unnormalized) projections. The gradients are with respect to
/// the raw vectors, i.e. the normalization Jacobian is applied.
LossReport projection_loss(std::span<const Vec> raw, std::span<const int> labels,
                           std::span<const int> pair_of, PositiveSetPolicy policy,
                           double temperature);

namespace detail {
// The loss formula evaluated on arbitrary vectors, no unit-norm check.
LossReport contrastive_objective(std::span<const Vec> z, std::span<const int> labels,
                                 std::span<const int> pair_of, PositiveSetPolicy policy,
                                 double temperature, bool with_gradient);
}  // namespace detail

}  // namespace firm::losses
