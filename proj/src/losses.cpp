#include "firm/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "firm/error.hpp"

namespace firm::losses {
namespace {

void check_inputs(std::span<const Vec> z, std::span<const int> pair_of, double temperature) {
    if (z.size() < 2) throw std::invalid_argument("loss needs at least one pair");
    if (pair_of.size() != z.size()) throw std::invalid_argument("pair_of size mismatch");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    const std::size_t d = z.front().size();
    for (const auto& v : z) {
        if (v.size() != d) throw std::invalid_argument("embedding dimension mismatch");
        if (!is_unit_norm(v)) throw std::invalid_argument("embeddings must be unit-norm");
    }
}

// logits[a] = z_i . z_a / tau for a != i; entry i is unused.
void anchor_logits(std::span<const Vec> z, int i, double temperature, Vec& logits) {
    const int n = static_cast<int>(z.size());
    logits.assign(n, 0.0);
    for (int a = 0; a < n; ++a) {
        if (a != i) logits[a] = dot(z[i], z[a]) / temperature;
    }
}

double log_sum_exp_excluding(const Vec& logits, int skip) {
    double m = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < static_cast<int>(logits.size()); ++a) {
        if (a != skip) m = std::max(m, logits[a]);
    }
    double s = 0.0;
    for (int a = 0; a < static_cast<int>(logits.size()); ++a) {
        if (a != skip) s += std::exp(logits[a] - m);
    }
    return m + std::log(s);
}

}  // namespace

LossReport ntxent_loss(std::span<const Vec> z, std::span<const int> pair_of, double temperature) {
    check_inputs(z, pair_of, temperature);
    const int n = static_cast<int>(z.size());
    LossReport report;
    report.per_anchor.assign(n, 0.0);
    Vec logits;
    for (int i = 0; i < n; ++i) {
        anchor_logits(z, i, temperature, logits);
        report.per_anchor[i] = log_sum_exp_excluding(logits, i) - logits[pair_of[i]];
        report.value += report.per_anchor[i];
    }
    return report;
}

namespace detail {

LossReport contrastive_objective(std::span<const Vec> z, std::span<const int> labels,
                                 std::span<const int> pair_of, PositiveSetPolicy policy,
                                 double temperature, bool with_gradient) {
    const int n = static_cast<int>(z.size());
    const std::size_t d = z.front().size();
    LossReport report;
    report.per_anchor.assign(n, 0.0);
    if (with_gradient) report.gradients.assign(n, Vec(d, 0.0));

    Vec logits;
    Vec coef(n);
    for (int i = 0; i < n; ++i) {
        const auto positives = positive_set(policy, labels, pair_of, i);
        if (positives.empty()) {
            report.skipped_anchors.push_back(i);
            continue;
        }
        anchor_logits(z, i, temperature, logits);
        const double lse = log_sum_exp_excluding(logits, i);
        const double inv_p = 1.0 / static_cast<double>(positives.size());
        double term = 0.0;
        for (int p : positives) term += lse - logits[p];
        report.per_anchor[i] = term * inv_p;
        report.value += report.per_anchor[i];

        if (!with_gradient) continue;
        // d term / d s_ia = (softmax_ia - [a in P] / |P|) / tau
        for (int a = 0; a < n; ++a) coef[a] = a == i ? 0.0 : std::exp(logits[a] - lse);
        for (int p : positives) coef[p] -= inv_p;
        Vec& gi = report.gradients[i];
        for (int a = 0; a < n; ++a) {
            if (a == i) continue;
            const double c = coef[a] / temperature;
            Vec& ga = report.gradients[a];
            for (std::size_t k = 0; k < d; ++k) {
                gi[k] += c * z[a][k];
                ga[k] += c * z[i][k];
            }
        }
    }
    return report;
}

}  // namespace detail

LossReport contrastive_loss(std::span<const Vec> z, std::span<const int> labels,
                            std::span<const int> pair_of, PositiveSetPolicy policy,
                            double temperature, bool with_gradient) {
    check_inputs(z, pair_of, temperature);
    if (labels.size() != z.size()) throw std::invalid_argument("labels size mismatch");
    return detail::contrastive_objective(z, labels, pair_of, policy, temperature, with_gradient);
}

std::vector<Vec> loss_gradient(std::span<const Vec> z, std::span<const int> labels,
                               std::span<const int> pair_of, PositiveSetPolicy policy,
                               double temperature) {
    return contrastive_loss(z, labels, pair_of, policy, temperature, true).gradients;
}

LossReport projection_loss(std::span<const Vec> raw, std::span<const int> labels,
                           std::span<const int> pair_of, PositiveSetPolicy policy,
                           double temperature) {
    std::vector<Vec> z;
    Vec norms;
    z.reserve(raw.size());
    for (const auto& v : raw) {
        auto e = normalize_embedding(v);
        norms.push_back(l2_norm(v));
        z.push_back(std::move(e.values));
    }
    LossReport report = contrastive_loss(z, labels, pair_of, policy, temperature, true);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        // d z / d v = (I - z z^T) / |v|
        Vec& g = report.gradients[i];
        const double along = dot(g, z[i]);
        for (std::size_t k = 0; k < g.size(); ++k) g[k] = (g[k] - along * z[i][k]) / norms[i];
    }
    if (!std::isfinite(report.value)) throw NumericalError("non-finite loss");
    return report;
}

}  // namespace firm::losses
