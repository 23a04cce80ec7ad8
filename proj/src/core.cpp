#include "firm/core.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "firm/error.hpp"

namespace firm {

void validate_sample(const LabeledSample& s) {
    if (s.label < kInlierLabel) throw DataError("label must be >= 1 for " + s.source_id);
    for (float v : s.image.data) {
        if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
            throw DataError("pixel outside [0,1] in " + s.source_id);
        }
    }
}

void validate_batch_structure(std::span<const int> labels, std::span<const int> pair_of) {
    const int n = static_cast<int>(labels.size());
    if (n == 0 || n % 2 != 0) throw std::invalid_argument("batch must hold 2n views");
    if (static_cast<int>(pair_of.size()) != n) throw std::invalid_argument("pair_of size mismatch");
    for (int i = 0; i < n; ++i) {
        const int j = pair_of[i];
        if (j < 0 || j >= n || j == i || pair_of[j] != i) {
            throw std::invalid_argument("pair_of is not a fixed-point-free involution");
        }
        if (labels[i] != labels[j]) throw std::invalid_argument("paired views differ in label");
    }
}

MultiviewBatch build_multiview_batch(std::span<const LabeledSample> samples,
                                     const Augmenter& augment, Rng& rng) {
    if (samples.empty()) throw std::invalid_argument("empty batch");
    MultiviewBatch batch;
    const int n = static_cast<int>(samples.size());
    batch.instances.reserve(2 * n);
    batch.labels.reserve(2 * n);
    batch.pair_of.reserve(2 * n);
    for (int k = 0; k < n; ++k) {
        batch.instances.push_back(augment(samples[k].image, rng));
        batch.instances.push_back(augment(samples[k].image, rng));
        batch.labels.push_back(samples[k].label);
        batch.labels.push_back(samples[k].label);
        batch.pair_of.push_back(2 * k + 1);
        batch.pair_of.push_back(2 * k);
    }
    return batch;
}

PositiveSetPolicy parse_policy(const std::string& name) {
    if (name == "ntxent" || name == "single") return PositiveSetPolicy::SinglePositive;
    if (name == "supcon" || name == "rot-supcon" || name == "same-label") return PositiveSetPolicy::SameLabel;
    if (name == "firm") return PositiveSetPolicy::Firm;
    throw ConfigError("unknown policy: " + name);
}

std::string policy_name(PositiveSetPolicy p) {
    switch (p) {
        case PositiveSetPolicy::SinglePositive: return "ntxent";
        case PositiveSetPolicy::SameLabel: return "supcon";
        case PositiveSetPolicy::Firm: return "firm";
    }
    return "unknown";
}

std::vector<int> positive_set(PositiveSetPolicy policy, std::span<const int> labels,
                              std::span<const int> pair_of, int anchor) {
    const int n = static_cast<int>(labels.size());
    std::vector<int> out;
    switch (policy) {
        case PositiveSetPolicy::SinglePositive:
            out.push_back(pair_of[anchor]);
            break;
        case PositiveSetPolicy::SameLabel:
            for (int j = 0; j < n; ++j) {
                if (j != anchor && labels[j] == labels[anchor]) out.push_back(j);
            }
            break;
        case PositiveSetPolicy::Firm: {
            const int partner = pair_of[anchor];
            const bool inlier_anchor = is_inlier(labels[anchor]);
            for (int j = 0; j < n; ++j) {
                if (j == anchor) continue;
                if (j == partner || (inlier_anchor && is_inlier(labels[j]))) out.push_back(j);
            }
            break;
        }
    }
    return out;
}

double l2_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

Embedding normalize_embedding(std::span<const double> v) {
    for (double x : v) {
        if (!std::isfinite(x)) throw NumericalError("non-finite embedding");
    }
    const double norm = l2_norm(v);
    if (norm < kDegenerateNorm) throw NumericalError("degenerate embedding");
    Embedding e;
    e.values.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) e.values[i] = v[i] / norm;
    e.normalized = true;
    return e;
}

bool is_unit_norm(std::span<const double> v, double tol) {
    return std::abs(l2_norm(v) - 1.0) < tol;
}

}  // namespace firm
