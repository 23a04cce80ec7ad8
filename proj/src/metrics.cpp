#include "firm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace firm::eval {

double auroc(std::span<const double> scores, std::span<const Truth> labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("scores and labels differ in length");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Sum of midranks (1-based) over anomalies.
    double rank_sum = 0.0;
    std::size_t positives = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t t = i; t < j; ++t) {
            if (labels[order[t]] == Truth::Anomaly) {
                rank_sum += midrank;
                ++positives;
            }
        }
        i = j;
    }
    const std::size_t negatives = n - positives;
    if (positives == 0 || negatives == 0) throw std::invalid_argument("auroc needs both inliers and anomalies");
    const double p = static_cast<double>(positives);
    const double u = rank_sum - p * (p + 1.0) / 2.0;
    return u / (p * static_cast<double>(negatives));
}

void validate(const LearningCurve& curve) {
    if (curve.epochs.size() != curve.aurocs.size()) throw std::invalid_argument("learning curve length mismatch");
    for (std::size_t i = 1; i < curve.epochs.size(); ++i) {
        if (curve.epochs[i] <= curve.epochs[i - 1]) throw std::invalid_argument("learning curve epochs must increase");
    }
    for (double a : curve.aurocs) {
        if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("learning curve values must lie in [0,1]");
    }
}

double aulc(const LearningCurve& curve) {
    validate(curve);
    if (curve.epochs.size() < 2) throw std::invalid_argument("aulc needs at least two points");
    double area = 0.0;
    for (std::size_t i = 1; i < curve.epochs.size(); ++i) {
        const double dx = curve.epochs[i] - curve.epochs[i - 1];
        area += 0.5 * dx * (curve.aurocs[i] + curve.aurocs[i - 1]);
    }
    return area / (curve.epochs.back() - curve.epochs.front());
}

double pixel_auroc(std::span<const double> map, const Mask& truth) {
    if (map.size() != truth.data.size()) throw std::invalid_argument("map and mask dimensions differ");
    std::vector<Truth> labels(truth.data.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = truth.data[i] ? Truth::Anomaly : Truth::Inlier;
    return auroc(map, labels);
}

}  // namespace firm::eval
