#include <gtest/gtest.h>

#include "firm/metrics.hpp"
#include "oracles.hpp"

using namespace firm;
using namespace firm::eval;

namespace {

constexpr Truth A = Truth::Anomaly;
constexpr Truth I = Truth::Inlier;

}  // namespace

TEST(Auroc, HandExamples) {
    EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, std::vector<Truth>{A, A, I, I}), 1.0);
    EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, std::vector<Truth>{A, A, I, I}), 0.5);
    EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0.8, 0.3, 0.5, 0.1}, std::vector<Truth>{A, A, I, I}), 0.75);
}

TEST(Auroc, SingleClassThrows) {
    EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, std::vector<Truth>{A, A}), std::invalid_argument);
    EXPECT_THROW(auroc(std::vector<double>{0.1}, std::vector<Truth>{A, I}), std::invalid_argument);
}

TEST(Auroc, EqualsPairCountingWithTies) {
    Rng rng(1);
    std::uniform_int_distribution<int> level(0, 6);
    std::bernoulli_distribution anomaly(0.4);
    for (int t = 0; t < 200; ++t) {
        const int n = 2 + t % 40;
        std::vector<double> s(n);
        std::vector<Truth> l(n);
        for (int i = 0; i < n; ++i) {
            s[i] = level(rng) * 0.25;
            l[i] = anomaly(rng) ? A : I;
        }
        l[0] = A;
        l[1] = I;
        EXPECT_EQ(auroc(s, l), oracle::pair_count_auroc(s, l));
    }
}

TEST(Auroc, MonotoneTransformAndNegation) {
    Rng rng(2);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> s(50), exp_s(50), neg(50);
    std::vector<Truth> l(50);
    for (int i = 0; i < 50; ++i) {
        s[i] = u(rng);
        exp_s[i] = std::exp(3.0 * s[i]) + 7.0;
        neg[i] = -s[i];
        l[i] = i % 3 == 0 ? A : I;
    }
    EXPECT_DOUBLE_EQ(auroc(s, l), auroc(exp_s, l));
    EXPECT_NEAR(auroc(s, l) + auroc(neg, l), 1.0, 1e-15);
}

TEST(Aulc, HandExamples) {
    EXPECT_NEAR(aulc({{0, 10, 20}, {0.9, 0.9, 0.9}}), 0.9, 1e-15);
    EXPECT_NEAR(aulc({{5, 105}, {0.0, 1.0}}), 0.5, 1e-15);
    EXPECT_NEAR(aulc({{0, 1, 2}, {0.5, 0.9, 0.9}}), 0.8, 1e-15);
}

TEST(Aulc, RejectsShortOrUnsortedCurves) {
    EXPECT_THROW(aulc({{0}, {0.5}}), std::invalid_argument);
    EXPECT_THROW(aulc({{0, 0}, {0.5, 0.6}}), std::invalid_argument);
    EXPECT_THROW(aulc({{0, 1}, {0.5}}), std::invalid_argument);
}

TEST(Aulc, MonotoneUnderDomination) {
    const LearningCurve low{{0, 3, 9}, {0.5, 0.6, 0.7}};
    const LearningCurve high{{0, 3, 9}, {0.5, 0.8, 0.7}};
    EXPECT_LE(aulc(low), aulc(high));
}

TEST(PixelAuroc, HandExamples) {
    Mask m(2, 2);
    m.at(0, 0) = 1;
    m.at(1, 0) = 1;
    EXPECT_DOUBLE_EQ(pixel_auroc(std::vector<double>{0.9, 0.1, 0.4, 0.2}, m), 1.0);
    EXPECT_DOUBLE_EQ(pixel_auroc(std::vector<double>{1, 0, 1, 0}, m), 1.0);
    EXPECT_DOUBLE_EQ(pixel_auroc(std::vector<double>(4, 0.3), m), 0.5);
    EXPECT_THROW(pixel_auroc(std::vector<double>{1, 2, 3}, m), std::invalid_argument);
    EXPECT_THROW(pixel_auroc(std::vector<double>(4, 0.3), Mask(2, 2)), std::invalid_argument);
}
