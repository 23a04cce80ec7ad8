#include "firm/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "firm/error.hpp"
#include "firm/synth.hpp"

namespace firm::scoring {

MemoryBank MemoryBank::build(std::span<const Vec> raw, BankLevel level, std::vector<std::string> ids,
                             std::vector<patch::Origin> origins) {
    if (raw.empty()) throw std::invalid_argument("memory bank needs at least one row");
    MemoryBank bank;
    bank.rows_ = static_cast<int>(raw.size());
    bank.dim_ = static_cast<int>(raw.front().size());
    bank.level_ = level;
    bank.values_.reserve(raw.size() * bank.dim_);
    for (const auto& v : raw) {
        if (static_cast<int>(v.size()) != bank.dim_) throw std::invalid_argument("memory bank rows differ in size");
        const auto e = normalize_embedding(v);
        bank.values_.insert(bank.values_.end(), e.values.begin(), e.values.end());
    }
    if (!ids.empty() && ids.size() != raw.size()) throw std::invalid_argument("bank ids size mismatch");
    if (!origins.empty() && origins.size() != raw.size()) throw std::invalid_argument("bank origins size mismatch");
    bank.ids_ = std::move(ids);
    bank.origins_ = std::move(origins);
    return bank;
}

std::vector<Neighbor> nearest(std::span<const double> query, const MemoryBank& bank, int k) {
    if (k < 1) throw std::invalid_argument("k must be >= 1");
    if (k > bank.size()) throw std::invalid_argument("k exceeds memory bank size");
    if (static_cast<int>(query.size()) != bank.dim()) throw std::invalid_argument("query dimension mismatch");
    std::vector<Neighbor> all(bank.size());
    for (int i = 0; i < bank.size(); ++i) all[i] = {i, dot(query, bank.row(i))};
    auto better = [](const Neighbor& a, const Neighbor& b) {
        return a.similarity > b.similarity || (a.similarity == b.similarity && a.index < b.index);
    };
    std::partial_sort(all.begin(), all.begin() + k, all.end(), better);
    all.resize(k);
    return all;
}

double s_con(std::span<const double> query, const MemoryBank& bank, int k) {
    double s = 0.0;
    for (const auto& n : nearest(query, bank, k)) s += n.similarity;
    return s;
}

double s_con_norm(std::span<const double> raw_feature, const MemoryBank& bank, int k) {
    const double norm = l2_norm(raw_feature);
    const auto e = normalize_embedding(raw_feature);
    return s_con(e.values, bank, k) * norm;
}

RotationBanks build_rotation_banks(std::span<const Image> references, const FeatureFn& feature) {
    RotationBanks out;
    for (int r = 0; r < 4; ++r) {
        const auto tag = static_cast<synth::RotationTag>(r);
        std::vector<Vec> rows;
        rows.reserve(references.size());
        for (const auto& img : references) rows.push_back(feature(synth::rotate_image(img, tag)));
        out.banks[r] = MemoryBank::build(rows, BankLevel::Image);
    }
    return out;
}

namespace {

const MemoryBank& rotation_bank(const RotationBanks& banks, int r) {
    if (!banks.banks[r]) throw std::invalid_argument("missing rotation bank for " + std::to_string(90 * r) + " degrees");
    return *banks.banks[r];
}

double s_con_of(const Image& img, const FeatureFn& feature, const MemoryBank& bank, int k) {
    const auto e = normalize_embedding(feature(img));
    return s_con(e.values, bank, k);
}

}  // namespace

double s_shift(const Image& image, const FeatureFn& feature, const RotationBanks& banks, int k) {
    double total = 0.0;
    for (int r = 0; r < 4; ++r) {
        const auto& bank = rotation_bank(banks, r);
        total += s_con_of(synth::rotate_image(image, static_cast<synth::RotationTag>(r)), feature, bank, k);
    }
    return total / 4.0;
}

Image random_resized_crop(const Image& img, double scale_lo, double scale_hi, Rng& rng) {
    if (!(scale_lo > 0.0 && scale_lo <= scale_hi && scale_hi <= 1.0)) {
        throw std::invalid_argument("crop scale must satisfy 0 < lo <= hi <= 1");
    }
    const double s = std::uniform_real_distribution<double>(scale_lo, scale_hi)(rng);
    const double side = std::sqrt(s);
    const int h = std::clamp(static_cast<int>(std::lround(side * img.height)), 1, img.height);
    const int w = std::clamp(static_cast<int>(std::lround(side * img.width)), 1, img.width);
    const int r0 = std::uniform_int_distribution<int>(0, img.height - h)(rng);
    const int c0 = std::uniform_int_distribution<int>(0, img.width - w)(rng);
    return resize_bilinear(crop(img, r0, c0, h, w), img.height, img.width);
}

double s_ens(const Image& image, const FeatureFn& feature, const RotationBanks& banks,
             const ScoreConfig& cfg, Rng& rng) {
    if (cfg.crops_per_rotation < 1) throw std::invalid_argument("crops_per_rotation must be >= 1");
    double total = 0.0;
    for (int r = 0; r < 4; ++r) {
        const auto& bank = rotation_bank(banks, r);
        const Image rotated = synth::rotate_image(image, static_cast<synth::RotationTag>(r));
        double inner = 0.0;
        for (int i = 0; i < cfg.crops_per_rotation; ++i) {
            const Image view = random_resized_crop(rotated, cfg.crop_scale_lo, cfg.crop_scale_hi, rng);
            inner += s_con_of(view, feature, bank, cfg.k);
        }
        total += inner / cfg.crops_per_rotation;
    }
    return total / 4.0;
}

Prototype build_prototype(const MemoryBank& bank) {
    Vec mean(bank.dim(), 0.0);
    for (int i = 0; i < bank.size(); ++i) {
        const auto row = bank.row(i);
        for (int k = 0; k < bank.dim(); ++k) mean[k] += row[k];
    }
    for (auto& v : mean) v /= bank.size();
    if (l2_norm(mean) < kDegenerateNorm) throw NumericalError("degenerate prototype: bank mean is zero");
    return {normalize_embedding(mean).values};
}

double s_proto(std::span<const double> query, const Prototype& proto) {
    if (query.size() != proto.c.size()) throw std::invalid_argument("prototype dimension mismatch");
    return 1.0 - dot(query, proto.c);
}

double kde_score(std::span<const double> query, std::span<const Vec> bank, double gamma) {
    if (bank.empty()) throw std::invalid_argument("kde bank is empty");
    if (!(gamma > 0.0)) throw std::invalid_argument("kde gamma must be positive");
    Vec expo(bank.size());
    for (std::size_t j = 0; j < bank.size(); ++j) {
        if (bank[j].size() != query.size()) throw std::invalid_argument("kde dimension mismatch");
        double d2 = 0.0;
        for (std::size_t k = 0; k < query.size(); ++k) {
            const double d = query[k] - bank[j][k];
            d2 += d * d;
        }
        expo[j] = -gamma * d2;
    }
    const double m = *std::max_element(expo.begin(), expo.end());
    double s = 0.0;
    for (double e : expo) s += std::exp(e - m);
    return -(m + std::log(s)) / gamma;
}

double median_heuristic_gamma(std::span<const Vec> bank) {
    std::vector<double> d2;
    for (std::size_t i = 0; i < bank.size(); ++i) {
        for (std::size_t j = i + 1; j < bank.size(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < bank[i].size(); ++k) {
                const double d = bank[i][k] - bank[j][k];
                s += d * d;
            }
            d2.push_back(s);
        }
    }
    if (d2.empty()) return 1.0;
    auto mid = d2.begin() + static_cast<std::ptrdiff_t>(d2.size() / 2);
    std::nth_element(d2.begin(), mid, d2.end());
    return *mid > 0.0 ? 1.0 / *mid : 1.0;
}

ImageScore image_score(const Image& image, const FeatureFn& feature, const MemoryBank& patch_bank,
                       int patch, int stride, Polarity polarity) {
    ImageScore out;
    out.grid = patch::grid_dims(image.height, image.width, patch, stride);
    const auto patches = patch::extract_patch_grid(image, patch, stride);
    out.patch_similarity.reserve(patches.size());
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& p : patches) {
        const double sim = s_con_of(p.pixels, feature, patch_bank, 1);
        out.patch_similarity.push_back(sim);
        best = std::max(best, polarity == Polarity::AnomalyHigh ? 1.0 - sim : sim);
    }
    out.aggregate = best;
    return out;
}

std::vector<double> gaussian_kernel(int size, double sigma) {
    if (size < 1 || size % 2 == 0 || !(sigma > 0.0)) throw std::invalid_argument("kernel size must be odd, sigma positive");
    std::vector<double> k(size);
    const int half = size / 2;
    double total = 0.0;
    for (int i = 0; i < size; ++i) {
        const double x = i - half;
        k[i] = std::exp(-x * x / (2.0 * sigma * sigma));
        total += k[i];
    }
    for (auto& v : k) v /= total;
    return k;
}

namespace {

int mirror(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

}  // namespace

std::vector<double> gaussian_blur(const std::vector<double>& map, int height, int width, int size,
                                  double sigma) {
    if (map.size() != static_cast<std::size_t>(height) * width) throw std::invalid_argument("blur size mismatch");
    const auto k = gaussian_kernel(size, sigma);
    const int half = size / 2;
    std::vector<double> tmp(map.size()), out(map.size());
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            double s = 0.0;
            for (int t = 0; t < size; ++t) s += k[t] * map[static_cast<std::size_t>(r) * width + mirror(c + t - half, width)];
            tmp[static_cast<std::size_t>(r) * width + c] = s;
        }
    }
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            double s = 0.0;
            for (int t = 0; t < size; ++t) s += k[t] * tmp[static_cast<std::size_t>(mirror(r + t - half, height)) * width + c];
            out[static_cast<std::size_t>(r) * width + c] = s;
        }
    }
    return out;
}

std::vector<double> localization_map(std::span<const double> patch_scores, const GridGeometry& geom,
                                     int height, int width) {
    if (geom.rows < 1 || geom.cols < 1 || patch_scores.size() != static_cast<std::size_t>(geom.rows) * geom.cols) {
        throw std::invalid_argument("patch score count does not match grid dims");
    }
    if (height < 1 || width < 1 || geom.stride < 1) throw std::invalid_argument("bad localization geometry");
    const double center = (geom.patch - 1) / 2.0;
    auto axis = [&](int pixel, int cells, int& lo, int& hi, double& w) {
        const double t = std::clamp((pixel - center) / geom.stride, 0.0, static_cast<double>(cells - 1));
        lo = static_cast<int>(std::floor(t));
        hi = std::min(lo + 1, cells - 1);
        w = t - lo;
    };
    std::vector<double> up(static_cast<std::size_t>(height) * width);
    for (int r = 0; r < height; ++r) {
        int r0, r1;
        double wr;
        axis(r, geom.rows, r0, r1, wr);
        for (int c = 0; c < width; ++c) {
            int c0, c1;
            double wc;
            axis(c, geom.cols, c0, c1, wc);
            auto g = [&](int gr, int gc) { return patch_scores[static_cast<std::size_t>(gr) * geom.cols + gc]; };
            up[static_cast<std::size_t>(r) * width + c] =
                (1 - wr) * ((1 - wc) * g(r0, c0) + wc * g(r0, c1)) + wr * ((1 - wc) * g(r1, c0) + wc * g(r1, c1));
        }
    }
    return gaussian_blur(up, height, width, kLocalizationKernel, kLocalizationSigma);
}

}  // namespace firm::scoring
