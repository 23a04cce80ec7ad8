#include "firm/patch.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "firm/error.hpp"

namespace firm::patch {

void validate(const MaskPair& masks) {
    if (!mask_subset(masks.anomaly, masks.foreground)) {
        throw std::invalid_argument("anomaly mask must be a subset of the foreground mask");
    }
}

void validate(const PatchConfig& cfg, int height, int width) {
    if (!(cfg.stride > 0 && cfg.stride < cfg.patch && cfg.patch <= std::min(height, width))) {
        throw ConfigError("patch config requires 0 < stride < patch <= min(H, W)");
    }
    if (!(cfg.tau_fore > 0.0 && cfg.tau_fore <= 1.0 && cfg.tau_over > 0.0 && cfg.tau_over <= 1.0)) {
        throw ConfigError("tau_fore and tau_over must lie in (0, 1]");
    }
}

namespace {

constexpr int kBins = 256;

int histogram_bin(float v) {
    return std::clamp(static_cast<int>(std::floor(static_cast<double>(v) * kBins)), 0, kBins - 1);
}

std::vector<std::array<int, 2>> disk_offsets(int radius) {
    std::vector<std::array<int, 2>> offsets;
    for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
            if (dy * dy + dx * dx <= radius * radius) offsets.push_back({dy, dx});
        }
    }
    return offsets;
}

}  // namespace

double otsu_threshold(const std::vector<float>& gray) {
    std::array<double, kBins> hist{};
    for (float v : gray) hist[histogram_bin(v)] += 1.0;
    const double total = static_cast<double>(gray.size());
    double sum_all = 0.0;
    for (int k = 0; k < kBins; ++k) sum_all += k * hist[k];

    double w0 = 0.0, sum0 = 0.0, best = -1.0;
    int best_k = kBins - 1;
    for (int k = 0; k < kBins; ++k) {
        w0 += hist[k];
        sum0 += k * hist[k];
        const double w1 = total - w0;
        if (w0 == 0.0 || w1 == 0.0) continue;
        const double m0 = sum0 / w0;
        const double m1 = (sum_all - sum0) / w1;
        const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if (between > best) {
            best = between;
            best_k = k;
        }
    }
    // Upper edge of the last background bin.
    return static_cast<double>(best_k + 1) / kBins;
}

Mask dilate(const Mask& m, int radius) {
    if (radius <= 0) return m;
    const auto offsets = disk_offsets(radius);
    Mask out(m.height, m.width);
    for (int r = 0; r < m.height; ++r) {
        for (int c = 0; c < m.width; ++c) {
            for (const auto& [dy, dx] : offsets) {
                const int y = r + dy, x = c + dx;
                if (y >= 0 && y < m.height && x >= 0 && x < m.width && m.at(y, x)) {
                    out.at(r, c) = 1;
                    break;
                }
            }
        }
    }
    return out;
}

Mask erode(const Mask& m, int radius) {
    if (radius <= 0) return m;
    const auto offsets = disk_offsets(radius);
    Mask out(m.height, m.width);
    for (int r = 0; r < m.height; ++r) {
        for (int c = 0; c < m.width; ++c) {
            bool keep = true;
            for (const auto& [dy, dx] : offsets) {
                const int y = r + dy, x = c + dx;
                // Pixels beyond the border do not erode.
                if (y >= 0 && y < m.height && x >= 0 && x < m.width && !m.at(y, x)) {
                    keep = false;
                    break;
                }
            }
            out.at(r, c) = keep ? 1 : 0;
        }
    }
    return out;
}

Mask open_close(const Mask& m, int radius) {
    const Mask opened = dilate(erode(m, radius), radius);
    return erode(dilate(opened, radius), radius);
}

ForegroundResult foreground_mask(const Image& img, const ForegroundConfig& cfg) {
    const auto gray = to_gray(img);
    ForegroundResult result;
    Mask raw(img.height, img.width);
    if (cfg.mode == ThresholdMode::Otsu) {
        result.threshold = otsu_threshold(gray);
        const int edge_bin = static_cast<int>(std::lround(result.threshold * kBins));
        for (std::size_t i = 0; i < gray.size(); ++i) {
            const bool above = histogram_bin(gray[i]) >= edge_bin;
            raw.data[i] = (above != cfg.invert) ? 1 : 0;
        }
        // A single occupied bin carries no split.
        if (edge_bin >= kBins) std::fill(raw.data.begin(), raw.data.end(), 0);
    } else {
        result.threshold = cfg.fixed_threshold;
        for (std::size_t i = 0; i < gray.size(); ++i) {
            const bool above = gray[i] > cfg.fixed_threshold;
            raw.data[i] = (above != cfg.invert) ? 1 : 0;
        }
    }
    result.mask = open_close(raw, cfg.morph_radius);
    result.empty = !result.mask.any();
    return result;
}

double patch_overlap(Origin a, Origin b, int patch) {
    const int dr = patch - std::abs(a.row - b.row);
    const int dc = patch - std::abs(a.col - b.col);
    if (dr <= 0 || dc <= 0) return 0.0;
    return static_cast<double>(dr) * dc / (static_cast<double>(patch) * patch);
}

namespace {

Patch make_patch(const Image& img, Origin o, int p) { return {crop(img, o.row, o.col, p, p), o}; }

std::vector<Origin> overlapping_origins(Origin first, int height, int width, const PatchConfig& cfg) {
    std::vector<Origin> out;
    const int p = cfg.patch;
    const int r_lo = std::max(0, first.row - p + 1), r_hi = std::min(height - p, first.row + p - 1);
    const int c_lo = std::max(0, first.col - p + 1), c_hi = std::min(width - p, first.col + p - 1);
    for (int r = r_lo; r <= r_hi; ++r) {
        for (int c = c_lo; c <= c_hi; ++c) {
            if (patch_overlap(first, {r, c}, p) >= cfg.tau_over) out.push_back({r, c});
        }
    }
    return out;
}

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng) {
    std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
    return v[d(rng)];
}

[[noreturn]] void sampling_failed(const std::string& why, const Image& img, const MaskPair& masks,
                                  const PatchConfig& cfg) {
    std::ostringstream ss;
    ss << "patch sampling failed: " << why << " (image " << img.height << "x" << img.width
       << ", P=" << cfg.patch << ", |m|=" << masks.foreground.count()
       << ", |m_anomaly|=" << masks.anomaly.count() << ", tau_fore=" << cfg.tau_fore
       << ", tau_over=" << cfg.tau_over << ")";
    throw DataError(ss.str());
}

}  // namespace

std::pair<Patch, Patch> sample_positive_patch_pair(const Image& img, const MaskPair& masks,
                                                   PairKind kind, const PatchConfig& cfg, Rng& rng) {
    const int H = img.height, W = img.width, P = cfg.patch;
    if (P > std::min(H, W) || P <= 0) sampling_failed("patch larger than image", img, masks, cfg);
    if (masks.foreground.height != H || masks.foreground.width != W || masks.anomaly.height != H ||
        masks.anomaly.width != W) {
        throw std::invalid_argument("mask and image dimensions differ");
    }
    const Mask& target = kind == PairKind::Normal ? masks.foreground : masks.anomaly;
    const IntegralMask integral(target);
    const double mask_total = static_cast<double>(integral.total());
    const double patch_area = static_cast<double>(P) * P;

    std::vector<Origin> firsts;
    for (int r = 0; r + P <= H; ++r) {
        for (int c = 0; c + P <= W; ++c) {
            const long inside = integral.rect_sum(r, c, P, P);
            bool ok = false;
            if (kind == PairKind::Outlier) {
                ok = inside > 0;
            } else if (cfg.coverage == CoverageRule::PatchFraction) {
                ok = inside / patch_area >= cfg.tau_fore;
            } else {
                ok = mask_total > 0.0 && inside / mask_total >= cfg.tau_fore;
            }
            if (ok) firsts.push_back({r, c});
        }
    }
    if (firsts.empty()) {
        sampling_failed(kind == PairKind::Normal ? "no origin meets foreground coverage"
                                                 : "no origin intersects the anomaly mask",
                        img, masks, cfg);
    }
    const Origin first = pick(firsts, rng);
    const auto seconds = overlapping_origins(first, H, W, cfg);
    if (seconds.empty()) sampling_failed("no origin meets the overlap threshold", img, masks, cfg);
    const Origin second = pick(seconds, rng);

    Patch a = make_patch(img, first, P);
    Patch b = make_patch(img, second, P);
    if (kind == PairKind::Outlier && std::bernoulli_distribution(0.5)(rng)) std::swap(a, b);
    return {std::move(a), std::move(b)};
}

GridDims grid_dims(int height, int width, int patch, int stride) {
    if (patch <= 0 || stride <= 0) throw std::invalid_argument("patch and stride must be positive");
    if (patch > std::min(height, width)) throw std::invalid_argument("patch larger than image");
    return {(height - patch) / stride + 1, (width - patch) / stride + 1};
}

std::vector<Patch> extract_patch_grid(const Image& img, int patch, int stride) {
    const GridDims dims = grid_dims(img.height, img.width, patch, stride);
    std::vector<Patch> out;
    out.reserve(dims.count());
    for (int gr = 0; gr < dims.rows; ++gr) {
        for (int gc = 0; gc < dims.cols; ++gc) {
            out.push_back(make_patch(img, {gr * stride, gc * stride}, patch));
        }
    }
    return out;
}

}  // namespace firm::patch
