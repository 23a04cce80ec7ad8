#include "firm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "firm/error.hpp"
#include "firm/io.hpp"

namespace firm::synth {

RotationTag rotation_from_degrees(int degrees) {
    switch (((degrees % 360) + 360) % 360) {
        case 0: return RotationTag::R0;
        case 90: return RotationTag::R90;
        case 180: return RotationTag::R180;
        case 270: return RotationTag::R270;
        default: throw std::invalid_argument("rotation must be a right angle");
    }
}

int rotation_degrees(RotationTag tag) { return 90 * static_cast<int>(tag); }

int rotation_group_label(RotationTag tag) {
    return tag == RotationTag::R0 ? kInlierLabel : 1 + static_cast<int>(tag);
}

Image rotate_image(const Image& img, RotationTag tag) {
    if (img.height != img.width) throw std::invalid_argument("rotation requires square input");
    const int n = img.height;
    Image out(n, n, img.channels);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            int sr = r, sc = c;
            switch (tag) {
                case RotationTag::R0: break;
                case RotationTag::R90: sr = c; sc = n - 1 - r; break;
                case RotationTag::R180: sr = n - 1 - r; sc = n - 1 - c; break;
                case RotationTag::R270: sr = n - 1 - c; sc = r; break;
            }
            for (int ch = 0; ch < img.channels; ++ch) out.at(r, c, ch) = img.at(sr, sc, ch);
        }
    }
    return out;
}

Blend parse_blend(const std::string& name) {
    if (name == "hard") return Blend::Hard;
    if (name == "linear-feather" || name == "feather") return Blend::LinearFeather;
    throw ConfigError("unknown blend mode: " + name);
}

void validate(const CutPasteParams& p) {
    if (!(p.area_ratio.lo > 0.0 && p.area_ratio.lo <= p.area_ratio.hi && p.area_ratio.hi < 1.0)) {
        throw ConfigError("cutpaste area_ratio must satisfy 0 < lo <= hi < 1");
    }
    if (!(p.aspect.lo > 0.0 && p.aspect.lo <= p.aspect.hi)) {
        throw ConfigError("cutpaste aspect must satisfy 0 < lo <= hi");
    }
    if (p.feather_px < 0) throw ConfigError("feather_px must be >= 0");
}

namespace {

constexpr int kMaxAttempts = 100;

// Chessboard distance from each set pixel to the nearest unset pixel, minus one.
// Pixels outside the image count as set.
std::vector<int> inner_distance(const Mask& m) {
    const int h = m.height, w = m.width;
    const int inf = std::numeric_limits<int>::max() / 2;
    std::vector<int> d(m.data.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = m.data[i] ? inf : 0;
    auto at = [&](int r, int c) -> int& { return d[static_cast<std::size_t>(r) * w + c]; };
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            int& v = at(r, c);
            if (v == 0) continue;
            if (r > 0) {
                v = std::min(v, at(r - 1, c) + 1);
                if (c > 0) v = std::min(v, at(r - 1, c - 1) + 1);
                if (c + 1 < w) v = std::min(v, at(r - 1, c + 1) + 1);
            }
            if (c > 0) v = std::min(v, at(r, c - 1) + 1);
        }
    }
    for (int r = h - 1; r >= 0; --r) {
        for (int c = w - 1; c >= 0; --c) {
            int& v = at(r, c);
            if (v == 0) continue;
            if (r + 1 < h) {
                v = std::min(v, at(r + 1, c) + 1);
                if (c > 0) v = std::min(v, at(r + 1, c - 1) + 1);
                if (c + 1 < w) v = std::min(v, at(r + 1, c + 1) + 1);
            }
            if (c + 1 < w) v = std::min(v, at(r, c + 1) + 1);
        }
    }
    for (auto& v : d) v = v > 0 ? v - 1 : 0;
    return d;
}

double feather_weight(int inner_dist, int feather_px) {
    if (feather_px <= 0) return 1.0;
    return std::min(1.0, (inner_dist + 1.0) / (feather_px + 1.0));
}

}  // namespace

std::pair<Image, Mask> cutpaste_perturb(const Image& img, const CutPasteParams& params, Rng& rng) {
    validate(params);
    const int H = img.height, W = img.width;
    const double total = static_cast<double>(H) * W;
    std::uniform_real_distribution<double> area_dist(params.area_ratio.lo, params.area_ratio.hi);
    std::uniform_real_distribution<double> log_aspect(std::log(params.aspect.lo), std::log(params.aspect.hi));
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        const double area = area_dist(rng) * total;
        const double aspect = std::exp(log_aspect(rng));
        const int h = static_cast<int>(std::lround(std::sqrt(area * aspect)));
        const int w = static_cast<int>(std::lround(std::sqrt(area / aspect)));
        if (h < 1 || w < 1 || h > H || w > W) continue;
        const double ratio = h * static_cast<double>(w) / total;
        if (ratio < params.area_ratio.lo || ratio > params.area_ratio.hi) continue;

        std::uniform_int_distribution<int> row(0, H - h), col(0, W - w);
        const int sr = row(rng), sc = col(rng);
        const int dr = row(rng), dc = col(rng);

        Image out = img;
        Mask mask(H, W);
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) mask.at(dr + r, dc + c) = 1;
        }
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) {
                const int edge = std::min({r, c, h - 1 - r, w - 1 - c});
                const double a = params.blend == Blend::Hard ? 1.0 : feather_weight(edge, params.feather_px);
                for (int ch = 0; ch < img.channels; ++ch) {
                    const double src = img.at(sr + r, sc + c, ch);
                    const double dst = img.at(dr + r, dc + c, ch);
                    out.at(dr + r, dc + c, ch) = static_cast<float>(a * src + (1.0 - a) * dst);
                }
            }
        }
        return {std::move(out), std::move(mask)};
    }
    throw DataError("cutpaste sampling failed");
}

void validate(const PerlinParams& p) {
    if (p.grid_octaves < 1) throw ConfigError("perlin grid_octaves must be >= 1");
    if (!(p.threshold > 0.0 && p.threshold < 1.0)) throw ConfigError("perlin threshold must lie in (0,1)");
    if (p.base_cells < 1) throw ConfigError("perlin base_cells must be >= 1");
}

std::vector<double> perlin_field(int height, int width, const PerlinParams& params, Rng& rng) {
    validate(params);
    std::vector<double> field(static_cast<std::size_t>(height) * width, 0.0);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    auto fade = [](double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); };

    double amplitude = 1.0;
    for (int octave = 0; octave < params.grid_octaves; ++octave) {
        const double cells = params.base_cells * static_cast<double>(1 << octave);
        const double cell_px = std::min(height, width) / cells;
        const int gh = static_cast<int>(std::ceil(height / cell_px)) + 1;
        const int gw = static_cast<int>(std::ceil(width / cell_px)) + 1;
        std::vector<double> gx(static_cast<std::size_t>(gh) * gw), gy(gx.size());
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const double a = angle(rng);
            gx[i] = std::cos(a);
            gy[i] = std::sin(a);
        }
        auto corner = [&](int iy, int ix, double dy, double dx) {
            const std::size_t k = static_cast<std::size_t>(iy) * gw + ix;
            return gy[k] * dy + gx[k] * dx;
        };
        for (int r = 0; r < height; ++r) {
            const double fy = (r + 0.5) / cell_px;
            const int iy = static_cast<int>(fy);
            const double ty = fy - iy;
            for (int c = 0; c < width; ++c) {
                const double fx = (c + 0.5) / cell_px;
                const int ix = static_cast<int>(fx);
                const double tx = fx - ix;
                const double n00 = corner(iy, ix, ty, tx);
                const double n01 = corner(iy, ix + 1, ty, tx - 1.0);
                const double n10 = corner(iy + 1, ix, ty - 1.0, tx);
                const double n11 = corner(iy + 1, ix + 1, ty - 1.0, tx - 1.0);
                const double u = fade(tx), v = fade(ty);
                const double top = n00 + u * (n01 - n00);
                const double bottom = n10 + u * (n11 - n10);
                field[static_cast<std::size_t>(r) * width + c] += amplitude * (top + v * (bottom - top));
            }
        }
        amplitude *= 0.5;
    }
    auto [lo, hi] = std::minmax_element(field.begin(), field.end());
    const double min = *lo, span = *hi - *lo;
    for (auto& v : field) v = span > 0.0 ? (v - min) / span : 0.0;
    return field;
}

Mask perlin_anomaly_mask(const Mask& foreground, const PerlinParams& params, Rng& rng) {
    const auto field = perlin_field(foreground.height, foreground.width, params, rng);
    Mask out(foreground.height, foreground.width);
    for (std::size_t i = 0; i < field.size(); ++i) {
        out.data[i] = (foreground.data[i] && field[i] > params.threshold) ? 1 : 0;
    }
    return out;
}

Mask perlin_anomaly_mask(const Mask& foreground, const PerlinParams& params) {
    Rng rng(params.seed);
    return perlin_anomaly_mask(foreground, params, rng);
}

Image inject_anomaly(const Image& img, const Image& donor, const Mask& anomaly, Blend blend,
                     int feather_px) {
    if (!img.same_shape(donor) || anomaly.height != img.height || anomaly.width != img.width) {
        throw std::invalid_argument("inject_anomaly dimension mismatch");
    }
    Image out = img;
    std::vector<int> dist;
    if (blend == Blend::LinearFeather) dist = inner_distance(anomaly);
    for (std::size_t p = 0; p < anomaly.data.size(); ++p) {
        if (!anomaly.data[p]) continue;
        const double a = blend == Blend::Hard ? 1.0 : feather_weight(dist[p], feather_px);
        for (int ch = 0; ch < img.channels; ++ch) {
            const std::size_t k = p * img.channels + ch;
            out.data[k] = blend == Blend::Hard
                              ? donor.data[k]
                              : static_cast<float>(a * donor.data[k] + (1.0 - a) * img.data[k]);
        }
    }
    return out;
}

ExternalPool load_external_pool(const std::string& dir, int height, int width, int channels) {
    ExternalPool pool;
    for (const auto& path : io::list_png_files(dir)) {
        pool.images.push_back(resize_bilinear(io::read_png(path, channels), height, width));
        pool.ids.push_back(path);
    }
    if (pool.images.empty()) throw DataError("external pool is empty: " + dir);
    return pool;
}

LabeledSample sample_external_outlier(const ExternalPool& pool, Rng& rng, int outlier_label) {
    if (pool.images.empty()) throw std::invalid_argument("external pool is empty");
    if (outlier_label == kInlierLabel) throw std::invalid_argument("outlier label must differ from 1");
    std::uniform_int_distribution<std::size_t> pick(0, pool.images.size() - 1);
    const std::size_t k = pick(rng);
    LabeledSample s;
    s.image = pool.images[k];
    s.label = outlier_label;
    s.source_id = k < pool.ids.size() ? pool.ids[k] : "pool:" + std::to_string(k);
    return s;
}

}  // namespace firm::synth
