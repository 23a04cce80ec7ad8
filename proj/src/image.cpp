#include "firm/image.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace firm {

std::size_t Mask::count() const {
    return static_cast<std::size_t>(std::count_if(data.begin(), data.end(),
                                                  [](std::uint8_t v) { return v != 0; }));
}

IntegralMask::IntegralMask(const Mask& m)
    : height_(m.height), width_(m.width),
      table_(static_cast<std::size_t>(m.height + 1) * (m.width + 1), 0) {
    const int stride = width_ + 1;
    for (int r = 0; r < height_; ++r) {
        long row_sum = 0;
        for (int c = 0; c < width_; ++c) {
            row_sum += m.at(r, c) ? 1 : 0;
            table_[(r + 1) * stride + (c + 1)] = table_[r * stride + (c + 1)] + row_sum;
        }
    }
}

long IntegralMask::rect_sum(int r0, int c0, int h, int w) const {
    const int stride = width_ + 1;
    const int r1 = r0 + h;
    const int c1 = c0 + w;
    return table_[r1 * stride + c1] - table_[r0 * stride + c1] - table_[r1 * stride + c0] +
           table_[r0 * stride + c0];
}

std::vector<float> to_gray(const Image& img) {
    std::vector<float> gray(static_cast<std::size_t>(img.height) * img.width);
    for (std::size_t p = 0; p < gray.size(); ++p) {
        float s = 0.0f;
        for (int ch = 0; ch < img.channels; ++ch) s += img.data[p * img.channels + ch];
        gray[p] = s / static_cast<float>(img.channels);
    }
    return gray;
}

Image crop(const Image& img, int r0, int c0, int h, int w) {
    if (r0 < 0 || c0 < 0 || h <= 0 || w <= 0 || r0 + h > img.height || c0 + w > img.width) {
        throw std::out_of_range("crop outside image bounds");
    }
    Image out(h, w, img.channels);
    const std::size_t row_len = static_cast<std::size_t>(w) * img.channels;
    for (int r = 0; r < h; ++r) {
        const float* src = &img.data[(static_cast<std::size_t>(r0 + r) * img.width + c0) * img.channels];
        std::copy(src, src + row_len, &out.data[static_cast<std::size_t>(r) * row_len]);
    }
    return out;
}

Image resize_bilinear(const Image& img, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize to empty size");
    if (out_h == img.height && out_w == img.width) return img;
    Image out(out_h, out_w, img.channels);
    const double sy = static_cast<double>(img.height) / out_h;
    const double sx = static_cast<double>(img.width) / out_w;
    for (int r = 0; r < out_h; ++r) {
        double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
        int y0 = static_cast<int>(std::floor(fy));
        int y1 = std::min(y0 + 1, img.height - 1);
        double wy = fy - y0;
        for (int c = 0; c < out_w; ++c) {
            double fx = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
            int x0 = static_cast<int>(std::floor(fx));
            int x1 = std::min(x0 + 1, img.width - 1);
            double wx = fx - x0;
            for (int ch = 0; ch < img.channels; ++ch) {
                double v = (1 - wy) * ((1 - wx) * img.at(y0, x0, ch) + wx * img.at(y0, x1, ch)) +
                           wy * ((1 - wx) * img.at(y1, x0, ch) + wx * img.at(y1, x1, ch));
                out.at(r, c, ch) = static_cast<float>(v);
            }
        }
    }
    return out;
}

Mask mask_and(const Mask& a, const Mask& b) {
    if (a.height != b.height || a.width != b.width) throw std::invalid_argument("mask size mismatch");
    Mask out(a.height, a.width);
    for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = (a.data[i] && b.data[i]) ? 1 : 0;
    return out;
}

bool mask_subset(const Mask& inner, const Mask& outer) {
    if (inner.height != outer.height || inner.width != outer.width) return false;
    for (std::size_t i = 0; i < inner.data.size(); ++i) {
        if (inner.data[i] && !outer.data[i]) return false;
    }
    return true;
}

}  // namespace firm
