#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace firm {

/// Row-major H x W x C image with interleaved channels, values in [0,1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w, int c, float fill = 0.0f)
        : height(h), width(w), channels(c),
          data(static_cast<std::size_t>(h) * w * c, fill) {}

    float& at(int r, int col, int ch = 0) {
        return data[(static_cast<std::size_t>(r) * width + col) * channels + ch];
    }
    float at(int r, int col, int ch = 0) const {
        return data[(static_cast<std::size_t>(r) * width + col) * channels + ch];
    }

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
    bool same_shape(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
    bool operator==(const Image&) const = default;
};

/// Binary H x W mask stored one byte per pixel (0 or 1).
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;

    Mask() = default;
    Mask(int h, int w, bool fill = false)
        : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill ? 1 : 0) {}

    std::uint8_t& at(int r, int c) { return data[static_cast<std::size_t>(r) * width + c]; }
    std::uint8_t at(int r, int c) const { return data[static_cast<std::size_t>(r) * width + c]; }

    std::size_t count() const;
    bool any() const { return count() > 0; }
    bool operator==(const Mask&) const = default;
};

/// Summed-area table over a mask; rect_sum is O(1).
class IntegralMask {
public:
    explicit IntegralMask(const Mask& m);
    // Number of set pixels in rows [r0, r0+h) x cols [c0, c0+w).
    long rect_sum(int r0, int c0, int h, int w) const;
    long total() const { return rect_sum(0, 0, height_, width_); }

private:
    int height_;
    int width_;
    std::vector<long> table_;
};

// Channel mean.
std::vector<float> to_gray(const Image& img);

Image crop(const Image& img, int r0, int c0, int h, int w);

/// Bilinear resize with half-pixel centers; identity when size is unchanged.
Image resize_bilinear(const Image& img, int out_h, int out_w);

Mask mask_and(const Mask& a, const Mask& b);
bool mask_subset(const Mask& inner, const Mask& outer);

}  // namespace firm
