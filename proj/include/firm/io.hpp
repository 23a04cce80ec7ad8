#pragma once

#include <string>
#include <vector>

#include "firm/image.hpp"

namespace firm::io {

/// Reads an 8-bit PNG as floats in [0,1]. channels = 1 or 3 forces the
/// format; 0 keeps gray images gray and converts everything else to RGB.
Image read_png(const std::string& path, int channels = 0);
void write_png(const std::string& path, const Image& img);

// Pixels > 127 are set.
Mask read_mask_png(const std::string& path);
// 8-bit, 0 = background, 255 = set.
void write_mask_png(const std::string& path, const Mask& mask);

struct HeatmapRange {
    double min = 0.0;
    double max = 0.0;
};

/// 16-bit binary PGM (P5, big-endian samples) linearly quantized between the
/// map's min and max, plus a JSON sidecar `<path>.json` holding both bounds.
HeatmapRange write_heatmap_pgm(const std::string& path, const std::vector<double>& map, int height,
                               int width);

struct Heatmap {
    int height = 0;
    int width = 0;
    std::vector<double> values;  // dequantized
};

Heatmap read_heatmap_pgm(const std::string& path);

// *.png in a directory, sorted lexicographically by filename.
std::vector<std::string> list_png_files(const std::string& dir);

std::string read_text(const std::string& path);
void write_text(const std::string& path, const std::string& text);

}  // namespace firm::io
