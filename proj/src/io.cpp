#include "firm/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

#include <json.hpp>

#include "firm/error.hpp"

namespace firm::io {
namespace fs = std::filesystem;

namespace {

struct PngImage {
    png_image img;
    PngImage() {
        std::memset(&img, 0, sizeof(img));
        img.version = PNG_IMAGE_VERSION;
    }
    ~PngImage() { png_image_free(&img); }
    PngImage(const PngImage&) = delete;
    PngImage& operator=(const PngImage&) = delete;
};

std::vector<png_byte> read_png_bytes(const std::string& path, int& h, int& w, int& channels) {
    PngImage png;
    if (!png_image_begin_read_from_file(&png.img, path.c_str())) {
        throw DataError("cannot read PNG " + path + ": " + png.img.message);
    }
    if (channels == 0) channels = (png.img.format & PNG_FORMAT_FLAG_COLOR) ? 3 : 1;
    png.img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    h = static_cast<int>(png.img.height);
    w = static_cast<int>(png.img.width);
    std::vector<png_byte> buffer(PNG_IMAGE_SIZE(png.img));
    if (!png_image_finish_read(&png.img, nullptr, buffer.data(), 0, nullptr)) {
        throw DataError("cannot decode PNG " + path + ": " + png.img.message);
    }
    return buffer;
}

void write_png_bytes(const std::string& path, const std::vector<png_byte>& bytes, int h, int w,
                     int channels) {
    PngImage png;
    png.img.width = static_cast<png_uint_32>(w);
    png.img.height = static_cast<png_uint_32>(h);
    png.img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&png.img, path.c_str(), 0, bytes.data(), 0, nullptr)) {
        throw DataError("cannot write PNG " + path + ": " + png.img.message);
    }
}

}  // namespace

Image read_png(const std::string& path, int channels) {
    if (channels != 0 && channels != 1 && channels != 3) {
        throw std::invalid_argument("PNG channels must be 0, 1 or 3");
    }
    int h = 0, w = 0;
    auto bytes = read_png_bytes(path, h, w, channels);
    Image out(h, w, channels);
    for (std::size_t i = 0; i < bytes.size(); ++i) out.data[i] = static_cast<float>(bytes[i]) / 255.0f;
    return out;
}

void write_png(const std::string& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw DataError("PNG output needs 1 or 3 channels");
    std::vector<png_byte> bytes(img.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        const float v = std::clamp(img.data[i], 0.0f, 1.0f);
        bytes[i] = static_cast<png_byte>(std::lround(v * 255.0f));
    }
    write_png_bytes(path, bytes, img.height, img.width, img.channels);
}

Mask read_mask_png(const std::string& path) {
    int h = 0, w = 0, channels = 1;
    auto bytes = read_png_bytes(path, h, w, channels);
    Mask m(h, w);
    for (std::size_t i = 0; i < bytes.size(); ++i) m.data[i] = bytes[i] > 127 ? 1 : 0;
    return m;
}

void write_mask_png(const std::string& path, const Mask& mask) {
    std::vector<png_byte> bytes(mask.data.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.data[i] ? 255 : 0;
    write_png_bytes(path, bytes, mask.height, mask.width, 1);
}

HeatmapRange write_heatmap_pgm(const std::string& path, const std::vector<double>& map, int height,
                               int width) {
    if (map.size() != static_cast<std::size_t>(height) * width) {
        throw std::invalid_argument("heatmap size mismatch");
    }
    HeatmapRange range;
    if (!map.empty()) {
        auto [lo, hi] = std::minmax_element(map.begin(), map.end());
        range.min = *lo;
        range.max = *hi;
    }
    const double span = range.max - range.min;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << "P5\n" << width << " " << height << "\n65535\n";
    for (double v : map) {
        const double t = span > 0.0 ? (v - range.min) / span : 0.0;
        const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(t, 0.0, 1.0) * 65535.0));
        const char be[2] = {static_cast<char>(q >> 8), static_cast<char>(q & 0xff)};
        out.write(be, 2);
    }
    nlohmann::json sidecar = {{"min", range.min}, {"max", range.max}, {"height", height},
                              {"width", width}, {"maxval", 65535}};
    write_text(path + ".json", sidecar.dump(2) + "\n");
    return range;
}

Heatmap read_heatmap_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path);
    std::string magic;
    int maxval = 0;
    Heatmap hm;
    in >> magic >> hm.width >> hm.height >> maxval;
    in.get();
    if (magic != "P5" || maxval != 65535) throw DataError("not a 16-bit PGM: " + path);
    auto sidecar = nlohmann::json::parse(read_text(path + ".json"));
    const double lo = sidecar.at("min").get<double>();
    const double hi = sidecar.at("max").get<double>();
    hm.values.resize(static_cast<std::size_t>(hm.width) * hm.height);
    for (auto& v : hm.values) {
        unsigned char be[2];
        if (!in.read(reinterpret_cast<char*>(be), 2)) throw DataError("truncated PGM: " + path);
        const int q = (be[0] << 8) | be[1];
        v = lo + (hi - lo) * (q / 65535.0);
    }
    return hm;
}

std::vector<std::string> list_png_files(const std::string& dir) {
    if (!fs::is_directory(dir)) throw DataError("missing directory: " + dir);
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".png") {
            files.push_back(entry.path().string());
        }
    }
    std::sort(files.begin(), files.end());
    return files;
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << text;
}

}  // namespace firm::io
