#include "firm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "firm/error.hpp"
#include "firm/io.hpp"

namespace firm::eval {
namespace fs = std::filesystem;

Layout parse_layout(const std::string& name) {
    if (name == "mvtec") return Layout::MVTec;
    if (name == "semantic") return Layout::Semantic;
    throw ConfigError("unknown dataset layout: " + name);
}

namespace {

Image load_image(const fs::path& path, const IngestConfig& cfg) {
    Image img = io::read_png(path.string(), cfg.channels);
    if (cfg.image_size > 0) img = resize_bilinear(img, cfg.image_size, cfg.image_size);
    return img;
}

Mask resize_nearest(const Mask& m, int h, int w) {
    if (m.height == h && m.width == w) return m;
    Mask out(h, w);
    for (int r = 0; r < h; ++r) {
        const int sr = std::min(m.height - 1, static_cast<int>((r + 0.5) * m.height / h));
        for (int c = 0; c < w; ++c) {
            const int sc = std::min(m.width - 1, static_cast<int>((c + 0.5) * m.width / w));
            out.at(r, c) = m.at(sr, sc);
        }
    }
    return out;
}

std::vector<std::string> sorted_subdirs(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("missing directory: " + dir.string());
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_directory()) names.push_back(e.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    return names;
}

std::string relative_id(const fs::path& root, const std::string& file) {
    return fs::relative(fs::path(file), root).generic_string();
}

}  // namespace

Dataset ingest_dataset(const std::string& root_str, const IngestConfig& cfg) {
    const fs::path root(root_str);
    if (!fs::is_directory(root)) throw DataError("missing dataset root: " + root_str);
    const std::string normal = cfg.layout == Layout::MVTec ? "good" : cfg.normal_class;
    Dataset data;

    for (const auto& file : io::list_png_files((root / "train" / normal).string())) {
        LabeledSample s;
        s.image = load_image(file, cfg);
        s.label = kInlierLabel;
        s.source_id = relative_id(root, file);
        data.train.push_back(std::move(s));
    }
    if (data.train.empty()) throw DataError("no training images under " + (root / "train" / normal).string());

    for (const auto& type : sorted_subdirs(root / "test")) {
        for (const auto& file : io::list_png_files((root / "test" / type).string())) {
            TestSample t;
            t.image = load_image(file, cfg);
            t.truth = type == normal ? Truth::Inlier : Truth::Anomaly;
            t.id = relative_id(root, file);
            t.defect_type = type;
            if (cfg.layout == Layout::MVTec) {
                const fs::path gt = root / "ground_truth" / type / (fs::path(file).stem().string() + "_mask.png");
                if (fs::exists(gt)) t.ground_truth = resize_nearest(io::read_mask_png(gt.string()), t.image.height, t.image.width);
            }
            data.test.push_back(std::move(t));
        }
    }
    if (data.test.empty()) throw DataError("no test images under " + (root / "test").string());
    return data;
}

const std::vector<std::string>& toy_shape_names() {
    static const std::vector<std::string> names{"tee", "plus", "ell", "box", "cross", "ring"};
    return names;
}

namespace {

struct Segment {
    double y0, x0, y1, x1;
};

std::vector<Segment> glyph(int shape) {
    switch (shape) {
        case 0: return {{0.2, 0.2, 0.2, 0.8}, {0.2, 0.5, 0.8, 0.5}};
        case 1: return {{0.5, 0.2, 0.5, 0.8}, {0.2, 0.5, 0.8, 0.5}};
        case 2: return {{0.2, 0.3, 0.8, 0.3}, {0.8, 0.3, 0.8, 0.75}};
        case 3: return {{0.25, 0.25, 0.25, 0.75}, {0.25, 0.75, 0.75, 0.75}, {0.75, 0.75, 0.75, 0.25}, {0.75, 0.25, 0.25, 0.25}};
        case 4: return {{0.2, 0.2, 0.8, 0.8}, {0.2, 0.8, 0.8, 0.2}};
        case 5: {
            std::vector<Segment> ring;
            const int n = 16;
            for (int i = 0; i < n; ++i) {
                const double a0 = 2 * std::numbers::pi * i / n, a1 = 2 * std::numbers::pi * (i + 1) / n;
                ring.push_back({0.5 + 0.3 * std::sin(a0), 0.5 + 0.3 * std::cos(a0), 0.5 + 0.3 * std::sin(a1),
                                0.5 + 0.3 * std::cos(a1)});
            }
            return ring;
        }
        default: throw std::invalid_argument("unknown toy shape");
    }
}

double segment_distance(double py, double px, const Segment& s) {
    const double vy = s.y1 - s.y0, vx = s.x1 - s.x0;
    const double len2 = vy * vy + vx * vx;
    double t = len2 > 0.0 ? ((py - s.y0) * vy + (px - s.x0) * vx) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dy = py - (s.y0 + t * vy), dx = px - (s.x0 + t * vx);
    return std::sqrt(dy * dy + dx * dx);
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

}  // namespace

Image draw_toy_shape(int shape, int size, Rng& rng, double noise) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double scale = 0.6 + 0.4 * u(rng);
    const double oy = (u(rng) - 0.5) * 0.4, ox = (u(rng) - 0.5) * 0.4;
    const double angle = (u(rng) - 0.5) * 0.5;
    const double thickness = (1.0 + 0.8 * u(rng)) / size;  // in unit coordinates
    const double intensity = 0.45 + 0.55 * u(rng);
    std::normal_distribution<double> n(0.0, noise);
    auto segs = glyph(shape);
    const double ca = std::cos(angle), sa = std::sin(angle);
    auto place = [&](double& y, double& x) {
        const double dy = (y - 0.5) * scale, dx = (x - 0.5) * scale;
        y = 0.5 + ca * dy - sa * dx + oy;
        x = 0.5 + sa * dy + ca * dx + ox;
    };
    for (auto& s : segs) {
        place(s.y0, s.x0);
        place(s.y1, s.x1);
    }
    Image img(size, size, 1);
    for (int r = 0; r < size; ++r) {
        for (int c = 0; c < size; ++c) {
            const double py = (r + 0.5) / size, px = (c + 0.5) / size;
            double d = 1e9;
            for (const auto& s : segs) d = std::min(d, segment_distance(py, px, s));
            // One-pixel antialiased edge.
            const double cover = std::clamp(1.0 - (d - thickness / 2) * size, 0.0, 1.0);
            img.at(r, c) = clamp01(0.05 + intensity * cover + n(rng));
        }
    }
    return img;
}

Dataset make_toy_dataset(const ToyConfig& cfg) {
    const int shapes = static_cast<int>(toy_shape_names().size());
    if (cfg.normal_shape < 0 || cfg.normal_shape >= shapes) throw ConfigError("toy normal_shape out of range");
    Rng rng(cfg.seed);
    Dataset data;
    for (int i = 0; i < cfg.train_count; ++i) {
        data.train.push_back({draw_toy_shape(cfg.normal_shape, cfg.image_size, rng, cfg.noise), kInlierLabel,
                              "train/" + toy_shape_names()[cfg.normal_shape] + "/" + std::to_string(i)});
    }
    for (int i = 0; i < cfg.test_inliers; ++i) {
        TestSample t;
        t.image = draw_toy_shape(cfg.normal_shape, cfg.image_size, rng, cfg.noise);
        t.truth = Truth::Inlier;
        t.defect_type = toy_shape_names()[cfg.normal_shape];
        t.id = "test/" + t.defect_type + "/" + std::to_string(i);
        data.test.push_back(std::move(t));
    }
    for (int i = 0; i < cfg.test_anomalies; ++i) {
        int shape = i % (shapes - 1);
        if (shape >= cfg.normal_shape) ++shape;
        TestSample t;
        t.image = draw_toy_shape(shape, cfg.image_size, rng, cfg.noise);
        t.truth = Truth::Anomaly;
        t.defect_type = toy_shape_names()[shape];
        t.id = "test/" + t.defect_type + "/" + std::to_string(i);
        data.test.push_back(std::move(t));
    }
    return data;
}

namespace {

Image draw_object(int size, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> n(0.0, 0.03);
    const double cy = size / 2.0 + (u(rng) - 0.5) * 2.0, cx = size / 2.0 + (u(rng) - 0.5) * 2.0;
    const double radius = size * (0.36 + 0.02 * u(rng));
    const double phase = 2 * std::numbers::pi * u(rng);
    const double period = size / 8.0;
    Image img(size, size, 1);
    for (int r = 0; r < size; ++r) {
        for (int c = 0; c < size; ++c) {
            const double d = std::hypot(r + 0.5 - cy, c + 0.5 - cx);
            const double inside = std::clamp(radius - d + 0.5, 0.0, 1.0);
            const double texture = 0.65 + 0.06 * std::sin(2 * std::numbers::pi * (r + c) / period + phase);
            img.at(r, c) = clamp01(0.08 + inside * (texture - 0.08) + n(rng));
        }
    }
    return img;
}

// Draws a dark defect inside the object and returns its mask.
Mask add_defect(Image& img, Rng& rng) {
    const int size = img.height;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Mask m(size, size);
    const double cy = size / 2.0, cx = size / 2.0, reach = size * 0.22;
    const double ay = cy + (u(rng) - 0.5) * 2 * reach, ax = cx + (u(rng) - 0.5) * 2 * reach;
    if (u(rng) < 0.5) {
        const double angle = u(rng) * std::numbers::pi, len = size * (0.12 + 0.1 * u(rng));
        const Segment s{ay, ax, ay + len * std::sin(angle), ax + len * std::cos(angle)};
        for (int r = 0; r < size; ++r)
            for (int c = 0; c < size; ++c)
                if (segment_distance(r + 0.5, c + 0.5, s) <= 1.2) m.at(r, c) = 1;
    } else {
        const double rad = size * (0.04 + 0.04 * u(rng));
        for (int r = 0; r < size; ++r)
            for (int c = 0; c < size; ++c)
                if (std::hypot(r + 0.5 - ay, c + 0.5 - ax) <= rad) m.at(r, c) = 1;
    }
    const double shade = 0.15 + 0.15 * u(rng);
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c)
            if (m.at(r, c)) img.at(r, c) = static_cast<float>(shade);
    return m;
}

}  // namespace

Dataset make_toy_industrial_dataset(const ToyIndustrialConfig& cfg) {
    Rng rng(cfg.seed);
    Dataset data;
    for (int i = 0; i < cfg.train_count; ++i) {
        data.train.push_back({draw_object(cfg.image_size, rng), kInlierLabel, "train/good/" + std::to_string(i)});
    }
    for (int i = 0; i < cfg.test_inliers; ++i) {
        TestSample t;
        t.image = draw_object(cfg.image_size, rng);
        t.truth = Truth::Inlier;
        t.defect_type = "good";
        t.id = "test/good/" + std::to_string(i);
        data.test.push_back(std::move(t));
    }
    for (int i = 0; i < cfg.test_anomalies; ++i) {
        TestSample t;
        t.image = draw_object(cfg.image_size, rng);
        t.ground_truth = add_defect(t.image, rng);
        t.truth = Truth::Anomaly;
        t.defect_type = "defect";
        t.id = "test/defect/" + std::to_string(i);
        data.test.push_back(std::move(t));
    }
    return data;
}

void write_mvtec_layout(const Dataset& data, const std::string& root_str) {
    const fs::path root(root_str);
    fs::create_directories(root / "train" / "good");
    char name[32];
    for (std::size_t i = 0; i < data.train.size(); ++i) {
        std::snprintf(name, sizeof(name), "%03zu.png", i);
        io::write_png((root / "train" / "good" / name).string(), data.train[i].image);
    }
    std::size_t counter = 0;
    for (const auto& t : data.test) {
        const std::string type = t.truth == Truth::Inlier ? "good" : (t.defect_type.empty() ? "defect" : t.defect_type);
        fs::create_directories(root / "test" / type);
        std::snprintf(name, sizeof(name), "%03zu", counter++);
        io::write_png((root / "test" / type / (std::string(name) + ".png")).string(), t.image);
        if (t.ground_truth) {
            fs::create_directories(root / "ground_truth" / type);
            io::write_mask_png((root / "ground_truth" / type / (std::string(name) + "_mask.png")).string(), *t.ground_truth);
        }
    }
}

}  // namespace firm::eval
