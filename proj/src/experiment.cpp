#include "firm/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "firm/error.hpp"
#include "firm/io.hpp"
#include "firm/metrics.hpp"

namespace firm::eval {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- augmentation

Augmenter make_augmenter(const AugmentConfig& cfg) {
    if (!cfg.enabled) return [](const Image& img, Rng&) { return img; };
    return [cfg](const Image& img, Rng& rng) {
        Image out = cfg.crop_scale_lo < 1.0 ? scoring::random_resized_crop(img, cfg.crop_scale_lo, 1.0, rng) : img;
        if (cfg.max_shift > 0) {
            std::uniform_int_distribution<int> shift(-cfg.max_shift, cfg.max_shift);
            const int dy = shift(rng), dx = shift(rng);
            Image moved(out.height, out.width, out.channels);
            for (int r = 0; r < out.height; ++r) {
                const int sr = std::clamp(r - dy, 0, out.height - 1);
                for (int c = 0; c < out.width; ++c) {
                    const int sc = std::clamp(c - dx, 0, out.width - 1);
                    for (int ch = 0; ch < out.channels; ++ch) moved.at(r, c, ch) = out.at(sr, sc, ch);
                }
            }
            out = std::move(moved);
        }
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        const double b = cfg.brightness * u(rng);
        const double k = 1.0 + cfg.contrast * u(rng);
        const double mean = std::accumulate(out.data.begin(), out.data.end(), 0.0) / static_cast<double>(out.size());
        std::normal_distribution<double> n(0.0, cfg.noise > 0.0 ? cfg.noise : 1.0);
        for (auto& v : out.data) {
            double x = (v - mean) * k + mean + b;
            if (cfg.noise > 0.0) x += n(rng);
            v = static_cast<float>(std::clamp(x, 0.0, 1.0));
        }
        return out;
    };
}

// ---------------------------------------------------------------- config

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
            throw ConfigError("unknown key in " + where + ": " + key);
        }
    }
}

template <typename T>
void opt(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad value for ") + key + ": " + e.what());
    }
}

OutlierSource parse_outliers(const std::string& s) {
    if (s == "rotations") return OutlierSource::Rotations;
    if (s == "cutpaste") return OutlierSource::CutPaste;
    if (s == "perlin-inject" || s == "perlin") return OutlierSource::Perlin;
    if (s == "external-pool" || s == "external") return OutlierSource::External;
    throw ConfigError("unknown outlier source: " + s);
}

std::string outliers_name(OutlierSource s) {
    switch (s) {
        case OutlierSource::Rotations: return "rotations";
        case OutlierSource::CutPaste: return "cutpaste";
        case OutlierSource::Perlin: return "perlin-inject";
        case OutlierSource::External: return "external-pool";
    }
    return "?";
}

const std::vector<std::string>& known_scores() {
    static const std::vector<std::string> names{"con", "con-norm", "shift", "ens", "proto", "kde"};
    return names;
}

PositiveSetPolicy policy_of(const std::string& name) {
    if (name == "ntxent") return PositiveSetPolicy::SinglePositive;
    if (name == "supcon" || name == "rot-supcon") return PositiveSetPolicy::SameLabel;
    if (name == "firm") return PositiveSetPolicy::Firm;
    throw ConfigError("unknown policy: " + name);
}

}  // namespace

ExperimentConfig experiment_config_from_json(const json& j) {
    reject_unknown(j, {"dataset", "outliers", "policy", "encoder", "train", "augment", "scores", "score",
                       "patch", "eval_every", "seed", "output_dir"},
                   "config");
    ExperimentConfig cfg;
    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        reject_unknown(d, {"source", "root", "normal_class", "image_size", "channels", "toy", "toy_industrial"}, "dataset");
        opt(d, "source", cfg.dataset.source);
        opt(d, "root", cfg.dataset.root);
        opt(d, "normal_class", cfg.dataset.normal_class);
        opt(d, "image_size", cfg.dataset.image_size);
        opt(d, "channels", cfg.dataset.channels);
        if (d.contains("toy")) {
            const json& t = d.at("toy");
            reject_unknown(t, {"image_size", "train_count", "test_inliers", "test_anomalies", "normal_shape", "noise", "seed"}, "dataset.toy");
            auto& c = cfg.dataset.toy;
            opt(t, "image_size", c.image_size);
            opt(t, "train_count", c.train_count);
            opt(t, "test_inliers", c.test_inliers);
            opt(t, "test_anomalies", c.test_anomalies);
            opt(t, "normal_shape", c.normal_shape);
            opt(t, "noise", c.noise);
            opt(t, "seed", c.seed);
        }
        if (d.contains("toy_industrial")) {
            const json& t = d.at("toy_industrial");
            reject_unknown(t, {"image_size", "train_count", "test_inliers", "test_anomalies", "seed"}, "dataset.toy_industrial");
            auto& c = cfg.dataset.toy_industrial;
            opt(t, "image_size", c.image_size);
            opt(t, "train_count", c.train_count);
            opt(t, "test_inliers", c.test_inliers);
            opt(t, "test_anomalies", c.test_anomalies);
            opt(t, "seed", c.seed);
        }
    }
    if (j.contains("outliers")) {
        const json& o = j.at("outliers");
        reject_unknown(o, {"source", "pool_dir", "cutpaste", "perlin", "blend"}, "outliers");
        std::string source = outliers_name(cfg.outliers), blend = "hard";
        opt(o, "source", source);
        cfg.outliers = parse_outliers(source);
        opt(o, "pool_dir", cfg.pool_dir);
        opt(o, "blend", blend);
        cfg.inject_blend = synth::parse_blend(blend);
        if (o.contains("cutpaste")) {
            const json& c = o.at("cutpaste");
            reject_unknown(c, {"area_ratio", "aspect", "blend", "feather_px"}, "outliers.cutpaste");
            std::vector<double> area{cfg.cutpaste.area_ratio.lo, cfg.cutpaste.area_ratio.hi};
            std::vector<double> aspect{cfg.cutpaste.aspect.lo, cfg.cutpaste.aspect.hi};
            std::string cb = "hard";
            opt(c, "area_ratio", area);
            opt(c, "aspect", aspect);
            opt(c, "blend", cb);
            opt(c, "feather_px", cfg.cutpaste.feather_px);
            if (area.size() != 2 || aspect.size() != 2) throw ConfigError("cutpaste ranges take two values");
            cfg.cutpaste.area_ratio = {area[0], area[1]};
            cfg.cutpaste.aspect = {aspect[0], aspect[1]};
            cfg.cutpaste.blend = synth::parse_blend(cb);
        }
        if (o.contains("perlin")) {
            const json& p = o.at("perlin");
            reject_unknown(p, {"grid_octaves", "threshold", "base_cells", "seed"}, "outliers.perlin");
            opt(p, "grid_octaves", cfg.perlin.grid_octaves);
            opt(p, "threshold", cfg.perlin.threshold);
            opt(p, "base_cells", cfg.perlin.base_cells);
            opt(p, "seed", cfg.perlin.seed);
        }
    }
    opt(j, "policy", cfg.policy);
    if (j.contains("encoder")) cfg.encoder = encoder::encoder_config_from_json(j.at("encoder"));
    if (j.contains("train")) cfg.train = encoder::train_config_from_json(j.at("train"));
    if (j.contains("augment")) {
        const json& a = j.at("augment");
        reject_unknown(a, {"enabled", "crop_scale_lo", "max_shift", "brightness", "contrast", "noise"}, "augment");
        opt(a, "enabled", cfg.augment.enabled);
        opt(a, "crop_scale_lo", cfg.augment.crop_scale_lo);
        opt(a, "max_shift", cfg.augment.max_shift);
        opt(a, "brightness", cfg.augment.brightness);
        opt(a, "contrast", cfg.augment.contrast);
        opt(a, "noise", cfg.augment.noise);
    }
    opt(j, "scores", cfg.scores);
    if (j.contains("score")) {
        const json& s = j.at("score");
        reject_unknown(s, {"k", "polarity", "kde_gamma", "crops_per_rotation", "crop_scale"}, "score");
        opt(s, "k", cfg.score.k);
        std::string polarity = "anomaly-high";
        opt(s, "polarity", polarity);
        if (polarity == "anomaly-high") cfg.score.polarity = scoring::Polarity::AnomalyHigh;
        else if (polarity == "similarity-raw") cfg.score.polarity = scoring::Polarity::SimilarityRaw;
        else throw ConfigError("polarity must be anomaly-high or similarity-raw");
        if (s.contains("kde_gamma") && !s.at("kde_gamma").is_null()) {
            double g = 0.0;
            opt(s, "kde_gamma", g);
            cfg.score.kde_gamma = g;
        }
        opt(s, "crops_per_rotation", cfg.score.crops_per_rotation);
        std::vector<double> scale{cfg.score.crop_scale_lo, cfg.score.crop_scale_hi};
        opt(s, "crop_scale", scale);
        if (scale.size() != 2) throw ConfigError("crop_scale takes two values");
        cfg.score.crop_scale_lo = scale[0];
        cfg.score.crop_scale_hi = scale[1];
    }
    if (j.contains("patch") && !j.at("patch").is_null()) {
        const json& p = j.at("patch");
        reject_unknown(p, {"train_patch", "eval_patch", "stride", "tau_fore", "tau_over", "coverage", "foreground", "heatmaps"}, "patch");
        PatchTrainConfig pc;
        opt(p, "train_patch", pc.train_patch);
        opt(p, "eval_patch", pc.eval_patch);
        opt(p, "stride", pc.stride);
        opt(p, "tau_fore", pc.tau_fore);
        opt(p, "tau_over", pc.tau_over);
        opt(p, "heatmaps", pc.heatmaps);
        std::string coverage = "patch";
        opt(p, "coverage", coverage);
        if (coverage == "patch") pc.coverage = patch::CoverageRule::PatchFraction;
        else if (coverage == "mask") pc.coverage = patch::CoverageRule::MaskFraction;
        else throw ConfigError("patch.coverage must be patch or mask");
        if (p.contains("foreground")) {
            const json& f = p.at("foreground");
            reject_unknown(f, {"mode", "threshold", "morph_radius", "invert"}, "patch.foreground");
            std::string mode = "otsu";
            opt(f, "mode", mode);
            if (mode == "otsu") pc.foreground.mode = patch::ThresholdMode::Otsu;
            else if (mode == "fixed") pc.foreground.mode = patch::ThresholdMode::Fixed;
            else throw ConfigError("foreground.mode must be otsu or fixed");
            opt(f, "threshold", pc.foreground.fixed_threshold);
            opt(f, "morph_radius", pc.foreground.morph_radius);
            opt(f, "invert", pc.foreground.invert);
        }
        cfg.patch = pc;
    }
    opt(j, "eval_every", cfg.eval_every);
    opt(j, "seed", cfg.seed);
    opt(j, "output_dir", cfg.output_dir);
    validate(cfg);
    return cfg;
}

json to_json(const ExperimentConfig& cfg) {
    json j;
    j["dataset"] = {{"source", cfg.dataset.source},
                    {"root", cfg.dataset.root},
                    {"normal_class", cfg.dataset.normal_class},
                    {"image_size", cfg.dataset.image_size},
                    {"channels", cfg.dataset.channels},
                    {"toy", {{"image_size", cfg.dataset.toy.image_size},
                             {"train_count", cfg.dataset.toy.train_count},
                             {"test_inliers", cfg.dataset.toy.test_inliers},
                             {"test_anomalies", cfg.dataset.toy.test_anomalies},
                             {"normal_shape", cfg.dataset.toy.normal_shape},
                             {"noise", cfg.dataset.toy.noise},
                             {"seed", cfg.dataset.toy.seed}}},
                    {"toy_industrial", {{"image_size", cfg.dataset.toy_industrial.image_size},
                                        {"train_count", cfg.dataset.toy_industrial.train_count},
                                        {"test_inliers", cfg.dataset.toy_industrial.test_inliers},
                                        {"test_anomalies", cfg.dataset.toy_industrial.test_anomalies},
                                        {"seed", cfg.dataset.toy_industrial.seed}}}};
    j["outliers"] = {{"source", outliers_name(cfg.outliers)},
                     {"pool_dir", cfg.pool_dir},
                     {"blend", cfg.inject_blend == synth::Blend::Hard ? "hard" : "linear-feather"},
                     {"cutpaste", {{"area_ratio", {cfg.cutpaste.area_ratio.lo, cfg.cutpaste.area_ratio.hi}},
                                   {"aspect", {cfg.cutpaste.aspect.lo, cfg.cutpaste.aspect.hi}},
                                   {"blend", cfg.cutpaste.blend == synth::Blend::Hard ? "hard" : "linear-feather"},
                                   {"feather_px", cfg.cutpaste.feather_px}}},
                     {"perlin", {{"grid_octaves", cfg.perlin.grid_octaves},
                                 {"threshold", cfg.perlin.threshold},
                                 {"base_cells", cfg.perlin.base_cells},
                                 {"seed", cfg.perlin.seed}}}};
    j["policy"] = cfg.policy;
    j["encoder"] = encoder::to_json(cfg.encoder);
    j["train"] = encoder::to_json(cfg.train);
    j["augment"] = {{"enabled", cfg.augment.enabled}, {"crop_scale_lo", cfg.augment.crop_scale_lo},
                    {"max_shift", cfg.augment.max_shift}, {"brightness", cfg.augment.brightness},
                    {"contrast", cfg.augment.contrast}, {"noise", cfg.augment.noise}};
    j["scores"] = cfg.scores;
    j["score"] = {{"k", cfg.score.k},
                  {"polarity", cfg.score.polarity == scoring::Polarity::AnomalyHigh ? "anomaly-high" : "similarity-raw"},
                  {"kde_gamma", cfg.score.kde_gamma ? json(*cfg.score.kde_gamma) : json(nullptr)},
                  {"crops_per_rotation", cfg.score.crops_per_rotation},
                  {"crop_scale", {cfg.score.crop_scale_lo, cfg.score.crop_scale_hi}}};
    if (cfg.patch) {
        const auto& p = *cfg.patch;
        j["patch"] = {{"train_patch", p.train_patch}, {"eval_patch", p.eval_patch}, {"stride", p.stride},
                      {"tau_fore", p.tau_fore}, {"tau_over", p.tau_over},
                      {"coverage", p.coverage == patch::CoverageRule::PatchFraction ? "patch" : "mask"},
                      {"foreground", {{"mode", p.foreground.mode == patch::ThresholdMode::Otsu ? "otsu" : "fixed"},
                                      {"threshold", p.foreground.fixed_threshold},
                                      {"morph_radius", p.foreground.morph_radius},
                                      {"invert", p.foreground.invert}}},
                      {"heatmaps", p.heatmaps}};
    } else {
        j["patch"] = nullptr;
    }
    j["eval_every"] = cfg.eval_every;
    j["seed"] = cfg.seed;
    j["output_dir"] = cfg.output_dir;
    return j;
}

void validate(const ExperimentConfig& cfg) {
    const auto& src = cfg.dataset.source;
    if (src != "toy" && src != "toy-industrial" && src != "mvtec" && src != "semantic") {
        throw ConfigError("dataset.source must be toy, toy-industrial, mvtec or semantic");
    }
    if ((src == "mvtec" || src == "semantic") && !fs::is_directory(cfg.dataset.root)) {
        throw ConfigError("dataset root does not exist: " + cfg.dataset.root);
    }
    if (cfg.outliers == OutlierSource::External && !fs::is_directory(cfg.pool_dir)) {
        throw ConfigError("external pool directory does not exist: " + cfg.pool_dir);
    }
    policy_of(cfg.policy);
    if (cfg.scores.empty()) throw ConfigError("at least one score is required");
    for (const auto& s : cfg.scores) {
        if (std::find(known_scores().begin(), known_scores().end(), s) == known_scores().end()) {
            throw ConfigError("unknown score: " + s);
        }
    }
    if (cfg.score.k < 1) throw ConfigError("score.k must be >= 1");
    if (cfg.score.kde_gamma && !(*cfg.score.kde_gamma > 0.0)) throw ConfigError("kde_gamma must be positive");
    if (cfg.score.crops_per_rotation < 1) throw ConfigError("crops_per_rotation must be >= 1");
    if (!(cfg.score.crop_scale_lo > 0.0 && cfg.score.crop_scale_lo <= cfg.score.crop_scale_hi && cfg.score.crop_scale_hi <= 1.0)) {
        throw ConfigError("crop_scale must satisfy 0 < lo <= hi <= 1");
    }
    if (!(cfg.augment.crop_scale_lo > 0.0 && cfg.augment.crop_scale_lo <= 1.0)) throw ConfigError("augment.crop_scale_lo must lie in (0,1]");
    if (cfg.augment.max_shift < 0 || cfg.augment.noise < 0.0) throw ConfigError("augment values must be non-negative");
    synth::validate(cfg.cutpaste);
    synth::validate(cfg.perlin);
    encoder::validate(cfg.train);
    if (cfg.patch) {
        const auto& p = *cfg.patch;
        if (cfg.outliers != OutlierSource::Perlin && cfg.outliers != OutlierSource::CutPaste) {
            throw ConfigError("patch training needs perlin-inject or cutpaste outliers");
        }
        if (p.train_patch < 4 || p.eval_patch < 1 || p.stride < 1 || p.stride >= p.eval_patch) {
            throw ConfigError("patch sizes must satisfy train_patch >= 4 and 0 < stride < eval_patch");
        }
        if (!(p.tau_fore > 0.0 && p.tau_fore <= 1.0 && p.tau_over > 0.0 && p.tau_over <= 1.0)) {
            throw ConfigError("tau_fore and tau_over must lie in (0,1]");
        }
        for (const auto& s : cfg.scores) {
            if (s != "con") throw ConfigError("patch mode supports the con score only");
        }
    }
    if (cfg.policy == "rot-supcon" && cfg.outliers != OutlierSource::Rotations) {
        throw ConfigError("rot-supcon needs rotation outliers to define groups");
    }
}

// ---------------------------------------------------------------- scoring helpers

scoring::FeatureFn feature_function(encoder::EncoderState& state) {
    return [&state](const Image& img) {
        const auto& c = state.config();
        if (img.height != c.input_height || img.width != c.input_width) {
            return encoder::forward(state, resize_bilinear(img, c.input_height, c.input_width)).feature;
        }
        return encoder::forward(state, img).feature;
    };
}

std::vector<double> score_images(encoder::EncoderState& state, const std::vector<LabeledSample>& train,
                                 const std::vector<TestSample>& test, const std::string& score,
                                 const scoring::ScoreConfig& cfg, Rng& rng) {
    const auto& ec = state.config();
    auto fit = [&](const Image& img) {
        return img.height == ec.input_height && img.width == ec.input_width
                   ? img
                   : resize_bilinear(img, ec.input_height, ec.input_width);
    };
    std::vector<Image> train_images;
    train_images.reserve(train.size());
    for (const auto& s : train) train_images.push_back(fit(s.image));
    std::vector<Image> test_images;
    test_images.reserve(test.size());
    for (const auto& t : test) test_images.push_back(fit(t.image));

    const auto feature = feature_function(state);
    std::vector<double> out;
    out.reserve(test.size());
    const auto pol = cfg.polarity;

    if (score == "shift" || score == "ens") {
        const auto banks = scoring::build_rotation_banks(train_images, feature);
        for (const auto& img : test_images) {
            const double s = score == "shift" ? scoring::s_shift(img, feature, banks, cfg.k)
                                              : scoring::s_ens(img, feature, banks, cfg, rng);
            out.push_back(scoring::anomaly_oriented(s, pol));
        }
        return out;
    }

    const auto train_feats = encoder::features(state, train_images);
    const auto test_feats = encoder::features(state, test_images);
    if (score == "kde") {
        const double gamma = cfg.kde_gamma ? *cfg.kde_gamma : scoring::median_heuristic_gamma(train_feats);
        for (const auto& f : test_feats) out.push_back(scoring::kde_score(f, train_feats, gamma));
        return out;
    }
    const auto bank = scoring::MemoryBank::build(train_feats, scoring::BankLevel::Image);
    if (score == "proto") {
        const auto proto = scoring::build_prototype(bank);
        for (const auto& f : test_feats) out.push_back(scoring::s_proto(normalize_embedding(f).values, proto));
        return out;
    }
    for (const auto& f : test_feats) {
        const double s = score == "con-norm" ? scoring::s_con_norm(f, bank, cfg.k)
                                             : scoring::s_con(normalize_embedding(f).values, bank, cfg.k);
        out.push_back(scoring::anomaly_oriented(s, pol));
    }
    if (score != "con" && score != "con-norm") throw ConfigError("unknown score: " + score);
    return out;
}

scoring::MemoryBank build_patch_bank(encoder::EncoderState& state, const std::vector<LabeledSample>& train,
                                     int patch_size, int stride) {
    const auto feature = feature_function(state);
    std::vector<Vec> rows;
    std::vector<std::string> ids;
    std::vector<patch::Origin> origins;
    for (const auto& s : train) {
        for (const auto& p : patch::extract_patch_grid(s.image, patch_size, stride)) {
            rows.push_back(feature(p.pixels));
            ids.push_back(s.source_id);
            origins.push_back(p.origin);
        }
    }
    return scoring::MemoryBank::build(rows, scoring::BankLevel::Patch, std::move(ids), std::move(origins));
}

std::string scores_csv(const std::vector<TestSample>& test, const std::vector<std::string>& names,
                       const std::vector<std::vector<double>>& columns) {
    std::ostringstream ss;
    ss.precision(17);
    ss << "id,label";
    for (const auto& n : names) ss << "," << n;
    ss << "\n";
    for (std::size_t i = 0; i < test.size(); ++i) {
        ss << test[i].id << "," << (test[i].truth == Truth::Anomaly ? "anomaly" : "inlier");
        for (const auto& col : columns) ss << "," << col[i];
        ss << "\n";
    }
    return ss.str();
}

std::string learning_curve_svg(const LearningCurve& curve, const std::string& title) {
    const double w = 480, h = 320, left = 50, right = 20, top = 30, bottom = 40;
    std::ostringstream ss;
    ss.precision(6);
    ss << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
    ss << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    ss << "<text x=\"" << left << "\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
    ss << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom
       << "\" stroke=\"black\"/>\n";
    ss << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom
       << "\" stroke=\"black\"/>\n";
    ss << "<text x=\"" << w / 2 << "\" y=\"" << h - 8 << "\" font-size=\"12\">epoch</text>\n";
    ss << "<text x=\"4\" y=\"" << top + 10 << "\" font-size=\"12\">AUROC</text>\n";
    if (!curve.epochs.empty()) {
        const double e0 = curve.epochs.front();
        const double span = std::max(1.0, static_cast<double>(curve.epochs.back() - curve.epochs.front()));
        ss << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
        for (std::size_t i = 0; i < curve.epochs.size(); ++i) {
            const double x = left + (curve.epochs[i] - e0) / span * (w - left - right);
            const double y = (h - bottom) - curve.aurocs[i] * (h - top - bottom);
            ss << (i ? " " : "") << x << "," << y;
        }
        ss << "\"/>\n";
    }
    ss << "</svg>\n";
    return ss.str();
}

// ---------------------------------------------------------------- experiment

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <typename F>
auto staged(const std::string& stage, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const ConfigError& e) {
        throw ConfigError("[" + stage + "] " + e.what());
    } catch (const DataError& e) {
        throw DataError("[" + stage + "] " + e.what());
    } catch (const NumericalError& e) {
        throw NumericalError("[" + stage + "] " + e.what());
    } catch (const std::exception& e) {
        throw std::runtime_error("[" + stage + "] " + e.what());
    }
}

Dataset load_data(const ExperimentConfig& cfg) {
    const auto& d = cfg.dataset;
    if (d.source == "toy") return make_toy_dataset(d.toy);
    if (d.source == "toy-industrial") return make_toy_industrial_dataset(d.toy_industrial);
    IngestConfig ic;
    ic.layout = d.source == "mvtec" ? Layout::MVTec : Layout::Semantic;
    ic.normal_class = d.normal_class;
    ic.image_size = d.image_size;
    ic.channels = d.channels;
    return ingest_dataset(d.root, ic);
}

// Builds samples plus synthetic outliers and turns them into multiview batches.
class ImageBatchSource {
public:
    ImageBatchSource(const ExperimentConfig& cfg, const Dataset& data, const synth::ExternalPool* pool,
                     std::vector<Mask> foregrounds)
        : cfg_(cfg), data_(data), pool_(pool), foregrounds_(std::move(foregrounds)),
          augment_(make_augmenter(cfg.augment)) {}

    std::vector<MultiviewBatch> operator()(int, Rng& rng) const {
        const int n = static_cast<int>(data_.train.size());
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        const int per_inlier = cfg_.outliers == OutlierSource::Rotations ? 4 : 2;
        const int inliers_per_batch = std::max(1, cfg_.train.batch_pairs / per_inlier);
        std::vector<MultiviewBatch> batches;
        for (int start = 0; start < n; start += inliers_per_batch) {
            std::vector<LabeledSample> samples;
            for (int t = start; t < std::min(n, start + inliers_per_batch); ++t) {
                const int idx = order[t];
                samples.push_back(data_.train[idx]);
                add_outliers(idx, samples, rng);
            }
            batches.push_back(build_multiview_batch(samples, augment_, rng));
        }
        return batches;
    }

private:
    void add_outliers(int idx, std::vector<LabeledSample>& out, Rng& rng) const {
        const Image& img = data_.train[idx].image;
        const std::string& id = data_.train[idx].source_id;
        switch (cfg_.outliers) {
            case OutlierSource::Rotations:
                for (int r = 1; r < 4; ++r) {
                    const auto tag = static_cast<synth::RotationTag>(r);
                    const int label = cfg_.policy == "supcon" ? kOutlierLabel : synth::rotation_group_label(tag);
                    out.push_back({synth::rotate_image(img, tag), label, id + "@rot" + std::to_string(90 * r)});
                }
                break;
            case OutlierSource::CutPaste:
                out.push_back({synth::cutpaste_perturb(img, cfg_.cutpaste, rng).first, kOutlierLabel, id + "@cutpaste"});
                break;
            case OutlierSource::Perlin:
                out.push_back({perlin_outlier(idx, rng).first, kOutlierLabel, id + "@perlin"});
                break;
            case OutlierSource::External: {
                auto s = synth::sample_external_outlier(*pool_, rng);
                s.image = resize_bilinear(s.image, img.height, img.width);
                out.push_back(std::move(s));
                break;
            }
        }
    }

public:
    // Anomaly injected under a Perlin mask inside the foreground, with a
    // rotated, intensity-shifted training image as donor.
    std::pair<Image, Mask> perlin_outlier(int idx, Rng& rng) const {
        const Image& img = data_.train[idx].image;
        const Mask& fg = foregrounds_[idx];
        std::uniform_int_distribution<int> pick(0, static_cast<int>(data_.train.size()) - 1);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (int attempt = 0; attempt < 100; ++attempt) {
            Mask anomaly = synth::perlin_anomaly_mask(fg, cfg_.perlin, rng);
            if (!anomaly.any()) continue;
            Image donor = data_.train[pick(rng)].image;
            if (donor.height == donor.width) donor = synth::rotate_image(donor, static_cast<synth::RotationTag>(1 + pick(rng) % 3));
            const double gain = 0.5 + u(rng), offset = (u(rng) - 0.5) * 0.6;
            for (auto& v : donor.data) v = static_cast<float>(std::clamp(v * gain + offset, 0.0, 1.0));
            return {synth::inject_anomaly(img, donor, anomaly, cfg_.inject_blend), std::move(anomaly)};
        }
        throw DataError("perlin anomaly mask stayed empty after 100 attempts for " + data_.train[idx].source_id);
    }

    std::pair<Image, Mask> cutpaste_outlier(int idx, Rng& rng) const {
        const Mask& fg = foregrounds_[idx];
        for (int attempt = 0; attempt < 100; ++attempt) {
            auto [img, mask] = synth::cutpaste_perturb(data_.train[idx].image, cfg_.cutpaste, rng);
            Mask anomaly = mask_and(mask, fg);
            if (anomaly.any()) return {std::move(img), std::move(anomaly)};
        }
        throw DataError("cutpaste never hit the foreground of " + data_.train[idx].source_id);
    }

    const Mask& foreground(int idx) const { return foregrounds_[idx]; }

private:
    const ExperimentConfig& cfg_;
    const Dataset& data_;
    const synth::ExternalPool* pool_;
    std::vector<Mask> foregrounds_;
    Augmenter augment_;
};

// Patch-mode batches: a foreground-constrained pair per inlier image and an
// anomaly-constrained pair per synthetic outlier.
std::vector<MultiviewBatch> patch_batches(const ExperimentConfig& cfg, const Dataset& data,
                                          const ImageBatchSource& images, Rng& rng) {
    const auto& pc = *cfg.patch;
    patch::PatchConfig sampler{pc.train_patch, std::max(1, pc.train_patch / 2), pc.tau_fore, pc.tau_over, pc.coverage};
    const int n = static_cast<int>(data.train.size());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const int per_batch = std::max(1, cfg.train.batch_pairs / 2);
    std::vector<MultiviewBatch> batches;
    for (int start = 0; start < n; start += per_batch) {
        MultiviewBatch b;
        auto push_pair = [&](std::pair<patch::Patch, patch::Patch> pair, int label) {
            const int base = b.size();
            b.instances.push_back(std::move(pair.first.pixels));
            b.instances.push_back(std::move(pair.second.pixels));
            b.labels.insert(b.labels.end(), {label, label});
            b.pair_of.insert(b.pair_of.end(), {base + 1, base});
        };
        for (int t = start; t < std::min(n, start + per_batch); ++t) {
            const int idx = order[t];
            const Image& img = data.train[idx].image;
            const Mask& fg = images.foreground(idx);
            patch::MaskPair normal{fg, Mask(img.height, img.width)};
            push_pair(patch::sample_positive_patch_pair(img, normal, patch::PairKind::Normal, sampler, rng), kInlierLabel);
            auto [outlier, anomaly] = cfg.outliers == OutlierSource::Perlin ? images.perlin_outlier(idx, rng)
                                                                            : images.cutpaste_outlier(idx, rng);
            patch::MaskPair masks{fg, std::move(anomaly)};
            push_pair(patch::sample_positive_patch_pair(outlier, masks, patch::PairKind::Outlier, sampler, rng), kOutlierLabel);
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

struct PatchEval {
    std::vector<double> image_scores;
    std::vector<scoring::ImageScore> per_image;
};

PatchEval evaluate_patches(encoder::EncoderState& state, const Dataset& data, const PatchTrainConfig& pc,
                           scoring::Polarity polarity) {
    const auto bank = build_patch_bank(state, data.train, pc.eval_patch, pc.stride);
    const auto feature = feature_function(state);
    PatchEval out;
    for (const auto& t : data.test) {
        auto s = scoring::image_score(t.image, feature, bank, pc.eval_patch, pc.stride, polarity);
        out.image_scores.push_back(polarity == scoring::Polarity::AnomalyHigh ? s.aggregate : -s.aggregate);
        out.per_image.push_back(std::move(s));
    }
    return out;
}

std::vector<Truth> truths(const Dataset& data) {
    std::vector<Truth> t;
    for (const auto& s : data.test) t.push_back(s.truth);
    return t;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg_in) {
    const auto t_start = Clock::now();
    validate(cfg_in);
    ExperimentConfig cfg = cfg_in;
    cfg.train.seed = cfg.seed;

    const fs::path out_dir = cfg.output_dir;
    if (!cfg.output_dir.empty()) {
        fs::create_directories(out_dir);
        fs::remove(out_dir / "FAILED");
    }
    std::string stage = "validate";
    try {
        stage = "data";
        const Dataset data = staged(stage, [&] { return load_data(cfg); });
        if (data.train.empty()) throw DataError("[data] no training images");
        const Rng::result_type base = cfg.seed * 0x9E3779B97F4A7C15ULL;
        Rng data_rng(base + 1), train_rng(base + 2), score_rng(base + 3);

        std::optional<synth::ExternalPool> pool;
        if (cfg.outliers == OutlierSource::External) {
            const Image& ref = data.train.front().image;
            pool = staged(stage, [&] { return synth::load_external_pool(cfg.pool_dir, ref.height, ref.width, ref.channels); });
        }
        std::vector<Mask> foregrounds;
        if (cfg.outliers == OutlierSource::Perlin || cfg.patch) {
            const patch::ForegroundConfig fc = cfg.patch ? cfg.patch->foreground : patch::ForegroundConfig{};
            for (const auto& s : data.train) {
                auto fg = patch::foreground_mask(s.image, fc);
                foregrounds.push_back(fg.empty ? Mask(s.image.height, s.image.width, true) : std::move(fg.mask));
            }
        } else {
            for (const auto& s : data.train) foregrounds.emplace_back(s.image.height, s.image.width, true);
        }
        const ImageBatchSource image_source(cfg, data, pool ? &*pool : nullptr, std::move(foregrounds));

        stage = "train";
        encoder::EncoderConfig ec = cfg.encoder;
        const Image& ref = data.train.front().image;
        ec.input_height = cfg.patch ? cfg.patch->train_patch : ref.height;
        ec.input_width = cfg.patch ? cfg.patch->train_patch : ref.width;
        ec.input_channels = ref.channels;
        encoder::EncoderState state = staged(stage, [&] { return encoder::EncoderState(ec, base); });
        cfg.encoder = ec;

        const encoder::LossSpec loss{policy_of(cfg.policy), cfg.train.temperature};
        const encoder::BatchSource source = [&](int epoch, Rng& rng) {
            if (cfg.patch) return patch_batches(cfg, data, image_source, rng);
            return image_source(epoch, rng);
        };
        const auto test_truth = truths(data);

        auto curve_auroc = [&]() {
            if (cfg.patch) return auroc(evaluate_patches(state, data, *cfg.patch, cfg.score.polarity).image_scores, test_truth);
            Rng unused(0);
            return auroc(score_images(state, data.train, data.test, "con", cfg.score, unused), test_truth);
        };

        LearningCurve curve;
        json epoch_log = json::array();
        const auto t_train = Clock::now();
        double eval_seconds = 0.0;
        auto record = [&](int epoch) {
            const auto t0 = Clock::now();
            curve.epochs.push_back(epoch);
            curve.aurocs.push_back(staged("curve", curve_auroc));
            eval_seconds += seconds_since(t0);
        };
        if (cfg.eval_every > 0) record(0);
        for (int e = 0; e < cfg.train.epochs; ++e) {
            const auto m = staged(stage, [&] { return encoder::train_epoch(state, source, loss, cfg.train, train_rng); });
            epoch_log.push_back({{"epoch", m.epoch + 1}, {"lr", m.lr}, {"mean_loss", m.mean_loss}, {"batches", m.batches},
                                 {"skipped_anchors", m.skipped_anchors}});
            const int done = e + 1;
            if (cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.train.epochs)) record(done);
        }
        const double train_seconds = seconds_since(t_train) - eval_seconds;

        stage = "score";
        const auto t_score = Clock::now();
        ExperimentResult result;
        json aurocs = json::object();
        std::optional<PatchEval> patch_eval;
        if (cfg.patch) {
            patch_eval = staged(stage, [&] { return evaluate_patches(state, data, *cfg.patch, cfg.score.polarity); });
            result.score_names.push_back("con");
            result.score_columns.push_back(patch_eval->image_scores);
        } else {
            for (const auto& name : cfg.scores) {
                result.score_names.push_back(name);
                result.score_columns.push_back(staged(stage, [&] {
                    return score_images(state, data.train, data.test, name, cfg.score, score_rng);
                }));
            }
        }
        for (std::size_t i = 0; i < result.score_names.size(); ++i) {
            aurocs[result.score_names[i]] = auroc(result.score_columns[i], test_truth);
        }

        json report;
        report["config"] = to_json(cfg);
        // The output location is not part of the experiment.
        report["config"].erase("output_dir");
        report["seed"] = cfg.seed;
        report["policy"] = cfg.policy;
        report["auroc"] = aurocs;
        report["curve"] = {{"score", "con"}, {"eval_every", cfg.eval_every}, {"epochs", curve.epochs}, {"aurocs", curve.aurocs}};
        report["aulc"] = curve.epochs.size() >= 2 ? json(aulc(curve)) : json(nullptr);
        report["epochs"] = epoch_log;
        report["train_size"] = data.train.size();
        report["test_size"] = data.test.size();
        report["parameters"] = state.params().size();

        if (patch_eval) {
            const auto& pc = *cfg.patch;
            std::vector<double> pixels;
            std::vector<Truth> pixel_truth;
            bool has_masks = false;
            const fs::path heat_dir = out_dir / "heatmaps";
            if (!cfg.output_dir.empty() && pc.heatmaps > 0) fs::create_directories(heat_dir);
            for (std::size_t i = 0; i < data.test.size(); ++i) {
                const auto& t = data.test[i];
                const auto& s = patch_eval->per_image[i];
                std::vector<double> anomaly(s.patch_similarity.size());
                for (std::size_t p = 0; p < anomaly.size(); ++p) anomaly[p] = 1.0 - s.patch_similarity[p];
                const scoring::GridGeometry geom{s.grid.rows, s.grid.cols, pc.eval_patch, pc.stride};
                const auto map = scoring::localization_map(anomaly, geom, t.image.height, t.image.width);
                if (t.ground_truth || t.truth == Truth::Inlier) {
                    has_masks = has_masks || t.ground_truth.has_value();
                    pixels.insert(pixels.end(), map.begin(), map.end());
                    for (std::size_t p = 0; p < map.size(); ++p) {
                        pixel_truth.push_back(t.ground_truth && t.ground_truth->data[p] ? Truth::Anomaly : Truth::Inlier);
                    }
                }
                if (!cfg.output_dir.empty() && static_cast<int>(i) < pc.heatmaps) {
                    char name[32];
                    std::snprintf(name, sizeof(name), "%03zu", i);
                    io::write_heatmap_pgm((heat_dir / (std::string(name) + ".pgm")).string(), map, t.image.height, t.image.width);
                }
            }
            report["pixel_auroc"] = has_masks ? json(auroc(pixels, pixel_truth)) : json(nullptr);
        }
        const double score_seconds = seconds_since(t_score);
        report["timing"] = {{"train_seconds", train_seconds}, {"curve_eval_seconds", eval_seconds},
                            {"score_seconds", score_seconds}, {"total_seconds", seconds_since(t_start)}};

        result.scored.scores = result.score_columns.front();
        result.scored.labels = test_truth;
        for (const auto& t : data.test) result.scored.ids.push_back(t.id);
        result.curve = curve;

        if (!cfg.output_dir.empty()) {
            stage = "write";
            staged(stage, [&] {
                io::write_text((out_dir / "report.json").string(), report.dump(2) + "\n");
                io::write_text((out_dir / "scores.csv").string(), scores_csv(data.test, result.score_names, result.score_columns));
                std::ostringstream curve_csv;
                curve_csv.precision(17);
                curve_csv << "epoch,auroc\n";
                for (std::size_t i = 0; i < curve.epochs.size(); ++i) curve_csv << curve.epochs[i] << "," << curve.aurocs[i] << "\n";
                io::write_text((out_dir / "curve.csv").string(), curve_csv.str());
                io::write_text((out_dir / "curve.svg").string(), learning_curve_svg(curve, cfg.policy + " learning curve"));
                encoder::save_state(state, (out_dir / "model.firm").string());
                return 0;
            });
        }
        result.report = std::move(report);
        result.model = std::move(state);
        return result;
    } catch (const std::exception& e) {
        if (!cfg.output_dir.empty()) {
            std::error_code ec;
            fs::create_directories(out_dir, ec);
            io::write_text((out_dir / "FAILED").string(), std::string(e.what()) + "\n");
        }
        throw;
    }
}

}  // namespace firm::eval
