#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "firm/dataset.hpp"
#include "firm/encoder.hpp"
#include "firm/error.hpp"
#include "firm/experiment.hpp"
#include "firm/io.hpp"
#include "firm/metrics.hpp"
#include "firm/patch.hpp"
#include "firm/scoring.hpp"
#include "firm/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace firm;

namespace {

int cmd_train(const std::string& config_path, const std::string& out) {
    json j;
    try {
        j = json::parse(io::read_text(config_path));
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    auto cfg = eval::experiment_config_from_json(j);
    cfg.output_dir = out;
    const auto result = eval::run_experiment(cfg);
    std::cout << "policy " << cfg.policy << "\n";
    for (const auto& [name, value] : result.report.at("auroc").items()) {
        std::cout << "auroc[" << name << "] " << value.get<double>() << "\n";
    }
    if (!result.report.at("aulc").is_null()) std::cout << "aulc " << result.report.at("aulc").get<double>() << "\n";
    std::cout << "wrote " << out << "\n";
    return 0;
}

eval::Dataset load_for_model(const encoder::EncoderState& state, const std::string& root, const std::string& layout) {
    eval::IngestConfig ic;
    ic.layout = eval::parse_layout(layout);
    ic.channels = state.config().input_channels;
    return eval::ingest_dataset(root, ic);
}

int cmd_score(const std::string& model, const std::string& data, const std::string& layout, const std::string& score,
              int k, const std::string& out) {
    auto state = encoder::load_state(model);
    const auto ds = load_for_model(state, data, layout);
    scoring::ScoreConfig sc;
    sc.k = k;
    Rng rng(0);
    const auto scores = eval::score_images(state, ds.train, ds.test, score, sc, rng);
    io::write_text(out, eval::scores_csv(ds.test, {score}, {scores}));
    std::vector<eval::Truth> truth;
    for (const auto& t : ds.test) truth.push_back(t.truth);
    bool both = false;
    for (const auto t : truth) both = both || t != truth.front();
    if (both) std::cout << "auroc[" << score << "] " << eval::auroc(scores, truth) << "\n";
    return 0;
}

int cmd_localize(const std::string& model, const std::string& image, const std::string& data, const std::string& layout,
                 int patch_size, int stride, const std::string& out) {
    auto state = encoder::load_state(model);
    const int channels = state.config().input_channels;
    const auto ds = load_for_model(state, data, layout);
    const Image img = io::read_png(image, channels);
    const auto bank = eval::build_patch_bank(state, ds.train, patch_size, stride);
    const auto feature = eval::feature_function(state);
    const auto s = scoring::image_score(img, feature, bank, patch_size, stride, scoring::Polarity::AnomalyHigh);
    std::vector<double> anomaly(s.patch_similarity.size());
    for (std::size_t i = 0; i < anomaly.size(); ++i) anomaly[i] = 1.0 - s.patch_similarity[i];
    const auto map = scoring::localization_map(anomaly, {s.grid.rows, s.grid.cols, patch_size, stride}, img.height, img.width);
    io::write_heatmap_pgm(out, map, img.height, img.width);
    std::ostringstream csv;
    csv.precision(17);
    csv << "row,col,origin_y,origin_x,raw_sim\n";
    for (int r = 0; r < s.grid.rows; ++r) {
        for (int c = 0; c < s.grid.cols; ++c) {
            csv << r << "," << c << "," << r * stride << "," << c * stride << "," << s.patch_similarity[r * s.grid.cols + c] << "\n";
        }
    }
    io::write_text(out + ".patches.csv", csv.str());
    std::cout << "image score " << s.aggregate << "\n";
    return 0;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

int cmd_eval(const std::string& scores_path, const std::string& out) {
    std::istringstream in(io::read_text(scores_path));
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty scores file: " + scores_path);
    const auto header = split_csv_line(line);
    if (header.size() < 3 || header[0] != "id" || header[1] != "label") {
        throw DataError("scores file must start with id,label,<score>...");
    }
    std::vector<std::vector<double>> columns(header.size() - 2);
    std::vector<eval::Truth> truth;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != header.size()) throw DataError("wrong column count on line " + std::to_string(line_no));
        if (cells[1] == "anomaly") truth.push_back(eval::Truth::Anomaly);
        else if (cells[1] == "inlier") truth.push_back(eval::Truth::Inlier);
        else throw DataError("label must be inlier or anomaly on line " + std::to_string(line_no));
        for (std::size_t c = 2; c < cells.size(); ++c) {
            try {
                columns[c - 2].push_back(std::stod(cells[c]));
            } catch (const std::exception&) {
                throw DataError("bad score on line " + std::to_string(line_no));
            }
        }
    }
    json metrics;
    metrics["count"] = truth.size();
    metrics["anomalies"] = std::count(truth.begin(), truth.end(), eval::Truth::Anomaly);
    json aurocs = json::object();
    try {
        for (std::size_t c = 0; c < columns.size(); ++c) aurocs[header[c + 2]] = eval::auroc(columns[c], truth);
    } catch (const std::invalid_argument& e) {
        throw DataError(e.what());
    }
    metrics["auroc"] = aurocs;
    io::write_text(out, metrics.dump(2) + "\n");
    for (const auto& [name, value] : aurocs.items()) std::cout << "auroc[" << name << "] " << value.get<double>() << "\n";
    return 0;
}

int cmd_synth(const std::string& mode, const std::string& in_dir, const std::string& out_dir, std::uint64_t seed,
              const std::string& blend) {
    if (mode != "rot" && mode != "cutpaste" && mode != "perlin") throw ConfigError("unknown synth mode: " + mode);
    const auto files = io::list_png_files(in_dir);
    if (files.empty()) throw DataError("no PNG files in " + in_dir);
    fs::create_directories(out_dir);
    Rng rng(seed);
    std::vector<Image> images;
    for (const auto& f : files) images.push_back(io::read_png(f));
    for (std::size_t i = 0; i < files.size(); ++i) {
        const std::string stem = fs::path(files[i]).stem().string();
        const fs::path base = fs::path(out_dir) / stem;
        const Image& img = images[i];
        if (mode == "rot") {
            for (int deg : {90, 180, 270}) {
                io::write_png(base.string() + "_rot" + std::to_string(deg) + ".png",
                              synth::rotate_image(img, synth::rotation_from_degrees(deg)));
            }
        } else if (mode == "cutpaste") {
            synth::CutPasteParams p;
            p.blend = synth::parse_blend(blend);
            const auto [out, mask] = synth::cutpaste_perturb(img, p, rng);
            io::write_png(base.string() + "_cutpaste.png", out);
            io::write_mask_png(base.string() + "_cutpaste_mask.png", mask);
        } else {
            const auto fg = patch::foreground_mask(img, {});
            const Mask region = fg.empty ? Mask(img.height, img.width, true) : fg.mask;
            const Mask anomaly = synth::perlin_anomaly_mask(region, synth::PerlinParams{}, rng);
            Image donor = images[(i + 1) % images.size()];
            if (!donor.same_shape(img)) donor = resize_bilinear(donor, img.height, img.width);
            if (donor.channels != img.channels) donor = img;
            if (donor.height == donor.width) donor = synth::rotate_image(donor, synth::RotationTag::R90);
            for (auto& v : donor.data) v = 1.0f - v;
            io::write_png(base.string() + "_perlin.png", synth::inject_anomaly(img, donor, anomaly, synth::parse_blend(blend)));
            io::write_mask_png(base.string() + "_perlin_mask.png", anomaly);
        }
    }
    std::cout << "wrote " << files.size() << " inputs to " << out_dir << "\n";
    return 0;
}

int cmd_toydata(const std::string& kind, const std::string& out, std::uint64_t seed) {
    eval::Dataset ds;
    if (kind == "toy") {
        eval::ToyConfig c;
        c.seed = seed;
        ds = eval::make_toy_dataset(c);
    } else if (kind == "toy-industrial") {
        eval::ToyIndustrialConfig c;
        c.seed = seed;
        ds = eval::make_toy_industrial_dataset(c);
    } else {
        throw ConfigError("unknown toy dataset: " + kind);
    }
    eval::write_mvtec_layout(ds, out);
    std::cout << "wrote " << ds.train.size() << " train and " << ds.test.size() << " test images to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"firm: contrastive anomaly detection toolkit"};
    app.require_subcommand(1);

    std::string config, out, model, data, layout = "mvtec", score = "con", image, scores, mode, in_dir, blend = "hard",
                                         kind = "toy";
    int k = 1, patch_size = 32, stride = 16;
    std::uint64_t seed = 0;

    auto* train = app.add_subcommand("train", "train an encoder and evaluate it");
    train->add_option("--config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    train->add_option("--out", out, "output directory")->required();

    auto* sc = app.add_subcommand("score", "score a dataset's test split with a trained model");
    sc->add_option("--model", model)->required()->check(CLI::ExistingFile);
    sc->add_option("--data", data, "dataset root")->required();
    sc->add_option("--layout", layout, "mvtec or semantic");
    sc->add_option("--score", score)->check(CLI::IsMember({"con", "con-norm", "shift", "ens", "proto", "kde"}));
    sc->add_option("--k", k)->check(CLI::PositiveNumber);
    sc->add_option("--out", out, "scores CSV")->required();

    auto* loc = app.add_subcommand("localize", "write an anomaly heatmap for one image");
    loc->add_option("--model", model)->required()->check(CLI::ExistingFile);
    loc->add_option("--image", image)->required()->check(CLI::ExistingFile);
    loc->add_option("--data", data, "dataset root whose training images form the patch bank")->required();
    loc->add_option("--layout", layout, "mvtec or semantic");
    loc->add_option("--patch", patch_size)->check(CLI::PositiveNumber);
    loc->add_option("--stride", stride)->check(CLI::PositiveNumber);
    loc->add_option("--out", out, "heatmap PGM")->required();

    auto* ev = app.add_subcommand("eval", "compute AUROC per score column");
    ev->add_option("--scores", scores)->required()->check(CLI::ExistingFile);
    ev->add_option("--out", out, "metrics JSON")->required();

    auto* sy = app.add_subcommand("synth", "generate synthetic outliers from a directory of PNGs");
    sy->add_option("--mode", mode)->required()->check(CLI::IsMember({"rot", "cutpaste", "perlin"}));
    sy->add_option("--in", in_dir)->required();
    sy->add_option("--out", out)->required();
    sy->add_option("--seed", seed);
    sy->add_option("--blend", blend)->check(CLI::IsMember({"hard", "linear-feather"}));

    auto* toy = app.add_subcommand("toydata", "write a generated toy dataset in MVTec layout");
    toy->add_option("--kind", kind)->check(CLI::IsMember({"toy", "toy-industrial"}));
    toy->add_option("--out", out)->required();
    toy->add_option("--seed", seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*train) return cmd_train(config, out);
        if (*sc) return cmd_score(model, data, layout, score, k, out);
        if (*loc) return cmd_localize(model, image, data, layout, patch_size, stride, out);
        if (*ev) return cmd_eval(scores, out);
        if (*sy) return cmd_synth(mode, in_dir, out, seed, blend);
        if (*toy) return cmd_toydata(kind, out, seed);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
