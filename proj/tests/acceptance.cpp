// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>

#include "firm/error.hpp"
#include "firm/experiment.hpp"
#include "firm/io.hpp"
#include "firm/scoring.hpp"
#include "firm/synth.hpp"
#include "oracles.hpp"

using namespace firm;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

int failures = 0;

void report(int id, const std::string& name, double limit_seconds, const std::function<Outcome()>& body) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    if (limit_seconds > 0 && secs > limit_seconds) {
        o.pass = false;
        o.detail += " [over time budget]";
    }
    if (!o.pass) ++failures;
    std::printf("%s  %d. %s: %s (%.1fs", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(), secs);
    if (limit_seconds > 0) std::printf(" / %.0fs", limit_seconds);
    std::printf(")\n");
    std::fflush(stdout);
}

std::string fmt(double v) {
    std::ostringstream ss;
    ss.precision(4);
    ss << v;
    return ss.str();
}

int random_pairs(Rng& rng, int max_pairs) { return std::uniform_int_distribution<int>(1, max_pairs)(rng); }
int random_dim(Rng& rng, int max_dim) { return std::uniform_int_distribution<int>(1, max_dim)(rng); }

Outcome loss_identities() {
    Rng rng(101);
    double worst_rel = 0.0;
    int inlier_mismatch = 0, group_mismatch = 0;
    for (int t = 0; t < 1000; ++t) {
        const auto b = oracle::random_batch(random_pairs(rng, 16), random_dim(rng, 16), rng, 0.5, 3);
        const double a = losses::contrastive_loss(b.z, b.labels, b.pair_of, PositiveSetPolicy::SinglePositive, 0.2).value;
        const double n = losses::ntxent_loss(b.z, b.pair_of, 0.2).value;
        worst_rel = std::max(worst_rel, std::abs(a - n) / std::max(std::abs(n), 1e-300));
    }
    for (int t = 0; t < 1000; ++t) {
        const auto b = oracle::random_batch(random_pairs(rng, 16), random_dim(rng, 16), rng, 1.0);
        inlier_mismatch += losses::contrastive_loss(b.z, b.labels, b.pair_of, PositiveSetPolicy::Firm, 0.2).value !=
                           losses::contrastive_loss(b.z, b.labels, b.pair_of, PositiveSetPolicy::SameLabel, 0.2).value;
    }
    for (int t = 0; t < 1000; ++t) {
        auto b = oracle::random_batch(random_pairs(rng, 16), random_dim(rng, 16), rng, 0.5);
        int tag = 2;
        for (std::size_t i = 0; i < b.labels.size(); i += 2)
            if (b.labels[i] != 1) b.labels[i] = b.labels[i + 1] = tag++;
        group_mismatch += losses::contrastive_loss(b.z, b.labels, b.pair_of, PositiveSetPolicy::Firm, 0.2).value !=
                          losses::contrastive_loss(b.z, b.labels, b.pair_of, PositiveSetPolicy::SameLabel, 0.2).value;
    }
    return {worst_rel <= 1e-12 && inlier_mismatch == 0 && group_mismatch == 0,
            "single-vs-ntxent max rel " + fmt(worst_rel) + ", inlier-batch mismatches " + std::to_string(inlier_mismatch) +
                ", unique-tag mismatches " + std::to_string(group_mismatch)};
}

Outcome gradient_correctness() {
    Rng rng(202);
    double worst = 0.0;
    struct Variant {
        PositiveSetPolicy policy;
        int tags;
    };
    // NT-Xent, binary SameLabel, group-tagged SameLabel, Firm.
    const Variant variants[] = {{PositiveSetPolicy::SinglePositive, 1},
                                {PositiveSetPolicy::SameLabel, 1},
                                {PositiveSetPolicy::SameLabel, 3},
                                {PositiveSetPolicy::Firm, 1}};
    for (int t = 0; t < 100; ++t) {
        for (const auto& v : variants) {
            const auto b = oracle::random_batch(random_pairs(rng, 8), random_dim(rng, 8), rng, 0.5, v.tags);
            worst = std::max(worst, oracle::loss_gradient_error(b, v.policy, 0.2 + 0.8 * (t % 5) / 4.0));
        }
    }
    double worst_e2e = 0.0;
    std::size_t max_params = 0;
    for (auto cfg : {oracle::tiny_mlp_config(), oracle::tiny_conv_config()}) {
        for (int t = 0; t < 3; ++t) {
            encoder::EncoderState state(cfg, 300 + t);
            max_params = std::max(max_params, state.params().size());
            const auto images = oracle::random_images(6, cfg.input_height, cfg.input_width, 1, rng);
            const std::vector<int> labels{1, 1, 1, 1, 2, 2}, pairs{1, 0, 3, 2, 5, 4};
            for (auto p : {PositiveSetPolicy::SinglePositive, PositiveSetPolicy::SameLabel, PositiveSetPolicy::Firm}) {
                worst_e2e = std::max(worst_e2e, oracle::encoder_gradient_error(state, images, labels, pairs, p, 0.5));
            }
        }
    }
    return {worst < 1e-5 && worst_e2e < 1e-4 && max_params <= 5000,
            "loss max rel err " + fmt(worst) + ", encoder max rel err " + fmt(worst_e2e) + " (" +
                std::to_string(max_params) + " params)"};
}

Outcome hand_values() {
    const std::vector<Vec> z{{1, 0}, {1, 0}, {0, 1}, {0, 1}};
    const std::vector<int> pairs{1, 0, 3, 2}, labels{1, 1, 1, 1};
    const double e = std::numbers::e;
    const double nt = losses::ntxent_loss(z, pairs, 1.0).value;
    const double firm = losses::contrastive_loss(z, labels, pairs, PositiveSetPolicy::Firm, 1.0).value;
    const double nt_err = std::abs(nt - 4.0 * std::log((e + 2.0) / e));
    const double firm_err = std::abs(firm - 4.87243);
    return {nt_err <= 1e-4 && firm_err <= 1e-4, "ntxent " + fmt(nt) + " (err " + fmt(nt_err) + "), firm " +
                                                   std::to_string(firm) + " (err " + fmt(firm_err) + ")"};
}

Outcome scoring_oracles() {
    Rng rng(404);
    int topk_mismatch = 0;
    for (int t = 0; t < 100; ++t) {
        const int m = std::uniform_int_distribution<int>(10, 10000)(rng);
        const int d = random_dim(rng, 64), k = random_dim(rng, 10);
        std::vector<Vec> rows;
        for (int i = 0; i < m; ++i) rows.push_back(oracle::random_unit(d, rng));
        // Plant duplicate rows so ties occur.
        for (int i = 0; i < m / 20; ++i) rows[m - 1 - i] = rows[i];
        const auto bank = scoring::MemoryBank::build(rows, scoring::BankLevel::Image);
        std::vector<Vec> unit;
        for (int i = 0; i < m; ++i) unit.emplace_back(bank.row(i).begin(), bank.row(i).end());
        const auto q = t % 4 == 0 ? unit[0] : oracle::random_unit(d, rng);
        const auto expect = oracle::brute_topk(unit, q, k);
        double sum = 0.0;
        for (int idx : expect) sum += dot(q, unit[idx]);
        const auto got = scoring::nearest(q, bank, k);
        bool same = scoring::s_con(q, bank, k) == sum;
        for (int i = 0; i < k; ++i) same = same && got[i].index == expect[i];
        topk_mismatch += !same;
    }
    const double d = 1.3;
    const double kde1 = std::abs(scoring::kde_score(Vec{0, 0}, std::vector<Vec>{{d, 0}, {0, -d}}, 1.0) - (d * d - std::log(2.0)));
    const double kde2 = std::abs(scoring::kde_score(Vec{0, 0}, std::vector<Vec>{{0, 0}, {2, 0}}, 1.0) + std::log(1.0 + std::exp(-4.0)));
    const double kde3 = std::abs(scoring::kde_score(Vec{1, 1}, std::vector<Vec>{{2, 3}}, 0.4) - 5.0);
    const double kde_err = std::max({kde1, kde2, kde3});
    int auroc_mismatch = 0;
    std::uniform_int_distribution<int> level(0, 9);
    for (int t = 0; t < 1000; ++t) {
        const int n = std::uniform_int_distribution<int>(2, 200)(rng);
        std::vector<double> s(n);
        std::vector<eval::Truth> l(n);
        for (int i = 0; i < n; ++i) {
            s[i] = t % 2 ? level(rng) / 9.0 : std::uniform_real_distribution<double>(0, 1)(rng);
            l[i] = std::bernoulli_distribution(0.3)(rng) ? eval::Truth::Anomaly : eval::Truth::Inlier;
        }
        l[0] = eval::Truth::Anomaly;
        l[n - 1] = eval::Truth::Inlier;
        auroc_mismatch += eval::auroc(s, l) != oracle::pair_count_auroc(s, l);
    }
    return {topk_mismatch == 0 && kde_err <= 1e-10 && auroc_mismatch == 0,
            "top-k mismatches " + std::to_string(topk_mismatch) + "/100, kde max err " + fmt(kde_err) +
                ", auroc mismatches " + std::to_string(auroc_mismatch) + "/1000"};
}

Outcome patch_constraints() {
    Rng rng(505);
    int violations = 0, draws = 0;
    std::string first_violation;
    const patch::PatchConfig cfg{32, 16, 0.9, 0.15, patch::CoverageRule::PatchFraction};
    while (draws < 1000) {
        // Object on a dark background with a Perlin defect inside it.
        const int size = 128;
        Image img(size, size, 1, 0.05f);
        Mask fg(size, size);
        const double cy = 64 + std::uniform_real_distribution<double>(-8, 8)(rng);
        const double cx = 64 + std::uniform_real_distribution<double>(-8, 8)(rng);
        const double radius = std::uniform_real_distribution<double>(36, 56)(rng);
        for (int r = 0; r < size; ++r)
            for (int c = 0; c < size; ++c)
                if (std::hypot(r + 0.5 - cy, c + 0.5 - cx) <= radius) {
                    fg.at(r, c) = 1;
                    img.at(r, c) = 0.7f;
                }
        const Mask anomaly = synth::perlin_anomaly_mask(fg, synth::PerlinParams{}, rng);
        const patch::MaskPair masks{fg, anomaly};
        for (int i = 0; i < 50 && draws < 1000; ++i, ++draws) {
            const auto kind = draws % 2 || !anomaly.any() ? patch::PairKind::Normal : patch::PairKind::Outlier;
            const auto [a, b] = patch::sample_positive_patch_pair(img, masks, kind, cfg, rng);
            const auto why = oracle::check_patch_pair(img, masks, kind, cfg, a, b);
            if (!why.empty()) {
                ++violations;
                if (first_violation.empty()) first_violation = why;
            }
        }
    }
    int grid_mismatch = 0;
    for (int h = 32; h <= 256; h += 28)
        for (int w = 32; w <= 256; w += 36)
            for (int p : {8, 16, 32})
                for (int s : {4, 7, 16})
                    if (s < p) grid_mismatch += patch::grid_dims(h, w, p, s).count() != ((h - p) / s + 1) * ((w - p) / s + 1);
    const bool case225 = patch::grid_dims(256, 256, 32, 16).count() == 225 &&
                         patch::extract_patch_grid(Image(256, 256, 1), 32, 16).size() == 225u;
    return {violations == 0 && grid_mismatch == 0 && case225,
            std::to_string(violations) + " violations in " + std::to_string(draws) + " draws" +
                (first_violation.empty() ? "" : " (" + first_violation + ")") + ", grid mismatches " +
                std::to_string(grid_mismatch) + ", 256/32/16 -> " + std::to_string(patch::grid_dims(256, 256, 32, 16).count())};
}

Outcome localization() {
    const auto map = scoring::localization_map(std::vector<double>(225, 0.42), {15, 15, 32, 16}, 256, 256);
    double const_err = 0.0;
    for (double v : map) const_err = std::max(const_err, std::abs(v - 0.42));
    const auto odd = scoring::localization_map(std::vector<double>(6, 1.0), {2, 3, 5, 3}, 9, 11);
    const bool dims = map.size() == 256u * 256u && odd.size() == 99u;
    std::vector<double> hot(9, 0.0);
    hot[4] = 1.0;
    const auto hm = scoring::localization_map(hot, {3, 3, 32, 16}, 64, 64);
    const int idx = static_cast<int>(std::max_element(hm.begin(), hm.end()) - hm.begin());
    const double dy = std::abs(idx / 64 - 31.5), dx = std::abs(idx % 64 - 31.5);
    return {const_err <= 1e-6 && dims && dy <= 1.0 && dx <= 1.0,
            "constant max err " + fmt(const_err) + ", dims " + (dims ? "exact" : "wrong") + ", hot argmax offset (" +
                fmt(dy) + ", " + fmt(dx) + ") px"};
}

double median3(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[1];
}

Outcome toy_end_to_end() {
    const char* base = R"({
        "dataset": {"source": "toy", "toy": {"image_size": 16, "train_count": 128, "test_inliers": 50, "test_anomalies": 50}},
        "outliers": {"source": "rotations"},
        "encoder": {"arch": "mlp-small", "d": 32, "d_head": 16, "head_layers": 2, "head_width": 64, "mlp_hidden": 64},
        "train": {"epochs": 200, "warmup_epochs": 20, "batch_pairs": 32},
        "scores": ["con"],
        "score": {"k": 1},
        "eval_every": 10
    })";
    std::map<std::string, std::vector<double>> aurocs, aulcs;
    for (const char* policy : {"firm", "supcon", "ntxent"}) {
        for (int seed = 0; seed < 3; ++seed) {
            auto j = json::parse(base);
            j["policy"] = policy;
            j["seed"] = seed;
            j["dataset"]["toy"]["seed"] = seed;
            const auto r = eval::run_experiment(eval::experiment_config_from_json(j));
            aurocs[policy].push_back(r.report.at("auroc").at("con").get<double>());
            aulcs[policy].push_back(r.report.at("aulc").get<double>());
        }
    }
    const double firm_auroc = median3(aurocs["firm"]), nt_auroc = median3(aurocs["ntxent"]);
    const double firm_aulc = median3(aulcs["firm"]), sup_aulc = median3(aulcs["supcon"]);
    const bool a = firm_auroc >= 0.90, b = firm_aulc >= sup_aulc, c = firm_auroc >= nt_auroc - 0.02;
    return {a && b && c, std::string("(a) firm auroc ") + fmt(firm_auroc) + (a ? " ok" : " LOW") + "; (b) aulc firm " +
                             fmt(firm_aulc) + " vs supcon " + fmt(sup_aulc) + (b ? " ok" : " LOW") + "; (c) ntxent auroc " +
                             fmt(nt_auroc) + (c ? " ok" : " LOW")};
}

std::string report_without_timing(const fs::path& dir) {
    auto j = json::parse(io::read_text((dir / "report.json").string()));
    j.erase("timing");
    return j.dump();
}

Outcome determinism() {
    const char* image_cfg = R"({
        "dataset": {"source": "toy", "toy": {"train_count": 32, "test_inliers": 20, "test_anomalies": 20}},
        "outliers": {"source": "rotations"},
        "encoder": {"arch": "conv-small", "d": 16, "d_head": 8, "head_layers": 1, "head_width": 16, "conv_channels": [4, 8, 8]},
        "train": {"epochs": 4, "warmup_epochs": 1, "batch_pairs": 16},
        "scores": ["con", "con-norm", "shift", "ens", "proto", "kde"],
        "eval_every": 2, "seed": 9
    })";
    const char* patch_cfg = R"({
        "dataset": {"source": "toy-industrial", "toy_industrial": {"image_size": 48, "train_count": 6, "test_inliers": 4, "test_anomalies": 4}},
        "outliers": {"source": "perlin-inject"},
        "encoder": {"arch": "conv-small", "d": 16, "d_head": 8, "head_layers": 1, "head_width": 16, "conv_channels": [4, 8, 8]},
        "train": {"epochs": 3, "warmup_epochs": 1, "batch_pairs": 8},
        "patch": {"train_patch": 16, "eval_patch": 16, "stride": 8, "foreground": {"morph_radius": 2}, "heatmaps": 8},
        "eval_every": 1, "seed": 4
    })";
    const auto root = fs::temp_directory_path() / "firm_acceptance_determinism";
    fs::remove_all(root);
    int differences = 0, heatmaps = 0;
    for (const auto* text : {image_cfg, patch_cfg}) {
        auto cfg = eval::experiment_config_from_json(json::parse(text));
        const auto tag = std::string(text == image_cfg ? "image" : "patch");
        const auto d1 = root / (tag + "1"), d2 = root / (tag + "2");
        cfg.output_dir = d1.string();
        eval::run_experiment(cfg);
        cfg.output_dir = d2.string();
        eval::run_experiment(cfg);
        differences += report_without_timing(d1) != report_without_timing(d2);
        differences += io::read_text((d1 / "scores.csv").string()) != io::read_text((d2 / "scores.csv").string());
        differences += io::read_text((d1 / "model.firm").string()) != io::read_text((d2 / "model.firm").string());
        if (fs::exists(d1 / "heatmaps")) {
            for (const auto& entry : fs::directory_iterator(d1 / "heatmaps")) {
                ++heatmaps;
                const auto other = d2 / "heatmaps" / entry.path().filename();
                differences += !fs::exists(other) || io::read_text(entry.path().string()) != io::read_text(other.string());
            }
        }
    }
    fs::remove_all(root);
    return {differences == 0 && heatmaps > 0,
            std::to_string(differences) + " differing artifacts (reports, scores, models, " + std::to_string(heatmaps) +
                " heatmap files)"};
}

Outcome serialization() {
    Rng rng(909);
    int mismatches = 0;
    for (auto precision : {encoder::Precision::Float32, encoder::Precision::Float64}) {
        for (auto cfg : {oracle::tiny_mlp_config(), oracle::tiny_conv_config()}) {
            cfg.precision = precision;
            encoder::EncoderState state(cfg, 77);
            encoder::TrainConfig tc;
            for (int s = 0; s < 3; ++s) {
                MultiviewBatch b;
                b.instances = oracle::random_images(6, cfg.input_height, cfg.input_width, 1, rng);
                b.labels = {1, 1, 1, 1, 2, 2};
                b.pair_of = {1, 0, 3, 2, 5, 4};
                encoder::train_step(state, b, {PositiveSetPolicy::Firm, 0.2}, 0.05, tc);
            }
            state.set_epoch(3);
            const auto path = (fs::temp_directory_path() / "firm_acceptance_model.firm").string();
            encoder::save_state(state, path);
            auto back = encoder::load_state(path);
            fs::remove(path);
            mismatches += back.params() != state.params() || back.buffers() != state.buffers() ||
                          back.momentum() != state.momentum() || back.epoch() != state.epoch();
            mismatches += encoder::serialize_state(back) != encoder::serialize_state(state);
            for (const auto& img : oracle::random_images(5, cfg.input_height, cfg.input_width, 1, rng)) {
                const auto x = encoder::forward(state, img), y = encoder::forward(back, img);
                mismatches += x.feature != y.feature || x.projection != y.projection;
            }
        }
    }
    return {mismatches == 0, std::to_string(mismatches) + " mismatches across 4 encoder variants"};
}

}  // namespace

int main() {
    report(1, "loss reduction identities", 10, loss_identities);
    report(2, "gradient correctness", 60, gradient_correctness);
    report(3, "hand-derived loss values", 0, hand_values);
    report(4, "scoring oracles", 30, scoring_oracles);
    report(5, "patch constraints", 0, patch_constraints);
    report(6, "localization pipeline", 0, localization);
    report(7, "toy end-to-end (median of 3 seeds)", 300, toy_end_to_end);
    report(8, "determinism", 0, determinism);
    report(9, "serialization round trip", 0, serialization);
    std::printf("%s: %d of 9 criteria failed\n", failures ? "FAILED" : "OK", failures);
    return failures ? 1 : 0;
}
