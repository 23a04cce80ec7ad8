#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "firm/encoder.hpp"
#include "firm/error.hpp"
#include "oracles.hpp"

using namespace firm;
using namespace firm::encoder;

namespace {

MultiviewBatch random_multiview(int pairs, const EncoderConfig& cfg, Rng& rng) {
    MultiviewBatch b;
    b.instances = oracle::random_images(2 * pairs, cfg.input_height, cfg.input_width, cfg.input_channels, rng);
    for (int k = 0; k < pairs; ++k) {
        const int label = k % 3 == 2 ? 2 : 1;
        b.labels.insert(b.labels.end(), {label, label});
        b.pair_of.insert(b.pair_of.end(), {2 * k + 1, 2 * k});
    }
    return b;
}

}  // namespace

TEST(Encoder, ForwardShapesAndDeterminism) {
    for (auto cfg : {oracle::tiny_mlp_config(), oracle::tiny_conv_config()}) {
        EncoderState state(cfg, 1);
        Rng rng(2);
        const auto img = oracle::random_images(1, cfg.input_height, cfg.input_width, 1, rng)[0];
        const auto a = forward(state, img);
        const auto b = forward(state, img);
        EXPECT_EQ(static_cast<int>(a.feature.size()), cfg.d);
        EXPECT_EQ(static_cast<int>(a.projection.size()), cfg.d_head);
        EXPECT_EQ(a.feature, b.feature);
        EXPECT_EQ(a.projection, b.projection);
    }
}

TEST(Encoder, SameSeedSameInit) {
    const auto cfg = oracle::tiny_conv_config();
    EXPECT_EQ(EncoderState(cfg, 5).params(), EncoderState(cfg, 5).params());
    EXPECT_NE(EncoderState(cfg, 5).params(), EncoderState(cfg, 6).params());
}

TEST(Encoder, ShapeMismatchThrows) {
    EncoderState state(oracle::tiny_mlp_config(), 1);
    EXPECT_THROW(forward(state, Image(5, 4, 1)), std::invalid_argument);
}

TEST(Encoder, EvalModeDoesNotTouchBuffers) {
    EncoderState state(oracle::tiny_mlp_config(), 1);
    Rng rng(3);
    const auto before = state.buffers();
    features(state, oracle::random_images(5, 4, 4, 1, rng));
    EXPECT_EQ(state.buffers(), before);
    state.forward_batch(oracle::random_images(5, 4, 4, 1, rng), true);
    EXPECT_NE(state.buffers(), before);
}

TEST(Encoder, BatchedFeaturesMatchSingleForward) {
    EncoderState state(oracle::tiny_conv_config(), 4);
    Rng rng(5);
    const auto imgs = oracle::random_images(7, 8, 8, 1, rng);
    const auto feats = features(state, imgs, 3);
    for (int i = 0; i < 7; ++i) {
        const auto single = forward(state, imgs[i]).feature;
        for (std::size_t k = 0; k < single.size(); ++k) EXPECT_NEAR(feats[i][k], single[k], 1e-12);
    }
}

TEST(Encoder, ParameterGradientMatchesFiniteDifferences) {
    Rng rng(6);
    for (auto cfg : {oracle::tiny_mlp_config(), oracle::tiny_conv_config()}) {
        for (int t = 0; t < 3; ++t) {
            EncoderState state(cfg, 10 + t);
            ASSERT_LE(state.params().size(), 5000u);
            const auto b = random_multiview(3, cfg, rng);
            for (auto p : {PositiveSetPolicy::SinglePositive, PositiveSetPolicy::Firm}) {
                EXPECT_LT(oracle::encoder_gradient_error(state, b.instances, b.labels, b.pair_of, p, 0.5), 1e-4);
            }
        }
    }
}

TEST(Encoder, ManifestNamesAndDecayFlags) {
    EncoderState state(oracle::tiny_conv_config(), 1);
    std::size_t params = 0, buffers = 0;
    for (const auto& s : state.manifest()) {
        const bool weight = s.name.size() > 7 && s.name.rfind(".weight") == s.name.size() - 7;
        EXPECT_EQ(s.decay, weight) << s.name;
        (s.role == nn::TensorRole::Param ? params : buffers) += s.count;
    }
    EXPECT_EQ(params, state.params().size());
    EXPECT_EQ(buffers, state.buffers().size());
    EXPECT_NO_THROW(state.tensor("encoder.conv0.weight"));
    EXPECT_NO_THROW(state.tensor("head.bn0.gamma"));
    EXPECT_THROW(state.tensor("nope"), std::out_of_range);
}

TEST(Schedule, WarmupThenCosine) {
    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.warmup_epochs = 20;
    cfg.peak_lr = 0.01;
    EXPECT_NEAR(lr_schedule(0, cfg), 0.0005, 1e-15);
    EXPECT_NEAR(lr_schedule(9, cfg), 0.005, 1e-15);
    EXPECT_NEAR(lr_schedule(19, cfg), 0.01, 1e-15);
    EXPECT_NEAR(lr_schedule(20, cfg), 0.01, 1e-15);
    EXPECT_NEAR(lr_schedule(110, cfg), 0.005, 1e-15);
    EXPECT_LT(lr_schedule(199, cfg), 1e-5);
    for (int e = 20; e < 199; ++e) EXPECT_GE(lr_schedule(e, cfg), lr_schedule(e + 1, cfg));
}

TEST(Training, StepsReduceLossOnFixedBatch) {
    auto cfg = oracle::tiny_mlp_config();
    EncoderState state(cfg, 7);
    Rng rng(8);
    const auto b = random_multiview(4, cfg, rng);
    TrainConfig tc;
    tc.weight_decay = 0.0;
    const LossSpec loss{PositiveSetPolicy::Firm, 0.5};
    const double first = train_step(state, b, loss, 0.05, tc).loss;
    double last = first;
    for (int i = 0; i < 30; ++i) last = train_step(state, b, loss, 0.05, tc).loss;
    EXPECT_LT(last, first);
}

TEST(Training, WeightDecayOnlyShrinksWeights) {
    auto cfg = oracle::tiny_mlp_config();
    EncoderState a(cfg, 9), b(cfg, 9);
    Rng r1(10);
    const auto batch = random_multiview(3, cfg, r1);
    TrainConfig no_decay, decay;
    no_decay.weight_decay = 0.0;
    decay.weight_decay = 0.5;
    const LossSpec loss{PositiveSetPolicy::Firm, 0.5};
    const double lr = 0.1;
    train_step(a, batch, loss, lr, no_decay);
    train_step(b, batch, loss, lr, decay);
    const EncoderState init(cfg, 9);
    for (const auto& s : a.manifest()) {
        if (s.role != nn::TensorRole::Param) continue;
        for (std::size_t i = s.offset; i < s.offset + s.count; ++i) {
            // Decoupled decay: b = a - lr * wd * p_old.
            const double expected = s.decay ? a.params()[i] - lr * 0.5 * init.params()[i] : a.params()[i];
            EXPECT_NEAR(b.params()[i], expected, 1e-12) << s.name;
        }
    }
}

TEST(Training, EpochAdvancesCounterAndUsesSchedule) {
    auto cfg = oracle::tiny_mlp_config();
    EncoderState state(cfg, 11);
    TrainConfig tc;
    tc.epochs = 10;
    tc.warmup_epochs = 2;
    const BatchSource source = [&](int, Rng& rng) { return std::vector<MultiviewBatch>{random_multiview(3, cfg, rng)}; };
    Rng rng(12);
    const auto m0 = train_epoch(state, source, {PositiveSetPolicy::Firm, 0.2}, tc, rng);
    EXPECT_EQ(m0.epoch, 0);
    EXPECT_DOUBLE_EQ(m0.lr, lr_schedule(0, tc));
    EXPECT_EQ(state.epoch(), 1);
    const auto m1 = train_epoch(state, source, {PositiveSetPolicy::Firm, 0.2}, tc, rng);
    EXPECT_DOUBLE_EQ(m1.lr, lr_schedule(1, tc));
    EXPECT_EQ(m1.batches, 1);
}

TEST(Training, Float32StateIsRepresentable) {
    auto cfg = oracle::tiny_mlp_config();
    cfg.precision = Precision::Float32;
    EncoderState state(cfg, 13);
    Rng rng(14);
    train_step(state, random_multiview(3, cfg, rng), {PositiveSetPolicy::Firm, 0.2}, 0.05, TrainConfig{});
    for (const auto* v : {&state.params(), &state.buffers(), &state.momentum()})
        for (double x : *v) EXPECT_EQ(x, static_cast<double>(static_cast<float>(x)));
}

TEST(Serialization, RoundTripIsBitwiseExact) {
    for (auto precision : {Precision::Float32, Precision::Float64}) {
        auto cfg = oracle::tiny_conv_config();
        cfg.precision = precision;
        EncoderState state(cfg, 15);
        Rng rng(16);
        TrainConfig tc;
        for (int i = 0; i < 3; ++i) train_step(state, random_multiview(3, cfg, rng), {PositiveSetPolicy::Firm, 0.2}, 0.05, tc);
        state.set_epoch(3);
        const auto bytes = serialize_state(state);
        auto back = deserialize_state(bytes);
        EXPECT_EQ(back.params(), state.params());
        EXPECT_EQ(back.buffers(), state.buffers());
        EXPECT_EQ(back.momentum(), state.momentum());
        EXPECT_EQ(back.epoch(), 3);
        EXPECT_EQ(serialize_state(back), bytes);
        const auto img = oracle::random_images(1, 8, 8, 1, rng)[0];
        EXPECT_EQ(forward(back, img).projection, forward(state, img).projection);
    }
}

TEST(Serialization, FileRoundTrip) {
    EncoderState state(oracle::tiny_mlp_config(), 17);
    const auto path = (std::filesystem::temp_directory_path() / "firm_test_model.firm").string();
    save_state(state, path);
    EXPECT_EQ(serialize_state(load_state(path)), serialize_state(state));
    std::filesystem::remove(path);
    EXPECT_THROW(load_state(path), DataError);
}

TEST(Serialization, CorruptInputsAreRejected) {
    EncoderState state(oracle::tiny_mlp_config(), 18);
    const auto good = serialize_state(state);
    auto bad_magic = good;
    bad_magic[0] = 'X';
    EXPECT_THROW(deserialize_state(bad_magic), DataError);
    auto truncated = good;
    truncated.pop_back();
    EXPECT_THROW(deserialize_state(truncated), DataError);
    auto trailing = good;
    trailing.push_back(0);
    EXPECT_THROW(deserialize_state(trailing), DataError);
    // Rename a tensor in the manifest so it no longer matches the configured architecture.
    std::string text(good.begin(), good.end());
    const auto pos = text.find("head.out.weight");
    ASSERT_NE(pos, std::string::npos);
    text.replace(pos, 8, "head.xyz");
    EXPECT_THROW(deserialize_state(std::vector<std::uint8_t>(text.begin(), text.end())), DataError);
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
    const auto cfg = oracle::tiny_conv_config();
    const auto back = encoder_config_from_json(to_json(cfg));
    EXPECT_EQ(to_json(back), to_json(cfg));
    auto j = to_json(cfg);
    j["bogus"] = 1;
    EXPECT_THROW(encoder_config_from_json(j), ConfigError);
    TrainConfig tc;
    tc.epochs = 7;
    tc.warmup_epochs = 1;
    EXPECT_EQ(train_config_from_json(to_json(tc)).epochs, 7);
    auto tj = to_json(tc);
    tj["lr"] = 0.1;
    EXPECT_THROW(train_config_from_json(tj), ConfigError);
    tc.warmup_epochs = 7;
    EXPECT_THROW(validate(tc), ConfigError);
}
