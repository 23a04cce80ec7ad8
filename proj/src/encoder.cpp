#include "firm/encoder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "firm/error.hpp"
#include "firm/losses.hpp"

namespace firm::encoder {

using nlohmann::json;

namespace {

std::string arch_name(Arch a) { return a == Arch::MlpSmall ? "mlp-small" : "conv-small"; }

Arch parse_arch(const std::string& s) {
    if (s == "mlp-small") return Arch::MlpSmall;
    if (s == "conv-small") return Arch::ConvSmall;
    throw ConfigError("unknown encoder arch: " + s);
}

void reject_unknown_keys(const json& j, std::initializer_list<const char*> known, const char* where) {
    if (!j.is_object()) throw ConfigError(std::string(where) + " must be an object");
    for (const auto& [key, _] : j.items()) {
        if (std::find_if(known.begin(), known.end(), [&](const char* k) { return key == k; }) == known.end()) {
            throw ConfigError(std::string("unknown key in ") + where + ": " + key);
        }
    }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad value for ") + key + ": " + e.what());
    }
}

}  // namespace

void validate(const EncoderConfig& cfg) {
    if (cfg.input_height < 1 || cfg.input_width < 1 || cfg.input_channels < 1) {
        throw ConfigError("encoder input dims must be positive");
    }
    if (cfg.d < 2 || cfg.d_head < 1 || cfg.d_head >= cfg.d) throw ConfigError("encoder requires 0 < d_head < d");
    if (cfg.head_layers < 0 || (cfg.head_layers > 0 && cfg.head_width < 1)) throw ConfigError("bad head layout");
    if (cfg.arch == Arch::MlpSmall && cfg.mlp_hidden < 1) throw ConfigError("mlp_hidden must be positive");
    if (cfg.arch == Arch::ConvSmall) {
        if (cfg.conv_channels.size() != 3) throw ConfigError("conv-small takes exactly 3 conv blocks");
        for (int c : cfg.conv_channels) {
            if (c < 1) throw ConfigError("conv channels must be positive");
        }
        if (cfg.input_height < 4 || cfg.input_width < 4) throw ConfigError("conv-small needs inputs of at least 4x4");
    }
}

json to_json(const EncoderConfig& cfg) {
    return {{"arch", arch_name(cfg.arch)},
            {"input_height", cfg.input_height},
            {"input_width", cfg.input_width},
            {"input_channels", cfg.input_channels},
            {"d", cfg.d},
            {"d_head", cfg.d_head},
            {"head_layers", cfg.head_layers},
            {"head_width", cfg.head_width},
            {"head_norm", cfg.head_norm},
            {"mlp_hidden", cfg.mlp_hidden},
            {"conv_channels", cfg.conv_channels},
            {"precision", cfg.precision == Precision::Float32 ? "float32" : "float64"}};
}

EncoderConfig encoder_config_from_json(const json& j) {
    reject_unknown_keys(j, {"arch", "input_height", "input_width", "input_channels", "d", "d_head",
                            "head_layers", "head_width", "head_norm", "mlp_hidden", "conv_channels",
                            "precision"},
                        "encoder");
    EncoderConfig cfg;
    std::string arch = arch_name(cfg.arch), precision = "float32";
    read_opt(j, "arch", arch);
    cfg.arch = parse_arch(arch);
    read_opt(j, "input_height", cfg.input_height);
    read_opt(j, "input_width", cfg.input_width);
    read_opt(j, "input_channels", cfg.input_channels);
    read_opt(j, "d", cfg.d);
    read_opt(j, "d_head", cfg.d_head);
    read_opt(j, "head_layers", cfg.head_layers);
    read_opt(j, "head_width", cfg.head_width);
    read_opt(j, "head_norm", cfg.head_norm);
    read_opt(j, "mlp_hidden", cfg.mlp_hidden);
    read_opt(j, "conv_channels", cfg.conv_channels);
    read_opt(j, "precision", precision);
    if (precision == "float32") cfg.precision = Precision::Float32;
    else if (precision == "float64") cfg.precision = Precision::Float64;
    else throw ConfigError("precision must be float32 or float64");
    validate(cfg);
    return cfg;
}

void validate(const TrainConfig& cfg) {
    if (cfg.epochs < 1 || cfg.warmup_epochs < 0 || cfg.warmup_epochs >= cfg.epochs) {
        throw ConfigError("train config requires 0 <= warmup_epochs < epochs");
    }
    if (!(cfg.peak_lr > 0.0) || cfg.momentum < 0.0 || cfg.momentum >= 1.0 || cfg.weight_decay < 0.0) {
        throw ConfigError("learning rate must be positive, momentum in [0,1), weight decay >= 0");
    }
    if (cfg.batch_pairs < 1) throw ConfigError("batch_pairs must be positive");
    if (!(cfg.temperature > 0.0)) throw ConfigError("temperature must be positive");
}

json to_json(const TrainConfig& cfg) {
    return {{"epochs", cfg.epochs},         {"warmup_epochs", cfg.warmup_epochs},
            {"peak_lr", cfg.peak_lr},       {"momentum", cfg.momentum},
            {"weight_decay", cfg.weight_decay}, {"batch_pairs", cfg.batch_pairs},
            {"temperature", cfg.temperature},   {"seed", cfg.seed}};
}

TrainConfig train_config_from_json(const json& j) {
    reject_unknown_keys(j, {"epochs", "warmup_epochs", "peak_lr", "momentum", "weight_decay",
                            "batch_pairs", "temperature", "seed"},
                        "train");
    TrainConfig cfg;
    read_opt(j, "epochs", cfg.epochs);
    read_opt(j, "warmup_epochs", cfg.warmup_epochs);
    read_opt(j, "peak_lr", cfg.peak_lr);
    read_opt(j, "momentum", cfg.momentum);
    read_opt(j, "weight_decay", cfg.weight_decay);
    read_opt(j, "batch_pairs", cfg.batch_pairs);
    read_opt(j, "temperature", cfg.temperature);
    read_opt(j, "seed", cfg.seed);
    validate(cfg);
    return cfg;
}

EncoderState::EncoderState(const EncoderConfig& cfg, std::uint64_t init_seed) : config_(cfg) {
    validate(config_);
    build();
    params_.assign(registry_.param_count(), 0.0);
    buffers_.assign(registry_.buffer_count(), 0.0);
    momentum_.assign(registry_.param_count(), 0.0);
    Rng rng(init_seed);
    trunk_.init(params_.data(), buffers_.data(), rng);
    head_.init(params_.data(), buffers_.data(), rng);
    apply_precision();
}

EncoderState::EncoderState(const EncoderState& other)
    : config_(other.config_), params_(other.params_), buffers_(other.buffers_),
      momentum_(other.momentum_), epoch_(other.epoch_) {
    build();
}

EncoderState& EncoderState::operator=(const EncoderState& other) {
    if (this != &other) {
        EncoderState copy(other);
        *this = std::move(copy);
    }
    return *this;
}

void EncoderState::build() {
    registry_ = nn::Registry{};
    trunk_ = nn::Sequential{};
    head_ = nn::Sequential{};
    const auto& c = config_;
    if (c.arch == Arch::MlpSmall) {
        trunk_.push(nn::make_linear(registry_, "encoder.fc0", input_size(), c.mlp_hidden));
        trunk_.push(nn::make_relu(c.mlp_hidden));
        trunk_.push(nn::make_linear(registry_, "encoder.fc1", c.mlp_hidden, c.d));
    } else {
        nn::Spatial s{c.input_channels, c.input_height, c.input_width};
        for (int b = 0; b < 3; ++b) {
            const int out = c.conv_channels[b];
            trunk_.push(nn::make_conv3x3(registry_, "encoder.conv" + std::to_string(b), s, out));
            s.channels = out;
            trunk_.push(nn::make_relu(s.size()));
            if (b < 2) {
                trunk_.push(nn::make_avgpool2(s));
                s.height /= 2;
                s.width /= 2;
            }
        }
        trunk_.push(nn::make_global_avgpool(s));
        trunk_.push(nn::make_linear(registry_, "encoder.fc", s.channels, c.d));
    }
    int prev = c.d;
    for (int l = 0; l < c.head_layers; ++l) {
        const std::string name = "head.fc" + std::to_string(l);
        head_.push(nn::make_linear(registry_, name, prev, c.head_width));
        if (c.head_norm) head_.push(nn::make_batchnorm(registry_, "head.bn" + std::to_string(l), c.head_width));
        head_.push(nn::make_relu(c.head_width));
        prev = c.head_width;
    }
    head_.push(nn::make_linear(registry_, "head.out", prev, c.d_head));
}

std::span<double> EncoderState::tensor(const std::string& name) {
    for (const auto& spec : registry_.specs()) {
        if (spec.name != name) continue;
        auto& store = spec.role == nn::TensorRole::Param ? params_ : buffers_;
        return {store.data() + spec.offset, spec.count};
    }
    throw std::out_of_range("no tensor named " + name);
}

std::span<const double> EncoderState::tensor(const std::string& name) const {
    return const_cast<EncoderState*>(this)->tensor(name);
}

void EncoderState::apply_precision() {
    if (config_.precision != Precision::Float32) return;
    for (auto* v : {&params_, &buffers_, &momentum_}) {
        for (auto& x : *v) x = static_cast<double>(static_cast<float>(x));
    }
}

EncoderState::BatchOutput EncoderState::forward_batch(std::span<const Image> images, bool train) {
    const int n = static_cast<int>(images.size());
    if (n == 0) throw std::invalid_argument("forward on an empty batch");
    const int h = config_.input_height, w = config_.input_width, ch = config_.input_channels;
    nn::Tensor x(n, input_size());
    for (int i = 0; i < n; ++i) {
        const Image& img = images[i];
        if (img.height != h || img.width != w || img.channels != ch) {
            throw std::invalid_argument("image shape does not match encoder input");
        }
        double* row = x.row(i);
        // HWC -> CHW
        for (int c = 0; c < ch; ++c) {
            for (int r = 0; r < h; ++r) {
                for (int col = 0; col < w; ++col) row[(c * h + r) * w + col] = img.at(r, col, c);
            }
        }
    }
    nn::Context ctx{params_.data(), nullptr, buffers_.data(), train};
    BatchOutput out;
    out.features = trunk_.forward(x, ctx);
    out.projections = head_.forward(out.features, ctx);
    last_train_ = train;
    return out;
}

std::vector<double> EncoderState::backward(const nn::Tensor& grad_projections) {
    std::vector<double> grads(params_.size(), 0.0);
    nn::Context ctx{params_.data(), grads.data(), buffers_.data(), last_train_};
    const nn::Tensor grad_features = head_.backward(grad_projections, ctx);
    trunk_.backward(grad_features, ctx);
    return grads;
}

ForwardResult forward(EncoderState& state, const Image& img) {
    auto out = state.forward_batch(std::span<const Image>(&img, 1), false);
    ForwardResult r;
    r.feature.assign(out.features.row(0), out.features.row(0) + out.features.features);
    r.projection.assign(out.projections.row(0), out.projections.row(0) + out.projections.features);
    for (double v : r.feature) {
        if (!std::isfinite(v)) throw NumericalError("non-finite feature");
    }
    return r;
}

std::vector<Vec> features(EncoderState& state, std::span<const Image> images, int chunk) {
    std::vector<Vec> out;
    out.reserve(images.size());
    for (std::size_t start = 0; start < images.size(); start += chunk) {
        const std::size_t len = std::min<std::size_t>(chunk, images.size() - start);
        auto res = state.forward_batch(images.subspan(start, len), false);
        for (int i = 0; i < res.features.batch; ++i) {
            out.emplace_back(res.features.row(i), res.features.row(i) + res.features.features);
        }
    }
    return out;
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
    const int e = std::clamp(epoch, 0, cfg.epochs - 1);
    if (e < cfg.warmup_epochs) return cfg.peak_lr * (e + 1) / cfg.warmup_epochs;
    const double t = static_cast<double>(e - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs);
    return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

StepMetrics train_step(EncoderState& state, const MultiviewBatch& batch, const LossSpec& loss,
                       double lr, const TrainConfig& cfg) {
    validate_batch_structure(batch.labels, batch.pair_of);
    auto out = state.forward_batch(batch.instances, true);
    const int n = out.projections.batch;
    std::vector<Vec> raw(n);
    for (int i = 0; i < n; ++i) {
        raw[i].assign(out.projections.row(i), out.projections.row(i) + out.projections.features);
    }
    losses::LossReport report;
    try {
        report = losses::projection_loss(raw, batch.labels, batch.pair_of, loss.policy, loss.temperature);
    } catch (const NumericalError& e) {
        throw NumericalError(std::string("train step: ") + e.what());
    }
    if (!std::isfinite(report.value)) throw NumericalError("train step: non-finite loss");

    // Optimize the per-anchor mean.
    const double scale = 1.0 / n;
    nn::Tensor grad(n, out.projections.features);
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < grad.features; ++k) grad.row(i)[k] = report.gradients[i][k] * scale;
    }
    const auto grads = state.backward(grad);

    auto& params = state.params();
    auto& mom = state.momentum();
    for (double g : grads) {
        if (!std::isfinite(g)) throw NumericalError("train step: non-finite gradient");
    }
    std::vector<double> decay(params.size(), 1.0);
    for (const auto& spec : state.manifest()) {
        if (spec.role == nn::TensorRole::Param && spec.decay) {
            std::fill_n(decay.begin() + static_cast<std::ptrdiff_t>(spec.offset), spec.count,
                        1.0 - lr * cfg.weight_decay);
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        mom[i] = cfg.momentum * mom[i] + grads[i];
        params[i] = decay[i] * params[i] - lr * mom[i];
    }
    state.apply_precision();
    return {report.value * scale, static_cast<int>(report.skipped_anchors.size())};
}

EpochMetrics train_epoch(EncoderState& state, const BatchSource& source, const LossSpec& loss,
                         const TrainConfig& cfg, Rng& rng) {
    EpochMetrics m;
    m.epoch = state.epoch();
    m.lr = lr_schedule(state.epoch(), cfg);
    const auto batches = source(state.epoch(), rng);
    double total = 0.0;
    for (const auto& batch : batches) {
        const auto step = train_step(state, batch, loss, m.lr, cfg);
        total += step.loss;
        m.skipped_anchors += step.skipped_anchors;
        ++m.batches;
    }
    m.mean_loss = m.batches > 0 ? total / m.batches : 0.0;
    if (!std::isfinite(m.mean_loss)) {
        throw NumericalError("epoch " + std::to_string(m.epoch) + ": non-finite mean loss");
    }
    state.set_epoch(state.epoch() + 1);
    return m;
}

namespace {

json manifest_json(const EncoderState& state) {
    json tensors = json::array();
    for (const auto& spec : state.manifest()) {
        tensors.push_back({{"name", spec.name},
                           {"shape", spec.shape},
                           {"role", spec.role == nn::TensorRole::Param ? "param" : "buffer"}});
    }
    const bool f32 = state.config().precision == Precision::Float32;
    const std::size_t width = f32 ? 4 : 8;
    const std::size_t values = 2 * state.params().size() + state.buffers().size();
    return {{"format", "FIRM1"},
            {"dtype", f32 ? "float32" : "float64"},
            {"endianness", "little"},
            {"config", to_json(state.config())},
            {"epoch", state.epoch()},
            {"tensors", tensors},
            {"blob_order", {"param", "buffer", "momentum"}},
            {"blob_bytes", values * width}};
}

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U bits) {
    for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
    U bits = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b) bits |= static_cast<U>(p[b]) << (8 * b);
    return bits;
}

}  // namespace

std::vector<std::uint8_t> serialize_state(const EncoderState& state) {
    std::vector<std::uint8_t> out(kModelMagic, kModelMagic + sizeof(kModelMagic) - 1);
    const std::string manifest = manifest_json(state).dump() + "\n";
    out.insert(out.end(), manifest.begin(), manifest.end());
    const bool f32 = state.config().precision == Precision::Float32;
    for (const auto* v : {&state.params(), &state.buffers(), &state.momentum()}) {
        for (double x : *v) {
            if (f32) put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
            else put_le(out, std::bit_cast<std::uint64_t>(x));
        }
    }
    return out;
}

EncoderState deserialize_state(std::span<const std::uint8_t> bytes) {
    const std::size_t magic_len = sizeof(kModelMagic) - 1;
    if (bytes.size() < magic_len || std::memcmp(bytes.data(), kModelMagic, magic_len) != 0) {
        throw DataError("model file: bad magic bytes");
    }
    auto nl = std::find(bytes.begin() + magic_len, bytes.end(), static_cast<std::uint8_t>('\n'));
    if (nl == bytes.end()) throw DataError("model file: truncated manifest");
    json manifest;
    try {
        manifest = json::parse(bytes.begin() + magic_len, nl);
    } catch (const json::exception& e) {
        throw DataError(std::string("model file: bad manifest: ") + e.what());
    }
    EncoderConfig cfg;
    try {
        cfg = encoder_config_from_json(manifest.at("config"));
    } catch (const std::exception& e) {
        throw DataError(std::string("model file: bad config: ") + e.what());
    }
    EncoderState state(cfg, 0);
    const json expected = manifest_json(state);
    if (manifest.value("tensors", json()) != expected.at("tensors") ||
        manifest.value("dtype", "") != expected.at("dtype")) {
        throw DataError("model file: manifest mismatch");
    }
    const bool f32 = cfg.precision == Precision::Float32;
    const std::size_t width = f32 ? 4 : 8;
    const std::size_t need = expected.at("blob_bytes").get<std::size_t>();
    const std::size_t have = static_cast<std::size_t>(bytes.end() - (nl + 1));
    if (have < need) throw DataError("model file: truncated blob");
    if (have > need) throw DataError("model file: trailing bytes after blob");
    const std::uint8_t* p = &*(nl + 1);
    for (auto* v : {&state.params(), &state.buffers(), &state.momentum()}) {
        for (auto& x : *v) {
            x = f32 ? static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(p)))
                    : std::bit_cast<double>(get_le<std::uint64_t>(p));
            p += width;
        }
    }
    state.set_epoch(manifest.value("epoch", 0));
    return state;
}

void save_state(const EncoderState& state, const std::string& path) {
    const auto bytes = serialize_state(state);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write model file " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

EncoderState load_state(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read model file " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_state(bytes);
}

}  // namespace firm::encoder
