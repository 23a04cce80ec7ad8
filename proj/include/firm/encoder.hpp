#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "firm/core.hpp"
#include "firm/nn.hpp"

namespace firm::encoder {

enum class Arch { MlpSmall, ConvSmall };
enum class Precision { Float32, Float64 };

struct EncoderConfig {
    Arch arch = Arch::MlpSmall;
    int input_height = 16;
    int input_width = 16;
    int input_channels = 1;
    int d = 64;
    int d_head = 32;
    int head_layers = 2;   // hidden layers in the projection head
    int head_width = 128;
    bool head_norm = true;
    int mlp_hidden = 128;                  // mlp-small trunk width
    std::vector<int> conv_channels{8, 16, 32};  // conv-small blocks
    Precision precision = Precision::Float32;
};

void validate(const EncoderConfig& cfg);
nlohmann::json to_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

struct TrainConfig {
    int epochs = 200;
    int warmup_epochs = 20;
    double peak_lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 0.0003;
    int batch_pairs = 32;
    double temperature = 0.2;
    std::uint64_t seed = 0;
};

void validate(const TrainConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Encoder f, projection head g, their flat parameters, batch-norm buffers,
/// momentum and the epoch counter.
class EncoderState {
public:
    EncoderState(const EncoderConfig& cfg, std::uint64_t init_seed);
    EncoderState(const EncoderState& other);
    EncoderState& operator=(const EncoderState& other);
    EncoderState(EncoderState&&) noexcept = default;
    EncoderState& operator=(EncoderState&&) noexcept = default;

    const EncoderConfig& config() const { return config_; }
    const std::vector<nn::TensorSpec>& manifest() const { return registry_.specs(); }

    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    std::vector<double>& buffers() { return buffers_; }
    const std::vector<double>& buffers() const { return buffers_; }
    std::vector<double>& momentum() { return momentum_; }
    const std::vector<double>& momentum() const { return momentum_; }
    int epoch() const { return epoch_; }
    void set_epoch(int e) { epoch_ = e; }

    // Parameter view by manifest name; throws std::out_of_range for unknown names.
    std::span<double> tensor(const std::string& name);
    std::span<const double> tensor(const std::string& name) const;

    int input_size() const { return config_.input_height * config_.input_width * config_.input_channels; }

    struct BatchOutput {
        nn::Tensor features;     // batch x d
        nn::Tensor projections;  // batch x d_head, before normalization
    };

    /// Train mode uses batch statistics and updates running statistics.
    BatchOutput forward_batch(std::span<const Image> images, bool train);
    /// Backpropagates dL/dprojection through head and encoder of the last
    /// forward_batch call; returns the flat parameter gradient.
    std::vector<double> backward(const nn::Tensor& grad_projections);

    // Round all state to float when running in single precision.
    void apply_precision();

private:
    void build();

    EncoderConfig config_;
    nn::Registry registry_;
    nn::Sequential trunk_;
    nn::Sequential head_;
    std::vector<double> params_;
    std::vector<double> buffers_;
    std::vector<double> momentum_;
    int epoch_ = 0;
    bool last_train_ = false;
};

struct ForwardResult {
    Vec feature;
    Vec projection;
};

/// Eval-mode forward of one image. Throws std::invalid_argument on shape mismatch.
ForwardResult forward(EncoderState& state, const Image& img);

/// Eval-mode features for many images, computed in chunks.
std::vector<Vec> features(EncoderState& state, std::span<const Image> images, int chunk = 64);

/// Linear warmup from peak/warmup to peak, then cosine annealing.
double lr_schedule(int epoch, const TrainConfig& cfg);

struct LossSpec {
    PositiveSetPolicy policy = PositiveSetPolicy::Firm;
    double temperature = 0.2;
};

struct StepMetrics {
    double loss = 0.0;
    int skipped_anchors = 0;
};

/// One SGD step with momentum and decoupled weight decay:
/// p <- (1 - lr * wd) p - lr * v, with v <- momentum * v + grad.
StepMetrics train_step(EncoderState& state, const MultiviewBatch& batch, const LossSpec& loss,
                       double lr, const TrainConfig& cfg);

// Produces the batches of one epoch.
using BatchSource = std::function<std::vector<MultiviewBatch>(int epoch, Rng& rng)>;

struct EpochMetrics {
    int epoch = 0;
    double lr = 0.0;
    double mean_loss = 0.0;
    int batches = 0;
    int skipped_anchors = 0;
};

/// Runs one epoch at lr_schedule(state.epoch()) and advances the epoch counter.
/// Throws NumericalError when a batch produces a non-finite loss.
EpochMetrics train_epoch(EncoderState& state, const BatchSource& source, const LossSpec& loss,
                         const TrainConfig& cfg, Rng& rng);

inline constexpr char kModelMagic[] = "FIRM1\n";

/// Magic bytes, a one-line JSON manifest, then the little-endian blob of
/// parameters, buffers and momentum in manifest order.
void save_state(const EncoderState& state, const std::string& path);
EncoderState load_state(const std::string& path);

std::vector<std::uint8_t> serialize_state(const EncoderState& state);
EncoderState deserialize_state(std::span<const std::uint8_t> bytes);

}  // namespace firm::encoder
