#pragma once

#include <memory>
#include <string>
#include <vector>

#include "firm/core.hpp"

namespace firm::nn {

/// Batch of activations: `batch` rows of `features` values. Spatial layers
/// interpret each row as C x H x W.
struct Tensor {
    int batch = 0;
    int features = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(int b, int f) : batch(b), features(f), data(static_cast<std::size_t>(b) * f, 0.0) {}
    double* row(int i) { return data.data() + static_cast<std::size_t>(i) * features; }
    const double* row(int i) const { return data.data() + static_cast<std::size_t>(i) * features; }
};

enum class TensorRole { Param, Buffer };

struct TensorSpec {
    std::string name;
    std::vector<int> shape;
    TensorRole role = TensorRole::Param;
    bool decay = false;  // decoupled weight decay applies
    std::size_t offset = 0;  // into the flat parameter or buffer vector
    std::size_t count = 0;
};

/// Accumulates the layout of parameters and buffers as layers are built.
class Registry {
public:
    std::size_t add(const std::string& name, std::vector<int> shape, TensorRole role, bool decay);
    const std::vector<TensorSpec>& specs() const { return specs_; }
    std::size_t param_count() const { return params_; }
    std::size_t buffer_count() const { return buffers_; }

private:
    std::vector<TensorSpec> specs_;
    std::size_t params_ = 0;
    std::size_t buffers_ = 0;
};

struct Context {
    const double* params = nullptr;
    double* grads = nullptr;
    double* buffers = nullptr;
    bool train = false;
};

class Layer {
public:
    virtual ~Layer() = default;
    virtual int in_features() const = 0;
    virtual int out_features() const = 0;
    // Draws initial values into the parameter slice owned by this layer.
    virtual void init(double* params, double* buffers, Rng& rng) const { (void)params; (void)buffers; (void)rng; }
    virtual Tensor forward(const Tensor& x, Context& ctx) = 0;
    // Accumulates parameter gradients into ctx.grads and returns dL/dx.
    virtual Tensor backward(const Tensor& grad_out, Context& ctx) = 0;
};

struct Spatial {
    int channels;
    int height;
    int width;
    int size() const { return channels * height * width; }
};

std::unique_ptr<Layer> make_linear(Registry& reg, const std::string& name, int in, int out);
std::unique_ptr<Layer> make_relu(int features);
std::unique_ptr<Layer> make_batchnorm(Registry& reg, const std::string& name, int features);
// 3x3 convolution, stride 1, zero padding 1.
std::unique_ptr<Layer> make_conv3x3(Registry& reg, const std::string& name, Spatial in, int out_channels);
// 2x2 average pooling, stride 2; odd trailing rows/cols are dropped.
std::unique_ptr<Layer> make_avgpool2(Spatial in);
std::unique_ptr<Layer> make_global_avgpool(Spatial in);

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEps = 1e-5;

/// Chain of layers sharing one flat parameter vector.
class Sequential {
public:
    void push(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }
    Tensor forward(const Tensor& x, Context& ctx);
    Tensor backward(const Tensor& grad_out, Context& ctx);
    void init(double* params, double* buffers, Rng& rng) const;
    int out_features() const { return layers_.back()->out_features(); }
    bool empty() const { return layers_.empty(); }

private:
    std::vector<std::unique_ptr<Layer>> layers_;
};

}  // namespace firm::nn
