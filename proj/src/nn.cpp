#include "firm/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace firm::nn {

std::size_t Registry::add(const std::string& name, std::vector<int> shape, TensorRole role, bool decay) {
    std::size_t count = 1;
    for (int s : shape) count *= static_cast<std::size_t>(s);
    std::size_t& cursor = role == TensorRole::Param ? params_ : buffers_;
    TensorSpec spec{name, std::move(shape), role, decay, cursor, count};
    cursor += count;
    specs_.push_back(std::move(spec));
    return specs_.back().offset;
}

namespace {

void check_input(const Tensor& x, int expected, const char* layer) {
    if (x.features != expected) {
        throw std::invalid_argument(std::string(layer) + ": expected " + std::to_string(expected) +
                                    " input features, got " + std::to_string(x.features));
    }
}

class Linear final : public Layer {
public:
    Linear(Registry& reg, const std::string& name, int in, int out)
        : in_(in), out_(out),
          w_(reg.add(name + ".weight", {out, in}, TensorRole::Param, true)),
          b_(reg.add(name + ".bias", {out}, TensorRole::Param, false)) {}

    int in_features() const override { return in_; }
    int out_features() const override { return out_; }

    void init(double* params, double*, Rng& rng) const override {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / in_));
        for (int i = 0; i < out_ * in_; ++i) params[w_ + i] = dist(rng);
        for (int i = 0; i < out_; ++i) params[b_ + i] = 0.0;
    }

    Tensor forward(const Tensor& x, Context& ctx) override {
        check_input(x, in_, "linear");
        input_ = x;
        Tensor y(x.batch, out_);
        const double* w = ctx.params + w_;
        const double* b = ctx.params + b_;
        for (int n = 0; n < x.batch; ++n) {
            const double* xr = x.row(n);
            double* yr = y.row(n);
            for (int o = 0; o < out_; ++o) {
                const double* wr = w + static_cast<std::size_t>(o) * in_;
                double s = b[o];
                for (int i = 0; i < in_; ++i) s += wr[i] * xr[i];
                yr[o] = s;
            }
        }
        return y;
    }

    Tensor backward(const Tensor& g, Context& ctx) override {
        Tensor dx(g.batch, in_);
        const double* w = ctx.params + w_;
        double* gw = ctx.grads + w_;
        double* gb = ctx.grads + b_;
        for (int n = 0; n < g.batch; ++n) {
            const double* gr = g.row(n);
            const double* xr = input_.row(n);
            double* dxr = dx.row(n);
            for (int o = 0; o < out_; ++o) {
                const double go = gr[o];
                if (go == 0.0) continue;
                gb[o] += go;
                const double* wr = w + static_cast<std::size_t>(o) * in_;
                double* gwr = gw + static_cast<std::size_t>(o) * in_;
                for (int i = 0; i < in_; ++i) {
                    gwr[i] += go * xr[i];
                    dxr[i] += go * wr[i];
                }
            }
        }
        return dx;
    }

private:
    int in_, out_;
    std::size_t w_, b_;
    Tensor input_;
};

class Relu final : public Layer {
public:
    explicit Relu(int features) : features_(features) {}
    int in_features() const override { return features_; }
    int out_features() const override { return features_; }

    Tensor forward(const Tensor& x, Context&) override {
        check_input(x, features_, "relu");
        Tensor y = x;
        for (auto& v : y.data) v = v > 0.0 ? v : 0.0;
        output_ = y;
        return y;
    }

    Tensor backward(const Tensor& g, Context&) override {
        Tensor dx = g;
        for (std::size_t i = 0; i < dx.data.size(); ++i) {
            if (!(output_.data[i] > 0.0)) dx.data[i] = 0.0;
        }
        return dx;
    }

private:
    int features_;
    Tensor output_;
};

class BatchNorm final : public Layer {
public:
    BatchNorm(Registry& reg, const std::string& name, int features)
        : features_(features),
          gamma_(reg.add(name + ".gamma", {features}, TensorRole::Param, false)),
          beta_(reg.add(name + ".beta", {features}, TensorRole::Param, false)),
          mean_(reg.add(name + ".running_mean", {features}, TensorRole::Buffer, false)),
          var_(reg.add(name + ".running_var", {features}, TensorRole::Buffer, false)) {}

    int in_features() const override { return features_; }
    int out_features() const override { return features_; }

    void init(double* params, double* buffers, Rng&) const override {
        for (int f = 0; f < features_; ++f) {
            params[gamma_ + f] = 1.0;
            params[beta_ + f] = 0.0;
            buffers[mean_ + f] = 0.0;
            buffers[var_ + f] = 1.0;
        }
    }

    Tensor forward(const Tensor& x, Context& ctx) override {
        check_input(x, features_, "batchnorm");
        const int n = x.batch;
        Tensor y(n, features_);
        xhat_ = Tensor(n, features_);
        inv_std_.assign(features_, 0.0);
        train_ = ctx.train;
        const double* gamma = ctx.params + gamma_;
        const double* beta = ctx.params + beta_;
        for (int f = 0; f < features_; ++f) {
            double mean, var;
            if (ctx.train) {
                mean = 0.0;
                for (int i = 0; i < n; ++i) mean += x.row(i)[f];
                mean /= n;
                var = 0.0;
                for (int i = 0; i < n; ++i) {
                    const double d = x.row(i)[f] - mean;
                    var += d * d;
                }
                var /= n;
                if (ctx.buffers) {
                    const double unbiased = n > 1 ? var * n / (n - 1) : var;
                    double& rm = ctx.buffers[mean_ + f];
                    double& rv = ctx.buffers[var_ + f];
                    rm = (1.0 - kBatchNormMomentum) * rm + kBatchNormMomentum * mean;
                    rv = (1.0 - kBatchNormMomentum) * rv + kBatchNormMomentum * unbiased;
                }
            } else {
                mean = ctx.buffers[mean_ + f];
                var = ctx.buffers[var_ + f];
            }
            const double inv_std = 1.0 / std::sqrt(var + kBatchNormEps);
            inv_std_[f] = inv_std;
            for (int i = 0; i < n; ++i) {
                const double xh = (x.row(i)[f] - mean) * inv_std;
                xhat_.row(i)[f] = xh;
                y.row(i)[f] = gamma[f] * xh + beta[f];
            }
        }
        return y;
    }

    Tensor backward(const Tensor& g, Context& ctx) override {
        const int n = g.batch;
        Tensor dx(n, features_);
        const double* gamma = ctx.params + gamma_;
        for (int f = 0; f < features_; ++f) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (int i = 0; i < n; ++i) {
                sum_g += g.row(i)[f];
                sum_gx += g.row(i)[f] * xhat_.row(i)[f];
            }
            ctx.grads[gamma_ + f] += sum_gx;
            ctx.grads[beta_ + f] += sum_g;
            const double scale = gamma[f] * inv_std_[f];
            for (int i = 0; i < n; ++i) {
                if (train_) {
                    dx.row(i)[f] = scale * (g.row(i)[f] - sum_g / n - xhat_.row(i)[f] * sum_gx / n);
                } else {
                    dx.row(i)[f] = scale * g.row(i)[f];
                }
            }
        }
        return dx;
    }

private:
    int features_;
    std::size_t gamma_, beta_, mean_, var_;
    Tensor xhat_;
    std::vector<double> inv_std_;
    bool train_ = false;
};

class Conv3x3 final : public Layer {
public:
    Conv3x3(Registry& reg, const std::string& name, Spatial in, int out_channels)
        : in_(in), out_c_(out_channels),
          w_(reg.add(name + ".weight", {out_channels, in.channels, 3, 3}, TensorRole::Param, true)),
          b_(reg.add(name + ".bias", {out_channels}, TensorRole::Param, false)) {}

    int in_features() const override { return in_.size(); }
    int out_features() const override { return out_c_ * in_.height * in_.width; }

    void init(double* params, double*, Rng& rng) const override {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (in_.channels * 9)));
        for (int i = 0; i < out_c_ * in_.channels * 9; ++i) params[w_ + i] = dist(rng);
        for (int i = 0; i < out_c_; ++i) params[b_ + i] = 0.0;
    }

    Tensor forward(const Tensor& x, Context& ctx) override {
        check_input(x, in_features(), "conv3x3");
        input_ = x;
        const int H = in_.height, W = in_.width, C = in_.channels;
        Tensor y(x.batch, out_features());
        const double* w = ctx.params + w_;
        const double* b = ctx.params + b_;
        for (int n = 0; n < x.batch; ++n) {
            const double* xr = x.row(n);
            double* yr = y.row(n);
            for (int o = 0; o < out_c_; ++o) {
                double* yo = yr + static_cast<std::size_t>(o) * H * W;
                for (int p = 0; p < H * W; ++p) yo[p] = b[o];
                for (int c = 0; c < C; ++c) {
                    const double* xc = xr + static_cast<std::size_t>(c) * H * W;
                    const double* k = w + (static_cast<std::size_t>(o) * C + c) * 9;
                    for (int ky = 0; ky < 3; ++ky) {
                        for (int kx = 0; kx < 3; ++kx) {
                            const double kv = k[ky * 3 + kx];
                            const int dy = ky - 1, dx = kx - 1;
                            for (int r = std::max(0, -dy); r < std::min(H, H - dy); ++r) {
                                const double* src = xc + (r + dy) * W + dx;
                                double* dst = yo + r * W;
                                for (int col = std::max(0, -dx); col < std::min(W, W - dx); ++col) {
                                    dst[col] += kv * src[col];
                                }
                            }
                        }
                    }
                }
            }
        }
        return y;
    }

    Tensor backward(const Tensor& g, Context& ctx) override {
        const int H = in_.height, W = in_.width, C = in_.channels;
        Tensor dx(g.batch, in_features());
        const double* w = ctx.params + w_;
        double* gw = ctx.grads + w_;
        double* gb = ctx.grads + b_;
        for (int n = 0; n < g.batch; ++n) {
            const double* gr = g.row(n);
            const double* xr = input_.row(n);
            double* dxr = dx.row(n);
            for (int o = 0; o < out_c_; ++o) {
                const double* go = gr + static_cast<std::size_t>(o) * H * W;
                for (int p = 0; p < H * W; ++p) gb[o] += go[p];
                for (int c = 0; c < C; ++c) {
                    const double* xc = xr + static_cast<std::size_t>(c) * H * W;
                    double* dxc = dxr + static_cast<std::size_t>(c) * H * W;
                    const std::size_t kofs = (static_cast<std::size_t>(o) * C + c) * 9;
                    for (int ky = 0; ky < 3; ++ky) {
                        for (int kx = 0; kx < 3; ++kx) {
                            const double kv = w[kofs + ky * 3 + kx];
                            const int dy = ky - 1, dx = kx - 1;
                            double acc = 0.0;
                            for (int r = std::max(0, -dy); r < std::min(H, H - dy); ++r) {
                                const double* src = xc + (r + dy) * W + dx;
                                double* dsrc = dxc + (r + dy) * W + dx;
                                const double* gout = go + r * W;
                                for (int col = std::max(0, -dx); col < std::min(W, W - dx); ++col) {
                                    acc += gout[col] * src[col];
                                    dsrc[col] += kv * gout[col];
                                }
                            }
                            gw[kofs + ky * 3 + kx] += acc;
                        }
                    }
                }
            }
        }
        return dx;
    }

private:
    Spatial in_;
    int out_c_;
    std::size_t w_, b_;
    Tensor input_;
};

class AvgPool2 final : public Layer {
public:
    explicit AvgPool2(Spatial in) : in_(in), oh_(in.height / 2), ow_(in.width / 2) {
        if (oh_ < 1 || ow_ < 1) throw std::invalid_argument("avgpool input too small");
    }
    int in_features() const override { return in_.size(); }
    int out_features() const override { return in_.channels * oh_ * ow_; }

    Tensor forward(const Tensor& x, Context&) override {
        check_input(x, in_features(), "avgpool");
        Tensor y(x.batch, out_features());
        for (int n = 0; n < x.batch; ++n) {
            for (int c = 0; c < in_.channels; ++c) {
                const double* xc = x.row(n) + static_cast<std::size_t>(c) * in_.height * in_.width;
                double* yc = y.row(n) + static_cast<std::size_t>(c) * oh_ * ow_;
                for (int r = 0; r < oh_; ++r) {
                    for (int col = 0; col < ow_; ++col) {
                        const double* p = xc + (2 * r) * in_.width + 2 * col;
                        yc[r * ow_ + col] = 0.25 * (p[0] + p[1] + p[in_.width] + p[in_.width + 1]);
                    }
                }
            }
        }
        return y;
    }

    Tensor backward(const Tensor& g, Context&) override {
        Tensor dx(g.batch, in_features());
        for (int n = 0; n < g.batch; ++n) {
            for (int c = 0; c < in_.channels; ++c) {
                const double* gc = g.row(n) + static_cast<std::size_t>(c) * oh_ * ow_;
                double* dc = dx.row(n) + static_cast<std::size_t>(c) * in_.height * in_.width;
                for (int r = 0; r < oh_; ++r) {
                    for (int col = 0; col < ow_; ++col) {
                        const double v = 0.25 * gc[r * ow_ + col];
                        double* p = dc + (2 * r) * in_.width + 2 * col;
                        p[0] += v;
                        p[1] += v;
                        p[in_.width] += v;
                        p[in_.width + 1] += v;
                    }
                }
            }
        }
        return dx;
    }

private:
    Spatial in_;
    int oh_, ow_;
};

class GlobalAvgPool final : public Layer {
public:
    explicit GlobalAvgPool(Spatial in) : in_(in) {}
    int in_features() const override { return in_.size(); }
    int out_features() const override { return in_.channels; }

    Tensor forward(const Tensor& x, Context&) override {
        check_input(x, in_features(), "global_avgpool");
        const int hw = in_.height * in_.width;
        Tensor y(x.batch, in_.channels);
        for (int n = 0; n < x.batch; ++n) {
            for (int c = 0; c < in_.channels; ++c) {
                const double* xc = x.row(n) + static_cast<std::size_t>(c) * hw;
                double s = 0.0;
                for (int p = 0; p < hw; ++p) s += xc[p];
                y.row(n)[c] = s / hw;
            }
        }
        return y;
    }

    Tensor backward(const Tensor& g, Context&) override {
        const int hw = in_.height * in_.width;
        Tensor dx(g.batch, in_features());
        for (int n = 0; n < g.batch; ++n) {
            for (int c = 0; c < in_.channels; ++c) {
                const double v = g.row(n)[c] / hw;
                double* dc = dx.row(n) + static_cast<std::size_t>(c) * hw;
                for (int p = 0; p < hw; ++p) dc[p] = v;
            }
        }
        return dx;
    }

private:
    Spatial in_;
};

}  // namespace

std::unique_ptr<Layer> make_linear(Registry& reg, const std::string& name, int in, int out) {
    return std::make_unique<Linear>(reg, name, in, out);
}
std::unique_ptr<Layer> make_relu(int features) { return std::make_unique<Relu>(features); }
std::unique_ptr<Layer> make_batchnorm(Registry& reg, const std::string& name, int features) {
    return std::make_unique<BatchNorm>(reg, name, features);
}
std::unique_ptr<Layer> make_conv3x3(Registry& reg, const std::string& name, Spatial in, int out_channels) {
    return std::make_unique<Conv3x3>(reg, name, in, out_channels);
}
std::unique_ptr<Layer> make_avgpool2(Spatial in) { return std::make_unique<AvgPool2>(in); }
std::unique_ptr<Layer> make_global_avgpool(Spatial in) { return std::make_unique<GlobalAvgPool>(in); }

Tensor Sequential::forward(const Tensor& x, Context& ctx) {
    Tensor h = x;
    for (auto& layer : layers_) h = layer->forward(h, ctx);
    return h;
}

Tensor Sequential::backward(const Tensor& grad_out, Context& ctx) {
    Tensor g = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g, ctx);
    return g;
}

void Sequential::init(double* params, double* buffers, Rng& rng) const {
    for (const auto& layer : layers_) layer->init(params, buffers, rng);
}

}  // namespace firm::nn
