// Dense single-precision tensors, named parameter sets with Adam state,
// losses and MAC/parameter accounting.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "voxnav/common.hpp"

namespace voxnav {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
    std::string r = "[";
    for (std::size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + "]";
}

struct Tensor {
    Shape shape;
    std::vector<float> values;
    std::vector<float> grad;  // empty when no gradient is attached

    Tensor() = default;
    explicit Tensor(Shape s, float fill = 0.0f) : shape(std::move(s)), values(numel(shape), fill) {}
    Tensor(Shape s, std::vector<float> v) : shape(std::move(s)), values(std::move(v)) {
        if (values.size() != numel(shape)) throw ShapeError("tensor values do not match shape " + to_string(shape));
    }

    std::size_t size() const { return values.size(); }
    /// Leading (batch) dimension.
    std::size_t batch() const { return shape.empty() ? 1 : shape[0]; }
    /// Elements per batch entry.
    std::size_t stride() const { return shape.empty() ? 1 : size() / shape[0]; }
    float* sample(std::size_t n) { return values.data() + n * stride(); }
    const float* sample(std::size_t n) const { return values.data() + n * stride(); }
    bool has_grad() const { return !grad.empty(); }
    void zero_grad() { grad.assign(values.size(), 0.0f); }
    bool all_finite() const {
        for (float v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// ------------------------------------------------------------ parameters

/// Named trainable tensors with Adam moments, plus non-trainable buffers
/// (batch-norm running statistics). Declaration order is preserved and is
/// the serialization order.
class ParamSet {
public:
    struct Param {
        std::string name;
        Tensor tensor;  // values + grad
        std::vector<float> m, v;
        bool grad_ready = false;
    };
    struct Buffer {
        std::string name;
        Tensor tensor;
    };

    std::size_t add_param(const std::string& name, Shape shape) {
        check_unique(name);
        Param p;
        p.name = name;
        p.tensor = Tensor(std::move(shape));
        p.tensor.zero_grad();
        p.m.assign(p.tensor.size(), 0.0f);
        p.v.assign(p.tensor.size(), 0.0f);
        params_.push_back(std::move(p));
        return params_.size() - 1;
    }
    std::size_t add_buffer(const std::string& name, Shape shape, float fill = 0.0f) {
        check_unique(name);
        buffers_.push_back({name, Tensor(std::move(shape), fill)});
        return buffers_.size() - 1;
    }

    Param& param(std::size_t i) { return params_[i]; }
    const Param& param(std::size_t i) const { return params_[i]; }
    Buffer& buffer(std::size_t i) { return buffers_[i]; }
    const Buffer& buffer(std::size_t i) const { return buffers_[i]; }
    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    std::vector<Buffer>& buffers() { return buffers_; }
    const std::vector<Buffer>& buffers() const { return buffers_; }

    const Param* find(const std::string& name) const {
        for (auto& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }
    Param* find(const std::string& name) {
        for (auto& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (auto& p : params_) n += p.tensor.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) {
            std::fill(p.tensor.grad.begin(), p.tensor.grad.end(), 0.0f);
            p.grad_ready = false;
        }
    }
    /// Marks every gradient as populated; called by backward passes.
    void mark_grads_ready() {
        for (auto& p : params_) p.grad_ready = true;
    }
    void reset_optimizer() {
        step = 0;
        for (auto& p : params_) {
            std::fill(p.m.begin(), p.m.end(), 0.0f);
            std::fill(p.v.begin(), p.v.end(), 0.0f);
        }
    }

    std::int64_t step = 0;

private:
    void check_unique(const std::string& name) const {
        for (auto& p : params_)
            if (p.name == name) throw Error("duplicate parameter name '" + name + "'");
        for (auto& b : buffers_)
            if (b.name == name) throw Error("duplicate buffer name '" + name + "'");
    }
    std::vector<Param> params_;
    std::vector<Buffer> buffers_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update over every parameter. Consumed gradients
/// are zeroed.
inline void adam_step(ParamSet& ps, const AdamConfig& cfg = {}) {
    for (auto& p : ps.params())
        if (!p.grad_ready) throw Error("adam_step: missing gradient for parameter '" + p.name + "'");
    ps.step += 1;
    const double t = static_cast<double>(ps.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
    for (auto& p : ps.params()) {
        auto& w = p.tensor.values;
        auto& g = p.tensor.grad;
        for (std::size_t i = 0; i < w.size(); ++i) {
            p.m[i] = b1 * p.m[i] + (1.0f - b1) * g[i];
            p.v[i] = b2 * p.v[i] + (1.0f - b2) * g[i] * g[i];
            const double mh = p.m[i] / c1, vh = p.v[i] / c2;
            w[i] = static_cast<float>(w[i] - cfg.lr * mh / (std::sqrt(vh) + cfg.eps));
            g[i] = 0.0f;
        }
        p.grad_ready = false;
    }
}

// ------------------------------------------------------------------ losses

/// Mean over every component of (pred - target)²; gradient written to
/// `grad` (2 (pred - target) / n) when non-empty.
inline double mse_loss(std::span<const float> pred, std::span<const float> target, std::span<float> grad = {}) {
    if (pred.size() != target.size() || pred.empty()) throw ShapeError("mse_loss: shape mismatch");
    const double n = static_cast<double>(pred.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = double{pred[i]} - double{target[i]};
        sum += d * d;
    }
    if (!grad.empty()) {
        if (grad.size() != pred.size()) throw ShapeError("mse_loss: gradient shape mismatch");
        for (std::size_t i = 0; i < pred.size(); ++i)
            grad[i] = static_cast<float>(2.0 * (double{pred[i]} - double{target[i]}) / n);
    }
    return sum / n;
}

// -------------------------------------------------------------- cost model

enum class LayerKind { conv3d, conv_transpose3d, linear, batchnorm, relu, sigmoid, flatten };

inline std::string to_string(LayerKind k) {
    switch (k) {
        case LayerKind::conv3d: return "conv3d";
        case LayerKind::conv_transpose3d: return "conv_transpose3d";
        case LayerKind::linear: return "linear";
        case LayerKind::batchnorm: return "batchnorm";
        case LayerKind::relu: return "relu";
        case LayerKind::sigmoid: return "sigmoid";
        case LayerKind::flatten: return "flatten";
    }
    return "?";
}

/// Geometry of one layer as needed for cost accounting. For convolutions
/// `in_dims` is the input spatial size (D, H, W); for linear/batchnorm only
/// `in_features`/`out_features` are used.
struct LayerDesc {
    LayerKind kind = LayerKind::linear;
    std::size_t in_channels = 0, out_channels = 0;
    std::size_t kernel = 1, stride = 1, padding = 0;
    std::size_t in_dims[3] = {0, 0, 0};
    std::size_t in_features = 0, out_features = 0;

    static std::size_t conv_out(std::size_t d, std::size_t k, std::size_t s, std::size_t p) {
        if (d + 2 * p < k) return 0;
        return (d + 2 * p - k) / s + 1;
    }
    static std::size_t convt_out(std::size_t d, std::size_t k, std::size_t s, std::size_t p) {
        const long o = static_cast<long>((d - 1) * s + k) - 2 * static_cast<long>(p);
        return o > 0 ? static_cast<std::size_t>(o) : 0;
    }
};

struct Cost {
    std::uint64_t macs = 0;
    std::uint64_t params = 0;
    Cost& operator+=(const Cost& o) {
        macs += o.macs;
        params += o.params;
        return *this;
    }
    friend bool operator==(const Cost&, const Cost&) = default;
};

/// conv3d: MACs = Cin·Cout·k³·D'H'W', params = Cin·Cout·k³ + Cout.
/// conv_transpose3d: MACs = Cin·Cout·k³·D·H·W (per input voxel).
/// linear: MACs = in·out, params = in·out + out. batchnorm: params = 2F.
inline Cost count_cost(const LayerDesc& l) {
    const std::uint64_t k3 = std::uint64_t(l.kernel) * l.kernel * l.kernel;
    switch (l.kind) {
        case LayerKind::conv3d: {
            std::uint64_t out = 1;
            for (auto d : l.in_dims) out *= LayerDesc::conv_out(d, l.kernel, l.stride, l.padding);
            return {l.in_channels * l.out_channels * k3 * out, l.in_channels * l.out_channels * k3 + l.out_channels};
        }
        case LayerKind::conv_transpose3d: {
            const std::uint64_t in = std::uint64_t(l.in_dims[0]) * l.in_dims[1] * l.in_dims[2];
            return {l.in_channels * l.out_channels * k3 * in, l.in_channels * l.out_channels * k3 + l.out_channels};
        }
        case LayerKind::linear:
            return {std::uint64_t(l.in_features) * l.out_features,
                    std::uint64_t(l.in_features) * l.out_features + l.out_features};
        case LayerKind::batchnorm: return {0, 2 * std::uint64_t(l.in_features)};
        default: return {};
    }
}

inline Cost count_cost(std::span<const LayerDesc> layers) {
    Cost c;
    for (const auto& l : layers) c += count_cost(l);
    return c;
}

}  // namespace voxnav
