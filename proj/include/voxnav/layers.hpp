// Layer set used by the navigation networks, with explicit backward rules.
//
// Every reduction runs in a fixed order (sample by sample, eight fixed
// accumulation lanes inside dot products), so a forward or backward pass is
// bit-reproducible for identical inputs and parameters.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "voxnav/common.hpp"
#include "voxnav/tensor.hpp"

namespace voxnav {

enum class Mode { train, eval };

namespace kernels {

inline float dot(const float* a, const float* b, std::size_t n) {
    float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
    float tail = 0.0f;
    for (; i < n; ++i) tail += a[i] * b[i];
    return (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail;
}

inline float sum(const float* a, std::size_t n) {
    float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int l = 0; l < 8; ++l) acc[l] += a[i + l];
    float tail = 0.0f;
    for (; i < n; ++i) tail += a[i];
    return (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail;
}

inline void axpy(float* y, float a, const float* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

/// Spatial geometry of a 3D convolution from `in` to `out` voxels.
struct ConvGeom {
    std::size_t channels = 1;  // channels of the volume being unfolded
    std::size_t in[3] = {1, 1, 1};
    std::size_t out[3] = {1, 1, 1};
    std::size_t k = 1, s = 1, p = 0;

    std::size_t rows() const { return channels * k * k * k; }
    std::size_t out_count() const { return out[0] * out[1] * out[2]; }
    std::size_t in_count() const { return in[0] * in[1] * in[2]; }
};

/// Output indices [lo, hi) along one axis whose tap `kk` lands inside [0, n).
inline void valid_range(std::size_t out, std::size_t n, std::size_t kk, std::size_t s, std::size_t p, std::size_t& lo,
                        std::size_t& hi) {
    // x = w·s + kk - p must satisfy 0 <= x < n
    lo = kk >= p ? 0 : (p - kk + s - 1) / s;
    hi = (n + p > kk) ? std::min(out, (n + p - kk - 1) / s + 1) : 0;
    if (hi < lo) hi = lo;
}

/// Unfolds `src` ([channels, in...]) into cols ([channels·k³, out...]).
inline void im2col(const ConvGeom& g, const float* src, float* cols) {
    const std::size_t od = g.out[0], oh = g.out[1], ow = g.out[2];
    const std::size_t ih = g.in[1], iw = g.in[2];
    const std::size_t plane = oh * ow;
    float* row = cols;
    for (std::size_t c = 0; c < g.channels; ++c) {
        const float* vol = src + c * g.in_count();
        for (std::size_t kd = 0; kd < g.k; ++kd) {
            std::size_t d0, d1;
            valid_range(od, g.in[0], kd, g.s, g.p, d0, d1);
            for (std::size_t kh = 0; kh < g.k; ++kh) {
                std::size_t h0, h1;
                valid_range(oh, ih, kh, g.s, g.p, h0, h1);
                for (std::size_t kw = 0; kw < g.k; ++kw, row += g.out_count()) {
                    std::size_t w0, w1;
                    valid_range(ow, iw, kw, g.s, g.p, w0, w1);
                    std::fill(row, row + g.out_count(), 0.0f);
                    for (std::size_t d = d0; d < d1; ++d) {
                        const std::size_t z = d * g.s + kd - g.p;
                        for (std::size_t h = h0; h < h1; ++h) {
                            const std::size_t y = h * g.s + kh - g.p;
                            float* line = row + d * plane + h * ow;
                            const float* srow = vol + (z * ih + y) * iw;
                            for (std::size_t w = w0; w < w1; ++w) line[w] = srow[w * g.s + kw - g.p];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatter-adds cols back into `dst` ([channels, in...]).
inline void col2im(const ConvGeom& g, const float* cols, float* dst) {
    const std::size_t od = g.out[0], oh = g.out[1], ow = g.out[2];
    const std::size_t ih = g.in[1], iw = g.in[2];
    const std::size_t plane = oh * ow;
    const float* row = cols;
    for (std::size_t c = 0; c < g.channels; ++c) {
        float* vol = dst + c * g.in_count();
        for (std::size_t kd = 0; kd < g.k; ++kd) {
            std::size_t d0, d1;
            valid_range(od, g.in[0], kd, g.s, g.p, d0, d1);
            for (std::size_t kh = 0; kh < g.k; ++kh) {
                std::size_t h0, h1;
                valid_range(oh, ih, kh, g.s, g.p, h0, h1);
                for (std::size_t kw = 0; kw < g.k; ++kw, row += g.out_count()) {
                    std::size_t w0, w1;
                    valid_range(ow, iw, kw, g.s, g.p, w0, w1);
                    for (std::size_t d = d0; d < d1; ++d) {
                        const std::size_t z = d * g.s + kd - g.p;
                        for (std::size_t h = h0; h < h1; ++h) {
                            const std::size_t y = h * g.s + kh - g.p;
                            const float* line = row + d * plane + h * ow;
                            float* drow = vol + (z * ih + y) * iw;
                            for (std::size_t w = w0; w < w1; ++w) drow[w * g.s + kw - g.p] += line[w];
                        }
                    }
                }
            }
        }
    }
}

/// out[m][p] (+)= Σ_r a[m][r] · b[r][p]; a is M×R, b is R×P.
inline void gemm_nn(const float* a, const float* b, float* out, std::size_t m, std::size_t r, std::size_t p) {
    for (std::size_t i = 0; i < m; ++i) {
        float* o = out + i * p;
        const float* ai = a + i * r;
        for (std::size_t k = 0; k < r; ++k) {
            const float w = ai[k];
            if (w != 0.0f) axpy(o, w, b + k * p, p);
        }
    }
}

/// out[r][p] = Σ_m a[m][r] · b[m][p]; a is M×R, b is M×P.
inline void gemm_tn(const float* a, const float* b, float* out, std::size_t m, std::size_t r, std::size_t p) {
    std::fill(out, out + r * p, 0.0f);
    for (std::size_t k = 0; k < r; ++k) {
        float* o = out + k * p;
        for (std::size_t i = 0; i < m; ++i) {
            const float w = a[i * r + k];
            if (w != 0.0f) axpy(o, w, b + i * p, p);
        }
    }
}

/// out[m][r] += Σ_p a[m][p] · b[r][p]; a is M×P, b is R×P.
inline void gemm_nt_acc(const float* a, const float* b, float* out, std::size_t m, std::size_t r, std::size_t p) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < r; ++k) out[i * r + k] += dot(a + i * p, b + k * p, p);
}

}  // namespace kernels

// ------------------------------------------------------------------ layers

struct Conv3dLayer {
    std::size_t c_in = 1, c_out = 1, k = 1, s = 1, p = 0;
    std::size_t weight = 0, bias = 0;  // parameter indices, weight [c_out, c_in, k, k, k]
};

/// Transposed convolution; weight layout [c_in, c_out, k, k, k].
struct ConvTranspose3dLayer {
    std::size_t c_in = 1, c_out = 1, k = 1, s = 1, p = 0;
    std::size_t weight = 0, bias = 0;
};

struct LinearLayer {
    std::size_t in = 1, out = 1;
    std::size_t weight = 0, bias = 0;  // weight [out, in]
};

struct BatchNormLayer {
    std::size_t features = 1;
    std::size_t gamma = 0, beta = 0;             // parameters
    std::size_t running_mean = 0, running_var = 0;  // buffers
    double eps = 1e-5;
    double momentum = 0.1;
};

struct ReluLayer {};
struct SigmoidLayer {};
struct FlattenLayer {};

using AnyLayer =
    std::variant<Conv3dLayer, ConvTranspose3dLayer, LinearLayer, BatchNormLayer, ReluLayer, SigmoidLayer, FlattenLayer>;

/// Activations recorded by a training-mode forward pass.
struct Trace {
    std::vector<Tensor> acts;               // acts[0] is the input, acts[i+1] the output of layer i
    std::vector<std::vector<float>> aux;    // per-layer saved statistics (batch-norm mean, inv std)
};

class Sequential {
public:
    Sequential() = default;
    Sequential(Shape sample_input) : input_shape_(std::move(sample_input)) {}

    const Shape& input_shape() const { return input_shape_; }
    const std::vector<AnyLayer>& layers() const { return layers_; }

    /// Per-sample output shape of the whole stack.
    Shape output_shape() const {
        Shape s = input_shape_;
        for (auto& l : layers_) s = layer_output(l, s);
        return s;
    }

    // Builders. Parameters are declared in `ps`; initialisation is left to
    // the caller.
    Sequential& conv3d(ParamSet& ps, const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t k,
                       std::size_t s, std::size_t p) {
        Conv3dLayer l{c_in, c_out, k, s, p};
        l.weight = ps.add_param(name + ".weight", {c_out, c_in, k, k, k});
        l.bias = ps.add_param(name + ".bias", {c_out});
        return push(l);
    }
    Sequential& conv_transpose3d(ParamSet& ps, const std::string& name, std::size_t c_in, std::size_t c_out,
                                 std::size_t k, std::size_t s, std::size_t p) {
        ConvTranspose3dLayer l{c_in, c_out, k, s, p};
        l.weight = ps.add_param(name + ".weight", {c_in, c_out, k, k, k});
        l.bias = ps.add_param(name + ".bias", {c_out});
        return push(l);
    }
    Sequential& linear(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out) {
        LinearLayer l{in, out};
        l.weight = ps.add_param(name + ".weight", {out, in});
        l.bias = ps.add_param(name + ".bias", {out});
        return push(l);
    }
    Sequential& batchnorm(ParamSet& ps, const std::string& name, std::size_t features) {
        BatchNormLayer l;
        l.features = features;
        l.gamma = ps.add_param(name + ".gamma", {features});
        l.beta = ps.add_param(name + ".beta", {features});
        std::fill(ps.param(l.gamma).tensor.values.begin(), ps.param(l.gamma).tensor.values.end(), 1.0f);
        l.running_mean = ps.add_buffer(name + ".running_mean", {features}, 0.0f);
        l.running_var = ps.add_buffer(name + ".running_var", {features}, 1.0f);
        return push(l);
    }
    Sequential& relu() { return push(ReluLayer{}); }
    Sequential& sigmoid() { return push(SigmoidLayer{}); }
    Sequential& flatten() { return push(FlattenLayer{}); }

    /// Training-mode forward: batch statistics, running-stat updates, trace
    /// recorded for backward.
    Tensor forward_train(const Tensor& x, ParamSet& ps, Trace& trace) const {
        trace.acts.assign(1, x);
        trace.aux.assign(layers_.size(), {});
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            Tensor y = apply(layers_[i], trace.acts.back(), ps, &ps, &trace.aux[i]);
            trace.acts.push_back(std::move(y));
        }
        return trace.acts.back();
    }

    /// Evaluation-mode forward; reads parameters only, safe to call
    /// concurrently.
    Tensor infer(const Tensor& x, const ParamSet& ps) const {
        Tensor cur = x;
        for (const auto& l : layers_) cur = apply(l, cur, ps, nullptr, nullptr);
        return cur;
    }

    /// Accumulates parameter gradients for the traced pass and returns the
    /// gradient w.r.t. the input (empty tensor unless `need_input_grad`).
    Tensor backward(const Trace& trace, Tensor gy, ParamSet& ps, bool need_input_grad) const {
        for (std::size_t i = layers_.size(); i-- > 0;) {
            const bool need = need_input_grad || i > 0;
            gy = back(layers_[i], trace.acts[i], trace.acts[i + 1], gy, trace.aux[i], ps, need);
        }
        return need_input_grad ? gy : Tensor{};
    }

    std::vector<LayerDesc> describe() const {
        std::vector<LayerDesc> out;
        Shape s = input_shape_;
        for (const auto& l : layers_) {
            out.push_back(desc(l, s));
            s = layer_output(l, s);
        }
        return out;
    }

    Cost cost() const {
        auto d = describe();
        return count_cost(std::span<const LayerDesc>(d));
    }

private:
    Sequential& push(AnyLayer l) {
        layers_.push_back(std::move(l));
        output_shape();  // validates geometry eagerly
        return *this;
    }

    static Shape layer_output(const AnyLayer& l, const Shape& in) {
        return std::visit(
            [&](const auto& L) -> Shape {
                using T = std::decay_t<decltype(L)>;
                if constexpr (std::is_same_v<T, Conv3dLayer>) {
                    if (in.size() != 4 || in[0] != L.c_in)
                        throw ShapeError("conv3d expects [" + std::to_string(L.c_in) + ",D,H,W], got " + to_string(in));
                    Shape o{L.c_out, 0, 0, 0};
                    for (int a = 0; a < 3; ++a) {
                        o[a + 1] = LayerDesc::conv_out(in[a + 1], L.k, L.s, L.p);
                        if (o[a + 1] < 1) throw ShapeError("conv3d: output dimension < 1 for input " + to_string(in));
                    }
                    return o;
                } else if constexpr (std::is_same_v<T, ConvTranspose3dLayer>) {
                    if (in.size() != 4 || in[0] != L.c_in)
                        throw ShapeError("conv_transpose3d expects [" + std::to_string(L.c_in) + ",D,H,W], got " +
                                         to_string(in));
                    Shape o{L.c_out, 0, 0, 0};
                    for (int a = 0; a < 3; ++a) {
                        o[a + 1] = LayerDesc::convt_out(in[a + 1], L.k, L.s, L.p);
                        if (o[a + 1] < 1) throw ShapeError("conv_transpose3d: output dimension < 1");
                    }
                    return o;
                } else if constexpr (std::is_same_v<T, LinearLayer>) {
                    if (numel(in) != L.in)
                        throw ShapeError("linear expects " + std::to_string(L.in) + " inputs, got " + to_string(in));
                    return {L.out};
                } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
                    if (numel(in) != L.features) throw ShapeError("batchnorm feature count mismatch");
                    return in;
                } else if constexpr (std::is_same_v<T, FlattenLayer>) {
                    return {numel(in)};
                } else {
                    return in;
                }
            },
            l);
    }

    static LayerDesc desc(const AnyLayer& l, const Shape& in) {
        LayerDesc d;
        std::visit(
            [&](const auto& L) {
                using T = std::decay_t<decltype(L)>;
                if constexpr (std::is_same_v<T, Conv3dLayer> || std::is_same_v<T, ConvTranspose3dLayer>) {
                    d.kind = std::is_same_v<T, Conv3dLayer> ? LayerKind::conv3d : LayerKind::conv_transpose3d;
                    d.in_channels = L.c_in;
                    d.out_channels = L.c_out;
                    d.kernel = L.k;
                    d.stride = L.s;
                    d.padding = L.p;
                    for (int a = 0; a < 3; ++a) d.in_dims[a] = in[a + 1];
                } else if constexpr (std::is_same_v<T, LinearLayer>) {
                    d.kind = LayerKind::linear;
                    d.in_features = L.in;
                    d.out_features = L.out;
                } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
                    d.kind = LayerKind::batchnorm;
                    d.in_features = L.features;
                    d.out_features = L.features;
                } else if constexpr (std::is_same_v<T, ReluLayer>) {
                    d.kind = LayerKind::relu;
                } else if constexpr (std::is_same_v<T, SigmoidLayer>) {
                    d.kind = LayerKind::sigmoid;
                } else {
                    d.kind = LayerKind::flatten;
                }
            },
            l);
        return d;
    }

    static kernels::ConvGeom conv_geom(std::size_t channels, const Shape& in, const Shape& out, std::size_t k,
                                       std::size_t s, std::size_t p) {
        kernels::ConvGeom g;
        g.channels = channels;
        for (int a = 0; a < 3; ++a) {
            g.in[a] = in[a + 1];
            g.out[a] = out[a + 1];
        }
        g.k = k;
        g.s = s;
        g.p = p;
        return g;
    }

    static Shape with_batch(std::size_t n, const Shape& s) {
        Shape r{n};
        r.insert(r.end(), s.begin(), s.end());
        return r;
    }

    /// `mut` is non-null only in training mode.
    static Tensor apply(const AnyLayer& layer, const Tensor& x, const ParamSet& ps, ParamSet* mut,
                        std::vector<float>* aux) {
        const std::size_t n = x.batch();
        const Shape in(x.shape.begin() + 1, x.shape.end());
        const Shape os = layer_output(layer, in);
        Tensor y(with_batch(n, os));
        std::visit(
            [&](const auto& L) {
                using T = std::decay_t<decltype(L)>;
                if constexpr (std::is_same_v<T, Conv3dLayer>) {
                    const auto g = conv_geom(L.c_in, in, os, L.k, L.s, L.p);
                    const float* w = ps.param(L.weight).tensor.values.data();
                    const float* b = ps.param(L.bias).tensor.values.data();
                    std::vector<float> cols(g.rows() * g.out_count());
                    for (std::size_t i = 0; i < n; ++i) {
                        kernels::im2col(g, x.sample(i), cols.data());
                        float* out = y.sample(i);
                        for (std::size_t c = 0; c < L.c_out; ++c)
                            std::fill(out + c * g.out_count(), out + (c + 1) * g.out_count(), b[c]);
                        kernels::gemm_nn(w, cols.data(), out, L.c_out, g.rows(), g.out_count());
                    }
                } else if constexpr (std::is_same_v<T, ConvTranspose3dLayer>) {
                    // Conv view: from the output volume (c_out channels) to the input volume.
                    const auto g = conv_geom(L.c_out, os, in, L.k, L.s, L.p);
                    const float* w = ps.param(L.weight).tensor.values.data();
                    const float* b = ps.param(L.bias).tensor.values.data();
                    std::vector<float> cols(g.rows() * g.out_count());
                    for (std::size_t i = 0; i < n; ++i) {
                        kernels::gemm_tn(w, x.sample(i), cols.data(), L.c_in, g.rows(), g.out_count());
                        float* out = y.sample(i);
                        for (std::size_t c = 0; c < L.c_out; ++c)
                            std::fill(out + c * g.in_count(), out + (c + 1) * g.in_count(), b[c]);
                        kernels::col2im(g, cols.data(), out);
                    }
                } else if constexpr (std::is_same_v<T, LinearLayer>) {
                    const float* w = ps.param(L.weight).tensor.values.data();
                    const float* b = ps.param(L.bias).tensor.values.data();
                    for (std::size_t i = 0; i < n; ++i) {
                        const float* xi = x.sample(i);
                        float* yi = y.sample(i);
                        for (std::size_t o = 0; o < L.out; ++o) yi[o] = b[o] + kernels::dot(w + o * L.in, xi, L.in);
                    }
                } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
                    const std::size_t f = L.features;
                    const float* gamma = ps.param(L.gamma).tensor.values.data();
                    const float* beta = ps.param(L.beta).tensor.values.data();
                    if (mut) {
                        if (n < 2) throw Error("batchnorm: training mode needs a batch of at least 2");
                        aux->assign(2 * f, 0.0f);
                        auto& rm = mut->buffer(L.running_mean).tensor.values;
                        auto& rv = mut->buffer(L.running_var).tensor.values;
                        for (std::size_t j = 0; j < f; ++j) {
                            double mean = 0.0;
                            for (std::size_t i = 0; i < n; ++i) mean += x.sample(i)[j];
                            mean /= double(n);
                            double var = 0.0;
                            for (std::size_t i = 0; i < n; ++i) {
                                const double d = x.sample(i)[j] - mean;
                                var += d * d;
                            }
                            const double var_b = var / double(n);
                            const double inv = 1.0 / std::sqrt(var_b + L.eps);
                            (*aux)[j] = static_cast<float>(mean);
                            (*aux)[f + j] = static_cast<float>(inv);
                            for (std::size_t i = 0; i < n; ++i)
                                y.sample(i)[j] = static_cast<float>(gamma[j] * ((x.sample(i)[j] - mean) * inv) + beta[j]);
                            rm[j] = static_cast<float>((1.0 - L.momentum) * rm[j] + L.momentum * mean);
                            rv[j] = static_cast<float>((1.0 - L.momentum) * rv[j] + L.momentum * (var / double(n - 1)));
                        }
                    } else {
                        const auto& rm = ps.buffer(L.running_mean).tensor.values;
                        const auto& rv = ps.buffer(L.running_var).tensor.values;
                        for (std::size_t j = 0; j < f; ++j) {
                            const double inv = 1.0 / std::sqrt(double{rv[j]} + L.eps);
                            for (std::size_t i = 0; i < n; ++i)
                                y.sample(i)[j] = static_cast<float>(gamma[j] * ((x.sample(i)[j] - rm[j]) * inv) + beta[j]);
                        }
                    }
                } else if constexpr (std::is_same_v<T, ReluLayer>) {
                    for (std::size_t i = 0; i < x.size(); ++i) y.values[i] = x.values[i] > 0.0f ? x.values[i] : 0.0f;
                } else if constexpr (std::is_same_v<T, SigmoidLayer>) {
                    for (std::size_t i = 0; i < x.size(); ++i) {
                        const float v = x.values[i];
                        if (v >= 0.0f) {
                            y.values[i] = 1.0f / (1.0f + std::exp(-v));
                        } else {
                            const float e = std::exp(v);
                            y.values[i] = e / (1.0f + e);
                        }
                    }
                } else {
                    y.values = x.values;
                }
            },
            layer);
        return y;
    }

    static Tensor back(const AnyLayer& layer, const Tensor& x, const Tensor& y, const Tensor& gy,
                       const std::vector<float>& aux, ParamSet& ps, bool need_gx) {
        const std::size_t n = x.batch();
        const Shape in(x.shape.begin() + 1, x.shape.end());
        const Shape os(y.shape.begin() + 1, y.shape.end());
        Tensor gx;
        if (need_gx) gx = Tensor(x.shape);
        std::visit(
            [&](const auto& L) {
                using T = std::decay_t<decltype(L)>;
                if constexpr (std::is_same_v<T, Conv3dLayer>) {
                    const auto g = conv_geom(L.c_in, in, os, L.k, L.s, L.p);
                    auto& W = ps.param(L.weight);
                    auto& B = ps.param(L.bias);
                    std::vector<float> cols(g.rows() * g.out_count());
                    for (std::size_t i = 0; i < n; ++i) {
                        const float* go = gy.sample(i);
                        kernels::im2col(g, x.sample(i), cols.data());
                        kernels::gemm_nt_acc(go, cols.data(), W.tensor.grad.data(), L.c_out, g.rows(), g.out_count());
                        for (std::size_t c = 0; c < L.c_out; ++c)
                            B.tensor.grad[c] += kernels::sum(go + c * g.out_count(), g.out_count());
                        if (need_gx) {
                            kernels::gemm_tn(W.tensor.values.data(), go, cols.data(), L.c_out, g.rows(), g.out_count());
                            kernels::col2im(g, cols.data(), gx.sample(i));
                        }
                    }
                    W.grad_ready = B.grad_ready = true;
                } else if constexpr (std::is_same_v<T, ConvTranspose3dLayer>) {
                    const auto g = conv_geom(L.c_out, os, in, L.k, L.s, L.p);
                    auto& W = ps.param(L.weight);
                    auto& B = ps.param(L.bias);
                    std::vector<float> cols(g.rows() * g.out_count());
                    for (std::size_t i = 0; i < n; ++i) {
                        const float* go = gy.sample(i);
                        kernels::im2col(g, go, cols.data());
                        kernels::gemm_nt_acc(x.sample(i), cols.data(), W.tensor.grad.data(), L.c_in, g.rows(),
                                             g.out_count());
                        for (std::size_t c = 0; c < L.c_out; ++c)
                            B.tensor.grad[c] += kernels::sum(go + c * g.in_count(), g.in_count());
                        if (need_gx) kernels::gemm_nn(W.tensor.values.data(), cols.data(), gx.sample(i), L.c_in,
                                                      g.rows(), g.out_count());
                    }
                    W.grad_ready = B.grad_ready = true;
                } else if constexpr (std::is_same_v<T, LinearLayer>) {
                    auto& W = ps.param(L.weight);
                    auto& B = ps.param(L.bias);
                    for (std::size_t i = 0; i < n; ++i) {
                        const float* go = gy.sample(i);
                        const float* xi = x.sample(i);
                        for (std::size_t o = 0; o < L.out; ++o) {
                            B.tensor.grad[o] += go[o];
                            if (go[o] != 0.0f) kernels::axpy(W.tensor.grad.data() + o * L.in, go[o], xi, L.in);
                        }
                        if (need_gx) {
                            float* gi = gx.sample(i);
                            for (std::size_t o = 0; o < L.out; ++o)
                                if (go[o] != 0.0f) kernels::axpy(gi, go[o], W.tensor.values.data() + o * L.in, L.in);
                        }
                    }
                    W.grad_ready = B.grad_ready = true;
                } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
                    const std::size_t f = L.features;
                    auto& G = ps.param(L.gamma);
                    auto& Bt = ps.param(L.beta);
                    for (std::size_t j = 0; j < f; ++j) {
                        const double mean = aux[j], inv = aux[f + j];
                        double sum_g = 0.0, sum_gx = 0.0;
                        for (std::size_t i = 0; i < n; ++i) {
                            const double xh = (x.sample(i)[j] - mean) * inv;
                            sum_g += gy.sample(i)[j];
                            sum_gx += gy.sample(i)[j] * xh;
                        }
                        G.tensor.grad[j] += static_cast<float>(sum_gx);
                        Bt.tensor.grad[j] += static_cast<float>(sum_g);
                        if (need_gx) {
                            const double gam = G.tensor.values[j];
                            for (std::size_t i = 0; i < n; ++i) {
                                const double xh = (x.sample(i)[j] - mean) * inv;
                                gx.sample(i)[j] = static_cast<float>(
                                    gam * inv / double(n) * (double(n) * gy.sample(i)[j] - sum_g - xh * sum_gx));
                            }
                        }
                    }
                    G.grad_ready = Bt.grad_ready = true;
                } else if constexpr (std::is_same_v<T, ReluLayer>) {
                    if (need_gx)
                        for (std::size_t i = 0; i < x.size(); ++i)
                            gx.values[i] = x.values[i] > 0.0f ? gy.values[i] : 0.0f;
                } else if constexpr (std::is_same_v<T, SigmoidLayer>) {
                    if (need_gx)
                        for (std::size_t i = 0; i < x.size(); ++i)
                            gx.values[i] = gy.values[i] * y.values[i] * (1.0f - y.values[i]);
                } else {
                    if (need_gx) gx.values = gy.values;
                }
            },
            layer);
        return gx;
    }

    Shape input_shape_;
    std::vector<AnyLayer> layers_;
};

/// Uniform initialisation in [-bound, bound].
inline void init_uniform(ParamSet::Param& p, double bound, Rng& rng) {
    for (auto& v : p.tensor.values) v = static_cast<float>(rng.uniform(-bound, bound));
}

}  // namespace voxnav
