// The navigation policy (voxel encoder + goal encoder + MLP head), the
// perception proxy that denoises occupancy grids, and the sensor-noise model
// feeding it.
#pragma once

#include <algorithm>
#include <array>
#include <span>
#include <type_traits>
#include <variant>
#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"
#include "voxnav/common.hpp"
#include "voxnav/layers.hpp"
#include "voxnav/tensor.hpp"
#include "voxnav/voxgrid.hpp"
#include "voxnav/world.hpp"

namespace voxnav {

// -------------------------------------------------------------- point goal

struct PointGoal {
    double d = 0.0;
    double cos_theta = 1.0;
    double sin_theta = 0.0;

    std::array<float, 3> as_floats() const {
        return {static_cast<float>(d), static_cast<float>(cos_theta), static_cast<float>(sin_theta)};
    }
};

/// Distance and relative bearing of the goal in the robot frame. A goal at
/// the robot position encodes as (0, 1, 0).
inline PointGoal encode_goal(const Pose2& pose, Point2 goal) {
    const double dx = goal.x - pose.x, dy = goal.y - pose.y;
    const double d = std::hypot(dx, dy);
    if (d == 0.0) return {0.0, 1.0, 0.0};
    const double theta = wrap_angle(std::atan2(dy, dx) - pose.heading);
    return {d, std::cos(theta), std::sin(theta)};
}

// ------------------------------------------------------------------ noise

struct NoiseModel {
    double p_drop0 = 0.1;       // drop probability of an occupied voxel at z = 0
    double p_drop_range = 0.3;  // added drop probability at the far end of the grid
    double p_add = 0.01;        // probability a free voxel turns occupied

    void validate() const {
        for (double p : {p_drop0, p_drop_range, p_add})
            if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("noise probabilities must lie in [0, 1]");
    }
};

inline void to_json(nlohmann::json& j, const NoiseModel& n) {
    j = {{"p_drop0", n.p_drop0}, {"p_drop_range", n.p_drop_range}, {"p_add", n.p_add}};
}
inline void from_json(const nlohmann::json& j, NoiseModel& n) {
    NoiseModel d;
    n.p_drop0 = j.value("p_drop0", d.p_drop0);
    n.p_drop_range = j.value("p_drop_range", d.p_drop_range);
    n.p_add = j.value("p_add", d.p_add);
}

/// Depth-dependent dropout of occupied voxels plus uniform false positives.
/// One uniform draw per voxel, in index order.
inline VoxelGrid corrupt_grid(const VoxelGrid& clean, const NoiseModel& noise, std::uint64_t seed) {
    noise.validate();
    const auto& s = clean.spec();
    VoxelGrid out(s);
    Rng rng(seed);
    const double z_max = s.nz > 1 ? double(s.nz - 1) : 1.0;
    for (std::uint32_t z = 0; z < s.nz; ++z) {
        const double p_drop = noise.p_drop0 + noise.p_drop_range * (z / z_max);
        for (std::uint32_t y = 0; y < s.ny; ++y)
            for (std::uint32_t x = 0; x < s.nx; ++x) {
                const double u = rng.uniform();
                if (clean.at(x, y, z))
                    out.set(x, y, z, !(u < p_drop));
                else
                    out.set(x, y, z, u < noise.p_add);
            }
    }
    return out;
}

// ----------------------------------------------------------- initialisation

/// He-uniform weights, zero biases; the last affine layer uses a LeCun bound.
inline void init_sequential(const Sequential& seq, ParamSet& ps, Rng& rng) {
    const auto& layers = seq.layers();
    std::size_t last_affine = layers.size();
    for (std::size_t i = 0; i < layers.size(); ++i)
        if (std::holds_alternative<LinearLayer>(layers[i]) || std::holds_alternative<Conv3dLayer>(layers[i]) ||
            std::holds_alternative<ConvTranspose3dLayer>(layers[i]))
            last_affine = i;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const bool relu_after = i + 1 < layers.size() && (std::holds_alternative<ReluLayer>(layers[i + 1]) ||
                                                           std::holds_alternative<BatchNormLayer>(layers[i + 1]));
        const double gain = (i == last_affine && !relu_after) ? 3.0 : 6.0;
        std::visit(
            [&](const auto& L) {
                using T = std::decay_t<decltype(L)>;
                if constexpr (std::is_same_v<T, Conv3dLayer>) {
                    init_uniform(ps.param(L.weight), std::sqrt(gain / double(L.c_in * L.k * L.k * L.k)), rng);
                } else if constexpr (std::is_same_v<T, ConvTranspose3dLayer>) {
                    const double fan = double(L.c_in * L.k * L.k * L.k) / double(L.s * L.s * L.s);
                    init_uniform(ps.param(L.weight), std::sqrt(gain / std::max(1.0, fan)), rng);
                } else if constexpr (std::is_same_v<T, LinearLayer>) {
                    init_uniform(ps.param(L.weight), std::sqrt(gain / double(L.in)), rng);
                }
            },
            layers[i]);
    }
}

// ------------------------------------------------------------------ policy

struct PolicyGeometry {
    std::uint32_t grid = 64;
    std::array<std::size_t, 4> channels{4, 8, 6, 32};
    std::size_t obstacle_features = 256;
    std::size_t goal_features = 16;
    std::array<std::size_t, 3> hidden{128, 64, 32};

    friend bool operator==(const PolicyGeometry&, const PolicyGeometry&) = default;
};

inline void to_json(nlohmann::json& j, const PolicyGeometry& g) {
    j = {{"grid", g.grid},
         {"channels", g.channels},
         {"obstacle_features", g.obstacle_features},
         {"goal_features", g.goal_features},
         {"hidden", g.hidden}};
}
inline void from_json(const nlohmann::json& j, PolicyGeometry& g) {
    g.grid = j.at("grid").get<std::uint32_t>();
    g.channels = j.at("channels").get<std::array<std::size_t, 4>>();
    g.obstacle_features = j.at("obstacle_features").get<std::size_t>();
    g.goal_features = j.at("goal_features").get<std::size_t>();
    g.hidden = j.at("hidden").get<std::array<std::size_t, 3>>();
}

/// Voxel-conditioned navigation policy. The obstacle encoder is four 3D
/// convolutions (kernel 4, stride 2, padding 1; a 1x1x1 convolution once
/// the volume has shrunk to a single voxel) with ReLUs, flattened and
/// projected to the obstacle feature. The goal encoder is one affine layer
/// with ReLU. The head is four fully connected layers, batch norm and ReLU
/// after the first three, linear 2-unit output (v, ω).
class PolicyNet {
public:
    struct PassTrace {
        Trace encoder, goal, head;
    };

    explicit PolicyNet(const PolicyGeometry& geom = {}, std::uint64_t seed = 0) : geom_(geom) {
        if (geom.grid < 1) throw ConfigError("policy grid size must be >= 1");
        encoder_ = Sequential({1, geom.grid, geom.grid, geom.grid});
        std::size_t c_in = 1, dim = geom.grid;
        for (std::size_t i = 0; i < 4; ++i) {
            const std::string name = "encoder.conv" + std::to_string(i + 1);
            if (dim >= 2) {
                encoder_.conv3d(params_, name, c_in, geom.channels[i], 4, 2, 1);
                dim = LayerDesc::conv_out(dim, 4, 2, 1);
            } else {
                encoder_.conv3d(params_, name, c_in, geom.channels[i], 1, 1, 0);
            }
            encoder_.relu();
            c_in = geom.channels[i];
        }
        encoder_.flatten();
        encoder_.linear(params_, "encoder.project", numel(encoder_.output_shape()), geom.obstacle_features).relu();

        goal_ = Sequential({3});
        goal_.linear(params_, "goal.fc", 3, geom.goal_features).relu();

        head_ = Sequential({geom.obstacle_features + geom.goal_features});
        std::size_t width = geom.obstacle_features + geom.goal_features;
        for (std::size_t i = 0; i < 3; ++i) {
            const std::string name = "head.fc" + std::to_string(i + 1);
            head_.linear(params_, name, width, geom.hidden[i]).batchnorm(params_, name + ".bn", geom.hidden[i]).relu();
            width = geom.hidden[i];
        }
        head_.linear(params_, "head.fc4", width, 2);

        Rng rng(derive_seed(seed, 0x706f6c6963ULL));
        init_sequential(encoder_, params_, rng);
        init_sequential(goal_, params_, rng);
        init_sequential(head_, params_, rng);
    }

    const PolicyGeometry& geometry() const { return geom_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }
    const Sequential& encoder() const { return encoder_; }
    const Sequential& goal_encoder() const { return goal_; }
    const Sequential& head() const { return head_; }

    void check_grid(const GridSpec& s) const {
        if (s.nx != geom_.grid || s.ny != geom_.grid || s.nz != geom_.grid)
            throw ShapeError("policy expects a " + std::to_string(geom_.grid) + "^3 grid, got " + to_string(s));
    }

    Shape grid_shape(std::size_t n) const { return {n, 1, geom_.grid, geom_.grid, geom_.grid}; }

    /// Obstacle feature h_o for a batch of grids [N, 1, n, n, n].
    Tensor obstacle_features(const Tensor& grids) const { return encoder_.infer(grids, params_); }
    /// Goal feature h_g for a batch of goals [N, 3].
    Tensor goal_features(const Tensor& goals) const { return goal_.infer(goals, params_); }

    /// Evaluation-mode forward for a batch; returns [N, 2].
    Tensor infer(const Tensor& grids, const Tensor& goals) const {
        return head_.infer(concat(obstacle_features(grids), goal_features(goals)), params_);
    }

    Tensor forward_train(const Tensor& grids, const Tensor& goals, PassTrace& tr) {
        Tensor ho = encoder_.forward_train(grids, params_, tr.encoder);
        Tensor hg = goal_.forward_train(goals, params_, tr.goal);
        return head_.forward_train(concat(ho, hg), params_, tr.head);
    }

    /// Backward from d loss / d action; returns d loss / d grid when requested.
    Tensor backward(const PassTrace& tr, const Tensor& g_action, bool need_grid_grad) {
        Tensor gcat = head_.backward(tr.head, g_action, params_, true);
        const std::size_t n = gcat.batch(), fo = geom_.obstacle_features, fg = geom_.goal_features;
        Tensor gho({n, fo}), ghg({n, fg});
        for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(gcat.sample(i), fo, gho.sample(i));
            std::copy_n(gcat.sample(i) + fo, fg, ghg.sample(i));
        }
        goal_.backward(tr.goal, ghg, params_, false);
        return encoder_.backward(tr.encoder, gho, params_, need_grid_grad);
    }

    /// Single-sample convenience; raw (unclamped) action.
    Action act(std::span<const float> grid, const PointGoal& g) const {
        Tensor grids(grid_shape(1), std::vector<float>(grid.begin(), grid.end()));
        const auto gf = g.as_floats();
        Tensor goals({1, 3}, std::vector<float>(gf.begin(), gf.end()));
        Tensor a = infer(grids, goals);
        return {a.values[0], a.values[1]};
    }
    Action act(const VoxelGrid& grid, const PointGoal& g) const {
        check_grid(grid.spec());
        std::vector<float> v;
        grid.append_floats(v);
        return act(v, g);
    }
    Action act(const ProbGrid& grid, const PointGoal& g) const {
        check_grid(grid.spec());
        return act(grid.values(), g);
    }

    std::vector<LayerDesc> describe() const {
        auto d = encoder_.describe();
        for (auto& l : goal_.describe()) d.push_back(l);
        for (auto& l : head_.describe()) d.push_back(l);
        return d;
    }
    Cost cost() const { return count_cost(std::span<const LayerDesc>(describe())); }

    nlohmann::json geometry_json() const { return {{"kind", "policy"}, {"geometry", geom_}}; }

private:
    static Tensor concat(const Tensor& a, const Tensor& b) {
        const std::size_t n = a.batch(), fa = a.stride(), fb = b.stride();
        Tensor c({n, fa + fb});
        for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(a.sample(i), fa, c.sample(i));
            std::copy_n(b.sample(i), fb, c.sample(i) + fa);
        }
        return c;
    }

    PolicyGeometry geom_;
    ParamSet params_;
    Sequential encoder_, goal_, head_;
};

// ----------------------------------------------------------- perception

struct ProxyGeometry {
    std::uint32_t grid = 64;
    std::array<std::size_t, 2> channels{8, 16};
    friend bool operator==(const ProxyGeometry&, const ProxyGeometry&) = default;
};

inline void to_json(nlohmann::json& j, const ProxyGeometry& g) { j = {{"grid", g.grid}, {"channels", g.channels}}; }
inline void from_json(const nlohmann::json& j, ProxyGeometry& g) {
    g.grid = j.at("grid").get<std::uint32_t>();
    g.channels = j.at("channels").get<std::array<std::size_t, 2>>();
}

/// Voxel-to-voxel encoder/decoder: two stride-2 convolutions down, two
/// stride-2 transposed convolutions up, sigmoid occupancy output.
class PerceptionProxyNet {
public:
    explicit PerceptionProxyNet(const ProxyGeometry& geom = {}, std::uint64_t seed = 0) : geom_(geom) {
        if (geom.grid < 4 || geom.grid % 4) throw ConfigError("proxy grid size must be a positive multiple of 4");
        const auto c1 = geom.channels[0], c2 = geom.channels[1];
        net_ = Sequential({1, geom.grid, geom.grid, geom.grid});
        net_.conv3d(params_, "proxy.down1", 1, c1, 4, 2, 1).relu();
        net_.conv3d(params_, "proxy.down2", c1, c2, 4, 2, 1).relu();
        net_.conv_transpose3d(params_, "proxy.up1", c2, c1, 4, 2, 1).relu();
        net_.conv_transpose3d(params_, "proxy.up2", c1, 1, 4, 2, 1).sigmoid();
        Rng rng(derive_seed(seed, 0x70726f7879ULL));
        init_sequential(net_, params_, rng);
    }

    const ProxyGeometry& geometry() const { return geom_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }
    const Sequential& net() const { return net_; }

    void check_grid(const GridSpec& s) const {
        if (s.nx != geom_.grid || s.ny != geom_.grid || s.nz != geom_.grid)
            throw ShapeError("proxy expects a " + std::to_string(geom_.grid) + "^3 grid, got " + to_string(s));
    }
    Shape grid_shape(std::size_t n) const { return {n, 1, geom_.grid, geom_.grid, geom_.grid}; }

    Tensor infer(const Tensor& grids) const { return net_.infer(grids, params_); }
    Tensor forward_train(const Tensor& grids, Trace& tr) { return net_.forward_train(grids, params_, tr); }
    void backward(const Trace& tr, const Tensor& g_out) { net_.backward(tr, g_out, params_, false); }

    ProbGrid forward(const VoxelGrid& noisy) const {
        check_grid(noisy.spec());
        std::vector<float> v;
        noisy.append_floats(v);
        Tensor out = infer(Tensor(grid_shape(1), std::move(v)));
        return {noisy.spec(), std::move(out.values)};
    }

    std::vector<LayerDesc> describe() const { return net_.describe(); }
    Cost cost() const { return net_.cost(); }
    nlohmann::json geometry_json() const { return {{"kind", "proxy"}, {"geometry", geom_}}; }

private:
    ProxyGeometry geom_;
    ParamSet params_;
    Sequential net_;
};

inline ProbGrid proxy_forward(const PerceptionProxyNet& net, const VoxelGrid& noisy) { return net.forward(noisy); }

inline Action policy_forward(const PolicyNet& net, const VoxelGrid& grid, const PointGoal& goal) {
    return net.act(grid, goal);
}
inline Action policy_forward(const PolicyNet& net, const ProbGrid& grid, const PointGoal& goal) {
    return net.act(grid, goal);
}

}  // namespace voxnav
