// Behavior cloning on expert demonstrations: perception phase (soft IoU),
// policy phase (MSE), joint phase (L_p + α·L_o), and the pipelines built
// from them.
#pragma once

#include <cstdio>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "voxnav/checkpoint.hpp"
#include "voxnav/expert.hpp"

namespace voxnav {

// ------------------------------------------------------------------ config

struct TrainConfig {
    double lr = 1e-3;
    double alpha = 0.1;
    int epochs_perception = 150;
    int epochs_policy = 50;
    int epochs_joint = 300;
    int batch_size = 32;
    double split_fraction = 0.8;
    std::uint64_t seed = 0;
    std::uint32_t grid_size = 64;
    bool modular = true;
    NoiseModel noise;
    std::array<std::size_t, 4> policy_channels{4, 8, 6, 32};
    std::array<std::size_t, 2> proxy_channels{8, 16};

    void validate() const {
        if (!(lr > 0)) throw ConfigError("lr must be positive");
        if (!(alpha >= 0)) throw ConfigError("alpha must be >= 0");
        if (!(split_fraction > 0 && split_fraction < 1)) throw ConfigError("split_fraction must lie in (0, 1)");
        if (epochs_perception < 0 || epochs_policy < 0 || epochs_joint < 0) throw ConfigError("epochs must be >= 0");
        if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (batch norm)");
        if (grid_size < 1) throw ConfigError("grid_size must be >= 1");
        noise.validate();
    }

    PolicyGeometry policy_geometry() const {
        PolicyGeometry g;
        g.grid = grid_size;
        g.channels = policy_channels;
        return g;
    }
    ProxyGeometry proxy_geometry() const { return {grid_size, proxy_channels}; }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"lr", c.lr},
         {"alpha", c.alpha},
         {"epochs_perception", c.epochs_perception},
         {"epochs_policy", c.epochs_policy},
         {"epochs_joint", c.epochs_joint},
         {"batch_size", c.batch_size},
         {"split_fraction", c.split_fraction},
         {"seed", c.seed},
         {"grid_size", c.grid_size},
         {"modular", c.modular},
         {"noise", c.noise},
         {"policy_channels", c.policy_channels},
         {"proxy_channels", c.proxy_channels}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.lr = j.value("lr", d.lr);
    c.alpha = j.value("alpha", d.alpha);
    c.epochs_perception = j.value("epochs_perception", d.epochs_perception);
    c.epochs_policy = j.value("epochs_policy", d.epochs_policy);
    c.epochs_joint = j.value("epochs_joint", d.epochs_joint);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.split_fraction = j.value("split_fraction", d.split_fraction);
    c.seed = j.value("seed", d.seed);
    c.grid_size = j.value("grid_size", d.grid_size);
    c.modular = j.value("modular", d.modular);
    c.noise = j.value("noise", d.noise);
    c.policy_channels = j.value("policy_channels", d.policy_channels);
    c.proxy_channels = j.value("proxy_channels", d.proxy_channels);
}

// ------------------------------------------------------------------ frames

/// Training frames at the network's grid size.
struct FrameSet {
    std::vector<VoxelGrid> grids;
    std::vector<std::array<float, 3>> goals;
    std::vector<std::array<float, 2>> actions;

    std::size_t size() const { return grids.size(); }
};

/// Coarsens an observation to n³ by block max-pooling.
inline VoxelGrid resample_observation(const VoxelGrid& g, std::uint32_t n) {
    const auto& s = g.spec();
    if (s.nx != s.ny || s.ny != s.nz) throw GeometryError("observation grid must be cubic, got " + to_string(s));
    if (n == s.nx) return g;
    if (n > s.nx || s.nx % n)
        throw GeometryError("cannot resample a " + to_string(s) + " grid to " + std::to_string(n) + "^3");
    return downsample(g, s.nx / n);
}

inline FrameSet make_frames(const Dataset& ds, std::span<const std::size_t> trajectories, std::uint32_t grid) {
    FrameSet fs;
    for (auto t : trajectories) {
        if (t >= ds.trajectories.size()) throw Error("trajectory index out of range");
        for (const auto& f : ds.trajectories[t].frames) {
            fs.grids.push_back(resample_observation(f.observation, grid));
            fs.goals.push_back(f.goal);
            fs.actions.push_back(f.action);
        }
    }
    return fs;
}

struct DatasetSplit {
    std::vector<std::size_t> train, validation;  // trajectory indices, ascending
};

/// Whole-trajectory split; round(fraction·N) trajectories go to training.
inline DatasetSplit split_dataset(const Dataset& ds, double fraction, std::uint64_t seed) {
    const std::size_t n = ds.trajectories.size();
    if (!(fraction > 0 && fraction < 1)) throw ConfigError("split fraction must lie in (0, 1)");
    const auto n_train = static_cast<std::size_t>(std::llround(fraction * double(n)));
    if (n_train < 1 || n_train >= n)
        throw Error("split_dataset: " + std::to_string(n) + " trajectories cannot give both sides at least one");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(seed, 0x73706c6974ULL));
    rng.shuffle(idx);
    DatasetSplit s;
    s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.validation.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.validation.begin(), s.validation.end());
    return s;
}

/// Validation MSE of always predicting the training-set mean action.
inline double mean_predictor_mse(const FrameSet& train, const FrameSet& val) {
    if (train.size() == 0 || val.size() == 0) throw Error("mean_predictor_mse: empty frame set");
    double mean[2] = {0, 0};
    for (auto& a : train.actions)
        for (int k = 0; k < 2; ++k) mean[k] += a[k];
    for (double& m : mean) m /= double(train.size());
    double s = 0.0;
    for (auto& a : val.actions)
        for (int k = 0; k < 2; ++k) s += (a[k] - mean[k]) * (a[k] - mean[k]);
    return s / double(2 * val.size());
}

// ------------------------------------------------------------ loss curves

struct LossRow {
    int epoch = 0;
    std::string split;            // train | validation
    std::optional<double> l_p, l_o;
    double total = 0.0;
};

struct LossCurve {
    std::string phase;
    std::vector<LossRow> rows;

    const LossRow* last(const std::string& split) const {
        for (auto it = rows.rbegin(); it != rows.rend(); ++it)
            if (it->split == split) return &*it;
        return nullptr;
    }

    std::string to_csv() const {
        auto num = [](const std::optional<double>& v) {
            if (!v) return std::string();
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.17g", *v);
            return std::string(buf);
        };
        std::string out = "epoch,split,L_p,L_o,total\n";
        for (auto& r : rows)
            out += std::to_string(r.epoch) + "," + r.split + "," + num(r.l_p) + "," + num(r.l_o) + "," +
                   num(r.total) + "\n";
        return out;
    }
};

using EpochCallback = std::function<void(const std::string& phase, const LossRow&)>;

// --------------------------------------------------------------- batching

namespace train_detail {

enum Stream : std::uint64_t { perception = 1, policy = 2, joint = 3, validation = 4, init_policy = 11, init_proxy = 12 };

/// Shuffled batches of frame indices. A trailing batch of one frame is
/// merged into its predecessor because batch norm needs two samples.
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, int batch_size, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> out;
    const auto b = static_cast<std::size_t>(batch_size);
    for (std::size_t i = 0; i < n; i += b) out.emplace_back(order.begin() + i, order.begin() + std::min(n, i + b));
    if (out.size() > 1 && out.back().size() == 1) {
        out[out.size() - 2].push_back(out.back()[0]);
        out.pop_back();
    }
    return out;
}

inline Tensor grid_batch(std::span<const VoxelGrid> grids, std::span<const std::size_t> idx, std::uint32_t n) {
    Tensor t({idx.size(), 1, n, n, n});
    const std::size_t cells = std::size_t{n} * n * n;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto c = grids[idx[i]].cells();
        float* dst = t.sample(i);
        for (std::size_t k = 0; k < cells; ++k) dst[k] = c[k] ? 1.0f : 0.0f;
    }
    return t;
}

inline Tensor noisy_batch(const FrameSet& fs, std::span<const std::size_t> idx, std::uint32_t n,
                          const NoiseModel& noise, const std::function<std::uint64_t(std::size_t)>& seed_of) {
    std::vector<VoxelGrid> noisy;
    noisy.reserve(idx.size());
    for (auto i : idx) noisy.push_back(corrupt_grid(fs.grids[i], noise, seed_of(i)));
    std::vector<std::size_t> all(idx.size());
    std::iota(all.begin(), all.end(), 0);
    return grid_batch(noisy, all, n);
}

inline Tensor goal_batch(const FrameSet& fs, std::span<const std::size_t> idx) {
    Tensor t({idx.size(), 3});
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(fs.goals[idx[i]].data(), 3, t.sample(i));
    return t;
}

inline Tensor action_batch(const FrameSet& fs, std::span<const std::size_t> idx) {
    Tensor t({idx.size(), 2});
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(fs.actions[idx[i]].data(), 2, t.sample(i));
    return t;
}

/// Mean soft IoU loss over the batch; fills d L / d prediction.
inline double batch_soft_iou(const Tensor& clean, const Tensor& pred, Tensor* grad) {
    const std::size_t n = pred.batch(), s = pred.stride();
    double total = 0.0;
    std::vector<float> g(s);
    for (std::size_t i = 0; i < n; ++i) {
        const std::span<const float> t(clean.sample(i), s), p(pred.sample(i), s);
        total += soft_iou(t, p, grad ? std::span<float>(g) : std::span<float>());
        if (grad)
            for (std::size_t k = 0; k < s; ++k) grad->sample(i)[k] = g[k] / static_cast<float>(n);
    }
    return total / double(n);
}

inline void check_finite(double v, const std::string& phase, int epoch) {
    if (!std::isfinite(v)) throw Error(phase + " training diverged at epoch " + std::to_string(epoch));
}

inline std::vector<std::size_t> chunk(std::size_t begin, std::size_t end) {
    std::vector<std::size_t> v(end - begin);
    std::iota(v.begin(), v.end(), begin);
    return v;
}

inline constexpr std::size_t kEvalChunk = 64;

inline std::uint64_t val_noise_seed(const TrainConfig& c, std::size_t frame) {
    return derive_seed(c.seed, Stream::validation, frame);
}

/// Proxy output on the corrupted validation grids, in chunks.
template <class Fn>
void for_validation_chunks(const FrameSet& val, Fn&& fn) {
    for (std::size_t b = 0; b < val.size(); b += kEvalChunk) fn(chunk(b, std::min(val.size(), b + kEvalChunk)));
}

}  // namespace train_detail

// ----------------------------------------------------------------- phases

/// Validation soft IoU of the proxy on corrupted validation grids.
inline double validate_perception(const PerceptionProxyNet& proxy, const FrameSet& val, const TrainConfig& cfg) {
    using namespace train_detail;
    const auto n = cfg.grid_size;
    double sum = 0.0;
    for_validation_chunks(val, [&](const std::vector<std::size_t>& idx) {
        const Tensor clean = grid_batch(val.grids, idx, n);
        const Tensor pred = proxy.infer(noisy_batch(val, idx, n, cfg.noise, [&](auto i) { return val_noise_seed(cfg, i); }));
        sum += batch_soft_iou(clean, pred, nullptr) * double(idx.size());
    });
    return sum / double(val.size());
}

enum class PolicyInput { ground_truth_grid, frozen_proxy_output };

/// Validation (L_p, L_o) of the pair, or L_o alone when `proxy` is null.
inline std::pair<std::optional<double>, double> validate_policy(const PolicyNet& policy, const PerceptionProxyNet* proxy,
                                                                const FrameSet& val, const TrainConfig& cfg) {
    using namespace train_detail;
    const auto n = cfg.grid_size;
    double lp = 0.0, lo = 0.0;
    for_validation_chunks(val, [&](const std::vector<std::size_t>& idx) {
        Tensor input = grid_batch(val.grids, idx, n);
        if (proxy) {
            Tensor pred = proxy->infer(noisy_batch(val, idx, n, cfg.noise, [&](auto i) { return val_noise_seed(cfg, i); }));
            lp += batch_soft_iou(input, pred, nullptr) * double(idx.size());
            input = std::move(pred);
        }
        const Tensor a = policy.infer(input, goal_batch(val, idx));
        lo += mse_loss(a.values, action_batch(val, idx).values) * double(idx.size());
    });
    const double m = double(val.size());
    if (proxy) return {lp / m, lo / m};
    return {std::nullopt, lo / m};
}

/// Phase 1: the proxy learns to denoise corrupt_grid(clean) back to clean.
inline LossCurve train_perception(PerceptionProxyNet& proxy, const FrameSet& train, const FrameSet& val,
                                  const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    using namespace train_detail;
    cfg.validate();
    proxy.check_grid(GridSpec::cube(cfg.grid_size, 1.0f));
    if (train.size() < 2) throw Error("train_perception: need at least 2 training frames");
    LossCurve curve{"perception", {}};
    const auto n = cfg.grid_size;
    const AdamConfig adam{.lr = cfg.lr};
    for (int epoch = 1; epoch <= cfg.epochs_perception; ++epoch) {
        double sum = 0.0;
        for (const auto& idx : batches(train.size(), cfg.batch_size, derive_seed(cfg.seed, Stream::perception, epoch))) {
            const Tensor clean = grid_batch(train.grids, idx, n);
            const Tensor noisy = noisy_batch(train, idx, n, cfg.noise,
                                             [&](auto i) { return derive_seed(cfg.seed, Stream::perception, epoch, i); });
            Trace tr;
            proxy.params().zero_grad();
            const Tensor pred = proxy.forward_train(noisy, tr);
            Tensor g(pred.shape);
            const double loss = batch_soft_iou(clean, pred, &g);
            check_finite(loss, "perception", epoch);
            proxy.backward(tr, g);
            adam_step(proxy.params(), adam);
            sum += loss * double(idx.size());
        }
        const double tl = sum / double(train.size());
        curve.rows.push_back({epoch, "train", tl, std::nullopt, tl});
        if (val.size()) {
            const double vl = validate_perception(proxy, val, cfg);
            check_finite(vl, "perception", epoch);
            curve.rows.push_back({epoch, "validation", vl, std::nullopt, vl});
        }
        if (on_epoch) on_epoch(curve.phase, curve.rows.back());
    }
    return curve;
}

/// Phase 2: behavior cloning with MSE on ground-truth grids, or on the
/// output of a frozen proxy fed with corrupted grids.
inline LossCurve train_policy(PolicyNet& policy, const FrameSet& train, const FrameSet& val, const TrainConfig& cfg,
                              PolicyInput input = PolicyInput::ground_truth_grid,
                              const PerceptionProxyNet* proxy = nullptr, const EpochCallback& on_epoch = {}) {
    using namespace train_detail;
    cfg.validate();
    policy.check_grid(GridSpec::cube(cfg.grid_size, 1.0f));
    if (input == PolicyInput::frozen_proxy_output && !proxy) throw Error("train_policy: proxy input needs a proxy");
    if (input == PolicyInput::ground_truth_grid) proxy = nullptr;
    if (train.size() < 2) throw Error("train_policy: need at least 2 training frames");
    LossCurve curve{"policy", {}};
    const auto n = cfg.grid_size;
    const AdamConfig adam{.lr = cfg.lr};
    for (int epoch = 1; epoch <= cfg.epochs_policy; ++epoch) {
        double sum = 0.0;
        for (const auto& idx : batches(train.size(), cfg.batch_size, derive_seed(cfg.seed, Stream::policy, epoch))) {
            Tensor grids = proxy ? proxy->infer(noisy_batch(train, idx, n, cfg.noise,
                                                            [&](auto i) { return derive_seed(cfg.seed, Stream::policy, epoch, i); }))
                                 : grid_batch(train.grids, idx, n);
            PolicyNet::PassTrace tr;
            policy.params().zero_grad();
            const Tensor a = policy.forward_train(grids, goal_batch(train, idx), tr);
            Tensor g(a.shape);
            const double loss = mse_loss(a.values, action_batch(train, idx).values, g.values);
            check_finite(loss, "policy", epoch);
            policy.backward(tr, g, false);
            adam_step(policy.params(), adam);
            sum += loss * double(idx.size());
        }
        const double tl = sum / double(train.size());
        curve.rows.push_back({epoch, "train", std::nullopt, tl, tl});
        if (val.size()) {
            const double vl = validate_policy(policy, proxy, val, cfg).second;
            check_finite(vl, "policy", epoch);
            curve.rows.push_back({epoch, "validation", std::nullopt, vl, vl});
        }
        if (on_epoch) on_epoch(curve.phase, curve.rows.back());
    }
    return curve;
}

/// One joint step on a batch: L = L_p + α·L_o with L_o back-propagated
/// through the proxy output into the proxy. Returns (L_p, L_o, total).
struct JointLoss {
    double l_p = 0.0, l_o = 0.0, total = 0.0;
};

inline JointLoss joint_gradients(PerceptionProxyNet& proxy, PolicyNet& policy, const Tensor& clean, const Tensor& noisy,
                                 const Tensor& goals, const Tensor& actions, double alpha) {
    using namespace train_detail;
    Trace ptr;
    PolicyNet::PassTrace ttr;
    proxy.params().zero_grad();
    policy.params().zero_grad();
    const Tensor pred = proxy.forward_train(noisy, ptr);
    Tensor gp(pred.shape);
    JointLoss L;
    L.l_p = batch_soft_iou(clean, pred, &gp);
    const Tensor a = policy.forward_train(pred, goals, ttr);
    Tensor ga(a.shape);
    L.l_o = mse_loss(a.values, actions.values, ga.values);
    L.total = L.l_p + alpha * L.l_o;
    for (auto& v : ga.values) v = static_cast<float>(alpha * v);
    const Tensor g_grid = policy.backward(ttr, ga, true);
    for (std::size_t k = 0; k < gp.values.size(); ++k) gp.values[k] += g_grid.values[k];
    proxy.backward(ptr, gp);
    return L;
}

/// Phase 3: end-to-end fine-tuning of proxy and policy together.
inline LossCurve train_joint(PerceptionProxyNet& proxy, PolicyNet& policy, const FrameSet& train, const FrameSet& val,
                             const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    using namespace train_detail;
    cfg.validate();
    proxy.check_grid(GridSpec::cube(cfg.grid_size, 1.0f));
    policy.check_grid(GridSpec::cube(cfg.grid_size, 1.0f));
    if (train.size() < 2) throw Error("train_joint: need at least 2 training frames");
    LossCurve curve{"joint", {}};
    const auto n = cfg.grid_size;
    const AdamConfig adam{.lr = cfg.lr};
    for (int epoch = 1; epoch <= cfg.epochs_joint; ++epoch) {
        double sp = 0.0, so = 0.0, st = 0.0;
        for (const auto& idx : batches(train.size(), cfg.batch_size, derive_seed(cfg.seed, Stream::joint, epoch))) {
            const Tensor noisy = noisy_batch(train, idx, n, cfg.noise,
                                             [&](auto i) { return derive_seed(cfg.seed, Stream::joint, epoch, i); });
            const auto L = joint_gradients(proxy, policy, grid_batch(train.grids, idx, n), noisy, goal_batch(train, idx),
                                           action_batch(train, idx), cfg.alpha);
            check_finite(L.total, "joint", epoch);
            adam_step(proxy.params(), adam);
            adam_step(policy.params(), adam);
            const double w = double(idx.size());
            sp += L.l_p * w;
            so += L.l_o * w;
            st += L.total * w;
        }
        const double m = double(train.size());
        curve.rows.push_back({epoch, "train", sp / m, so / m, st / m});
        if (val.size()) {
            const auto [lp, lo] = validate_policy(policy, &proxy, val, cfg);
            check_finite(*lp + lo, "joint", epoch);
            curve.rows.push_back({epoch, "validation", lp, lo, *lp + cfg.alpha * lo});
        }
        if (on_epoch) on_epoch(curve.phase, curve.rows.back());
    }
    return curve;
}

// --------------------------------------------------------------- pipelines

struct TrainResult {
    ModelBundle bundle;
    std::vector<LossCurve> curves;  // in the order the phases ran
    DatasetSplit split;
};

struct SplitFrames {
    DatasetSplit split;
    FrameSet train, validation;
};

inline SplitFrames prepare_frames(const Dataset& ds, const TrainConfig& cfg) {
    cfg.validate();
    SplitFrames s;
    s.split = split_dataset(ds, cfg.split_fraction, cfg.seed);
    s.train = make_frames(ds, s.split.train, cfg.grid_size);
    s.validation = make_frames(ds, s.split.validation, cfg.grid_size);
    return s;
}

/// GT Grid agent: the policy module trained on ground-truth grids.
inline TrainResult train_gt_agent(const SplitFrames& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    TrainResult r;
    r.split = data.split;
    r.bundle.agent = "gt_grid_policy";
    r.bundle.config = {{"train", cfg}};
    r.bundle.policy.emplace(cfg.policy_geometry(), derive_seed(cfg.seed, train_detail::Stream::init_policy));
    r.curves.push_back(train_policy(*r.bundle.policy, data.train, data.validation, cfg, PolicyInput::ground_truth_grid,
                                    nullptr, on_epoch));
    return r;
}

/// Proxy agent. Modular: perception phase, policy phase on the frozen proxy
/// output (fresh optimizer state per phase), then the joint phase.
/// Non-modular: the joint phase alone from the same random initialization.
inline TrainResult train_proxy_agent(const SplitFrames& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    TrainResult r;
    r.split = data.split;
    r.bundle.agent = "snn_proxy_policy";
    r.bundle.config = {{"train", cfg}};
    auto& proxy = r.bundle.proxy.emplace(cfg.proxy_geometry(), derive_seed(cfg.seed, train_detail::Stream::init_proxy));
    auto& policy = r.bundle.policy.emplace(cfg.policy_geometry(), derive_seed(cfg.seed, train_detail::Stream::init_policy));
    if (cfg.modular) {
        r.curves.push_back(train_perception(proxy, data.train, data.validation, cfg, on_epoch));
        r.curves.push_back(train_policy(policy, data.train, data.validation, cfg, PolicyInput::frozen_proxy_output, &proxy,
                                        on_epoch));
        proxy.params().reset_optimizer();
        policy.params().reset_optimizer();
    }
    r.curves.push_back(train_joint(proxy, policy, data.train, data.validation, cfg, on_epoch));
    return r;
}

inline TrainResult train_agent(const SplitFrames& data, const TrainConfig& cfg, const std::string& agent,
                               const EpochCallback& on_epoch = {}) {
    if (agent == "gt_grid_policy") return train_gt_agent(data, cfg, on_epoch);
    if (agent == "snn_proxy_policy") return train_proxy_agent(data, cfg, on_epoch);
    throw ConfigError("unknown agent '" + agent + "' (expected gt_grid_policy or snn_proxy_policy)");
}

}  // namespace voxnav
