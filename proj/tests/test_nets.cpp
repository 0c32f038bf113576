#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "voxnav/expert.hpp"
#include "voxnav/nets.hpp"

using namespace voxnav;

namespace {

VoxelGrid random_grid(GridSpec s, double p, Rng& rng) {
    VoxelGrid g(s);
    for (std::uint32_t z = 0; z < s.nz; ++z)
        for (std::uint32_t y = 0; y < s.ny; ++y)
            for (std::uint32_t x = 0; x < s.nx; ++x)
                if (rng.bernoulli(p)) g.set(x, y, z);
    return g;
}

Tensor random_grids(const PolicyNet& net, std::size_t n, Rng& rng) {
    Tensor t(net.grid_shape(n));
    for (auto& v : t.values) v = rng.bernoulli(0.3) ? 1.0f : 0.0f;
    return t;
}

Tensor random_goals(std::size_t n, Rng& rng) {
    Tensor t({n, 3});
    for (std::size_t i = 0; i < n; ++i) {
        const auto g = encode_goal({0, 0, 0}, {rng.uniform(-4, 4), rng.uniform(-4, 4)}).as_floats();
        std::copy(g.begin(), g.end(), t.sample(i));
    }
    return t;
}

PolicyGeometry small_policy(std::uint32_t grid) {
    PolicyGeometry g;
    g.grid = grid;
    return g;
}

// Eq. 3 loss of the whole policy, evaluated by the reference.
double ref_policy_loss(const PolicyNet& net, const gradcheck::DParams& params, const Tensor& grids, const Tensor& goals,
                       const Tensor& target) {
    const std::size_t n = grids.batch();
    auto ho = gradcheck::ref_forward(net.encoder(), params, {grids.values.begin(), grids.values.end()}, n);
    auto hg = gradcheck::ref_forward(net.goal_encoder(), params, {goals.values.begin(), goals.values.end()}, n);
    const std::size_t fo = ho.size() / n, fg = hg.size() / n;
    std::vector<double> cat;
    for (std::size_t i = 0; i < n; ++i) {
        cat.insert(cat.end(), ho.begin() + i * fo, ho.begin() + (i + 1) * fo);
        cat.insert(cat.end(), hg.begin() + i * fg, hg.begin() + (i + 1) * fg);
    }
    const auto y = gradcheck::ref_forward(net.head(), params, cat, n);
    double loss = 0;
    for (std::size_t i = 0; i < y.size(); ++i) loss += (y[i] - target.values[i]) * (y[i] - target.values[i]);
    return loss / double(y.size());
}

}  // namespace

TEST(EncodeGoal, Cases) {
    auto a = encode_goal({0, 0, 0}, {2, 0});
    EXPECT_DOUBLE_EQ(a.d, 2.0);
    EXPECT_DOUBLE_EQ(a.cos_theta, 1.0);
    EXPECT_DOUBLE_EQ(a.sin_theta, 0.0);

    auto b = encode_goal({0, 0, 0}, {-1, 0});
    EXPECT_DOUBLE_EQ(b.d, 1.0);
    EXPECT_NEAR(b.cos_theta, -1.0, 1e-15);
    EXPECT_NEAR(b.sin_theta, 0.0, 1e-15);

    auto c = encode_goal({3, 4, 1.2}, {3, 4});
    EXPECT_EQ(c.d, 0.0);
    EXPECT_EQ(c.cos_theta, 1.0);
    EXPECT_EQ(c.sin_theta, 0.0);

    // facing +y, goal on the +x side is to the right (negative bearing)
    auto d = encode_goal({1, 1, kPi / 2}, {2, 1});
    EXPECT_NEAR(d.cos_theta, 0.0, 1e-12);
    EXPECT_NEAR(d.sin_theta, -1.0, 1e-12);
}

TEST(EncodeGoal, UnitCircleAndBearing) {
    Rng rng(1);
    for (int t = 0; t < 1000; ++t) {
        const Pose2 p{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-kPi, kPi)};
        const Point2 g{rng.uniform(-5, 5), rng.uniform(-5, 5)};
        auto e = encode_goal(p, g);
        EXPECT_NEAR(e.cos_theta * e.cos_theta + e.sin_theta * e.sin_theta, 1.0, 1e-6);
        EXPECT_NEAR(e.d, std::hypot(g.x - p.x, g.y - p.y), 1e-12);
        // rotating the heading by the bearing points straight at the goal
        const double th = std::atan2(e.sin_theta, e.cos_theta);
        EXPECT_NEAR(p.x + e.d * std::cos(p.heading + th), g.x, 1e-9);
        EXPECT_NEAR(p.y + e.d * std::sin(p.heading + th), g.y, 1e-9);
    }
}

TEST(CorruptGrid, DegenerateProbabilities) {
    Rng rng(2);
    auto g = random_grid(GridSpec::cube(8, 0.1f), 0.4, rng);
    EXPECT_EQ(corrupt_grid(g, {0.0, 0.0, 0.0}, 5), g);
    EXPECT_EQ(corrupt_grid(g, {1.0, 0.0, 0.0}, 5).occupied_count(), 0u);
    EXPECT_EQ(corrupt_grid(VoxelGrid(g.spec()), {0.0, 0.0, 1.0}, 5).occupied_count(), g.spec().cell_count());
    EXPECT_EQ(corrupt_grid(g, {}, 9), corrupt_grid(g, {}, 9));
    EXPECT_NE(corrupt_grid(g, {}, 9), corrupt_grid(g, {}, 10));
    EXPECT_THROW(corrupt_grid(g, {1.5, 0.0, 0.0}, 1), ConfigError);
}

TEST(CorruptGrid, MonteCarloRates) {
    // 10^6 occupied voxels on each of the near and far slices
    GridSpec s{1000, 1000, 2, 0.1f};
    VoxelGrid full(s);
    for (std::uint32_t z = 0; z < 2; ++z)
        for (std::uint32_t y = 0; y < 1000; ++y)
            for (std::uint32_t x = 0; x < 1000; ++x) full.set(x, y, z);
    const NoiseModel noise;
    auto out = corrupt_grid(full, noise, 77);
    std::size_t kept[2] = {0, 0};
    for (std::uint32_t z = 0; z < 2; ++z)
        for (std::uint32_t y = 0; y < 1000; ++y)
            for (std::uint32_t x = 0; x < 1000; ++x) kept[z] += out.at(x, y, z);
    EXPECT_NEAR(1.0 - kept[0] / 1e6, noise.p_drop0, 0.01);
    EXPECT_NEAR(1.0 - kept[1] / 1e6, noise.p_drop0 + noise.p_drop_range, 0.01);

    auto added = corrupt_grid(VoxelGrid(s), noise, 78);
    EXPECT_NEAR(added.occupied_count() / 2e6, noise.p_add, 0.001);
}

TEST(PolicyNet, ArchitectureAtFullSize) {
    PolicyNet net;
    const auto& enc = net.encoder();
    EXPECT_EQ(enc.output_shape(), (Shape{256}));
    EXPECT_EQ(net.goal_encoder().output_shape(), (Shape{16}));
    EXPECT_EQ(net.head().output_shape(), (Shape{2}));
    const auto d = net.describe();
    std::size_t convs = 0, fcs_in_head = 0;
    for (auto& l : enc.describe())
        if (l.kind == LayerKind::conv3d) {
            ++convs;
            EXPECT_EQ(l.kernel, 4u);
            EXPECT_EQ(l.stride, 2u);
        }
    for (auto& l : net.head().describe()) fcs_in_head += l.kind == LayerKind::linear;
    EXPECT_EQ(convs, 4u);
    EXPECT_EQ(fcs_in_head, 4u);
    // 64 -> 32 -> 16 -> 8 -> 4 with 32 channels, then the projection
    EXPECT_NE(net.params().find("encoder.project.weight"), nullptr);
    EXPECT_EQ(net.params().find("encoder.project.weight")->tensor.shape, (Shape{256, 2048}));
}

TEST(PolicyNet, OutputShapeDeterminismAndSpecCheck) {
    for (std::uint32_t n : {4u, 16u}) {
        PolicyNet net(small_policy(n), 3);
        Rng rng(n);
        auto grids = random_grids(net, 5, rng);
        auto goals = random_goals(5, rng);
        auto a = net.infer(grids, goals), b = net.infer(grids, goals);
        EXPECT_EQ(a.shape, (Shape{5, 2}));
        EXPECT_EQ(a.values, b.values);
        EXPECT_TRUE(a.all_finite());
        auto g = random_grid(GridSpec::cube(n, 0.1f), 0.2, rng);
        auto act1 = policy_forward(net, g, PointGoal{1.0, 0.6, 0.8});
        auto act2 = policy_forward(net, g, PointGoal{1.0, 0.6, 0.8});
        EXPECT_EQ(act1, act2);
        EXPECT_THROW(policy_forward(net, VoxelGrid(GridSpec::cube(n * 2, 0.1f)), PointGoal{}), ShapeError);
    }
}

TEST(PolicyNet, FeatureSeparation) {
    PolicyNet net(small_policy(16), 4);
    Rng rng(5);
    auto grids = random_grids(net, 3, rng);
    auto goals = random_goals(3, rng), goals2 = random_goals(3, rng);
    auto grids2 = random_grids(net, 3, rng);
    EXPECT_EQ(net.obstacle_features(grids).values, net.obstacle_features(grids).values);
    EXPECT_EQ(net.goal_features(goals).values, net.goal_features(goals).values);
    // the action depends on both inputs, the features on one each
    EXPECT_NE(net.infer(grids, goals).values, net.infer(grids, goals2).values);
    EXPECT_NE(net.infer(grids, goals).values, net.infer(grids2, goals).values);
    const auto ho = net.obstacle_features(grids);
    const auto hg = net.goal_features(goals);
    auto head_in = Tensor({3, 272});
    for (std::size_t i = 0; i < 3; ++i) {
        std::copy_n(ho.sample(i), 256, head_in.sample(i));
        std::copy_n(hg.sample(i), 16, head_in.sample(i) + 256);
    }
    EXPECT_EQ(net.head().infer(head_in, net.params()).values, net.infer(grids, goals).values);
}

TEST(PolicyNet, TranslationInvariance) {
    // dyadic cell size and positions keep every coordinate exact under the
    // shift; positions sit off the 1/16 lattice so no sample lands on a cell
    // boundary
    SceneParams p;
    p.cell_size = 0.125;
    Rng rng(6);
    FloorMap f(48, 48, 0.125);
    for (int k = 0; k < 200; ++k) f.set(int(rng.below(48)), int(rng.below(48)));
    const int shift_i = 8, shift_j = 16;
    FloorMap g(48 + shift_i, 48 + shift_j, 0.125);
    for (int j = 0; j < 48; ++j)
        for (int i = 0; i < 48; ++i) g.set(i + shift_i, j + shift_j, f.occupied(i, j));
    const auto a = scene_from_floor("a", f, p), b = scene_from_floor("b", g, p);

    SensorConfig sensor;
    sensor.grid = GridSpec::cube(16, 0.125f);
    PolicyNet net(small_policy(16), 7);
    for (int t = 0; t < 20; ++t) {
        const Pose2 pa{rng.below(32) / 8.0 + 1.0 + 1 / 32.0, rng.below(32) / 8.0 + 1.0 + 1 / 32.0, (double(rng.below(8)) - 4) * kPi / 4};
        const Point2 ga{rng.below(256) / 64.0, rng.below(256) / 64.0};
        const Pose2 pb{pa.x + shift_i * 0.125, pa.y + shift_j * 0.125, pa.heading};
        const Point2 gb{ga.x + shift_i * 0.125, ga.y + shift_j * 0.125};
        const auto oa = observe(a, pa, sensor, ObservationMode::omniscient_crop);
        const auto ob = observe(b, pb, sensor, ObservationMode::omniscient_crop);
        ASSERT_EQ(oa, ob);
        const auto ea = encode_goal(pa, ga), eb = encode_goal(pb, gb);
        EXPECT_EQ(ea.as_floats(), eb.as_floats());
        EXPECT_EQ(policy_forward(net, oa, ea), policy_forward(net, ob, eb));
    }
}

TEST(PolicyNet, LossGradientMatchesFiniteDifferences) {
    PolicyNet net(small_policy(8), 11);
    Rng rng(12);
    for (auto& p : net.params().params())
        for (auto& v : p.tensor.values) v += float(rng.uniform(-0.05, 0.05));
    const std::size_t n = 8;
    const auto grids = random_grids(net, n, rng);
    const auto goals = random_goals(n, rng);
    Tensor target({n, 2});
    for (auto& v : target.values) v = float(rng.uniform(-1, 1));

    PolicyNet fwd = net;
    PolicyNet::PassTrace tr;
    const auto y = fwd.forward_train(grids, goals, tr);
    Tensor gy({n, 2});
    const double loss = mse_loss(y.values, target.values, gy.values);
    fwd.params().zero_grad();
    fwd.backward(tr, gy, false);

    gradcheck::DParams ref;
    for (const auto& p : net.params().params()) ref.emplace_back(p.tensor.values.begin(), p.tensor.values.end());
    EXPECT_NEAR(ref_policy_loss(net, ref, grids, goals, target), loss, 1e-5 * std::max(1.0, loss));

    // central differences of the double-precision reference
    const double h = 1e-6;
    for (std::size_t pi = 0; pi < ref.size(); ++pi) {
        const auto& param = net.params().param(pi);
        const auto& grad = fwd.params().param(pi).tensor.grad;
        double diff2 = 0, norm2 = 0;
        for (auto i : gradcheck::pick(ref[pi].size(), 12, rng)) {
            const double orig = ref[pi][i];
            ref[pi][i] = orig + h;
            const double hi = ref_policy_loss(net, ref, grids, goals, target);
            ref[pi][i] = orig - h;
            const double lo = ref_policy_loss(net, ref, grids, goals, target);
            ref[pi][i] = orig;
            const double fd = (hi - lo) / (2 * h);
            EXPECT_LE(gradcheck::rel_err(grad[i], fd, 1e-3), 1e-3) << param.name << "[" << i << "] " << grad[i]
                                                                   << " vs " << fd;
            diff2 += (grad[i] - fd) * (grad[i] - fd);
            norm2 += fd * fd;
        }
        // biases feeding batch norm have an identically zero gradient
        if (std::sqrt(norm2) > 1e-5) {
            EXPECT_LE(std::sqrt(diff2 / norm2), 1e-3) << param.name;
        }
    }
}

TEST(PolicyNet, CostGrowsWithGridSize) {
    const auto c4 = PolicyNet(small_policy(4)).cost();
    const auto c16 = PolicyNet(small_policy(16)).cost();
    const auto c64 = PolicyNet(small_policy(64)).cost();
    EXPECT_LT(c4.macs, c16.macs);
    EXPECT_LT(c16.macs, c64.macs);
    EXPECT_LT(c4.params, c16.params);
    EXPECT_LT(c16.params, c64.params);
    EXPECT_EQ(c64.params, PolicyNet(small_policy(64)).params().parameter_count());
}

TEST(PerceptionProxy, RangeShapeAndDeterminism) {
    ProxyGeometry g;
    g.grid = 16;
    PerceptionProxyNet net(g, 1);
    Rng rng(13);
    auto in = random_grid(GridSpec::cube(16, 0.1f), 0.2, rng);
    const auto out = proxy_forward(net, in);
    EXPECT_EQ(out.spec(), in.spec());
    for (float v : out.values()) {
        EXPECT_GT(v, 0.0f);
        EXPECT_LT(v, 1.0f);
    }
    const auto again = proxy_forward(net, in);
    EXPECT_TRUE(std::ranges::equal(again.values(), out.values()));
    EXPECT_THROW(proxy_forward(net, VoxelGrid(GridSpec::cube(8, 0.1f))), ShapeError);
    g.grid = 6;
    EXPECT_THROW(PerceptionProxyNet(g, 1), ConfigError);
}

TEST(Init, SeedDeterminesParameters) {
    PolicyNet a(small_policy(8), 1), b(small_policy(8), 1), c(small_policy(8), 2);
    EXPECT_EQ(a.params().param(0).tensor.values, b.params().param(0).tensor.values);
    EXPECT_NE(a.params().param(0).tensor.values, c.params().param(0).tensor.values);
}
