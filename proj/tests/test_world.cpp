#include <gtest/gtest.h>

#include <filesystem>
#include <queue>
#include <set>

#include "voxnav/world.hpp"

using namespace voxnav;

namespace {

// 8-connected flood fill with the planner's corner rule.
std::vector<Cell2> flood(const FloorMap& m, Cell2 s) {
    std::vector<char> seen(m.cells.size(), 0);
    std::vector<Cell2> out;
    std::queue<Cell2> q;
    q.push(s);
    seen[m.index(s.i, s.j)] = 1;
    while (!q.empty()) {
        auto c = q.front();
        q.pop();
        out.push_back(c);
        for (int dj = -1; dj <= 1; ++dj)
            for (int di = -1; di <= 1; ++di) {
                if (!di && !dj) continue;
                const int ni = c.i + di, nj = c.j + dj;
                if (m.blocked(ni, nj) || seen[m.index(ni, nj)]) continue;
                if (di && dj && (m.blocked(c.i + di, c.j) || m.blocked(c.i, c.j + dj))) continue;
                seen[m.index(ni, nj)] = 1;
                q.push({ni, nj});
            }
    }
    return out;
}

std::set<std::pair<int, int>> as_set(const std::vector<Cell2>& v) {
    std::set<std::pair<int, int>> s;
    for (auto c : v) s.insert({c.i, c.j});
    return s;
}

}  // namespace

TEST(GenerateScene, ZeroDensityHasOnlyBoundaryWalls) {
    SceneParams p;
    p.obstacle_density = 0.0;
    for (auto layout : {Layout::rooms, Layout::maze, Layout::clutter}) {
        p.layout = layout;
        auto s = generate_scene(p, 11);
        const auto& m = s.floor_map;
        for (int j = 0; j < m.height; ++j)
            for (int i = 0; i < m.width; ++i) {
                const bool border = i == 0 || j == 0 || i == m.width - 1 || j == m.height - 1;
                EXPECT_EQ(m.occupied(i, j), border);
            }
    }
}

TEST(GenerateScene, DeterministicUnderSeed) {
    SceneParams p;
    for (auto layout : {Layout::rooms, Layout::maze, Layout::clutter}) {
        p.layout = layout;
        auto a = generate_scene(p, 42), b = generate_scene(p, 42), c = generate_scene(p, 43);
        EXPECT_EQ(serialize_grid(a.world_grid), serialize_grid(b.world_grid));
        EXPECT_EQ(a.floor_map, b.floor_map);
        EXPECT_NE(serialize_grid(a.world_grid), serialize_grid(c.world_grid));
    }
}

TEST(GenerateScene, InvariantsOnRandomScenes) {
    Rng rng(1);
    for (int t = 0; t < 100; ++t) {
        SceneParams p;
        p.layout = static_cast<Layout>(t % 3);
        p.obstacle_density = rng.uniform(0.0, 0.2);
        auto s = generate_scene(p, 1000 + t);
        const auto& m = s.floor_map;
        // boundary walls always occupied
        for (int i = 0; i < m.width; ++i) EXPECT_TRUE(m.occupied(i, 0) && m.occupied(i, m.height - 1));
        for (int j = 0; j < m.height; ++j) EXPECT_TRUE(m.occupied(0, j) && m.occupied(m.width - 1, j));
        // world grid and floor map agree
        EXPECT_EQ(project_to_floor(s.world_grid, p.robot_height), m);
        // free region: large, free after inflation, and a single connected component
        ASSERT_FALSE(s.free_cells.empty());
        EXPECT_GE(double(s.free_cells.size()), 0.3 * m.width * m.height);
        for (auto c : s.free_cells) ASSERT_FALSE(s.planning_map.occupied(c.i, c.j));
        EXPECT_EQ(as_set(flood(s.planning_map, s.free_cells.front())), as_set(s.free_cells));
        // spot-check A* between random region cells
        for (int k = 0; k < 5; ++k) {
            auto a = s.free_cells[rng.below(s.free_cells.size())], b = s.free_cells[rng.below(s.free_cells.size())];
            EXPECT_NO_THROW(plan_astar(s.planning_map, a, b));
        }
    }
}

TEST(GenerateScene, RejectsBadDensity) {
    SceneParams p;
    p.obstacle_density = 0.7;
    EXPECT_THROW(generate_scene(p, 1), ConfigError);
}

TEST(SampleStartGoal, ForcedPairInCorridor) {
    // A 21-cell corridor: its two end cells are the only pair 2.0 m apart.
    SceneParams p;
    p.robot_radius = 0.04;
    p.planning_margin = 0.0;
    FloorMap f(25, 3, 0.1);
    f.cells.assign(f.cells.size(), 1);
    for (int i = 2; i <= 22; ++i) f.set(i, 1, false);
    auto s = scene_from_floor("corridor", f, p);
    ASSERT_EQ(s.free_cells.size(), 21u);
    const std::set<std::pair<double, double>> ends{{0.25, 0.15}, {2.25, 0.15}};
    for (int k = 0; k < 20; ++k) {
        auto sg = sample_start_goal(s, derive_seed(5, k), 2.0, 2000);
        EXPECT_TRUE(ends.count({std::round(sg.start.x * 100) / 100, std::round(sg.start.y * 100) / 100}));
        EXPECT_TRUE(ends.count({std::round(sg.goal.x * 100) / 100, std::round(sg.goal.y * 100) / 100}));
        EXPECT_NEAR(sg.geodesic, 2.0, 1e-6);  // cell size is stored in single precision
    }
    EXPECT_THROW(sample_start_goal(s, 1, 2.5, 50), Error);
}

TEST(SampleStartGoal, GeodesicBoundAndDeterminism) {
    SceneParams p;
    p.layout = Layout::rooms;
    auto s = generate_scene(p, 3);
    for (int k = 0; k < 1000; ++k) {
        auto sg = sample_start_goal(s, derive_seed(77, k));
        auto path = plan_astar(s.planning_map, cell_of(s.planning_map, {sg.start.x, sg.start.y}),
                               cell_of(s.planning_map, sg.goal));
        ASSERT_GE(path.total_length, 2.0);
        EXPECT_DOUBLE_EQ(path.total_length, sg.geodesic);
        EXPECT_LE(std::abs(sg.start.heading), kPi);
    }
    auto a = sample_start_goal(s, 9), b = sample_start_goal(s, 9);
    EXPECT_EQ(a.start, b.start);
    EXPECT_EQ(a.goal, b.goal);
}

TEST(Kinematics, ClosedForms) {
    RobotState s;
    s.pose = {1.0, 2.0, 0.3};
    EXPECT_EQ(step_kinematics(s, {0, 0}, 0.1).pose, s.pose);

    RobotState z;
    auto n = step_kinematics(z, {1.0, 0.0}, 0.1, {2.0, 1.0});
    EXPECT_DOUBLE_EQ(n.pose.x, 0.1);
    EXPECT_EQ(n.pose.y, 0.0);

    auto r = step_kinematics(z, {0.0, kPi}, 1.0, {0.5, 1.0});
    EXPECT_DOUBLE_EQ(r.pose.heading, 1.0);

    auto back = step_kinematics(z, {-1.0, 0.0}, 1.0);
    EXPECT_EQ(back.pose.x, 0.0);
    EXPECT_EQ(back.last_action.v, 0.0);
    EXPECT_THROW(step_kinematics(z, {std::nan(""), 0.0}, 1.0), Error);
}

TEST(Kinematics, WrapsAndCommutesWithTranslation) {
    Rng rng(4);
    for (int t = 0; t < 1000; ++t) {
        RobotState s;
        s.pose = {rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-kPi, kPi)};
        const Action a{rng.uniform(-1, 1), rng.uniform(-3, 3)};
        auto n = step_kinematics(s, a, 0.5);
        EXPECT_LE(std::abs(n.pose.heading), kPi);
        EXPECT_GT(n.pose.heading, -kPi);
        RobotState sh = s;
        sh.pose.x += 3.0;
        sh.pose.y -= 2.0;
        auto m = step_kinematics(sh, a, 0.5);
        EXPECT_NEAR(m.pose.x - 3.0, n.pose.x, 1e-12);
        EXPECT_NEAR(m.pose.y + 2.0, n.pose.y, 1e-12);
        EXPECT_EQ(m.pose.heading, n.pose.heading);
    }
}

TEST(Collision, Cases) {
    FloorMap m(40, 40, 0.1);
    m.set(20, 20);
    EXPECT_FALSE(check_collision(m, {1.0, 1.0, 0.0}, 0.18));
    EXPECT_TRUE(check_collision(m, {2.05, 2.05, 0.0}, 0.18));
    EXPECT_TRUE(check_collision(m, {-0.5, 1.0, 0.0}, 0.18));
}

TEST(Collision, MatchesExhaustiveCellDistance) {
    Rng rng(5);
    for (int t = 0; t < 20; ++t) {
        FloorMap m(30, 30, 0.1);
        for (int k = 0; k < 20; ++k) m.set(int(rng.below(30)), int(rng.below(30)));
        for (int q = 0; q < 200; ++q) {
            const Pose2 p{rng.uniform(0.3, 2.7), rng.uniform(0.3, 2.7), 0.0};
            const double r = 0.18;
            double nearest = 1e9;
            for (int j = 0; j < 30; ++j)
                for (int i = 0; i < 30; ++i)
                    if (m.occupied(i, j)) {
                        const double dx = std::max({i * 0.1 - p.x, 0.0, p.x - (i + 1) * 0.1});
                        const double dy = std::max({j * 0.1 - p.y, 0.0, p.y - (j + 1) * 0.1});
                        nearest = std::min(nearest, std::hypot(dx, dy));
                    }
            EXPECT_EQ(check_collision(m, p, r), nearest <= r);
            if (nearest >= r + 2 * 0.1) {
                EXPECT_FALSE(check_collision(m, p, r));
            }
        }
    }
}

TEST(EpisodeStatus, Precedence) {
    FloorMap f(40, 40, 0.1);
    f.set(20, 20);
    SceneParams p;
    auto s = scene_from_floor("t", f, p);
    RobotState r;
    r.pose = {2.05, 2.05, 0.0};
    EpisodeConfig cfg{{2.1, 2.1}, 0.36, 10, 0.1};
    EXPECT_EQ(episode_status(s, r, cfg, 0), EpisodeStatus::Success);  // at goal and colliding
    cfg.goal = {0.5, 0.5};
    EXPECT_EQ(episode_status(s, r, cfg, 0), EpisodeStatus::Collision);
    r.pose = {3.0, 3.0, 0.0};
    EXPECT_EQ(episode_status(s, r, cfg, 10), EpisodeStatus::Timeout);
    EXPECT_EQ(episode_status(s, r, cfg, 9), EpisodeStatus::Running);
    cfg.goal = {3.1, 3.0};
    EXPECT_EQ(episode_status(s, r, cfg, 0), EpisodeStatus::Success);
}

TEST(SceneIo, RoundTripAndCorruption) {
    const auto dir = std::filesystem::temp_directory_path() / "voxnav_scene_io";
    std::filesystem::remove_all(dir);
    SceneParams p;
    p.layout = Layout::maze;
    auto s = generate_scene(p, 21);
    save_scene(dir.string(), s);
    auto l = load_scene((dir / (s.id + ".json")).string());
    EXPECT_EQ(l.world_grid, s.world_grid);
    EXPECT_EQ(l.id, s.id);
    auto blob = read_file((dir / (s.id + ".grid")).string());
    blob.back() ^= 0x1;
    write_file((dir / (s.id + ".grid")).string(), blob);
    EXPECT_THROW(load_scene((dir / (s.id + ".json")).string()), CorruptError);
    EXPECT_THROW(load_scene((dir / "missing.json").string()), DependencyError);
}
