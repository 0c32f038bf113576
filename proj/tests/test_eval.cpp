#include <gtest/gtest.h>

#include <filesystem>

#include "voxnav/eval.hpp"

using namespace voxnav;

namespace {

EpisodeResult ep(EpisodeStatus s, double p, double l, double d, std::string scene = "a", std::string group = "seen") {
    EpisodeResult r;
    r.scene_id = std::move(scene);
    r.group = std::move(group);
    r.outcome = s;
    r.path_length = p;
    r.shortest_path = l;
    r.final_goal_distance = d;
    return r;
}

Scene corridor_scene() {
    FloorMap f(32, 11, 0.1);
    for (int i = 0; i < 32; ++i) {
        f.set(i, 0);
        f.set(i, 10);
    }
    for (int j = 0; j < 11; ++j) {
        f.set(0, j);
        f.set(31, j);
    }
    SceneParams p;
    p.planning_margin = 0.05;
    return scene_from_floor("corridor", f, p);
}

EvalConfig small_eval() {
    EvalConfig c;
    c.sensor.grid = GridSpec::cube(16, 0.4f);
    c.sensor.camera_width = 32;
    c.sensor.camera_height = 18;
    c.max_steps = 120;
    c.min_geodesic = 1.0;
    c.max_geodesic = 3.0;
    return c;
}

std::vector<Scene> small_scenes() {
    SceneParams p;
    p.size_x = p.size_y = 5.0;
    std::vector<Scene> s;
    for (int i = 0; i < 2; ++i) s.push_back(generate_scene(p, derive_seed(19, i)));
    return s;
}

// Untrained networks: the metrics are meaningless but the episode is real.
ModelBundle random_proxy_bundle(std::uint32_t grid = 4) {
    ModelBundle b;
    b.agent = "snn_proxy_policy";
    PolicyGeometry pg;
    pg.grid = grid;
    b.policy.emplace(pg, 1);
    b.proxy.emplace(ProxyGeometry{grid, {2, 4}}, 2);
    return b;
}

}  // namespace

TEST(Metrics, ClosedFormValues) {
    // success with detour, success on the shortest path, timeout, collision
    const std::vector<EpisodeResult> rs{ep(EpisodeStatus::Success, 5.0, 4.0, 0.2), ep(EpisodeStatus::Success, 3.0, 3.0, 0.1),
                                        ep(EpisodeStatus::Timeout, 1.0, 2.0, 1.5),
                                        ep(EpisodeStatus::Collision, 2.0, 6.0, 2.5)};
    const auto m = compute_metrics(rs);
    EXPECT_DOUBLE_EQ(m.sr, 0.5);
    EXPECT_DOUBLE_EQ(m.spl, (0.8 + 1.0) / 4.0);
    EXPECT_DOUBLE_EQ(m.ne, (1.5 + 2.5) / 4.0);
    EXPECT_EQ(m.episodes, 4u);
    EXPECT_DOUBLE_EQ(compute_metrics(rs, "x", true).ne, 2.0);

    // path shorter than the geodesic (goal radius) caps at 1
    EXPECT_DOUBLE_EQ(compute_metrics(std::vector{ep(EpisodeStatus::Success, 2.5, 3.0, 0.3)}).spl, 1.0);
    EXPECT_DOUBLE_EQ(compute_metrics(std::vector{ep(EpisodeStatus::Success, 1, 1, 0)}, "x", true).ne, 0.0);
}

TEST(Metrics, RejectsEmptyAndInvalidInput) {
    EXPECT_THROW(compute_metrics(std::vector<EpisodeResult>{}), Error);
    EXPECT_THROW(compute_metrics(std::vector{ep(EpisodeStatus::Success, 1, 0, 0)}), Error);
    EXPECT_THROW(compute_metrics(std::vector{ep(EpisodeStatus::Success, -1, 1, 0)}), Error);
}

TEST(Metrics, SplNeverExceedsSrAndIgnoresOrder) {
    Rng rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<EpisodeResult> rs;
        const int n = 1 + int(rng.below(30));
        for (int i = 0; i < n; ++i) {
            const int k = int(rng.below(3));
            const auto s = k == 0 ? EpisodeStatus::Success : k == 1 ? EpisodeStatus::Timeout : EpisodeStatus::Collision;
            rs.push_back(ep(s, rng.uniform(0, 20), rng.uniform(0.1, 10), rng.uniform(0, 5)));
        }
        const auto m = compute_metrics(rs);
        ASSERT_LE(m.spl, m.sr + 1e-12);
        ASSERT_GE(m.spl, 0.0);
        rng.shuffle(rs);
        const auto m2 = compute_metrics(rs);
        ASSERT_EQ(m2.sr, m.sr);
        ASSERT_EQ(m2.spl, m.spl);
        ASSERT_EQ(m2.ne, m.ne);
    }
}

TEST(Episode, StartingInsideGoalRadiusSucceedsImmediately) {
    const auto scene = corridor_scene();
    const StartGoal t{{1.0, 0.5, 0.0}, {1.2, 0.5}, 0.2};
    const auto r = run_episode(scene, t, Agent::stub(), small_eval(), 1);
    EXPECT_EQ(r.outcome, EpisodeStatus::Success);
    EXPECT_EQ(r.steps, 0);
    EXPECT_EQ(r.path_length, 0.0);
    EXPECT_DOUBLE_EQ(compute_metrics(std::vector{r}).spl, 1.0);
}

TEST(Episode, StationaryAgentTimesOut) {
    const auto scene = corridor_scene();
    auto cfg = small_eval();
    cfg.max_steps = 30;
    const StartGoal t{{0.5, 0.5, 0.0}, {2.6, 0.5}, 2.1};
    const auto r = run_episode(scene, t, Agent::stub(), cfg, 1);
    EXPECT_EQ(r.outcome, EpisodeStatus::Timeout);
    EXPECT_EQ(r.steps, 30);
    EXPECT_EQ(r.path_length, 0.0);
    EXPECT_NEAR(r.final_goal_distance, 2.1, 1e-12);
    const auto m = compute_metrics(std::vector{r});
    EXPECT_EQ(m.sr, 0.0);
    EXPECT_EQ(m.spl, 0.0);
    EXPECT_NEAR(m.ne, 2.1, 1e-12);
}

TEST(Episode, ExpertDrivesDownTheCorridor) {
    const auto scene = corridor_scene();
    auto cfg = small_eval();
    cfg.max_steps = 500;
    cfg.record_trace = true;
    const StartGoal t{{0.5, 0.5, 0.0}, {2.6, 0.5}, 2.1};
    const auto r = run_episode(scene, t, Agent::expert(), cfg, 1);
    EXPECT_EQ(r.outcome, EpisodeStatus::Success);
    EXPECT_LE(r.final_goal_distance, cfg.success_radius);
    EXPECT_GE(r.path_length, 2.1 - cfg.success_radius - 1e-9);
    EXPECT_LE(r.path_length, 2.1 * 1.1);
    EXPECT_EQ(r.trace.size(), std::size_t(r.steps) + 1);
}

TEST(Episode, LearnedAgentsAreDeterministic) {
    const auto scenes = small_scenes();
    const auto cfg = small_eval();
    const auto tasks = make_tasks(scenes, 2, cfg, 3);
    const auto b = random_proxy_bundle();
    const auto agent = Agent::from_bundle(b);
    EXPECT_EQ(agent.kind, AgentKind::snn_proxy_policy);
    const auto a = run_episode(scenes[0], tasks[0].task, agent, cfg, 9);
    const auto c = run_episode(scenes[0], tasks[0].task, agent, cfg, 9);
    EXPECT_EQ(a.steps, c.steps);
    EXPECT_EQ(a.path_length, c.path_length);
    EXPECT_EQ(a.final_goal_distance, c.final_goal_distance);
}

TEST(Episode, AgentValidation) {
    Agent a;
    a.kind = AgentKind::gt_grid_policy;
    EXPECT_THROW(a.validate(), Error);
    ModelBundle b = random_proxy_bundle();
    b.proxy.reset();
    EXPECT_THROW(Agent::from_bundle(b), CorruptError);
    b = random_proxy_bundle();
    b.proxy.emplace(ProxyGeometry{8, {2, 4}}, 2);
    EXPECT_THROW(Agent::from_bundle(b).validate(), GeometryError);
    EXPECT_THROW(parse_agent_kind("oracle"), ConfigError);
    EXPECT_EQ(parse_agent_kind("gt_grid_policy"), AgentKind::gt_grid_policy);
}

TEST(Evaluate, WorkerCountDoesNotChangeResults) {
    const auto scenes = small_scenes();
    auto cfg = small_eval();
    const auto tasks = make_tasks(scenes, 6, cfg, 4);
    EXPECT_EQ(tasks[0].scene, 0u);
    EXPECT_EQ(tasks[1].scene, 1u);
    const auto b = random_proxy_bundle();
    const auto agent = Agent::from_bundle(b);
    const auto one = evaluate_agent(agent, scenes, tasks, cfg);
    cfg.workers = 3;
    const auto three = evaluate_agent(agent, scenes, tasks, cfg);
    ASSERT_EQ(one.size(), three.size());
    for (std::size_t i = 0; i < one.size(); ++i) {
        EXPECT_EQ(one[i].outcome, three[i].outcome);
        EXPECT_EQ(one[i].path_length, three[i].path_length);
        EXPECT_EQ(one[i].final_goal_distance, three[i].final_goal_distance);
    }
    EXPECT_EQ(report_to_csv(build_report(one)), report_to_csv(build_report(three)));
}

TEST(Report, RowsPerSceneAndGroupAverages) {
    const std::vector<EpisodeResult> rs{ep(EpisodeStatus::Success, 2, 2, 0, "b"), ep(EpisodeStatus::Timeout, 1, 2, 1, "a"),
                                        ep(EpisodeStatus::Success, 4, 2, 0, "n1", "novel")};
    const auto rep = build_report(rs);
    ASSERT_EQ(rep.rows.size(), 6u);
    EXPECT_EQ(rep.rows[0].scene, "a");
    EXPECT_EQ(rep.rows[1].scene, "b");
    EXPECT_EQ(rep.rows[2].scene, "n1");
    EXPECT_EQ(rep.rows[3].scene, "seen-average");
    EXPECT_EQ(rep.rows[4].scene, "novel-average");
    EXPECT_EQ(rep.rows[5].scene, "all-average");
    EXPECT_DOUBLE_EQ(find_row(rep, "seen-average")->sr, 0.5);
    EXPECT_DOUBLE_EQ(find_row(rep, "novel-average")->spl, 0.5);
    EXPECT_DOUBLE_EQ(find_row(rep, "all-average")->spl, 0.5);
    EXPECT_EQ(find_row(rep, "missing"), nullptr);
    EXPECT_EQ(build_report(std::vector{rs[0]}).rows.size(), 2u);
}

TEST(Report, EmptyReportIsMarked) {
    const auto csv = report_to_csv(build_report(std::vector<EpisodeResult>{}));
    EXPECT_EQ(csv, "# voxnav report v1\nscene,SR,SPL,NE,episodes,error\n# empty\n");
    EXPECT_TRUE(report_from_csv(csv).rows.empty());
}

TEST(Report, CsvAndJsonRoundTrip) {
    MetricsReport r = build_report(std::vector{ep(EpisodeStatus::Success, 3, 2.7, 0.1, "s"),
                                               ep(EpisodeStatus::Collision, 0.7, 3.1, 2.2, "t")});
    r.rows.push_back({"broken", 0, 0, 0, 0, "no checkpoint"});
    r.cost = CostBlock{123456, 789, 41.5, true};
    EXPECT_EQ(report_from_csv(report_to_csv(r)), r);
    EXPECT_EQ(report_from_json(report_to_json(r)), r);

    const auto dir = std::filesystem::temp_directory_path() / "voxnav_report_test";
    std::filesystem::create_directories(dir);
    emit_report(r, (dir / "rep").string());
    EXPECT_EQ(report_from_csv(read_text((dir / "rep.csv").string())), r);
    EXPECT_EQ(report_from_json(nlohmann::json::parse(read_text((dir / "rep.json").string()))), r);

    EXPECT_THROW(report_from_csv("scene,SR\n"), VersionError);
    EXPECT_THROW(report_from_csv("# voxnav report v1\nscene,SR,SPL,NE,episodes,error\na,x,1,1,1,\n"), CorruptError);
    EXPECT_THROW(report_from_json({{"version", 2}, {"rows", nlohmann::json::array()}}), VersionError);
}

TEST(Ablation, IdenticalArmsGiveIdenticalRowsAndFailuresAreAnnotated) {
    const auto scenes = small_scenes();
    const auto cfg = small_eval();
    const auto tasks = make_tasks(scenes, 3, cfg, 6);
    const auto b = random_proxy_bundle();
    Agent broken;
    broken.kind = AgentKind::snn_proxy_policy;
    broken.label = "broken";
    const auto rep = run_ablation({{"first", Agent::from_bundle(b), ""},
                                   {"second", Agent::from_bundle(b), ""},
                                   {"missing", Agent::stub(), "checkpoint not found, skipped"},
                                   {"broken", broken, ""}},
                                  scenes, tasks, cfg);
    ASSERT_EQ(rep.rows.size(), 4u);
    EXPECT_EQ(rep.rows[0].sr, rep.rows[1].sr);
    EXPECT_EQ(rep.rows[0].spl, rep.rows[1].spl);
    EXPECT_EQ(rep.rows[0].ne, rep.rows[1].ne);
    EXPECT_EQ(rep.rows[0].episodes, 3u);
    EXPECT_TRUE(rep.rows[0].error.empty());
    EXPECT_EQ(rep.rows[2].error, "checkpoint not found; skipped");
    EXPECT_FALSE(rep.rows[3].error.empty());
    EXPECT_EQ(rep.rows[3].episodes, 0u);
    EXPECT_EQ(report_from_csv(report_to_csv(rep)), rep);
}

TEST(Benchmark, CostsAndRepetitionFloor) {
    const std::vector<VoxelGrid> samples{VoxelGrid(GridSpec::cube(16, 0.4f))};
    const auto stub = benchmark_agent(Agent::stub(), samples, 10);
    EXPECT_EQ(stub.macs, 0u);
    EXPECT_EQ(stub.params, 0u);
    EXPECT_THROW(benchmark_agent(Agent::stub(), samples, 9), ConfigError);

    ModelBundle gt;
    PolicyGeometry pg;
    pg.grid = 4;
    gt.policy.emplace(pg, 1);
    const auto p = benchmark_agent(Agent::from_bundle(gt), samples, 10);
    EXPECT_EQ(p.macs, gt.policy->cost().macs);
    EXPECT_EQ(p.params, gt.policy->cost().params);
    EXPECT_GT(p.hz, 0.0);
    EXPECT_EQ(p.real_time, p.hz > 30.0);

    const auto b = random_proxy_bundle();
    const auto x = benchmark_agent(Agent::from_bundle(b), samples, 10);
    EXPECT_EQ(x.macs, b.policy->cost().macs + b.proxy->cost().macs);
    EXPECT_GT(x.macs, p.macs);
    EXPECT_EQ(x.params, b.policy->cost().params + b.proxy->cost().params);
}

TEST(EvalConfigJson, RoundTrip) {
    EvalConfig c = small_eval();
    c.success_radius = 0.5;
    c.ne_failures_only = true;
    nlohmann::json j = c;
    EXPECT_EQ(nlohmann::json(j.get<EvalConfig>()).dump(), j.dump());
    EXPECT_EQ(nlohmann::json::parse("{}").get<EvalConfig>().success_radius, 0.36);
}
