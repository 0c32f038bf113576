// Closed-loop evaluation: episodes, SR/SPL/NE, ablation tables, cost
// benchmarks and report files.
#pragma once

#include <chrono>
#include <cstdio>
#include <map>
#include <sstream>

#include "voxnav/train.hpp"

namespace voxnav {

// ----------------------------------------------------------------- agents

enum class AgentKind { expert, gt_grid_policy, snn_proxy_policy, stub };

inline std::string to_string(AgentKind k) {
    switch (k) {
        case AgentKind::expert: return "expert";
        case AgentKind::gt_grid_policy: return "gt_grid_policy";
        case AgentKind::snn_proxy_policy: return "snn_proxy_policy";
        case AgentKind::stub: return "stub";
    }
    return "?";
}

inline AgentKind parse_agent_kind(const std::string& s) {
    for (auto k : {AgentKind::expert, AgentKind::gt_grid_policy, AgentKind::snn_proxy_policy, AgentKind::stub})
        if (to_string(k) == s) return k;
    throw ConfigError("unknown agent '" + s + "' (expected expert, gt_grid_policy, snn_proxy_policy or stub)");
}

/// Networks are borrowed and only read, so one Agent can serve many
/// concurrent episodes.
struct Agent {
    AgentKind kind = AgentKind::stub;
    std::string label = "stub";
    const PolicyNet* policy = nullptr;
    const PerceptionProxyNet* proxy = nullptr;
    NoiseModel noise;

    static Agent expert() { return {AgentKind::expert, "expert", nullptr, nullptr, {}}; }
    static Agent stub() { return {AgentKind::stub, "stub", nullptr, nullptr, {}}; }

    /// Agent over the networks of a loaded checkpoint.
    static Agent from_bundle(const ModelBundle& b, std::string label = {}) {
        Agent a;
        a.kind = parse_agent_kind(b.agent);
        a.label = label.empty() ? b.agent : std::move(label);
        if (!b.policy) throw CorruptError("checkpoint for " + b.agent + " has no policy network");
        a.policy = &*b.policy;
        if (a.kind == AgentKind::snn_proxy_policy) {
            if (!b.proxy) throw CorruptError("checkpoint for snn_proxy_policy has no proxy network");
            a.proxy = &*b.proxy;
            if (b.config.contains("train")) a.noise = b.config["train"].value("noise", NoiseModel{});
        }
        return a;
    }

    void validate() const {
        if ((kind == AgentKind::gt_grid_policy || kind == AgentKind::snn_proxy_policy) && !policy)
            throw Error("agent " + label + " has no policy network");
        if (kind == AgentKind::snn_proxy_policy && !proxy) throw Error("agent " + label + " has no proxy network");
        if (proxy && policy && proxy->geometry().grid != policy->geometry().grid)
            throw GeometryError("agent " + label + ": proxy and policy grid sizes differ");
    }
};

// ---------------------------------------------------------------- episodes

struct EvalConfig {
    SensorConfig sensor;
    ExpertConfig expert;
    double success_radius = 0.36;
    int max_steps = 500;
    double dt = 1.0 / 30.0;
    double min_geodesic = 2.0;
    double max_geodesic = 6.0;
    int workers = 1;
    bool ne_failures_only = false;  // non-default NE reading
    bool record_trace = false;
};

inline void to_json(nlohmann::json& j, const EvalConfig& c) {
    j = {{"sensor", c.sensor},         {"expert", c.expert},       {"success_radius", c.success_radius},
         {"max_steps", c.max_steps},   {"dt", c.dt},               {"min_geodesic", c.min_geodesic},
         {"max_geodesic", c.max_geodesic}, {"ne_failures_only", c.ne_failures_only}};
}
inline void from_json(const nlohmann::json& j, EvalConfig& c) {
    EvalConfig d;
    c.sensor = j.value("sensor", d.sensor);
    c.expert = j.value("expert", d.expert);
    c.success_radius = j.value("success_radius", d.success_radius);
    c.max_steps = j.value("max_steps", d.max_steps);
    c.dt = j.value("dt", d.dt);
    c.min_geodesic = j.value("min_geodesic", d.min_geodesic);
    c.max_geodesic = j.value("max_geodesic", d.max_geodesic);
    c.ne_failures_only = j.value("ne_failures_only", d.ne_failures_only);
}

struct EpisodeResult {
    std::string scene_id;
    std::string group = "seen";  // seen | novel
    std::string agent;
    EpisodeStatus outcome = EpisodeStatus::Timeout;
    double path_length = 0.0;          // p, metres travelled
    double shortest_path = 0.0;        // l, A* geodesic
    double final_goal_distance = 0.0;  // metres
    int steps = 0;
    std::vector<std::array<double, 3>> trace;  // poses, when recorded
};

/// Sense, encode the goal, act, step, until the episode ends. Learned agents
/// are purely reactive; the snn proxy agent draws its sensor noise from
/// derive_seed(seed, step).
inline EpisodeResult run_episode(const Scene& scene, const StartGoal& task, const Agent& agent, const EvalConfig& cfg,
                                 std::uint64_t seed) {
    agent.validate();
    EpisodeConfig ep{task.goal, cfg.success_radius, cfg.max_steps, cfg.dt};
    ep.validate();
    if (!(task.geodesic > 0)) throw Error("run_episode: task geodesic must be positive");
    std::optional<ExpertController> expert;
    if (agent.kind == AgentKind::expert) expert.emplace(scene, task.goal, cfg.dt, cfg.expert);

    RobotState state;
    state.pose = task.start;
    state.radius = scene.params.robot_radius;
    EpisodeResult r;
    r.scene_id = scene.id;
    r.agent = agent.label;
    r.shortest_path = task.geodesic;
    for (int step = 0;; ++step) {
        if (cfg.record_trace) r.trace.push_back({state.pose.x, state.pose.y, state.pose.heading});
        const EpisodeStatus st = episode_status(scene, state, ep, step);
        if (st != EpisodeStatus::Running) {
            r.outcome = st;
            r.steps = step;
            break;
        }
        Action a;
        switch (agent.kind) {
            case AgentKind::expert: a = expert->act(state); break;
            case AgentKind::stub: a = {0.0, 0.0}; break;
            case AgentKind::gt_grid_policy:
            case AgentKind::snn_proxy_policy: {
                const auto goal = encode_goal(state.pose, task.goal);
                const VoxelGrid obs = resample_observation(
                    observe(scene, state.pose, cfg.sensor, ObservationMode::gt_depth_grid), agent.policy->geometry().grid);
                if (agent.kind == AgentKind::gt_grid_policy) {
                    a = agent.policy->act(obs, goal);
                } else {
                    const ProbGrid p = agent.proxy->forward(corrupt_grid(obs, agent.noise, derive_seed(seed, step)));
                    a = agent.policy->act(p, goal);
                }
                break;
            }
        }
        const RobotState next = step_kinematics(state, clamp_action(a, cfg.expert.limits), cfg.dt, cfg.expert.limits);
        r.path_length += std::hypot(next.pose.x - state.pose.x, next.pose.y - state.pose.y);
        state = next;
    }
    r.final_goal_distance = distance({state.pose.x, state.pose.y}, task.goal);
    return r;
}

struct EvalTask {
    std::size_t scene = 0;  // index into the scene list
    StartGoal task;
    std::uint64_t seed = 0;
};

/// `episodes` tasks spread round-robin over the scenes, each from its own
/// derived seed.
inline std::vector<EvalTask> make_tasks(const std::vector<Scene>& scenes, int episodes, const EvalConfig& cfg,
                                        std::uint64_t seed) {
    if (scenes.empty()) throw Error("make_tasks: no scenes");
    if (episodes < 1) throw ConfigError("episodes must be >= 1");
    std::vector<EvalTask> tasks;
    for (int e = 0; e < episodes; ++e) {
        const std::size_t s = static_cast<std::size_t>(e) % scenes.size();
        tasks.push_back({s,
                         sample_start_goal(scenes[s], derive_seed(seed, 0x7461736bULL, e), cfg.min_geodesic, 200,
                                           cfg.max_geodesic),
                         derive_seed(seed, 0x65706973ULL, e)});
    }
    return tasks;
}

inline std::vector<EpisodeResult> evaluate_agent(const Agent& agent, const std::vector<Scene>& scenes,
                                                 const std::vector<EvalTask>& tasks, const EvalConfig& cfg,
                                                 const std::string& group = "seen") {
    std::vector<EpisodeResult> out(tasks.size());
    parallel_for(tasks.size(), cfg.workers, [&](std::size_t i) {
        out[i] = run_episode(scenes.at(tasks[i].scene), tasks[i].task, agent, cfg, tasks[i].seed);
        out[i].group = group;
    });
    return out;
}

// ---------------------------------------------------------------- metrics

struct MetricRow {
    std::string scene;
    double sr = 0.0, spl = 0.0, ne = 0.0;
    std::size_t episodes = 0;
    std::string error;  // set when an ablation arm failed
    friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

namespace eval_detail {
/// Sum of terms in ascending order, so the result is independent of the
/// order of the episodes.
inline double ordered_sum(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) s += x;
    return s;
}
}  // namespace eval_detail

/// SR = mean S_i, SPL = mean S_i·l_i/max(p_i, l_i). NE averages the final
/// goal distance with successes counting 0; with `ne_failures_only` it
/// averages over failed episodes instead.
inline MetricRow compute_metrics(std::span<const EpisodeResult> results, const std::string& label = "all",
                                 bool ne_failures_only = false) {
    if (results.empty()) throw Error("compute_metrics: no episode results");
    std::vector<double> spl, ne;
    std::size_t successes = 0, failures = 0;
    for (const auto& r : results) {
        if (!(r.shortest_path > 0)) throw Error("compute_metrics: shortest path must be positive");
        if (r.path_length < 0) throw Error("compute_metrics: negative path length");
        const bool s = r.outcome == EpisodeStatus::Success;
        successes += s;
        failures += !s;
        spl.push_back(s ? r.shortest_path / std::max(r.path_length, r.shortest_path) : 0.0);
        ne.push_back(s ? 0.0 : r.final_goal_distance);
    }
    const double n = double(results.size());
    MetricRow m;
    m.scene = label;
    m.episodes = results.size();
    m.sr = double(successes) / n;
    m.spl = eval_detail::ordered_sum(spl) / n;
    const double ne_sum = eval_detail::ordered_sum(ne);
    m.ne = ne_failures_only ? (failures ? ne_sum / double(failures) : 0.0) : ne_sum / n;
    return m;
}

// ----------------------------------------------------------------- reports

struct CostBlock {
    std::uint64_t macs = 0, params = 0;
    double hz = 0.0;
    bool real_time = false;
    friend bool operator==(const CostBlock&, const CostBlock&) = default;
};

struct MetricsReport {
    std::vector<MetricRow> rows;
    std::optional<CostBlock> cost;
    friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// One row per scene (seen scenes first, then novel, each sorted by id),
/// then seen-average, novel-average and all-average rows. A report with a
/// single group carries only that group's average.
inline MetricsReport build_report(std::span<const EpisodeResult> results, bool ne_failures_only = false) {
    MetricsReport rep;
    if (results.empty()) return rep;
    std::map<std::pair<int, std::string>, std::vector<EpisodeResult>> by_scene;
    std::vector<EpisodeResult> seen, novel;
    for (const auto& r : results) {
        const bool is_novel = r.group == "novel";
        by_scene[{is_novel ? 1 : 0, r.scene_id}].push_back(r);
        (is_novel ? novel : seen).push_back(r);
    }
    for (const auto& [key, rs] : by_scene) rep.rows.push_back(compute_metrics(rs, key.second, ne_failures_only));
    if (!seen.empty()) rep.rows.push_back(compute_metrics(seen, "seen-average", ne_failures_only));
    if (!novel.empty()) rep.rows.push_back(compute_metrics(novel, "novel-average", ne_failures_only));
    if (!seen.empty() && !novel.empty()) rep.rows.push_back(compute_metrics(results, "all-average", ne_failures_only));
    return rep;
}

inline const MetricRow* find_row(const MetricsReport& r, const std::string& scene) {
    for (auto& row : r.rows)
        if (row.scene == scene) return &row;
    return nullptr;
}

inline constexpr int kReportVersion = 1;

namespace eval_detail {
inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}
inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}
}  // namespace eval_detail

inline std::string report_to_csv(const MetricsReport& r) {
    using eval_detail::num;
    std::string out = "# voxnav report v" + std::to_string(kReportVersion) + "\nscene,SR,SPL,NE,episodes,error\n";
    if (r.rows.empty()) out += "# empty\n";
    for (const auto& row : r.rows)
        out += row.scene + "," + num(row.sr) + "," + num(row.spl) + "," + num(row.ne) + "," +
               std::to_string(row.episodes) + "," + row.error + "\n";
    if (r.cost) {
        out += "# cost\nmacs,params,hz,real_time\n";
        out += std::to_string(r.cost->macs) + "," + std::to_string(r.cost->params) + "," + num(r.cost->hz) + "," +
               (r.cost->real_time ? "true" : "false") + "\n";
    }
    return out;
}

inline nlohmann::json report_to_json(const MetricsReport& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.rows) {
        nlohmann::json j = {{"scene", row.scene}, {"SR", row.sr}, {"SPL", row.spl}, {"NE", row.ne}, {"episodes", row.episodes}};
        if (!row.error.empty()) j["error"] = row.error;
        rows.push_back(j);
    }
    nlohmann::json j = {{"version", kReportVersion}, {"rows", rows}};
    if (r.cost)
        j["cost"] = {{"macs", r.cost->macs}, {"params", r.cost->params}, {"hz", r.cost->hz}, {"real_time", r.cost->real_time}};
    return j;
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
    try {
        if (j.at("version").get<int>() != kReportVersion) throw VersionError("unsupported report version");
        MetricsReport r;
        for (const auto& row : j.at("rows"))
            r.rows.push_back({row.at("scene").get<std::string>(), row.at("SR").get<double>(), row.at("SPL").get<double>(),
                              row.at("NE").get<double>(), row.at("episodes").get<std::size_t>(),
                              row.value("error", std::string())});
        if (j.contains("cost")) {
            const auto& c = j["cost"];
            r.cost = CostBlock{c.at("macs").get<std::uint64_t>(), c.at("params").get<std::uint64_t>(),
                               c.at("hz").get<double>(), c.at("real_time").get<bool>()};
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw CorruptError(std::string("report json: ") + e.what());
    }
}

inline MetricsReport report_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "# voxnav report v" + std::to_string(kReportVersion))
        throw VersionError("not a version " + std::to_string(kReportVersion) + " report");
    std::getline(in, line);  // column header
    MetricsReport r;
    bool cost = false;
    try {
        while (std::getline(in, line)) {
            if (line.empty() || line == "# empty") continue;
            if (line == "# cost") {
                cost = true;
                std::getline(in, line);
                continue;
            }
            const auto f = eval_detail::split_csv(line);
            if (cost) {
                if (f.size() != 4) throw CorruptError("cost row needs 4 fields");
                r.cost = CostBlock{std::stoull(f[0]), std::stoull(f[1]), std::stod(f[2]), f[3] == "true"};
            } else {
                if (f.size() != 6) throw CorruptError("report row needs 6 fields");
                r.rows.push_back({f[0], std::stod(f[1]), std::stod(f[2]), std::stod(f[3]), std::stoull(f[4]), f[5]});
            }
        }
    } catch (const std::logic_error& e) {
        throw CorruptError(std::string("report csv: ") + e.what());
    }
    return r;
}

/// Writes `<stem>.csv` and `<stem>.json`.
inline void emit_report(const MetricsReport& r, const std::string& stem) {
    write_text(stem + ".csv", report_to_csv(r));
    write_text(stem + ".json", report_to_json(r).dump(2) + "\n");
}

// ----------------------------------------------------------------- ablation

struct AblationArm {
    std::string label;
    Agent agent;
    std::string error;  // arm could not be built; reported instead of run
};

/// Runs every arm on the same tasks and returns one row per arm.
inline MetricsReport run_ablation(const std::vector<AblationArm>& arms, const std::vector<Scene>& scenes,
                                  const std::vector<EvalTask>& tasks, const EvalConfig& cfg) {
    MetricsReport rep;
    for (const auto& arm : arms) {
        MetricRow row;
        row.scene = arm.label;
        if (!arm.error.empty()) {
            row.error = arm.error;
        } else {
            try {
                auto results = evaluate_agent(arm.agent, scenes, tasks, cfg);
                row = compute_metrics(results, arm.label, cfg.ne_failures_only);
            } catch (const std::exception& e) {
                row.error = e.what();
            }
        }
        for (char& c : row.error)
            if (c == ',' || c == '\n') c = ';';
        rep.rows.push_back(row);
    }
    return rep;
}

// ---------------------------------------------------------------- benchmark

/// Forward passes per second of the agent's networks on the sample
/// observations, plus the analytic cost.
inline CostBlock benchmark_agent(const Agent& agent, const std::vector<VoxelGrid>& samples, int repetitions) {
    if (repetitions < 10) throw ConfigError("benchmark needs at least 10 repetitions");
    CostBlock c;
    if (agent.policy) {
        const Cost pc = agent.policy->cost();
        c.macs += pc.macs;
        c.params += pc.params;
    }
    if (agent.proxy) {
        const Cost xc = agent.proxy->cost();
        c.macs += xc.macs;
        c.params += xc.params;
    }
    if (agent.policy && samples.empty()) throw Error("benchmark_agent: no sample observations");
    const PointGoal goal = encode_goal({0, 0, 0}, {2.0, 1.0});
    volatile double sink = 0.0;
    const auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < repetitions; ++r) {
        if (!agent.policy) continue;
        const VoxelGrid g = resample_observation(samples[std::size_t(r) % samples.size()], agent.policy->geometry().grid);
        const Action a = agent.proxy ? agent.policy->act(agent.proxy->forward(g), goal) : agent.policy->act(g, goal);
        sink = sink + a.v;
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    c.hz = double(repetitions) / std::max(wall, 1e-9);
    c.real_time = c.hz > 30.0;
    return c;
}

}  // namespace voxnav
