// Privileged expert: A* on the inflated floor map, PD waypoint tracking, and
// demonstration collection with the on-disk dataset format.
#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "voxnav/common.hpp"
#include "voxnav/nets.hpp"
#include "voxnav/planner.hpp"
#include "voxnav/voxgrid.hpp"
#include "voxnav/world.hpp"

namespace voxnav {

// ------------------------------------------------------------- PD control

struct PdGains {
    double kp = 2.0;
    double kd = 0.1;
    double lookahead = 0.5;       // metres of arc along the path
    double theta_slow = kPi / 2;  // heading error at which v reaches zero
};

inline void to_json(nlohmann::json& j, const PdGains& g) {
    j = {{"kp", g.kp}, {"kd", g.kd}, {"lookahead", g.lookahead}, {"theta_slow", g.theta_slow}};
}
inline void from_json(const nlohmann::json& j, PdGains& g) {
    PdGains d;
    g.kp = j.value("kp", d.kp);
    g.kd = j.value("kd", d.kd);
    g.lookahead = j.value("lookahead", d.lookahead);
    g.theta_slow = j.value("theta_slow", d.theta_slow);
}

struct PdOutput {
    Action action;
    double heading_error = 0.0;
    Point2 target;
};

/// Point at arc distance `lookahead` past the closest point of the polyline.
inline Point2 lookahead_point(const std::vector<Point2>& wp, Point2 p, double lookahead) {
    if (wp.empty()) throw Error("lookahead_point: empty path");
    if (wp.size() == 1) return wp[0];
    std::size_t best_seg = 0;
    double best_t = 0.0, best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k + 1 < wp.size(); ++k) {
        const double ax = wp[k].x, ay = wp[k].y, bx = wp[k + 1].x - ax, by = wp[k + 1].y - ay;
        const double len2 = bx * bx + by * by;
        const double t = len2 > 0 ? std::clamp(((p.x - ax) * bx + (p.y - ay) * by) / len2, 0.0, 1.0) : 0.0;
        const double d = std::hypot(ax + t * bx - p.x, ay + t * by - p.y);
        if (d < best_d) {
            best_d = d;
            best_seg = k;
            best_t = t;
        }
    }
    double remaining = lookahead;
    std::size_t k = best_seg;
    Point2 cur{wp[k].x + best_t * (wp[k + 1].x - wp[k].x), wp[k].y + best_t * (wp[k + 1].y - wp[k].y)};
    while (k + 1 < wp.size()) {
        const double seg = distance(cur, wp[k + 1]);
        if (seg >= remaining) {
            const double f = seg > 0 ? remaining / seg : 0.0;
            return {cur.x + f * (wp[k + 1].x - cur.x), cur.y + f * (wp[k + 1].y - cur.y)};
        }
        remaining -= seg;
        cur = wp[++k];
    }
    return wp.back();
}

inline PdOutput pd_control(const RobotState& s, const Path& path, double prev_error, double dt,
                           const PdGains& gains = {}, const KinematicLimits& lim = {}) {
    if (path.waypoints.empty()) throw Error("pd_control: empty path");
    const Point2 target = lookahead_point(path.waypoints, {s.pose.x, s.pose.y}, gains.lookahead);
    const double dx = target.x - s.pose.x, dy = target.y - s.pose.y;
    const double e = (dx == 0.0 && dy == 0.0) ? 0.0 : wrap_angle(std::atan2(dy, dx) - s.pose.heading);
    const double omega = std::clamp(gains.kp * e + gains.kd * (e - prev_error) / dt, -lim.omega_max, lim.omega_max);
    const double v = lim.v_max * std::max(0.0, 1.0 - std::abs(e) / gains.theta_slow);
    return {{v, omega}, e, target};
}

// ------------------------------------------------------------ the expert

struct ExpertConfig {
    PdGains gains;
    KinematicLimits limits;
    int replan_every = 15;         // steps
    double guard_horizon = 0.5;    // seconds of forward simulation for the safety stop
    double guard_margin = 0.05;    // metres added to the robot radius by the safety stop
};

inline void to_json(nlohmann::json& j, const ExpertConfig& c) {
    j = {{"gains", c.gains},
         {"v_max", c.limits.v_max},
         {"omega_max", c.limits.omega_max},
         {"replan_every", c.replan_every},
         {"guard_horizon", c.guard_horizon},
         {"guard_margin", c.guard_margin}};
}
inline void from_json(const nlohmann::json& j, ExpertConfig& c) {
    ExpertConfig d;
    c.gains = j.value("gains", d.gains);
    c.limits.v_max = j.value("v_max", d.limits.v_max);
    c.limits.omega_max = j.value("omega_max", d.limits.omega_max);
    c.replan_every = j.value("replan_every", d.replan_every);
    c.guard_horizon = j.value("guard_horizon", d.guard_horizon);
    c.guard_margin = j.value("guard_margin", d.guard_margin);
}

/// Replans with A* every `replan_every` steps from the nearest free cell of
/// the planning map and tracks the path with pd_control. A safety stop
/// zeroes v (turn in place) when holding the command for guard_horizon
/// seconds would bring the robot within guard_margin of an obstacle.
class ExpertController {
public:
    ExpertController(const Scene& scene, Point2 goal, double dt, const ExpertConfig& cfg = {})
        : scene_(&scene), goal_(goal), dt_(dt), cfg_(cfg) {
        if (cfg.replan_every < 1) throw ConfigError("replan_every must be >= 1");
    }

    Action act(const RobotState& s) {
        if (steps_ % cfg_.replan_every == 0 || path_.waypoints.empty()) replan(s);
        ++steps_;
        if (path_.waypoints.empty()) return {0.0, 0.0};
        const double prev = first_ ? pd_control(s, path_, 0.0, dt_, cfg_.gains, cfg_.limits).heading_error : prev_error_;
        first_ = false;
        const PdOutput out = pd_control(s, path_, prev, dt_, cfg_.gains, cfg_.limits);
        prev_error_ = out.heading_error;
        Action a = out.action;
        if (a.v > 0 && !clear_ahead(s, a)) a.v = 0.0;
        return a;
    }

    const Path& path() const { return path_; }

private:
    bool clear_ahead(const RobotState& s, Action a) const {
        const int n = static_cast<int>(std::ceil(cfg_.guard_horizon / dt_));
        const double r = s.radius + cfg_.guard_margin;
        RobotState q = s;
        for (int k = 0; k < n; ++k) {
            q = step_kinematics(q, a, dt_, cfg_.limits);
            if (check_collision(scene_->floor_map, q.pose, r)) return false;
        }
        return true;
    }

    void replan(const RobotState& s) {
        const auto& m = scene_->planning_map;
        try {
            const Cell2 from = nearest_free_cell(m, cell_of(m, {s.pose.x, s.pose.y}));
            const Cell2 to = nearest_free_cell(m, cell_of(m, goal_));
            Path p = plan_astar(m, from, to);
            p.waypoints.push_back(goal_);
            path_ = std::move(p);
        } catch (const NoPathError&) {
            // keep tracking the previous plan, if any
        }
    }

    const Scene* scene_;
    Point2 goal_;
    double dt_;
    ExpertConfig cfg_;
    Path path_;
    int steps_ = 0;
    bool first_ = true;
    double prev_error_ = 0.0;
};

// ---------------------------------------------------------------- sensing

enum class ObservationMode { gt_depth_grid, omniscient_crop };

inline std::string to_string(ObservationMode m) {
    return m == ObservationMode::gt_depth_grid ? "gt_depth_grid" : "omniscient_crop";
}
inline ObservationMode parse_observation_mode(const std::string& s) {
    if (s == "gt_depth_grid") return ObservationMode::gt_depth_grid;
    if (s == "omniscient_crop") return ObservationMode::omniscient_crop;
    throw ConfigError("unknown observation mode '" + s + "'");
}

/// Robot-mounted depth camera and the robot-centric grid it fills. The
/// camera's max range is tied to the grid's forward extent.
struct SensorConfig {
    GridSpec grid = GridSpec::cube(64, 0.1f);
    int camera_width = 168;
    int camera_height = 94;
    double hfov = kPi / 2;
    double mount_height = 0.5;  // metres above the floor

    CameraModel camera() const { return {camera_width, camera_height, hfov, grid.extent_z()}; }
    CameraPose camera_pose(const Pose2& p) const { return {p.x, p.y, mount_height, p.heading}; }
    void validate() const {
        grid.validate();
        if (camera_width < 1 || camera_height < 1) throw ConfigError("camera resolution must be positive");
        if (!(hfov > 0 && hfov < kPi)) throw ConfigError("hfov must lie in (0, pi)");
    }
};

inline void to_json(nlohmann::json& j, const GridSpec& g) { j = {{"n", {g.nx, g.ny, g.nz}}, {"voxel", g.voxel}}; }
inline void from_json(const nlohmann::json& j, GridSpec& g) {
    const auto n = j.at("n").get<std::array<std::uint32_t, 3>>();
    g = {n[0], n[1], n[2], j.at("voxel").get<float>()};
}

inline void to_json(nlohmann::json& j, const SensorConfig& s) {
    j = {{"grid", s.grid},
         {"camera_width", s.camera_width},
         {"camera_height", s.camera_height},
         {"hfov", s.hfov},
         {"mount_height", s.mount_height}};
}
inline void from_json(const nlohmann::json& j, SensorConfig& s) {
    SensorConfig d;
    s.grid = j.value("grid", d.grid);
    s.camera_width = j.value("camera_width", d.camera_width);
    s.camera_height = j.value("camera_height", d.camera_height);
    s.hfov = j.value("hfov", d.hfov);
    s.mount_height = j.value("mount_height", d.mount_height);
}

inline VoxelGrid observe(const Scene& scene, const Pose2& pose, const SensorConfig& sensor, ObservationMode mode) {
    if (mode == ObservationMode::omniscient_crop)
        return egocentric_crop(scene.world_grid, sensor.camera_pose(pose), sensor.grid);
    return depth_to_grid(raycast_depth(scene.world_grid, sensor.camera_pose(pose), sensor.camera()), sensor.grid);
}

// ---------------------------------------------------------- demonstrations

struct Frame {
    VoxelGrid observation;
    std::array<float, 3> goal{};    // (d, cos, sin)
    std::array<float, 2> action{};  // (v, omega)
    std::array<float, 3> pose{};    // (x, y, heading)
    friend bool operator==(const Frame&, const Frame&) = default;
};

struct Demonstration {
    std::string scene_id;
    int episode = 0;
    StartGoal task;
    EpisodeStatus outcome = EpisodeStatus::Running;
    std::vector<Frame> frames;
};

struct Dataset {
    int version = 1;
    std::uint64_t seed = 0;
    GridSpec spec;
    ObservationMode mode = ObservationMode::gt_depth_grid;
    std::vector<std::string> scene_ids;
    std::vector<Demonstration> trajectories;

    std::size_t frame_count() const {
        std::size_t n = 0;
        for (auto& t : trajectories) n += t.frames.size();
        return n;
    }
};

struct CollectConfig {
    int per_scene = 100;
    ObservationMode mode = ObservationMode::gt_depth_grid;
    SensorConfig sensor;
    ExpertConfig expert;
    double success_radius = 0.36;
    int max_steps = 500;
    double dt = 1.0 / 30.0;
    double min_geodesic = 2.0;
    double max_geodesic = 6.0;       // keeps tasks drivable within max_steps
    int record_every = 1;            // keep every n-th frame
    double max_failure_rate = 0.2;   // per scene
    int workers = 1;
};

inline void to_json(nlohmann::json& j, const CollectConfig& c) {
    j = {{"per_scene", c.per_scene},       {"mode", to_string(c.mode)},     {"sensor", c.sensor},
         {"expert", c.expert},             {"success_radius", c.success_radius}, {"max_steps", c.max_steps},
         {"dt", c.dt},                     {"min_geodesic", c.min_geodesic},  {"max_geodesic", c.max_geodesic},
         {"record_every", c.record_every},
         {"max_failure_rate", c.max_failure_rate}};
}
inline void from_json(const nlohmann::json& j, CollectConfig& c) {
    CollectConfig d;
    c.per_scene = j.value("per_scene", d.per_scene);
    c.mode = parse_observation_mode(j.value("mode", to_string(d.mode)));
    c.sensor = j.value("sensor", d.sensor);
    c.expert = j.value("expert", d.expert);
    c.success_radius = j.value("success_radius", d.success_radius);
    c.max_steps = j.value("max_steps", d.max_steps);
    c.dt = j.value("dt", d.dt);
    c.min_geodesic = j.value("min_geodesic", d.min_geodesic);
    c.max_geodesic = j.value("max_geodesic", d.max_geodesic);
    c.record_every = j.value("record_every", d.record_every);
    c.max_failure_rate = j.value("max_failure_rate", d.max_failure_rate);
}

/// One expert rollout from `task`. Observations are only computed for
/// recorded frames.
inline Demonstration run_expert_episode(const Scene& scene, const StartGoal& task, const CollectConfig& cfg,
                                        bool record = true) {
    EpisodeConfig ep{task.goal, cfg.success_radius, cfg.max_steps, cfg.dt};
    ep.validate();
    ExpertController expert(scene, task.goal, cfg.dt, cfg.expert);
    RobotState state;
    state.pose = task.start;
    state.radius = scene.params.robot_radius;
    Demonstration demo;
    demo.scene_id = scene.id;
    demo.task = task;
    for (int step = 0;; ++step) {
        const EpisodeStatus st = episode_status(scene, state, ep, step);
        if (st != EpisodeStatus::Running) {
            demo.outcome = st;
            break;
        }
        const Action a = clamp_action(expert.act(state), cfg.expert.limits);
        if (record && step % cfg.record_every == 0) {
            Frame f;
            f.observation = observe(scene, state.pose, cfg.sensor, cfg.mode);
            f.goal = encode_goal(state.pose, task.goal).as_floats();
            f.action = {static_cast<float>(a.v), static_cast<float>(a.omega)};
            f.pose = {static_cast<float>(state.pose.x), static_cast<float>(state.pose.y),
                      static_cast<float>(state.pose.heading)};
            demo.frames.push_back(std::move(f));
        }
        state = step_kinematics(state, a, cfg.dt, cfg.expert.limits);
    }
    return demo;
}

/// `per_scene` successful expert trajectories for every scene. Failed
/// rollouts are discarded and resampled; a scene whose failure rate exceeds
/// max_failure_rate raises an error. Each episode draws from
/// derive_seed(seed, scene index, episode, attempt), so the result does not
/// depend on the worker count.
inline Dataset collect_demonstrations(const std::vector<Scene>& scenes, const CollectConfig& cfg, std::uint64_t seed) {
    if (cfg.per_scene < 1) throw ConfigError("per_scene must be >= 1");
    if (cfg.record_every < 1) throw ConfigError("record_every must be >= 1");
    cfg.sensor.validate();
    Dataset ds;
    ds.seed = seed;
    ds.spec = cfg.sensor.grid;
    ds.mode = cfg.mode;
    for (auto& s : scenes) ds.scene_ids.push_back(s.id);

    const std::size_t per = static_cast<std::size_t>(cfg.per_scene);
    const int max_attempts = std::max(1, static_cast<int>(std::ceil(1.0 / std::max(1e-9, 1.0 - cfg.max_failure_rate))) * 10);
    std::vector<Demonstration> out(scenes.size() * per);
    std::vector<int> failures(out.size(), 0);
    parallel_for(out.size(), cfg.workers, [&](std::size_t idx) {
        const std::size_t si = idx / per, e = idx % per;
        for (int attempt = 0; attempt < max_attempts; ++attempt) {
            const auto task = sample_start_goal(scenes[si], derive_seed(seed, si, e, attempt), cfg.min_geodesic, 200,
                                                cfg.max_geodesic);
            Demonstration d = run_expert_episode(scenes[si], task, cfg);
            if (d.outcome == EpisodeStatus::Success && !d.frames.empty()) {
                d.episode = static_cast<int>(e);
                out[idx] = std::move(d);
                return;
            }
            ++failures[idx];
        }
        throw Error("collect_demonstrations: expert failed " + std::to_string(max_attempts) + " times on scene " +
                    scenes[si].id + " episode " + std::to_string(e));
    });
    for (std::size_t si = 0; si < scenes.size(); ++si) {
        int fails = 0;
        for (std::size_t e = 0; e < per; ++e) fails += failures[si * per + e];
        const double rate = double(fails) / double(fails + cfg.per_scene);
        if (rate > cfg.max_failure_rate)
            throw Error("collect_demonstrations: expert failure rate " + std::to_string(rate) + " on scene " +
                        scenes[si].id + " exceeds " + std::to_string(cfg.max_failure_rate));
    }
    ds.trajectories = std::move(out);
    return ds;
}

// ------------------------------------------------------------- dataset IO

inline constexpr int kDatasetVersion = 1;

inline std::string trajectory_file_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "traj_%05zu.bin", i);
    return buf;
}

inline std::vector<unsigned char> encode_trajectory(const Demonstration& d) {
    ByteWriter w;
    for (const auto& f : d.frames) {
        ByteWriter rec;
        write_grid(rec, f.observation);
        rec.put_floats(f.goal);
        rec.put_floats(f.action);
        rec.put_floats(f.pose);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(rec.bytes().size()));
        w.put_bytes(rec.bytes());
    }
    return w.take();
}

inline std::vector<Frame> decode_trajectory(std::span<const unsigned char> bytes) {
    ByteReader r(bytes);
    std::vector<Frame> frames;
    while (r.remaining() > 0) {
        const auto len = r.get<std::uint32_t>();
        ByteReader rec(r.get_bytes(len));
        Frame f;
        f.observation = read_grid(rec);
        rec.get_floats(f.goal);
        rec.get_floats(f.action);
        rec.get_floats(f.pose);
        if (rec.remaining() != 0) throw CorruptError("trajectory record has trailing bytes");
        frames.push_back(std::move(f));
    }
    return frames;
}

inline nlohmann::json dataset_manifest(const Dataset& ds) {
    nlohmann::json traj = nlohmann::json::array();
    for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
        const auto& t = ds.trajectories[i];
        traj.push_back({{"file", trajectory_file_name(i)},
                        {"scene", t.scene_id},
                        {"episode", t.episode},
                        {"frames", t.frames.size()},
                        {"outcome", to_string(t.outcome)},
                        {"start", {t.task.start.x, t.task.start.y, t.task.start.heading}},
                        {"goal", {t.task.goal.x, t.task.goal.y}},
                        {"geodesic", t.task.geodesic}});
    }
    return {{"version", ds.version},      {"seed", ds.seed},       {"grid", ds.spec},
            {"mode", to_string(ds.mode)}, {"scenes", ds.scene_ids}, {"trajectories", traj}};
}

inline void save_dataset(const std::string& dir, const Dataset& ds) {
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < ds.trajectories.size(); ++i)
        write_file(dir + "/" + trajectory_file_name(i), encode_trajectory(ds.trajectories[i]));
    write_text(dir + "/manifest.json", dataset_manifest(ds).dump(2) + "\n");
}

inline Dataset load_dataset(const std::string& dir) {
    const std::string path = dir + "/manifest.json";
    if (!std::filesystem::exists(path)) throw DependencyError("no dataset manifest at " + path);
    Dataset ds;
    try {
        const auto j = nlohmann::json::parse(read_text(path));
        ds.version = j.at("version").get<int>();
        if (ds.version != kDatasetVersion)
            throw VersionError("dataset version " + std::to_string(ds.version) + " is not supported");
        ds.seed = j.at("seed").get<std::uint64_t>();
        ds.spec = j.at("grid").get<GridSpec>();
        ds.mode = parse_observation_mode(j.at("mode").get<std::string>());
        ds.scene_ids = j.at("scenes").get<std::vector<std::string>>();
        for (const auto& t : j.at("trajectories")) {
            Demonstration d;
            d.scene_id = t.at("scene").get<std::string>();
            d.episode = t.at("episode").get<int>();
            const auto st = t.at("start").get<std::array<double, 3>>();
            const auto g = t.at("goal").get<std::array<double, 2>>();
            d.task = {{st[0], st[1], st[2]}, {g[0], g[1]}, t.at("geodesic").get<double>()};
            d.outcome = t.at("outcome").get<std::string>() == "success" ? EpisodeStatus::Success : EpisodeStatus::Timeout;
            d.frames = decode_trajectory(read_file(dir + "/" + t.at("file").get<std::string>()));
            if (d.frames.size() != t.at("frames").get<std::size_t>())
                throw CorruptError("trajectory " + t.at("file").get<std::string>() + " frame count mismatch");
            for (auto& f : d.frames)
                if (f.observation.spec() != ds.spec) throw CorruptError("trajectory grid spec differs from manifest");
            ds.trajectories.push_back(std::move(d));
        }
    } catch (const nlohmann::json::exception& e) {
        throw CorruptError("dataset manifest " + path + ": " + e.what());
    }
    return ds;
}

}  // namespace voxnav
