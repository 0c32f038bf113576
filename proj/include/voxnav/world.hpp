// Procedural scenes, unicycle kinematics, collision checks and episode
// termination rules.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "voxnav/common.hpp"
#include "voxnav/planner.hpp"
#include "voxnav/voxgrid.hpp"

namespace voxnav {

enum class Layout { rooms, maze, clutter };

inline std::string to_string(Layout l) {
    switch (l) {
        case Layout::rooms: return "rooms";
        case Layout::maze: return "maze";
        case Layout::clutter: return "clutter";
    }
    return "?";
}

inline Layout parse_layout(const std::string& s) {
    if (s == "rooms") return Layout::rooms;
    if (s == "maze") return Layout::maze;
    if (s == "clutter") return Layout::clutter;
    throw ConfigError("unknown layout '" + s + "' (expected rooms, maze or clutter)");
}

struct SceneParams {
    double size_x = 8.0;  // metres
    double size_y = 8.0;
    double cell_size = 0.1;
    double obstacle_density = 0.08;  // occupied fraction of the interior, walls included
    Layout layout = Layout::clutter;
    double obstacle_height = 1.6;
    double robot_radius = 0.18;
    double robot_height = 1.0;
    /// Extra clearance added to the robot radius for planning and for the
    /// feasible start/goal set.
    double planning_margin = 0.2;
    int max_retries = 20;

    double inflation_radius() const { return robot_radius + planning_margin; }
    void validate() const {
        if (!(obstacle_density >= 0.0 && obstacle_density <= 0.5))
            throw ConfigError("obstacle_density must be in [0, 0.5]");
        if (!(cell_size > 0) || !(size_x >= 4 * cell_size) || !(size_y >= 4 * cell_size))
            throw ConfigError("scene size must span at least four cells");
        if (!(robot_radius > 0)) throw ConfigError("robot_radius must be positive");
        if (!(obstacle_height > 0)) throw ConfigError("obstacle_height must be positive");
    }
};

inline void to_json(nlohmann::json& j, const SceneParams& p) {
    j = {{"size_x", p.size_x},
         {"size_y", p.size_y},
         {"cell_size", p.cell_size},
         {"obstacle_density", p.obstacle_density},
         {"layout", to_string(p.layout)},
         {"obstacle_height", p.obstacle_height},
         {"robot_radius", p.robot_radius},
         {"robot_height", p.robot_height},
         {"planning_margin", p.planning_margin},
         {"max_retries", p.max_retries}};
}

inline void from_json(const nlohmann::json& j, SceneParams& p) {
    SceneParams d;
    p.size_x = j.value("size_x", d.size_x);
    p.size_y = j.value("size_y", d.size_y);
    p.cell_size = j.value("cell_size", d.cell_size);
    p.obstacle_density = j.value("obstacle_density", d.obstacle_density);
    p.layout = parse_layout(j.value("layout", to_string(d.layout)));
    p.obstacle_height = j.value("obstacle_height", d.obstacle_height);
    p.robot_radius = j.value("robot_radius", d.robot_radius);
    p.robot_height = j.value("robot_height", d.robot_height);
    p.planning_margin = j.value("planning_margin", d.planning_margin);
    p.max_retries = j.value("max_retries", d.max_retries);
}

struct Scene {
    std::string id;
    SceneParams params;
    std::uint64_t seed = 0;
    VoxelGrid world_grid;
    FloorMap floor_map;
    FloorMap planning_map;         // floor map inflated by params.inflation_radius()
    std::vector<Cell2> free_cells;  // largest connected free region of planning_map
};

/// Largest 8-connected component of free cells, using the same move rule as
/// the planner.
inline std::vector<Cell2> largest_free_region(const FloorMap& m) {
    std::vector<int> label(m.cells.size(), -1);
    std::vector<Cell2> best;
    int next_label = 0;
    std::vector<Cell2> stack, comp;
    for (int j = 0; j < m.height; ++j)
        for (int i = 0; i < m.width; ++i) {
            if (m.occupied(i, j) || label[m.index(i, j)] >= 0) continue;
            comp.clear();
            stack.push_back({i, j});
            label[m.index(i, j)] = next_label;
            while (!stack.empty()) {
                Cell2 c = stack.back();
                stack.pop_back();
                comp.push_back(c);
                for (int k = 0; k < 8; ++k) {
                    if (!move_allowed(m, c, k)) continue;
                    Cell2 n{c.i + detail::kDi[k], c.j + detail::kDj[k]};
                    auto& l = label[m.index(n.i, n.j)];
                    if (l >= 0) continue;
                    l = next_label;
                    stack.push_back(n);
                }
            }
            ++next_label;
            if (comp.size() > best.size()) best = comp;
        }
    std::sort(best.begin(), best.end(), [&](Cell2 a, Cell2 b) { return m.index(a.i, a.j) < m.index(b.i, b.j); });
    return best;
}

namespace detail {

inline void fill_rect(FloorMap& m, int i0, int j0, int i1, int j1) {
    for (int j = std::max(j0, 0); j <= std::min(j1, m.height - 1); ++j)
        for (int i = std::max(i0, 0); i <= std::min(i1, m.width - 1); ++i) m.set(i, j);
}

inline double interior_fraction(const FloorMap& m) {
    std::size_t occ = 0, tot = 0;
    for (int j = 1; j < m.height - 1; ++j)
        for (int i = 1; i < m.width - 1; ++i) {
            ++tot;
            occ += m.occupied(i, j);
        }
    return tot ? static_cast<double>(occ) / static_cast<double>(tot) : 0.0;
}

/// Random boxes until the interior reaches the target density. A box is
/// rejected when it would shrink the connected free region of the inflated
/// map below 35% of the area, so clutter never seals off doorways.
inline void add_clutter(FloorMap& m, const SceneParams& p, Rng& rng) {
    const int min_side = std::max(1, static_cast<int>(std::lround(0.3 / p.cell_size)));
    const int max_side = std::max(min_side, static_cast<int>(std::lround(1.0 / p.cell_size)));
    const double min_region = 0.35 * double(m.width) * double(m.height);
    int rejected_in_a_row = 0;
    for (int attempt = 0; attempt < 4000 && rejected_in_a_row < 50 && interior_fraction(m) < p.obstacle_density;
         ++attempt) {
        const int w = min_side + static_cast<int>(rng.below(std::uint64_t(max_side - min_side + 1)));
        const int h = min_side + static_cast<int>(rng.below(std::uint64_t(max_side - min_side + 1)));
        const int i0 = 1 + static_cast<int>(rng.below(std::uint64_t(std::max(1, m.width - 2 - w))));
        const int j0 = 1 + static_cast<int>(rng.below(std::uint64_t(std::max(1, m.height - 2 - h))));
        FloorMap trial = m;
        fill_rect(trial, i0, j0, i0 + w - 1, j0 + h - 1);
        if (double(largest_free_region(inflate_occupancy(trial, p.inflation_radius())).size()) < min_region) {
            ++rejected_in_a_row;
            continue;
        }
        rejected_in_a_row = 0;
        m = std::move(trial);
    }
}

/// Wall along x = i (vertical) from j0..j1 with a door gap.
inline void wall_with_door(FloorMap& m, bool vertical, int at, int lo, int hi, int door, Rng& rng) {
    const int span = hi - lo + 1;
    const int gap_start = lo + static_cast<int>(rng.below(std::uint64_t(std::max(1, span - door))));
    for (int t = lo; t <= hi; ++t) {
        if (t >= gap_start && t < gap_start + door) continue;
        if (vertical)
            m.set(at, t);
        else
            m.set(t, at);
    }
}

inline void add_rooms(FloorMap& m, const SceneParams& p, Rng& rng) {
    const int door = std::max(2, static_cast<int>(std::lround(1.2 / p.cell_size)));
    const int wx = static_cast<int>(m.width * rng.uniform(0.35, 0.65));
    const int wy = static_cast<int>(m.height * rng.uniform(0.35, 0.65));
    wall_with_door(m, true, wx, 1, wy - 1, door, rng);
    wall_with_door(m, true, wx, wy + 1, m.height - 2, door, rng);
    wall_with_door(m, false, wy, 1, wx - 1, door, rng);
    wall_with_door(m, false, wy, wx + 1, m.width - 2, door, rng);
    m.set(wx, wy);
}

inline void add_maze(FloorMap& m, const SceneParams& p, Rng& rng) {
    const int cs = std::max(4, static_cast<int>(std::lround(2.0 / p.cell_size)));
    const int cw = std::max(1, (m.width - 1) / cs), ch = std::max(1, (m.height - 1) / cs);
    if (cw * ch < 2) return;
    // Start with every coarse wall present, then carve a spanning tree.
    std::vector<std::uint8_t> east(std::size_t(cw) * ch, 1), north(std::size_t(cw) * ch, 1), seen(std::size_t(cw) * ch, 0);
    std::vector<int> stack{0};
    seen[0] = 1;
    while (!stack.empty()) {
        const int c = stack.back();
        const int ci = c % cw, cj = c / cw;
        int opts[4], n = 0;
        if (ci + 1 < cw && !seen[c + 1]) opts[n++] = 0;
        if (ci > 0 && !seen[c - 1]) opts[n++] = 1;
        if (cj + 1 < ch && !seen[c + cw]) opts[n++] = 2;
        if (cj > 0 && !seen[c - cw]) opts[n++] = 3;
        if (n == 0) {
            stack.pop_back();
            continue;
        }
        const int o = opts[rng.below(std::uint64_t(n))];
        int nb = c;
        if (o == 0) { east[c] = 0; nb = c + 1; }
        if (o == 1) { east[c - 1] = 0; nb = c - 1; }
        if (o == 2) { north[c] = 0; nb = c + cw; }
        if (o == 3) { north[c - cw] = 0; nb = c - cw; }
        seen[nb] = 1;
        stack.push_back(nb);
    }
    for (int cj = 0; cj < ch; ++cj)
        for (int ci = 0; ci < cw; ++ci) {
            const int c = ci + cw * cj;
            const int x = (ci + 1) * cs, y = (cj + 1) * cs;
            if (ci + 1 < cw && east[c]) fill_rect(m, x, cj * cs, x, y);
            if (cj + 1 < ch && north[c]) fill_rect(m, ci * cs, y, x, y);
        }
}

}  // namespace detail

/// Builds a deterministic scene for `seed`. Retries with derived seeds until
/// the largest connected free region covers at least 30% of the map.
inline Scene generate_scene(const SceneParams& params, std::uint64_t seed) {
    params.validate();
    const int w = static_cast<int>(std::lround(params.size_x / params.cell_size));
    const int h = static_cast<int>(std::lround(params.size_y / params.cell_size));
    const auto nzw = static_cast<std::uint32_t>(std::ceil(params.obstacle_height / params.cell_size - 1e-9));
    for (int attempt = 0; attempt <= params.max_retries; ++attempt) {
        Rng rng(derive_seed(seed, attempt));
        FloorMap layout(w, h, params.cell_size);
        detail::fill_rect(layout, 0, 0, w - 1, 0);
        detail::fill_rect(layout, 0, h - 1, w - 1, h - 1);
        detail::fill_rect(layout, 0, 0, 0, h - 1);
        detail::fill_rect(layout, w - 1, 0, w - 1, h - 1);
        if (params.obstacle_density > 0) {
            if (params.layout == Layout::rooms) detail::add_rooms(layout, params, rng);
            if (params.layout == Layout::maze) detail::add_maze(layout, params, rng);
            detail::add_clutter(layout, params, rng);
        }

        Scene s;
        s.params = params;
        s.seed = seed;
        s.id = to_string(params.layout) + "-" + std::to_string(seed);
        s.world_grid = VoxelGrid({static_cast<std::uint32_t>(w), static_cast<std::uint32_t>(h), nzw,
                                  static_cast<float>(params.cell_size)});
        for (int j = 0; j < h; ++j)
            for (int i = 0; i < w; ++i)
                if (layout.occupied(i, j))
                    for (std::uint32_t k = 0; k < nzw; ++k)
                        s.world_grid.set(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j), k);
        s.floor_map = project_to_floor(s.world_grid, params.robot_height);
        s.planning_map = inflate_occupancy(s.floor_map, params.inflation_radius());
        s.free_cells = largest_free_region(s.planning_map);
        if (static_cast<double>(s.free_cells.size()) >= 0.3 * static_cast<double>(w) * h) return s;
    }
    throw Error("generate_scene: no feasible free region after " + std::to_string(params.max_retries + 1) +
                " attempts (seed " + std::to_string(seed) + ")");
}

/// Scene assembled from an explicit floor map; used for hand-built layouts.
inline Scene scene_from_floor(const std::string& id, const FloorMap& floor, const SceneParams& params) {
    Scene s;
    s.id = id;
    s.params = params;
    const auto nzw = static_cast<std::uint32_t>(std::ceil(params.obstacle_height / floor.cell_size - 1e-9));
    s.world_grid = VoxelGrid({static_cast<std::uint32_t>(floor.width), static_cast<std::uint32_t>(floor.height), nzw,
                              static_cast<float>(floor.cell_size)});
    for (int j = 0; j < floor.height; ++j)
        for (int i = 0; i < floor.width; ++i)
            if (floor.occupied(i, j))
                for (std::uint32_t k = 0; k < nzw; ++k)
                    s.world_grid.set(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j), k);
    s.floor_map = project_to_floor(s.world_grid, params.robot_height);
    s.planning_map = inflate_occupancy(s.floor_map, params.inflation_radius());
    s.free_cells = largest_free_region(s.planning_map);
    return s;
}

// -------------------------------------------------------------- kinematics

struct Pose2 {
    double x = 0.0;
    double y = 0.0;
    double heading = 0.0;  // radians, (-pi, pi]
    friend bool operator==(const Pose2&, const Pose2&) = default;
};

struct Action {
    double v = 0.0;      // m/s
    double omega = 0.0;  // rad/s
    friend bool operator==(const Action&, const Action&) = default;
};

struct KinematicLimits {
    double v_max = 0.5;
    double omega_max = 1.0;
};

inline Action clamp_action(Action a, const KinematicLimits& lim) {
    return {std::clamp(a.v, 0.0, lim.v_max), std::clamp(a.omega, -lim.omega_max, lim.omega_max)};
}

struct RobotState {
    Pose2 pose;
    double radius = 0.18;
    Action last_action;
};

/// Forward-Euler unicycle step with actuator clamping.
inline RobotState step_kinematics(const RobotState& s, Action a, double dt, const KinematicLimits& lim = {}) {
    if (!std::isfinite(a.v) || !std::isfinite(a.omega)) throw Error("step_kinematics: non-finite action");
    a = clamp_action(a, lim);
    RobotState n = s;
    n.pose.x = s.pose.x + a.v * std::cos(s.pose.heading) * dt;
    n.pose.y = s.pose.y + a.v * std::sin(s.pose.heading) * dt;
    n.pose.heading = wrap_angle(s.pose.heading + a.omega * dt);
    n.last_action = a;
    return n;
}

/// True iff the robot disk overlaps an occupied (or out-of-map) floor cell.
inline bool check_collision(const FloorMap& map, const Pose2& p, double radius) {
    const double c = map.cell_size;
    if (!(p.x >= 0 && p.y >= 0 && p.x < map.width * c && p.y < map.height * c)) return true;
    const int i0 = static_cast<int>(std::floor((p.x - radius) / c)), i1 = static_cast<int>(std::floor((p.x + radius) / c));
    const int j0 = static_cast<int>(std::floor((p.y - radius) / c)), j1 = static_cast<int>(std::floor((p.y + radius) / c));
    for (int j = j0; j <= j1; ++j)
        for (int i = i0; i <= i1; ++i) {
            if (!map.blocked(i, j)) continue;
            const double qx = std::clamp(p.x, i * c, (i + 1) * c), qy = std::clamp(p.y, j * c, (j + 1) * c);
            if ((qx - p.x) * (qx - p.x) + (qy - p.y) * (qy - p.y) <= radius * radius) return true;
        }
    return false;
}

inline bool check_collision(const Scene& scene, const RobotState& s) {
    return check_collision(scene.floor_map, s.pose, s.radius);
}

// ---------------------------------------------------------------- episodes

struct EpisodeConfig {
    Point2 goal;
    double success_radius = 0.36;
    int max_steps = 500;
    double dt = 1.0 / 30.0;

    void validate() const {
        if (!(success_radius > 0)) throw ConfigError("success_radius must be positive");
        if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
        if (!(dt > 0)) throw ConfigError("dt must be positive");
    }
};

enum class EpisodeStatus { Running, Success, Collision, Timeout };

inline std::string to_string(EpisodeStatus s) {
    switch (s) {
        case EpisodeStatus::Running: return "running";
        case EpisodeStatus::Success: return "success";
        case EpisodeStatus::Collision: return "collision";
        case EpisodeStatus::Timeout: return "timeout";
    }
    return "?";
}

/// Success > Collision > Timeout.
inline EpisodeStatus episode_status(const Scene& scene, const RobotState& s, const EpisodeConfig& cfg, int step_count) {
    if (distance({s.pose.x, s.pose.y}, cfg.goal) <= cfg.success_radius) return EpisodeStatus::Success;
    if (check_collision(scene, s)) return EpisodeStatus::Collision;
    if (step_count >= cfg.max_steps) return EpisodeStatus::Timeout;
    return EpisodeStatus::Running;
}

// ---------------------------------------------------------------- sampling

struct StartGoal {
    Pose2 start;
    Point2 goal;
    double geodesic = 0.0;  // metres along the planning map
};

inline Cell2 cell_of(const FloorMap& m, Point2 p) { return {m.cell_of(p.x), m.cell_of(p.y)}; }

/// Random start and goal from the scene's feasible cells, at least
/// `min_geodesic` and at most `max_geodesic` metres apart along the planning
/// map.
inline StartGoal sample_start_goal(const Scene& scene, std::uint64_t seed, double min_geodesic = 2.0, int max_tries = 200,
                                   double max_geodesic = std::numeric_limits<double>::infinity()) {
    if (scene.free_cells.empty()) throw Error("sample_start_goal: scene has no feasible cells");
    Rng rng(seed);
    const auto& m = scene.planning_map;
    for (int t = 0; t < max_tries; ++t) {
        const Cell2 a = scene.free_cells[rng.below(scene.free_cells.size())];
        const Cell2 b = scene.free_cells[rng.below(scene.free_cells.size())];
        const double heading = wrap_angle(rng.uniform(-kPi, kPi));
        if (a == b) continue;
        const Point2 pa{m.center_x(a.i), m.center_y(a.j)}, pb{m.center_x(b.i), m.center_y(b.j)};
        if (distance(pa, pb) + 1e-9 < min_geodesic || distance(pa, pb) > max_geodesic) continue;
        try {
            const Path p = plan_astar(m, a, b);
            if (p.total_length + 1e-9 < min_geodesic) continue;
            if (p.total_length > max_geodesic) continue;
            return {{pa.x, pa.y, heading}, pb, p.total_length};
        } catch (const NoPathError&) {
            continue;
        }
    }
    throw Error("sample_start_goal: no start/goal pair with geodesic >= " + std::to_string(min_geodesic) + " m in " +
                std::to_string(max_tries) + " tries");
}

// --------------------------------------------------------------- scene IO

/// Writes `<dir>/<id>.json` (manifest) and `<dir>/<id>.grid` (voxel blob).
inline void save_scene(const std::string& dir, const Scene& s) {
    std::filesystem::create_directories(dir);
    const auto& g = s.world_grid.spec();
    nlohmann::json j = {{"id", s.id},
                        {"seed", s.seed},
                        {"dims", {g.nx, g.ny, g.nz}},
                        {"cell_size", s.params.cell_size},
                        {"params", s.params},
                        {"grid_file", s.id + ".grid"}};
    write_text(dir + "/" + s.id + ".json", j.dump(2) + "\n");
    write_file(dir + "/" + s.id + ".grid", serialize_grid(s.world_grid));
}

/// Regenerates the scene from its manifest and checks it against the blob.
inline Scene load_scene(const std::string& manifest_path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        throw CorruptError("scene manifest " + manifest_path + ": " + e.what());
    }
    const auto params = j.at("params").get<SceneParams>();
    Scene s = generate_scene(params, j.at("seed").get<std::uint64_t>());
    const auto dir = std::filesystem::path(manifest_path).parent_path();
    const auto blob = read_file((dir / j.at("grid_file").get<std::string>()).string());
    if (deserialize_grid(blob) != s.world_grid)
        throw CorruptError("scene " + s.id + ": stored grid differs from regeneration");
    return s;
}

}  // namespace voxnav
