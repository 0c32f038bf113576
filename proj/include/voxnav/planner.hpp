// Grid planning for the privileged expert: obstacle inflation and 8-connected A*.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <cstdint>
#include <queue>
#include <vector>

#include "voxnav/common.hpp"
#include "voxnav/voxgrid.hpp"

namespace voxnav {

struct Cell2 {
    int i = 0;
    int j = 0;
    friend bool operator==(const Cell2&, const Cell2&) = default;
};

struct Point2 {
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(const Point2&, const Point2&) = default;
};

inline double distance(Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// Dilation by a Euclidean disk: a cell becomes occupied when its centre is
/// within `radius` metres of an occupied cell's centre.
inline FloorMap inflate_occupancy(const FloorMap& map, double radius) {
    if (radius < 0) throw Error("inflate_occupancy: negative radius");
    const double rc = radius / map.cell_size;
    const int reach = static_cast<int>(std::floor(rc + 1e-9));
    std::vector<Cell2> offsets;
    for (int dj = -reach; dj <= reach; ++dj)
        for (int di = -reach; di <= reach; ++di)
            if (di * di + dj * dj <= rc * rc + 1e-9) offsets.push_back({di, dj});
    FloorMap out = map;
    for (int j = 0; j < map.height; ++j)
        for (int i = 0; i < map.width; ++i) {
            if (!map.occupied(i, j)) continue;
            for (auto o : offsets)
                if (map.in_bounds(i + o.i, j + o.j)) out.set(i + o.i, j + o.j);
        }
    return out;
}

/// Cost of a grid path counted as straight and diagonal moves; the value
/// a + b·√2 is compared numerically but reported exactly.
struct GridCost {
    long straight = 0;
    long diagonal = 0;
    double value() const { return static_cast<double>(straight) + static_cast<double>(diagonal) * std::numbers::sqrt2; }
    friend bool operator==(const GridCost&, const GridCost&) = default;
};

struct Path {
    std::vector<Cell2> cells;
    std::vector<Point2> waypoints;  // cell centres in metres
    GridCost cost;                   // in cells
    double total_length = 0.0;       // metres, sum of segment lengths
};

inline double octile(Cell2 a, Cell2 b) {
    const double dx = std::abs(a.i - b.i), dy = std::abs(a.j - b.j);
    return std::max(dx, dy) + (std::numbers::sqrt2 - 1.0) * std::min(dx, dy);
}

namespace detail {
inline constexpr int kDi[8] = {1, -1, 0, 0, 1, 1, -1, -1};
inline constexpr int kDj[8] = {0, 0, 1, -1, 1, -1, 1, -1};
}  // namespace detail

/// Whether the 8-connected move from `c` in direction k is allowed. Diagonal
/// moves need both adjacent cardinal cells free.
inline bool move_allowed(const FloorMap& m, Cell2 c, int k) {
    const int ni = c.i + detail::kDi[k], nj = c.j + detail::kDj[k];
    if (m.blocked(ni, nj)) return false;
    if (k >= 4 && (m.blocked(c.i + detail::kDi[k], c.j) || m.blocked(c.i, c.j + detail::kDj[k]))) return false;
    return true;
}

/// Minimum-cost 8-connected path with an octile heuristic.
inline Path plan_astar(const FloorMap& map, Cell2 start, Cell2 goal) {
    if (map.blocked(start.i, start.j)) throw NoPathError("start cell is not free");
    if (map.blocked(goal.i, goal.j)) throw NoPathError("goal cell is not free");

    const std::size_t n = map.cells.size();
    std::vector<GridCost> g(n);
    std::vector<double> gv(n, std::numeric_limits<double>::infinity());
    std::vector<std::int32_t> parent(n, -1);
    std::vector<std::uint8_t> closed(n, 0);

    struct Entry {
        double f;
        double h;
        std::uint64_t order;
        std::int32_t idx;
        bool operator<(const Entry& o) const {  // max-heap inverted
            if (f != o.f) return f > o.f;
            if (h != o.h) return h > o.h;
            return order > o.order;
        }
    };
    std::priority_queue<Entry> open;
    std::uint64_t counter = 0;
    const auto si = static_cast<std::int32_t>(map.index(start.i, start.j));
    const auto gi = static_cast<std::int32_t>(map.index(goal.i, goal.j));
    gv[si] = 0.0;
    open.push({octile(start, goal), octile(start, goal), counter++, si});

    while (!open.empty()) {
        const Entry e = open.top();
        open.pop();
        if (closed[e.idx]) continue;
        closed[e.idx] = 1;
        if (e.idx == gi) break;
        const Cell2 c{e.idx % map.width, e.idx / map.width};
        for (int k = 0; k < 8; ++k) {
            if (!move_allowed(map, c, k)) continue;
            const Cell2 nc{c.i + detail::kDi[k], c.j + detail::kDj[k]};
            const auto ni = static_cast<std::int32_t>(map.index(nc.i, nc.j));
            if (closed[ni]) continue;
            GridCost cand = g[e.idx];
            (k < 4 ? cand.straight : cand.diagonal) += 1;
            const double cv = cand.value();
            if (cv < gv[ni]) {
                gv[ni] = cv;
                g[ni] = cand;
                parent[ni] = e.idx;
                const double h = octile(nc, goal);
                open.push({cv + h, h, counter++, ni});
            }
        }
    }
    if (!closed[gi]) throw NoPathError("goal unreachable");

    Path p;
    p.cost = g[gi];
    for (std::int32_t at = gi; at != -1; at = parent[at]) p.cells.push_back({at % map.width, at / map.width});
    std::reverse(p.cells.begin(), p.cells.end());
    for (auto c : p.cells) p.waypoints.push_back({map.center_x(c.i), map.center_y(c.j)});
    for (std::size_t k = 1; k < p.waypoints.size(); ++k) p.total_length += distance(p.waypoints[k - 1], p.waypoints[k]);
    return p;
}

/// Nearest free cell by breadth-first search (4-connected), or the input
/// itself when it is already free. Throws NoPathError if the map has none.
inline Cell2 nearest_free_cell(const FloorMap& map, Cell2 c) {
    c.i = std::clamp(c.i, 0, map.width - 1);
    c.j = std::clamp(c.j, 0, map.height - 1);
    if (!map.occupied(c.i, c.j)) return c;
    std::vector<std::uint8_t> seen(map.cells.size(), 0);
    std::queue<Cell2> q;
    q.push(c);
    seen[map.index(c.i, c.j)] = 1;
    while (!q.empty()) {
        const Cell2 cur = q.front();
        q.pop();
        if (!map.occupied(cur.i, cur.j)) return cur;
        for (int k = 0; k < 4; ++k) {
            const Cell2 nb{cur.i + detail::kDi[k], cur.j + detail::kDj[k]};
            if (!map.in_bounds(nb.i, nb.j) || seen[map.index(nb.i, nb.j)]) continue;
            seen[map.index(nb.i, nb.j)] = 1;
            q.push(nb);
        }
    }
    throw NoPathError("map has no free cell");
}

}  // namespace voxnav
