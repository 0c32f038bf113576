// Voxel occupancy grids: representation, IoU losses, resolution changes,
// simulated depth sensing and depth-to-grid conversion.
//
// Two frames are used throughout:
//   * robot-centric grids: x points left, y up, z forward. The origin sits at
//     the camera; x and y are centred on it, z starts at it.
//   * world grids: index axes (i, j, k) = (world x, world y, height), origin
//     at the world corner, voxel (i, j, k) covering [i*l, (i+1)*l) etc.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "voxnav/common.hpp"

namespace voxnav {

struct GridSpec {
    std::uint32_t nx = 64;
    std::uint32_t ny = 64;
    std::uint32_t nz = 64;
    float voxel = 0.1f;  // side length in metres

    static GridSpec cube(std::uint32_t n, float voxel) { return {n, n, n, voxel}; }

    void validate() const {
        if (nx < 1 || ny < 1 || nz < 1) throw ShapeError("grid dimensions must be >= 1");
        if (!(voxel > 0.0f) || !std::isfinite(voxel)) throw ShapeError("voxel size must be positive");
    }
    std::size_t cell_count() const { return std::size_t{nx} * ny * nz; }
    double extent_x() const { return nx * double{voxel}; }
    double extent_y() const { return ny * double{voxel}; }
    double extent_z() const { return nz * double{voxel}; }

    friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

inline std::string to_string(const GridSpec& s) {
    return std::to_string(s.nx) + "x" + std::to_string(s.ny) + "x" + std::to_string(s.nz) + "@" +
           std::to_string(s.voxel);
}

/// Binary occupancy volume; cells stored x-fastest, then y, then z.
class VoxelGrid {
public:
    VoxelGrid() : VoxelGrid(GridSpec::cube(1, 1.0f)) {}
    explicit VoxelGrid(const GridSpec& spec) : spec_(spec) {
        spec_.validate();
        cells_.assign(spec_.cell_count(), 0);
    }

    const GridSpec& spec() const { return spec_; }
    std::size_t size() const { return cells_.size(); }

    std::size_t index(std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
        return x + std::size_t{spec_.nx} * (y + std::size_t{spec_.ny} * z);
    }
    bool in_bounds(long x, long y, long z) const {
        return x >= 0 && y >= 0 && z >= 0 && x < long(spec_.nx) && y < long(spec_.ny) && z < long(spec_.nz);
    }
    bool at(std::uint32_t x, std::uint32_t y, std::uint32_t z) const { return cells_[index(x, y, z)] != 0; }
    void set(std::uint32_t x, std::uint32_t y, std::uint32_t z, bool v = true) { cells_[index(x, y, z)] = v ? 1 : 0; }
    bool operator[](std::size_t i) const { return cells_[i] != 0; }
    void set_index(std::size_t i, bool v = true) { cells_[i] = v ? 1 : 0; }

    std::size_t occupied_count() const {
        return static_cast<std::size_t>(std::count(cells_.begin(), cells_.end(), std::uint8_t{1}));
    }
    bool empty() const { return occupied_count() == 0; }
    std::span<const std::uint8_t> cells() const { return cells_; }
    void fill(bool v) { std::fill(cells_.begin(), cells_.end(), v ? 1 : 0); }

    /// Cell values as floats in {0, 1}, appended to `out`.
    void append_floats(std::vector<float>& out) const {
        out.reserve(out.size() + cells_.size());
        for (auto c : cells_) out.push_back(c ? 1.0f : 0.0f);
    }

    friend bool operator==(const VoxelGrid&, const VoxelGrid&) = default;

private:
    GridSpec spec_;
    std::vector<std::uint8_t> cells_;
};

/// Occupancy probabilities in [0, 1] (network output before thresholding).
class ProbGrid {
public:
    explicit ProbGrid(const GridSpec& spec, float fill = 0.0f) : spec_(spec) {
        spec_.validate();
        values_.assign(spec_.cell_count(), fill);
    }
    ProbGrid(const GridSpec& spec, std::vector<float> values) : spec_(spec), values_(std::move(values)) {
        spec_.validate();
        if (values_.size() != spec_.cell_count()) throw ShapeError("probability grid size mismatch");
        for (float v : values_)
            if (!(v >= 0.0f && v <= 1.0f)) throw Error("probability out of [0,1]");
    }
    static ProbGrid from(const VoxelGrid& g) {
        std::vector<float> v;
        g.append_floats(v);
        return {g.spec(), std::move(v)};
    }

    const GridSpec& spec() const { return spec_; }
    std::span<const float> values() const { return values_; }
    std::span<float> values() { return values_; }

    VoxelGrid threshold(float t = 0.5f) const {
        VoxelGrid g(spec_);
        for (std::size_t i = 0; i < values_.size(); ++i) g.set_index(i, values_[i] >= t);
        return g;
    }

private:
    GridSpec spec_;
    std::vector<float> values_;
};

// ------------------------------------------------------------------ losses

/// 1 - |G ∩ Ĝ| / |G ∪ Ĝ|; 0 when both grids are empty.
inline double iou_loss(const VoxelGrid& g, const VoxelGrid& g_hat) {
    if (g.spec() != g_hat.spec()) throw ShapeError("iou_loss: grid specs differ");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        const bool a = g[i], b = g_hat[i];
        inter += (a && b);
        uni += (a || b);
    }
    if (uni == 0) return 0.0;
    return 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
}

inline constexpr double kSoftIouEps = 1e-7;

/// Differentiable IoU loss on raw arrays:
///   1 - Σ t·p / (Σ (t + p - t·p) + eps)
/// Writes d loss / d p into `grad` when it is non-empty. Two empty volumes
/// agree perfectly: loss 0, zero gradient.
inline double soft_iou(std::span<const float> target, std::span<const float> pred, std::span<float> grad = {}) {
    if (target.size() != pred.size()) throw ShapeError("soft_iou: size mismatch");
    double inter = 0.0, uni = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double t = target[i], p = pred[i];
        inter += t * p;
        uni += t + p - t * p;
    }
    if (uni == 0.0) {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0f);
        return 0.0;
    }
    const double denom = uni + kSoftIouEps;
    if (!grad.empty()) {
        if (grad.size() != pred.size()) throw ShapeError("soft_iou: gradient size mismatch");
        // d/dp [1 - I/U] = -(t·U - I·(1 - t)) / U²
        const double inv2 = 1.0 / (denom * denom);
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double t = target[i];
            grad[i] = static_cast<float>(-(t * denom - inter * (1.0 - t)) * inv2);
        }
    }
    return 1.0 - inter / denom;
}

struct SoftIouResult {
    double loss = 0.0;
    std::vector<float> grad;  // d loss / d ĝ, one entry per cell
};

inline SoftIouResult soft_iou_loss(const VoxelGrid& g, const ProbGrid& g_hat) {
    if (g.spec() != g_hat.spec()) throw ShapeError("soft_iou_loss: grid specs differ");
    std::vector<float> target;
    g.append_floats(target);
    SoftIouResult r;
    r.grad.resize(target.size());
    r.loss = soft_iou(target, g_hat.values(), r.grad);
    return r;
}

// ---------------------------------------------------------- resolution

/// Coarse voxel is occupied iff any voxel of its factor³ block is occupied.
inline VoxelGrid downsample(const VoxelGrid& g, std::uint32_t factor) {
    const auto& s = g.spec();
    if (factor == 0 || s.nx % factor || s.ny % factor || s.nz % factor)
        throw ShapeError("downsample: factor " + std::to_string(factor) + " does not divide " + to_string(s));
    if (factor == 1) return g;
    VoxelGrid out({s.nx / factor, s.ny / factor, s.nz / factor, s.voxel * static_cast<float>(factor)});
    for (std::uint32_t z = 0; z < s.nz; ++z)
        for (std::uint32_t y = 0; y < s.ny; ++y)
            for (std::uint32_t x = 0; x < s.nx; ++x)
                if (g.at(x, y, z)) out.set(x / factor, y / factor, z / factor);
    return out;
}

// ----------------------------------------------------------- 2D floor map

/// 2D occupancy over the world floor; cell (i, j) covers
/// [i*cell, (i+1)*cell) x [j*cell, (j+1)*cell).
struct FloorMap {
    int width = 0;
    int height = 0;
    double cell_size = 0.1;
    std::vector<std::uint8_t> cells;

    FloorMap() = default;
    FloorMap(int w, int h, double cell) : width(w), height(h), cell_size(cell), cells(std::size_t(w) * h, 0) {
        if (w < 1 || h < 1 || !(cell > 0)) throw ShapeError("floor map dimensions must be positive");
    }

    bool in_bounds(int i, int j) const { return i >= 0 && j >= 0 && i < width && j < height; }
    std::size_t index(int i, int j) const { return std::size_t(i) + std::size_t(width) * std::size_t(j); }
    bool occupied(int i, int j) const { return cells[index(i, j)] != 0; }
    /// Out-of-bounds cells count as occupied.
    bool blocked(int i, int j) const { return !in_bounds(i, j) || occupied(i, j); }
    void set(int i, int j, bool v = true) { cells[index(i, j)] = v ? 1 : 0; }
    std::size_t occupied_count() const {
        return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), std::uint8_t{1}));
    }
    double center_x(int i) const { return (i + 0.5) * cell_size; }
    double center_y(int j) const { return (j + 0.5) * cell_size; }
    int cell_of(double v) const { return static_cast<int>(std::floor(v / cell_size)); }

    friend bool operator==(const FloorMap&, const FloorMap&) = default;
};

/// Column (i, j) of a world-frame grid is occupied iff a voxel whose bottom
/// lies below `max_height` is occupied.
inline FloorMap project_to_floor(const VoxelGrid& world, double max_height) {
    const auto& s = world.spec();
    FloorMap m(static_cast<int>(s.nx), static_cast<int>(s.ny), s.voxel);
    for (std::uint32_t k = 0; k < s.nz; ++k) {
        if (k * double{s.voxel} >= max_height) break;
        for (std::uint32_t j = 0; j < s.ny; ++j)
            for (std::uint32_t i = 0; i < s.nx; ++i)
                if (world.at(i, j, k)) m.set(static_cast<int>(i), static_cast<int>(j));
    }
    return m;
}

// ------------------------------------------------------------ depth camera

struct CameraModel {
    int width = 168;
    int height = 94;
    double hfov = kPi / 2.0;  // radians
    double max_range = 6.4;   // metres

    double focal() const { return (width * 0.5) / std::tan(hfov * 0.5); }
};

/// Camera position in the world frame; heading is the yaw of the forward axis.
struct CameraPose {
    double x = 0.0;
    double y = 0.0;
    double height = 0.5;
    double heading = 0.0;
};

struct Vec3 {
    double x = 0, y = 0, z = 0;
};

/// Unit ray through the centre of pixel (u, v), robot-centric axes.
inline Vec3 pixel_ray(int width, int height, double hfov, int u, int v) {
    const double f = (width * 0.5) / std::tan(hfov * 0.5);
    const double xn = ((u + 0.5) - width * 0.5) / f;   // image right
    const double yn = ((v + 0.5) - height * 0.5) / f;  // image down
    const double n = std::sqrt(xn * xn + yn * yn + 1.0);
    return {-xn / n, -yn / n, 1.0 / n};
}

/// Robot-centric (left, up, forward) to world (x, y, height).
inline Vec3 camera_to_world(const CameraPose& p, const Vec3& c) {
    const double cs = std::cos(p.heading), sn = std::sin(p.heading);
    return {p.x + c.z * cs - c.x * sn, p.y + c.z * sn + c.x * cs, p.height + c.y};
}

struct DepthMap {
    static constexpr double kNoHit = std::numeric_limits<double>::infinity();

    int width = 0;
    int height = 0;
    double hfov = kPi / 2.0;
    double max_range = 0.0;
    std::vector<double> values;  // row-major, kNoHit where nothing is within range

    double at(int u, int v) const { return values[std::size_t(v) * width + u]; }
    static bool is_hit(double r) { return std::isfinite(r); }
};

/// Relative tolerance (voxel units) under which two plane crossings of a
/// ray count as simultaneous.
inline constexpr double kTraversalTie = 1e-9;

/// Per-pixel range to the first occupied world voxel, by voxel traversal
/// (Amanatides & Woo). Rays that leave the world or exceed max_range are
/// reported as DepthMap::kNoHit.
inline DepthMap raycast_depth(const VoxelGrid& world, const CameraPose& pose, const CameraModel& cam) {
    if (cam.width < 1 || cam.height < 1) throw ShapeError("camera resolution must be positive");
    const auto& s = world.spec();
    const double l = s.voxel;
    const Vec3 o{pose.x / l, pose.y / l, pose.height / l};
    const long ci = static_cast<long>(std::floor(o.x)), cj = static_cast<long>(std::floor(o.y)),
               ck = static_cast<long>(std::floor(o.z));
    if (!world.in_bounds(ci, cj, ck)) throw Error("raycast_depth: camera outside the world grid");
    if (world.at(ci, cj, ck)) throw Error("raycast_depth: camera inside an occupied voxel");

    DepthMap d;
    d.width = cam.width;
    d.height = cam.height;
    d.hfov = cam.hfov;
    d.max_range = cam.max_range;
    d.values.assign(std::size_t(cam.width) * cam.height, DepthMap::kNoHit);
    const double max_t = cam.max_range / l;  // in voxel units
    const double cs = std::cos(pose.heading), sn = std::sin(pose.heading);

    for (int v = 0; v < cam.height; ++v) {
        for (int u = 0; u < cam.width; ++u) {
            const Vec3 r = pixel_ray(cam.width, cam.height, cam.hfov, u, v);
            const double dir[3] = {r.z * cs - r.x * sn, r.z * sn + r.x * cs, r.y};
            const double org[3] = {o.x, o.y, o.z};
            long cell[3] = {ci, cj, ck};
            long step[3];
            double t_max[3], t_delta[3];
            for (int a = 0; a < 3; ++a) {
                if (dir[a] > 0) {
                    step[a] = 1;
                    t_max[a] = (static_cast<double>(cell[a] + 1) - org[a]) / dir[a];
                    t_delta[a] = 1.0 / dir[a];
                } else if (dir[a] < 0) {
                    step[a] = -1;
                    t_max[a] = (static_cast<double>(cell[a]) - org[a]) / dir[a];
                    t_delta[a] = -1.0 / dir[a];
                } else {
                    step[a] = 0;
                    t_max[a] = std::numeric_limits<double>::infinity();
                    t_delta[a] = std::numeric_limits<double>::infinity();
                }
            }
            for (;;) {
                const double t_entry = std::min({t_max[0], t_max[1], t_max[2]});
                if (t_entry > max_t) break;
                // Crossings closer than rounding error are one crossing through
                // an edge or corner: step those axes together.
                const double tie = kTraversalTie * (1.0 + t_entry);
                for (int a = 0; a < 3; ++a)
                    if (t_max[a] <= t_entry + tie) {
                        cell[a] += step[a];
                        t_max[a] += t_delta[a];
                    }
                if (!world.in_bounds(cell[0], cell[1], cell[2])) break;
                if (world.at(static_cast<std::uint32_t>(cell[0]), static_cast<std::uint32_t>(cell[1]),
                             static_cast<std::uint32_t>(cell[2]))) {
                    d.values[std::size_t(v) * cam.width + u] = t_entry * l;
                    break;
                }
            }
        }
    }
    return d;
}

/// Hit points lie on voxel faces; they are pushed this far along the ray so
/// they land in the voxel behind the surface.
inline constexpr double kSurfaceInset = 1e-7;

/// Index of the robot-centric voxel containing point c, or false if outside.
inline bool ego_voxel_of(const GridSpec& s, const Vec3& c, std::uint32_t& ix, std::uint32_t& iy, std::uint32_t& iz) {
    const double l = s.voxel;
    const double fx = std::floor((c.x + s.extent_x() * 0.5) / l);
    const double fy = std::floor((c.y + s.extent_y() * 0.5) / l);
    const double fz = std::floor(c.z / l);
    if (fx < 0 || fy < 0 || fz < 0 || fx >= s.nx || fy >= s.ny || fz >= s.nz) return false;
    ix = static_cast<std::uint32_t>(fx);
    iy = static_cast<std::uint32_t>(fy);
    iz = static_cast<std::uint32_t>(fz);
    return true;
}

/// Back-projects every hit pixel into the robot-centric grid.
inline VoxelGrid depth_to_grid(const DepthMap& d, const GridSpec& spec) {
    VoxelGrid g(spec);
    for (int v = 0; v < d.height; ++v) {
        for (int u = 0; u < d.width; ++u) {
            const double r = d.at(u, v);
            if (!DepthMap::is_hit(r)) continue;
            const Vec3 ray = pixel_ray(d.width, d.height, d.hfov, u, v);
            const double t = r + kSurfaceInset;
            std::uint32_t ix, iy, iz;
            if (ego_voxel_of(spec, {ray.x * t, ray.y * t, ray.z * t}, ix, iy, iz)) g.set(ix, iy, iz);
        }
    }
    return g;
}

/// Omniscient robot-centric view: every voxel takes the occupancy of the
/// world voxel containing its centre. World cells outside the map are free.
inline VoxelGrid egocentric_crop(const VoxelGrid& world, const CameraPose& pose, const GridSpec& spec) {
    VoxelGrid g(spec);
    const double l = spec.voxel, lw = world.spec().voxel;
    const double cs = std::cos(pose.heading), sn = std::sin(pose.heading);
    for (std::uint32_t iz = 0; iz < spec.nz; ++iz) {
        const double zf = (iz + 0.5) * l;
        for (std::uint32_t iy = 0; iy < spec.ny; ++iy) {
            const double yu = (iy + 0.5) * l - spec.extent_y() * 0.5;
            const long wk = static_cast<long>(std::floor((pose.height + yu) / lw));
            if (wk < 0 || wk >= long(world.spec().nz)) continue;
            for (std::uint32_t ix = 0; ix < spec.nx; ++ix) {
                const double xl = (ix + 0.5) * l - spec.extent_x() * 0.5;
                const long wi = static_cast<long>(std::floor((pose.x + zf * cs - xl * sn) / lw));
                const long wj = static_cast<long>(std::floor((pose.y + zf * sn + xl * cs) / lw));
                if (world.in_bounds(wi, wj, wk) &&
                    world.at(static_cast<std::uint32_t>(wi), static_cast<std::uint32_t>(wj),
                             static_cast<std::uint32_t>(wk)))
                    g.set(ix, iy, iz);
            }
        }
    }
    return g;
}

// ----------------------------------------------------------- serialization

/// Header (nx, ny, nz as u32, voxel as f32, little-endian) followed by
/// occupancy bits, x-fastest then y then z, least significant bit first.
inline void write_grid(ByteWriter& w, const VoxelGrid& g) {
    const auto& s = g.spec();
    w.put<std::uint32_t>(s.nx);
    w.put<std::uint32_t>(s.ny);
    w.put<std::uint32_t>(s.nz);
    w.put<float>(s.voxel);
    std::vector<unsigned char> bits((g.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < g.size(); ++i)
        if (g[i]) bits[i / 8] |= static_cast<unsigned char>(1u << (i % 8));
    w.put_bytes(bits);
}

inline VoxelGrid read_grid(ByteReader& r) {
    GridSpec s;
    s.nx = r.get<std::uint32_t>();
    s.ny = r.get<std::uint32_t>();
    s.nz = r.get<std::uint32_t>();
    s.voxel = r.get<float>();
    try {
        s.validate();
    } catch (const ShapeError& e) {
        throw CorruptError(std::string("grid header: ") + e.what());
    }
    if (s.cell_count() > (std::size_t{1} << 34)) throw CorruptError("grid header: implausible size");
    VoxelGrid g(s);
    auto bits = r.get_bytes((g.size() + 7) / 8);
    for (std::size_t i = 0; i < g.size(); ++i)
        if (bits[i / 8] & (1u << (i % 8))) g.set_index(i);
    return g;
}

inline std::vector<unsigned char> serialize_grid(const VoxelGrid& g) {
    ByteWriter w;
    write_grid(w, g);
    return w.take();
}

inline VoxelGrid deserialize_grid(std::span<const unsigned char> bytes) {
    ByteReader r(bytes);
    auto g = read_grid(r);
    if (r.remaining() != 0) throw CorruptError("trailing bytes after grid");
    return g;
}

}  // namespace voxnav
