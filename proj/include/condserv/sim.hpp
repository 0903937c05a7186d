#pragma once

// Deterministic kinematic shape-sorting environment with an eye-in-hand
// camera. Desk-scale scene: a sorter box fixed at the table center with one
// hole per shape kind, and the shapes scattered around it. Grasping and
// insertion are radius/tolerance predicates; there is no contact dynamics.
//
// Rendering is per-pixel ray casting against horizontal top faces (the camera
// always looks straight down), which keeps depth, projection and unprojection
// exactly consistent with the pinhole model in camera.hpp.

#include <optional>

#include <json.hpp>

#include "condserv/camera.hpp"
#include "condserv/core.hpp"
#include "condserv/demo.hpp"

namespace condserv {

enum class ShapeKind { Square, Triangle, Trapezoid };

inline const char* to_string(ShapeKind k) {
    switch (k) {
        case ShapeKind::Square: return "square";
        case ShapeKind::Triangle: return "triangle";
        default: return "trapezoid";
    }
}

inline ShapeKind shape_kind_from_string(const std::string& s) {
    if (s == "square") return ShapeKind::Square;
    if (s == "triangle") return ShapeKind::Triangle;
    if (s == "trapezoid") return ShapeKind::Trapezoid;
    throw std::invalid_argument("unknown shape kind: " + s);
}

struct ShapeSpec {
    ShapeKind kind = ShapeKind::Square;
    std::array<float, 3> color{1.f, 0.f, 0.f};
    std::vector<Vec2> footprint;  // convex, counter-clockwise, centered on the centroid
    double height = 0.03;

    double circumradius() const {
        double r = 0;
        for (const Vec2& v : footprint) r = std::max(r, v.norm());
        return r;
    }
};

struct HoleSpec {
    ShapeKind kind = ShapeKind::Square;
    double x = 0, y = 0, theta = 0;
    double scale = 1.25;  // hole polygon = shape footprint scaled by this
};

struct SorterBoxSpec {
    double cx = 0, cy = 0;
    double half_x = 0.11, half_y = 0.08;
    double height = 0.045;
    std::vector<HoleSpec> holes;
};

struct ActionLimits {
    double dxyz = 0.02;  // per-step translation limit, meters
    double dyaw = 0.1;   // per-step yaw limit, radians
};

// The reachable tool volume. Object-relative servoing legitimately swings the
// camera beyond the table while approaching, so this is much wider than the
// table itself.
struct WorkspaceLimits {
    double xy = 0.55;
    double z_min = 0.02;
    double z_max = 0.42;
};

struct PlacementParams {
    double edge_margin = 0.005;
    double spacing_margin = 0.005;
    double yaw_range = 0.10;  // object yaw sampled uniformly in +- this
    int max_tries = 1000;
};

struct FingerParams {
    double sep_open = 0.030;
    double sep_closed = 0.016;
    double width = 0.008;   // along tool x
    double length = 0.024;  // along tool y
    double rise = -0.10;    // finger tops relative to tool z; they reach down
};

struct ObjectInit {
    double x = 0, y = 0, theta = 0, base_z = 0;
};

struct SimConfig {
    int width = 96, height = 96;
    CameraIntrinsics intrinsics{96.0, 96.0, 47.5, 47.5};
    double table_half_extent = 0.20;
    double camera_offset = 0.05;
    ToolPose home{0.0, 0.0, 0.37, 0.0};
    std::vector<ShapeSpec> shapes;
    SorterBoxSpec box;
    double grasp_radius = 0.015;     // r_g
    double grasp_reach = 0.18;       // max tool height above an object top for grasping
    double grasp_min_clear = -0.002; // tool may be marginally below the object top
    double held_hang = 0.02;         // held object top below tool z
    double insert_tolerance = 0.008; // r_i
    double angular_tolerance = 0.15;
    ActionLimits limits;
    WorkspaceLimits workspace;
    PlacementParams placement;
    FingerParams fingers;
    std::array<float, 3> table_color{0.62f, 0.60f, 0.58f};
    std::array<float, 3> hole_floor_color{0.10f, 0.10f, 0.12f};
    std::array<float, 3> finger_color{0.22f, 0.22f, 0.24f};
    std::array<float, 3> box_color_a{0.22f, 0.30f, 0.58f};
    std::array<float, 3> box_color_b{0.60f, 0.72f, 0.98f};
    double checker_cell = 0.02;
    std::uint64_t seed = 1;
    std::optional<std::vector<ObjectInit>> initial_poses;  // bypasses random placement
    std::string name = "standard3";

    void validate() const {
        if (width <= 0 || height <= 0) throw std::invalid_argument("SimConfig: bad image dims");
        intrinsics.validate();
        if (!(grasp_radius > 0) || !(insert_tolerance > 0))
            throw std::invalid_argument("SimConfig: tolerances must be positive");
        if (shapes.empty()) throw std::invalid_argument("SimConfig: no shapes");
        for (const ShapeSpec& s : shapes) {
            if (s.footprint.size() < 3)
                throw std::invalid_argument("SimConfig: degenerate footprint");
            bool found = false;
            for (const HoleSpec& h : box.holes) found |= h.kind == s.kind;
            if (!found)
                throw std::invalid_argument(std::string("SimConfig: no hole for shape ") +
                                            to_string(s.kind));
        }
        if (initial_poses && initial_poses->size() != shapes.size())
            throw std::invalid_argument("SimConfig: initial_poses count != shapes count");
    }

    const HoleSpec& hole_for(ShapeKind kind) const {
        for (const HoleSpec& h : box.holes)
            if (h.kind == kind) return h;
        throw std::logic_error("no hole for shape kind");
    }
};

enum class ObjectStatus { OnTable, Held, Inserted };

inline const char* to_string(ObjectStatus s) {
    switch (s) {
        case ObjectStatus::OnTable: return "on_table";
        case ObjectStatus::Held: return "held";
        default: return "inserted";
    }
}

struct ObjectState {
    double x = 0, y = 0, theta = 0;
    double base_z = 0;
    ObjectStatus status = ObjectStatus::OnTable;
};

struct SimState {
    std::vector<ObjectState> objects;
    ToolPose tool;
    GripperCmd gripper = GripperCmd::Open;
    int held = -1;               // object index or -1
    Vec2 grasp_offset{};         // object center in the tool frame at grasp time
    double grasp_rel_yaw = 0.0;  // object yaw minus tool yaw at grasp time

    bool operator==(const SimState& o) const {
        if (objects.size() != o.objects.size()) return false;
        for (size_t i = 0; i < objects.size(); ++i) {
            const auto& a = objects[i];
            const auto& b = o.objects[i];
            if (a.x != b.x || a.y != b.y || a.theta != b.theta || a.base_z != b.base_z ||
                a.status != b.status)
                return false;
        }
        return tool.x == o.tool.x && tool.y == o.tool.y && tool.z == o.tool.z &&
               tool.theta == o.tool.theta && gripper == o.gripper && held == o.held &&
               grasp_offset.x == o.grasp_offset.x && grasp_offset.y == o.grasp_offset.y &&
               grasp_rel_yaw == o.grasp_rel_yaw;
    }
};

// 5DoF action: Cartesian offsets in the end-effector frame (dz positive is
// up) plus a yaw delta and the gripper command.
struct Action {
    double dx = 0, dy = 0, dz = 0, dtheta = 0;
    GripperCmd gripper = GripperCmd::Open;

    Action clamped(const ActionLimits& lim) const {
        Action a = *this;
        if (!std::isfinite(a.dx)) a.dx = 0;
        if (!std::isfinite(a.dy)) a.dy = 0;
        if (!std::isfinite(a.dz)) a.dz = 0;
        if (!std::isfinite(a.dtheta)) a.dtheta = 0;
        a.dx = clamp_abs(a.dx, lim.dxyz);
        a.dy = clamp_abs(a.dy, lim.dxyz);
        a.dz = clamp_abs(a.dz, lim.dxyz);
        a.dtheta = clamp_abs(a.dtheta, lim.dyaw);
        return a;
    }
};

struct PlacementError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tool frame basis in the world. The tool points down, so the frame is
// right-handed with z pointing at the table; dz is applied along world up.
inline Vec2 tool_x_axis(double yaw) { return {std::cos(yaw), std::sin(yaw)}; }
inline Vec2 tool_y_axis(double yaw) { return {std::sin(yaw), -std::cos(yaw)}; }

namespace detail {

inline Vec2 rotate2(const Vec2& v, double theta) {
    double c = std::cos(theta), s = std::sin(theta);
    return {c * v.x - s * v.y, s * v.x + c * v.y};
}

inline bool point_in_convex(const Vec2* poly, int n, const Vec2& p) {
    for (int i = 0; i < n; ++i) {
        const Vec2& a = poly[i];
        const Vec2& b = poly[(i + 1) % n];
        double cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
        if (cross < 0) return false;  // CCW polygons, on-edge counts inside
    }
    return true;
}

}  // namespace detail

inline double object_top_z(const SimState& state, const SimConfig& config, int idx) {
    const ObjectState& o = state.objects[idx];
    switch (o.status) {
        case ObjectStatus::Held: return state.tool.z - config.held_hang;
        default: return o.base_z + config.shapes[idx].height;
    }
}

// ---------------------------------------------------------------------------
// reset

inline SimState reset(const SimConfig& config, std::uint64_t seed) {
    config.validate();
    SimState state;
    state.tool = config.home;
    state.gripper = GripperCmd::Open;
    state.objects.resize(config.shapes.size());

    if (config.initial_poses) {
        for (size_t i = 0; i < config.shapes.size(); ++i) {
            const ObjectInit& p = (*config.initial_poses)[i];
            state.objects[i] = ObjectState{p.x, p.y, wrap_angle(p.theta), p.base_z,
                                           ObjectStatus::OnTable};
        }
        return state;
    }

    RandomStream rng(derive_seed(seed, 0, 0x504C414345ULL));
    const PlacementParams& pp = config.placement;
    for (size_t i = 0; i < config.shapes.size(); ++i) {
        double rc = config.shapes[i].circumradius();
        double lim = config.table_half_extent - rc - pp.edge_margin;
        bool placed = false;
        for (int tries = 0; tries < pp.max_tries && !placed; ++tries) {
            double x = rng.uniform(-lim, lim);
            double y = rng.uniform(-lim, lim);
            double theta = rng.uniform(-pp.yaw_range, pp.yaw_range);
            if (lim <= 0) continue;
            // keep clear of the sorter box
            if (std::abs(x - config.box.cx) <= config.box.half_x + rc + pp.spacing_margin &&
                std::abs(y - config.box.cy) <= config.box.half_y + rc + pp.spacing_margin)
                continue;
            bool collides = false;
            for (size_t j = 0; j < i; ++j) {
                double rj = config.shapes[j].circumradius();
                Vec2 d{x - state.objects[j].x, y - state.objects[j].y};
                if (d.norm() < rc + rj + pp.spacing_margin) {
                    collides = true;
                    break;
                }
            }
            if (collides) continue;
            state.objects[i] = ObjectState{x, y, theta, 0.0, ObjectStatus::OnTable};
            placed = true;
        }
        if (!placed)
            throw PlacementError("cannot place object " + std::to_string(i) + " (" +
                                 to_string(config.shapes[i].kind) + ") after " +
                                 std::to_string(pp.max_tries) + " tries");
    }
    return state;
}

// ---------------------------------------------------------------------------
// step

namespace detail {

// Deposit a released object at (x, y); if that lands it on the sorter box it
// slides outward to the nearest free spot off the box rim.
inline void deposit_on_table(SimState& state, const SimConfig& config, int idx, double x,
                             double y, double theta) {
    double rc = config.shapes[idx].circumradius();
    double infl_x = config.box.half_x + rc + 0.002;
    double infl_y = config.box.half_y + rc + 0.002;
    Vec2 p{x, y};
    Vec2 rel{p.x - config.box.cx, p.y - config.box.cy};
    if (std::abs(rel.x) <= infl_x && std::abs(rel.y) <= infl_y) {
        Vec2 dir = rel.norm() > 1e-9 ? Vec2{rel.x / rel.norm(), rel.y / rel.norm()}
                                     : Vec2{1.0, 0.0};
        // walk outward until off the inflated box rectangle
        for (int it = 0; it < 400; ++it) {
            rel = {p.x - config.box.cx, p.y - config.box.cy};
            if (std::abs(rel.x) > infl_x || std::abs(rel.y) > infl_y) break;
            p = p + dir * 0.005;
        }
        // then keep walking while overlapping another resting object
        for (int it = 0; it < 100; ++it) {
            bool overlap = false;
            for (size_t j = 0; j < state.objects.size(); ++j) {
                if (static_cast<int>(j) == idx ||
                    state.objects[j].status != ObjectStatus::OnTable)
                    continue;
                double rj = config.shapes[j].circumradius();
                Vec2 d{p.x - state.objects[j].x, p.y - state.objects[j].y};
                if (d.norm() < rc + rj) {
                    overlap = true;
                    break;
                }
            }
            if (!overlap) break;
            p = p + dir * 0.005;
        }
        double lim = config.table_half_extent - rc;
        p.x = std::clamp(p.x, -lim, lim);
        p.y = std::clamp(p.y, -lim, lim);
    }
    state.objects[idx] =
        ObjectState{p.x, p.y, wrap_angle(theta), 0.0, ObjectStatus::OnTable};
}

// Release semantics shared by step() and inject_drop().
inline void release_held(SimState& state, const SimConfig& config) {
    int idx = state.held;
    if (idx < 0) return;
    ObjectState& obj = state.objects[idx];
    const HoleSpec& hole = config.hole_for(config.shapes[idx].kind);
    Vec2 d{obj.x - hole.x, obj.y - hole.y};
    bool fits = d.norm() <= config.insert_tolerance &&
                std::abs(angle_diff(obj.theta, hole.theta)) <= config.angular_tolerance;
    if (fits) {
        obj = ObjectState{hole.x, hole.y, hole.theta, 0.0, ObjectStatus::Inserted};
    } else {
        deposit_on_table(state, config, idx, obj.x, obj.y, obj.theta);
    }
    state.held = -1;
    state.grasp_offset = Vec2{};
    state.grasp_rel_yaw = 0.0;
}

inline void follow_tool(SimState& state) {
    if (state.held < 0) return;
    ObjectState& obj = state.objects[state.held];
    Vec2 xa = tool_x_axis(state.tool.theta);
    Vec2 ya = tool_y_axis(state.tool.theta);
    obj.x = state.tool.x + state.grasp_offset.x * xa.x + state.grasp_offset.y * ya.x;
    obj.y = state.tool.y + state.grasp_offset.x * xa.y + state.grasp_offset.y * ya.y;
    obj.theta = wrap_angle(state.tool.theta + state.grasp_rel_yaw);
}

}  // namespace detail

inline SimState step(const SimState& state, const Action& action, const SimConfig& config) {
    SimState s = state;
    Action a = action.clamped(config.limits);

    Vec2 xa = tool_x_axis(s.tool.theta);
    Vec2 ya = tool_y_axis(s.tool.theta);
    s.tool.x += a.dx * xa.x + a.dy * ya.x;
    s.tool.y += a.dx * xa.y + a.dy * ya.y;
    s.tool.z += a.dz;
    s.tool.theta = wrap_angle(s.tool.theta + a.dtheta);
    s.tool.x = clamp_abs(s.tool.x, config.workspace.xy);
    s.tool.y = clamp_abs(s.tool.y, config.workspace.xy);
    s.tool.z = std::clamp(s.tool.z, config.workspace.z_min, config.workspace.z_max);

    detail::follow_tool(s);

    if (a.gripper == GripperCmd::Closed && s.gripper == GripperCmd::Open) {
        // grasp attempt: nearest graspable object wins, topmost first
        int best = -1;
        double best_top = -1, best_dist = 0;
        for (size_t i = 0; i < s.objects.size(); ++i) {
            const ObjectState& o = s.objects[i];
            if (o.status != ObjectStatus::OnTable) continue;
            Vec2 d{s.tool.x - o.x, s.tool.y - o.y};
            double dist = d.norm();
            if (dist > config.grasp_radius) continue;
            double top = o.base_z + config.shapes[i].height;
            double clear = s.tool.z - top;
            if (clear < config.grasp_min_clear || clear > config.grasp_reach) continue;
            if (best < 0 || top > best_top + 1e-12 ||
                (std::abs(top - best_top) <= 1e-12 && dist < best_dist)) {
                best = static_cast<int>(i);
                best_top = top;
                best_dist = dist;
            }
        }
        if (best >= 0) {
            ObjectState& obj = s.objects[best];
            obj.status = ObjectStatus::Held;
            obj.base_z = 0.0;
            Vec2 rel{obj.x - s.tool.x, obj.y - s.tool.y};
            s.grasp_offset = {rel.dot({xa.x, xa.y}), rel.dot({ya.x, ya.y})};
            s.grasp_rel_yaw = angle_diff(obj.theta, s.tool.theta);
            s.held = best;
        }
    } else if (a.gripper == GripperCmd::Open && s.gripper == GripperCmd::Closed) {
        detail::release_held(s, config);
    }
    s.gripper = a.gripper;
    return s;
}

struct DropResult {
    SimState state;
    bool dropped = false;
};

inline DropResult inject_drop(const SimState& state, RandomStream& rng, double p,
                              const SimConfig& config) {
    if (state.held < 0) return {state, false};
    if (!rng.bernoulli(p)) return {state, false};
    SimState s = state;
    detail::release_held(s, config);
    s.gripper = GripperCmd::Open;
    return {s, true};
}

// target: object index, or -1 for all objects.
inline bool task_success(const SimState& state, int target = -1) {
    if (target >= 0) {
        return state.objects[static_cast<size_t>(target)].status == ObjectStatus::Inserted;
    }
    for (const ObjectState& o : state.objects)
        if (o.status != ObjectStatus::Inserted) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Rendering

enum class MaskMode { None, All, ObjectOnly, BoxOnly };

inline constexpr int kEntityGround = -1;
inline constexpr int kEntityBox = -2;
inline constexpr int kEntityFinger = -3;

struct RenderResult {
    Frame frame;
    std::vector<std::int16_t> entity;  // per pixel, kEntity* or object index

    int entity_at(int x, int y) const {
        return entity[static_cast<size_t>(y) * frame.width() + x];
    }
};

namespace detail {

struct RenderSurface {
    double z = 0;
    int entity = kEntityGround;
    int nv = 0;
    Vec2 v[8];
    Vec2 bb_min, bb_max;
    std::array<float, 3> color{};
    bool checker = false;   // sorter box top: checkered, with hole cutouts
    bool is_box_top = false;
};

inline void finish_surface(RenderSurface& s) {
    s.bb_min = {1e9, 1e9};
    s.bb_max = {-1e9, -1e9};
    for (int i = 0; i < s.nv; ++i) {
        s.bb_min.x = std::min(s.bb_min.x, s.v[i].x);
        s.bb_min.y = std::min(s.bb_min.y, s.v[i].y);
        s.bb_max.x = std::max(s.bb_max.x, s.v[i].x);
        s.bb_max.y = std::max(s.bb_max.y, s.v[i].y);
    }
}

inline RenderSurface polygon_surface(const std::vector<Vec2>& local, double x, double y,
                                     double theta, double scale, double z, int entity,
                                     const std::array<float, 3>& color) {
    RenderSurface s;
    s.z = z;
    s.entity = entity;
    s.color = color;
    s.nv = static_cast<int>(local.size());
    for (int i = 0; i < s.nv; ++i) {
        Vec2 p = rotate2(local[i] * scale, theta);
        s.v[i] = {p.x + x, p.y + y};
    }
    finish_surface(s);
    return s;
}

inline RenderSurface rect_surface(double cx, double cy, double half_x, double half_y,
                                  double theta, double z, int entity,
                                  const std::array<float, 3>& color) {
    std::vector<Vec2> local{{-half_x, -half_y}, {half_x, -half_y}, {half_x, half_y},
                            {-half_x, half_y}};
    return polygon_surface(local, cx, cy, theta, 1.0, z, entity, color);
}

}  // namespace detail

inline RenderResult render_full(const SimState& state, const SimConfig& config,
                                MaskMode mask_mode = MaskMode::None, int mask_object = -1) {
    const int W = config.width, H = config.height;
    RenderResult out;
    out.frame.rgb = Image3f(W, H);
    out.frame.depth = Image1f(W, H);
    out.frame.mask = MaskImage(W, H, false);
    out.frame.intrinsics = config.intrinsics;
    out.frame.tcp_pose = state.tool;
    out.frame.gripper = state.gripper;
    out.entity.assign(static_cast<size_t>(W) * H, kEntityGround);

    CameraPose cam = camera_for_tool(state.tool, config.camera_offset);

    std::vector<detail::RenderSurface> surfaces;
    std::vector<detail::RenderSurface> holes;  // cutouts in the box top

    // fingers
    {
        double fz = state.tool.z + config.fingers.rise;
        double sep = state.gripper == GripperCmd::Open ? config.fingers.sep_open
                                                       : config.fingers.sep_closed;
        Vec2 xa = tool_x_axis(state.tool.theta);
        for (int side = -1; side <= 1; side += 2) {
            double cx = state.tool.x + side * sep * xa.x;
            double cy = state.tool.y + side * sep * xa.y;
            surfaces.push_back(detail::rect_surface(
                cx, cy, config.fingers.width / 2, config.fingers.length / 2,
                state.tool.theta, fz, kEntityFinger, config.finger_color));
        }
    }

    // objects
    for (size_t i = 0; i < state.objects.size(); ++i) {
        const ObjectState& o = state.objects[i];
        const ShapeSpec& spec = config.shapes[i];
        double z = object_top_z(state, config, static_cast<int>(i));
        surfaces.push_back(detail::polygon_surface(spec.footprint, o.x, o.y, o.theta, 1.0, z,
                                                   static_cast<int>(i), spec.color));
    }

    // sorter box top + hole cutouts + hole floors
    surfaces.push_back(detail::rect_surface(config.box.cx, config.box.cy, config.box.half_x,
                                            config.box.half_y, 0.0, config.box.height,
                                            kEntityBox, config.box_color_a));
    surfaces.back().checker = true;
    surfaces.back().is_box_top = true;
    for (const HoleSpec& h : config.box.holes) {
        const ShapeSpec* spec = nullptr;
        for (const ShapeSpec& s : config.shapes)
            if (s.kind == h.kind) spec = &s;
        if (!spec) {
            // hole for a kind with no object in the roster: approximate with a square
            static const std::vector<Vec2> sq{{-0.016, -0.016}, {0.016, -0.016},
                                              {0.016, 0.016},   {-0.016, 0.016}};
            holes.push_back(detail::polygon_surface(sq, h.x, h.y, h.theta, h.scale, 0.0005,
                                                    kEntityBox, config.hole_floor_color));
        } else {
            holes.push_back(detail::polygon_surface(spec->footprint, h.x, h.y, h.theta,
                                                    h.scale, 0.0005, kEntityBox,
                                                    config.hole_floor_color));
        }
        surfaces.push_back(holes.back());  // hole floor surface (dark, near table level)
    }

    std::stable_sort(surfaces.begin(), surfaces.end(),
                     [](const auto& a, const auto& b) { return a.z > b.z; });

    for (int py = 0; py < H; ++py) {
        for (int px = 0; px < W; ++px) {
            float rgb[3] = {config.table_color[0], config.table_color[1],
                            config.table_color[2]};
            double depth = cam.z;  // ground plane
            int entity = kEntityGround;

            for (const detail::RenderSurface& s : surfaces) {
                if (s.z >= cam.z) continue;
                Vec3 w = pixel_ray_at_height(cam, config.intrinsics, px, py, s.z);
                Vec2 p{w.x, w.y};
                if (p.x < s.bb_min.x || p.x > s.bb_max.x || p.y < s.bb_min.y ||
                    p.y > s.bb_max.y)
                    continue;
                if (!detail::point_in_convex(s.v, s.nv, p)) continue;
                if (s.is_box_top) {
                    bool in_hole = false;
                    for (const detail::RenderSurface& hs : holes)
                        if (detail::point_in_convex(hs.v, hs.nv, p)) {
                            in_hole = true;
                            break;
                        }
                    if (in_hole) continue;  // see through the cutout
                    // Aperiodic two-octave mottle tied to the box surface. A
                    // periodic pattern would let block matching lock onto the
                    // wrong cell; hashed cells at two scales keep patches
                    // locally unique across the camera's working depths.
                    auto cell_hash = [](double px_, double py_, double cell) {
                        auto cu = static_cast<std::int64_t>(std::floor(px_ / cell));
                        auto cv = static_cast<std::int64_t>(std::floor(py_ / cell));
                        return mix_seed((static_cast<std::uint64_t>(cu) << 32) ^
                                        (static_cast<std::uint64_t>(cv) & 0xFFFFFFFFULL));
                    };
                    std::uint64_t h1 = cell_hash(p.x, p.y, config.checker_cell);
                    float w = static_cast<float>((h1 >> 11) * 0x1.0p-53);
                    // Smooth incommensurate gradient fields on top of the
                    // cells give SSD matching a clean basin around the true
                    // position instead of flat in-cell plateaus.
                    float s1 = static_cast<float>(
                        std::sin(2.0 * kPi * (p.x / 0.023 + p.y / 0.037)));
                    float s2 = static_cast<float>(
                        std::sin(2.0 * kPi * (-p.x / 0.031 + p.y / 0.026)));
                    float fine = 1.0f + 0.10f * s1 + 0.08f * s2;
                    for (int ch = 0; ch < 3; ++ch) {
                        float jitter =
                            0.78f + 0.44f * static_cast<float>((h1 >> (10 + 14 * ch)) & 0x3FFF) /
                                        16383.f;
                        float base = config.box_color_a[ch] * (1.f - w) +
                                     config.box_color_b[ch] * w;
                        rgb[ch] = std::clamp(base * jitter * fine, 0.f, 1.f);
                    }
                } else {
                    rgb[0] = s.color[0];
                    rgb[1] = s.color[1];
                    rgb[2] = s.color[2];
                }
                depth = cam.z - s.z;
                entity = s.entity;
                break;
            }

            float* dst = out.frame.rgb.px(px, py);
            dst[0] = rgb[0];
            dst[1] = rgb[1];
            dst[2] = rgb[2];
            out.frame.depth.at(px, py) = static_cast<float>(depth);
            out.entity[static_cast<size_t>(py) * W + px] = static_cast<std::int16_t>(entity);

            bool fg = false;
            switch (mask_mode) {
                case MaskMode::None: fg = false; break;
                case MaskMode::All: fg = entity >= 0 || entity == kEntityBox; break;
                case MaskMode::ObjectOnly: fg = entity == mask_object; break;
                case MaskMode::BoxOnly: fg = entity == kEntityBox; break;
            }
            out.frame.mask.set(px, py, fg);
        }
    }
    return out;
}

inline Frame render(const SimState& state, const SimConfig& config,
                    MaskMode mask_mode = MaskMode::None, int mask_object = -1) {
    return render_full(state, config, mask_mode, mask_object).frame;
}

// ---------------------------------------------------------------------------
// JSON (scenario files, recorded sim states)

inline void to_json(json& j, const ShapeSpec& s) {
    json fp = json::array();
    for (const Vec2& v : s.footprint) fp.push_back({v.x, v.y});
    j = json{{"kind", to_string(s.kind)},
             {"color", {s.color[0], s.color[1], s.color[2]}},
             {"footprint", fp},
             {"height", s.height}};
}

inline void from_json(const json& j, ShapeSpec& s) {
    s.kind = shape_kind_from_string(j.at("kind").get<std::string>());
    for (int c = 0; c < 3; ++c) s.color[c] = j.at("color").at(c).get<float>();
    s.footprint.clear();
    for (const auto& v : j.at("footprint"))
        s.footprint.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
    s.height = j.at("height").get<double>();
}

inline void to_json(json& j, const HoleSpec& h) {
    j = json{{"kind", to_string(h.kind)}, {"x", h.x}, {"y", h.y}, {"theta", h.theta},
             {"scale", h.scale}};
}

inline void from_json(const json& j, HoleSpec& h) {
    h.kind = shape_kind_from_string(j.at("kind").get<std::string>());
    h.x = j.at("x").get<double>();
    h.y = j.at("y").get<double>();
    h.theta = j.at("theta").get<double>();
    h.scale = j.at("scale").get<double>();
}

inline void to_json(json& j, const SimConfig& c) {
    j = json{
        {"name", c.name},
        {"width", c.width},
        {"height", c.height},
        {"intrinsics",
         {{"fx", c.intrinsics.fx},
          {"fy", c.intrinsics.fy},
          {"cx", c.intrinsics.cx},
          {"cy", c.intrinsics.cy}}},
        {"table_half_extent", c.table_half_extent},
        {"camera_offset", c.camera_offset},
        {"home", {c.home.x, c.home.y, c.home.z, c.home.theta}},
        {"shapes", c.shapes},
        {"box",
         {{"cx", c.box.cx},
          {"cy", c.box.cy},
          {"half_x", c.box.half_x},
          {"half_y", c.box.half_y},
          {"height", c.box.height},
          {"holes", c.box.holes}}},
        {"grasp_radius", c.grasp_radius},
        {"grasp_reach", c.grasp_reach},
        {"grasp_min_clear", c.grasp_min_clear},
        {"held_hang", c.held_hang},
        {"insert_tolerance", c.insert_tolerance},
        {"angular_tolerance", c.angular_tolerance},
        {"limits", {{"dxyz", c.limits.dxyz}, {"dyaw", c.limits.dyaw}}},
        {"workspace",
         {{"xy", c.workspace.xy}, {"z_min", c.workspace.z_min}, {"z_max", c.workspace.z_max}}},
        {"placement",
         {{"edge_margin", c.placement.edge_margin},
          {"spacing_margin", c.placement.spacing_margin},
          {"yaw_range", c.placement.yaw_range},
          {"max_tries", c.placement.max_tries}}},
        {"fingers",
         {{"sep_open", c.fingers.sep_open},
          {"sep_closed", c.fingers.sep_closed},
          {"width", c.fingers.width},
          {"length", c.fingers.length},
          {"rise", c.fingers.rise}}},
        {"checker_cell", c.checker_cell},
        {"seed", c.seed},
    };
    if (c.initial_poses) {
        json arr = json::array();
        for (const ObjectInit& p : *c.initial_poses)
            arr.push_back({{"x", p.x}, {"y", p.y}, {"theta", p.theta}, {"base_z", p.base_z}});
        j["initial_poses"] = arr;
    }
}

inline void from_json(const json& j, SimConfig& c) {
    c = SimConfig{};
    c.name = j.value("name", "scenario");
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
    c.intrinsics.fx = j.at("intrinsics").at("fx").get<double>();
    c.intrinsics.fy = j.at("intrinsics").at("fy").get<double>();
    c.intrinsics.cx = j.at("intrinsics").at("cx").get<double>();
    c.intrinsics.cy = j.at("intrinsics").at("cy").get<double>();
    c.table_half_extent = j.at("table_half_extent").get<double>();
    c.camera_offset = j.at("camera_offset").get<double>();
    c.home = ToolPose{j.at("home").at(0).get<double>(), j.at("home").at(1).get<double>(),
                      j.at("home").at(2).get<double>(), j.at("home").at(3).get<double>()};
    c.shapes = j.at("shapes").get<std::vector<ShapeSpec>>();
    c.box.cx = j.at("box").at("cx").get<double>();
    c.box.cy = j.at("box").at("cy").get<double>();
    c.box.half_x = j.at("box").at("half_x").get<double>();
    c.box.half_y = j.at("box").at("half_y").get<double>();
    c.box.height = j.at("box").at("height").get<double>();
    c.box.holes = j.at("box").at("holes").get<std::vector<HoleSpec>>();
    c.grasp_radius = j.at("grasp_radius").get<double>();
    c.grasp_reach = j.at("grasp_reach").get<double>();
    c.grasp_min_clear = j.at("grasp_min_clear").get<double>();
    c.held_hang = j.at("held_hang").get<double>();
    c.insert_tolerance = j.at("insert_tolerance").get<double>();
    c.angular_tolerance = j.at("angular_tolerance").get<double>();
    c.limits.dxyz = j.at("limits").at("dxyz").get<double>();
    c.limits.dyaw = j.at("limits").at("dyaw").get<double>();
    c.workspace.xy = j.at("workspace").at("xy").get<double>();
    c.workspace.z_min = j.at("workspace").at("z_min").get<double>();
    c.workspace.z_max = j.at("workspace").at("z_max").get<double>();
    c.placement.edge_margin = j.at("placement").at("edge_margin").get<double>();
    c.placement.spacing_margin = j.at("placement").at("spacing_margin").get<double>();
    c.placement.yaw_range = j.at("placement").value("yaw_range", 0.10);
    c.placement.max_tries = j.at("placement").at("max_tries").get<int>();
    c.fingers.sep_open = j.at("fingers").at("sep_open").get<double>();
    c.fingers.sep_closed = j.at("fingers").at("sep_closed").get<double>();
    c.fingers.width = j.at("fingers").at("width").get<double>();
    c.fingers.length = j.at("fingers").at("length").get<double>();
    c.fingers.rise = j.at("fingers").at("rise").get<double>();
    c.checker_cell = j.at("checker_cell").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("initial_poses")) {
        std::vector<ObjectInit> poses;
        for (const auto& p : j.at("initial_poses"))
            poses.push_back(ObjectInit{p.at("x").get<double>(), p.at("y").get<double>(),
                                       p.at("theta").get<double>(),
                                       p.value("base_z", 0.0)});
        c.initial_poses = std::move(poses);
    }
    c.validate();
}

inline void to_json(json& j, const SimState& s) {
    json objs = json::array();
    for (const ObjectState& o : s.objects)
        objs.push_back({{"x", o.x},
                        {"y", o.y},
                        {"theta", o.theta},
                        {"base_z", o.base_z},
                        {"status", to_string(o.status)}});
    j = json{{"objects", objs},
             {"tool", {s.tool.x, s.tool.y, s.tool.z, s.tool.theta}},
             {"gripper", to_string(s.gripper)},
             {"held", s.held},
             {"grasp_offset", {s.grasp_offset.x, s.grasp_offset.y}},
             {"grasp_rel_yaw", s.grasp_rel_yaw}};
}

inline void from_json(const json& j, SimState& s) {
    s = SimState{};
    for (const auto& oj : j.at("objects")) {
        ObjectState o;
        o.x = oj.at("x").get<double>();
        o.y = oj.at("y").get<double>();
        o.theta = oj.at("theta").get<double>();
        o.base_z = oj.at("base_z").get<double>();
        std::string st = oj.at("status").get<std::string>();
        o.status = st == "held" ? ObjectStatus::Held
                                : (st == "inserted" ? ObjectStatus::Inserted
                                                    : ObjectStatus::OnTable);
        s.objects.push_back(o);
    }
    s.tool = ToolPose{j.at("tool").at(0).get<double>(), j.at("tool").at(1).get<double>(),
                      j.at("tool").at(2).get<double>(), j.at("tool").at(3).get<double>()};
    s.gripper = gripper_from_string(j.at("gripper").get<std::string>());
    s.held = j.at("held").get<int>();
    s.grasp_offset = {j.at("grasp_offset").at(0).get<double>(),
                      j.at("grasp_offset").at(1).get<double>()};
    s.grasp_rel_yaw = j.at("grasp_rel_yaw").get<double>();
}

// ---------------------------------------------------------------------------
// Built-in scenarios

inline SimConfig standard3_config() {
    SimConfig c;
    ShapeSpec square;
    square.kind = ShapeKind::Square;
    square.color = {0.85f, 0.12f, 0.10f};
    square.footprint = {{-0.016, -0.016}, {0.016, -0.016}, {0.016, 0.016}, {-0.016, 0.016}};
    square.height = 0.030;

    ShapeSpec triangle;
    triangle.kind = ShapeKind::Triangle;
    triangle.color = {0.92f, 0.78f, 0.15f};  // yellow, deliberately near the trapezoid orange
    triangle.footprint = {{-0.020, -0.014}, {0.020, -0.014}, {0.0, 0.022}};
    triangle.height = 0.028;

    ShapeSpec trapezoid;
    trapezoid.kind = ShapeKind::Trapezoid;
    trapezoid.color = {0.95f, 0.58f, 0.12f};  // orange
    trapezoid.footprint = {{-0.021, -0.013}, {0.021, -0.013}, {0.013, 0.013}, {-0.013, 0.013}};
    trapezoid.height = 0.032;

    c.shapes = {square, triangle, trapezoid};
    c.box.holes = {HoleSpec{ShapeKind::Square, -0.065, 0.0, 0.0, 1.25},
                   HoleSpec{ShapeKind::Triangle, 0.0, 0.0, 0.0, 1.25},
                   HoleSpec{ShapeKind::Trapezoid, 0.065, 0.0, 0.0, 1.25}};
    c.name = "standard3";
    return c;
}

inline SimConfig stacked_config() {
    SimConfig c = standard3_config();
    c.name = "stacked";
    // trapezoid on the table, triangle on top of it, square on top of that
    std::vector<ObjectInit> poses(3);
    poses[2] = ObjectInit{-0.14, -0.12, 0.0, 0.0};
    poses[1] = ObjectInit{-0.14, -0.12, 0.0, c.shapes[2].height};
    poses[0] = ObjectInit{-0.14, -0.12, 0.0, c.shapes[2].height + c.shapes[1].height};
    c.initial_poses = poses;
    return c;
}

inline SimConfig load_scenario(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open scenario: " + path.string());
    json j = json::parse(f);
    return j.get<SimConfig>();
}

// ---------------------------------------------------------------------------
// Scripted demonstration policy. Drives the tool through waypoints with
// privileged state access and records one frame per waypoint. Approach and
// grasp frames mask the target object; every post-grasp frame masks the
// sorter box, which stays in view because grasping works from well above the
// piece (long virtual fingers).

struct RecordedDemo {
    Demonstration demo;
    std::vector<SimState> states;  // one per frame; privileged, for oracle flow
    int shape_index = -1;
};

struct PolicyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

struct Waypoint {
    ToolPose pose;
    GripperCmd grip = GripperCmd::Open;
    MaskMode mask = MaskMode::ObjectOnly;
};

// Inter-frame view changes must stay small enough for patch matching: xy gaps
// bounded in meters, z gaps bounded tighter when the camera flies low (scale
// change between consecutive views grows as 1/depth).
inline void push_leg(std::vector<Waypoint>& out, const ToolPose& from, const ToolPose& to,
                     GripperCmd grip, MaskMode mask, double max_xy = 0.035,
                     double max_z = 0.03, double max_yaw = 0.09) {
    double dist_xy = std::hypot(to.x - from.x, to.y - from.y);
    double dist_z = std::abs(to.z - from.z);
    double dist_yaw = std::abs(angle_diff(to.theta, from.theta));
    int n = std::max({1, static_cast<int>(std::ceil(dist_xy / max_xy)),
                      static_cast<int>(std::ceil(dist_z / max_z)),
                      static_cast<int>(std::ceil(dist_yaw / max_yaw))});
    for (int i = 1; i <= n; ++i) {
        double a = static_cast<double>(i) / n;
        Waypoint wp;
        wp.pose.x = from.x + a * (to.x - from.x);
        wp.pose.y = from.y + a * (to.y - from.y);
        wp.pose.z = from.z + a * (to.z - from.z);
        wp.pose.theta = wrap_angle(from.theta + a * angle_diff(to.theta, from.theta));
        wp.grip = grip;
        wp.mask = mask;
        out.push_back(wp);
    }
}

// Move the simulated tool to a target pose through clamped actions.
inline SimState drive_to(SimState state, const ToolPose& target, GripperCmd grip,
                         const SimConfig& config) {
    for (int it = 0; it < 500; ++it) {
        Vec2 delta{target.x - state.tool.x, target.y - state.tool.y};
        double dz = target.z - state.tool.z;
        double dyaw = angle_diff(target.theta, state.tool.theta);
        if (delta.norm() < 1e-12 && std::abs(dz) < 1e-12 && std::abs(dyaw) < 1e-12) {
            if (state.gripper != grip) {
                Action a;
                a.gripper = grip;
                state = step(state, a, config);
            }
            return state;
        }
        Action a;
        Vec2 xa = tool_x_axis(state.tool.theta);
        Vec2 ya = tool_y_axis(state.tool.theta);
        a.dx = delta.dot(xa);
        a.dy = delta.dot(ya);
        a.dz = dz;
        a.dtheta = dyaw;
        a.gripper = state.gripper;  // actuate only at the waypoint itself
        state = step(state, a, config);
    }
    throw PolicyError("scripted policy failed to reach waypoint");
}

}  // namespace detail

inline RecordedDemo record_demonstration(const SimConfig& config, std::uint64_t scene_seed,
                                         int shape_index) {
    config.validate();
    if (shape_index < 0 || shape_index >= static_cast<int>(config.shapes.size()))
        throw std::invalid_argument("record_demonstration: bad shape index");

    SimState state = reset(config, scene_seed);
    const ObjectState& obj = state.objects[static_cast<size_t>(shape_index)];
    const HoleSpec& hole = config.hole_for(config.shapes[shape_index].kind);

    // The held phase is kept short: a small lift, then a level traverse that
    // releases directly over the hole. Short carries matter for recovery
    // behavior under injected gripper drops.
    const double grasp_z = 0.20;
    const double transport_z = 0.26;

    std::vector<detail::Waypoint> wps;
    ToolPose home = config.home;
    ToolPose above_obj{obj.x, obj.y, home.z, obj.theta};
    ToolPose grasp_pose{obj.x, obj.y, grasp_z, obj.theta};
    ToolPose lifted{obj.x, obj.y, transport_z, obj.theta};
    ToolPose insert_pose{hole.x, hole.y, transport_z, hole.theta};
    ToolPose retreat{hole.x, hole.y, 0.33, hole.theta};

    wps.push_back({home, GripperCmd::Open, MaskMode::ObjectOnly});
    detail::push_leg(wps, home, above_obj, GripperCmd::Open, MaskMode::ObjectOnly, 0.042);
    detail::push_leg(wps, above_obj, grasp_pose, GripperCmd::Open, MaskMode::ObjectOnly);
    wps.push_back({grasp_pose, GripperCmd::Closed, MaskMode::ObjectOnly});
    detail::push_leg(wps, grasp_pose, lifted, GripperCmd::Closed, MaskMode::BoxOnly, 0.035,
                     0.02);
    detail::push_leg(wps, lifted, insert_pose, GripperCmd::Closed, MaskMode::BoxOnly);
    wps.push_back({insert_pose, GripperCmd::Open, MaskMode::BoxOnly});
    detail::push_leg(wps, insert_pose, retreat, GripperCmd::Open, MaskMode::BoxOnly, 0.035,
                     0.04);

    RecordedDemo out;
    out.shape_index = shape_index;
    std::vector<Frame> frames;
    for (const detail::Waypoint& wp : wps) {
        state = detail::drive_to(state, wp.pose, wp.grip, config);
        RenderResult r = render_full(state, config, wp.mask, shape_index);
        // Dense attention masks cost flow time without adding information;
        // thin them to a sparse lattice once they get large.
        size_t count = r.frame.mask.count();
        if (count > 350) {
            int mod = count > 1200 ? 3 : 2;
            for (int y = 0; y < r.frame.mask.height; ++y)
                for (int x = 0; x < r.frame.mask.width; ++x)
                    if ((x + 2 * y) % mod != 0) r.frame.mask.set(x, y, false);
        }
        frames.push_back(std::move(r.frame));
        out.states.push_back(state);
    }

    const ObjectState& done = out.states.back().objects[static_cast<size_t>(shape_index)];
    if (done.status != ObjectStatus::Inserted)
        throw PolicyError(std::string("scripted demo did not insert the ") +
                          to_string(config.shapes[shape_index].kind));

    out.demo = Demonstration::make(to_string(config.shapes[shape_index].kind),
                                   std::move(frames));
    return out;
}

}  // namespace condserv
