#pragma once

// Dense demo-to-live correspondence. Two estimators behind one interface:
//
//  * oracle flow — exact correspondence computed from privileged simulator
//    states; isolates selection/servoing behavior from flow quality.
//  * block matching — integer SSD search over RGB patches with parabolic
//    sub-pixel refinement; realistic flow errors (undecided matches, wrong
//    object, drift) arise here naturally.

#include <map>
#include <memory>

#include "condserv/demo.hpp"
#include "condserv/sim.hpp"

namespace condserv {

struct FlowField {
    int width = 0, height = 0;
    std::vector<float> u, v;          // displacement demo -> live, pixels
    std::vector<std::uint8_t> valid;  // invalid pixels carry u = v = 0

    FlowField() = default;
    FlowField(int w, int h)
        : width(w),
          height(h),
          u(static_cast<size_t>(w) * h, 0.f),
          v(static_cast<size_t>(w) * h, 0.f),
          valid(static_cast<size_t>(w) * h, 0) {}

    size_t idx(int x, int y) const { return static_cast<size_t>(y) * width + x; }
    bool is_valid(int x, int y) const { return valid[idx(x, y)] != 0; }
    void set(int x, int y, float du, float dv) {
        u[idx(x, y)] = du;
        v[idx(x, y)] = dv;
        valid[idx(x, y)] = 1;
    }
};

// A frame plus optional privileged context. File-based estimators use only
// the frame; the oracle needs the simulator state it was rendered from.
struct FrameRef {
    const Frame* frame = nullptr;
    const SimState* state = nullptr;
    const SimConfig* config = nullptr;

    FrameRef() = default;
    explicit FrameRef(const Frame& f) : frame(&f) {}
    FrameRef(const Frame& f, const SimState& s, const SimConfig& c)
        : frame(&f), state(&s), config(&c) {}
};

class FlowEstimator {
public:
    virtual ~FlowEstimator() = default;
    virtual FlowField estimate(const FrameRef& demo, const FrameRef& live) const = 0;
    virtual std::string name() const = 0;
};

// ---------------------------------------------------------------------------
// Oracle flow

// Exact per-pixel correspondence between two simulator states. For each demo
// pixel on a foreground entity (an object or the sorter box), the material
// point is carried through that entity's rigid motion and projected into the
// live view. Pixels whose material point is occluded or out of frame are
// invalid; ground and finger pixels are invalid.
inline FlowField oracle_flow(const SimState& demo_state, const SimState& live_state,
                             const SimConfig& config,
                             const RenderResult* demo_render = nullptr,
                             const RenderResult* live_render = nullptr) {
    RenderResult demo_local, live_local;
    if (!demo_render) {
        demo_local = render_full(demo_state, config);
        demo_render = &demo_local;
    }
    if (!live_render) {
        live_local = render_full(live_state, config);
        live_render = &live_local;
    }

    const int W = config.width, H = config.height;
    FlowField flow(W, H);
    CameraPose demo_cam = camera_for_tool(demo_state.tool, config.camera_offset);
    CameraPose live_cam = camera_for_tool(live_state.tool, config.camera_offset);

    // Per-entity rigid motion from demo to live: planar rotation about the
    // entity center plus a translation that includes the height change.
    struct EntityMotion {
        double dtheta = 0;
        Vec2 c_demo{}, c_live{};
        double z_demo = 0, z_live = 0;
    };
    std::map<int, EntityMotion> motions;
    motions[kEntityBox] = EntityMotion{};  // static; z offsets unused for identity
    for (size_t i = 0; i < demo_state.objects.size(); ++i) {
        const ObjectState& od = demo_state.objects[i];
        const ObjectState& ol = live_state.objects[i];
        EntityMotion m;
        m.dtheta = angle_diff(ol.theta, od.theta);
        m.c_demo = {od.x, od.y};
        m.c_live = {ol.x, ol.y};
        m.z_demo = object_top_z(demo_state, config, static_cast<int>(i));
        m.z_live = object_top_z(live_state, config, static_cast<int>(i));
        motions[static_cast<int>(i)] = m;
    }

    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            int entity = demo_render->entity_at(x, y);
            if (entity == kEntityGround || entity == kEntityFinger) continue;

            double depth = demo_render->frame.depth.at(x, y);
            double surf_z = demo_cam.z - depth;
            Vec3 world = pixel_ray_at_height(demo_cam, config.intrinsics, x, y, surf_z);

            Vec3 live_world = world;
            if (entity >= 0) {
                const EntityMotion& m = motions[entity];
                Vec2 rel{world.x - m.c_demo.x, world.y - m.c_demo.y};
                Vec2 rot = detail::rotate2(rel, m.dtheta);
                live_world = {m.c_live.x + rot.x, m.c_live.y + rot.y, m.z_live};
            }

            PixelProjection proj = project_point(live_cam, config.intrinsics, live_world);
            if (!proj.in_front) continue;
            int lx = static_cast<int>(std::lround(proj.px));
            int ly = static_cast<int>(std::lround(proj.py));
            if (lx < 0 || lx >= W || ly < 0 || ly >= H) continue;
            if (live_render->entity_at(lx, ly) != entity) continue;  // occluded

            flow.set(x, y, static_cast<float>(proj.px - x), static_cast<float>(proj.py - y));
        }
    }
    return flow;
}

class OracleFlowEstimator : public FlowEstimator {
public:
    FlowField estimate(const FrameRef& demo, const FrameRef& live) const override {
        if (!demo.state || !live.state || !demo.config)
            throw std::runtime_error(
                "oracle flow requires simulator states (demo recorded without states?)");
        const RenderResult* dr = cached_render(*demo.state, *demo.config);
        RenderResult lr = render_full(*live.state, *demo.config);
        return oracle_flow(*demo.state, *live.state, *demo.config, dr, &lr);
    }

    std::string name() const override { return "oracle"; }

private:
    // Demo states are stable across an episode; cache their renders.
    const RenderResult* cached_render(const SimState& state, const SimConfig& config) const {
        auto it = cache_.find(&state);
        if (it == cache_.end())
            it = cache_.emplace(&state, render_full(state, config)).first;
        return &it->second;
    }

    mutable std::map<const SimState*, RenderResult> cache_;
};

// ---------------------------------------------------------------------------
// Block matching

struct BlockMatchParams {
    int patch = 9;    // odd patch size
    int search = 16;  // +- displacement range, pixels
    double tau_ssd = -1.0;  // rejection threshold; < 0 selects the default

    double threshold() const {
        if (tau_ssd >= 0) return tau_ssd;
        return 0.5 * patch * patch * 3.0 * 0.2 * 0.2;
    }
};

namespace detail {

// Candidate displacements ordered by magnitude, then u, then v, so that the
// first strict minimum found honors the tie-break rule.
inline const std::vector<std::pair<int, int>>& bm_offsets(int search) {
    static std::map<int, std::vector<std::pair<int, int>>> cache;
    auto it = cache.find(search);
    if (it != cache.end()) return it->second;
    std::vector<std::pair<int, int>> offs;
    for (int u = -search; u <= search; ++u)
        for (int v = -search; v <= search; ++v) offs.emplace_back(u, v);
    std::stable_sort(offs.begin(), offs.end(), [](const auto& a, const auto& b) {
        long ma = static_cast<long>(a.first) * a.first + static_cast<long>(a.second) * a.second;
        long mb = static_cast<long>(b.first) * b.first + static_cast<long>(b.second) * b.second;
        if (ma != mb) return ma < mb;
        if (a.first != b.first) return a.first < b.first;
        return a.second < b.second;
    });
    return cache.emplace(search, std::move(offs)).first->second;
}

// SSD over an rgb patch with early exit once the running sum exceeds bound.
// Rows accumulate in float (fixed order, deterministic), totals in double.
inline double patch_ssd(const Image3f& a, int ax, int ay, const Image3f& b, int bx, int by,
                        int patch, double bound) {
    int half = patch / 2;
    double sum = 0.0;
    for (int dy = -half; dy <= half; ++dy) {
        const float* pa = a.px(ax - half, ay + dy);
        const float* pb = b.px(bx - half, by + dy);
        float row = 0.f;
        for (int i = 0; i < patch * 3; ++i) {
            float d = pa[i] - pb[i];
            row += d * d;
        }
        sum += row;
        if (sum > bound) return sum;
    }
    return sum;
}

}  // namespace detail

// Integer-displacement block matching over demo-mask pixels, with parabolic
// sub-pixel refinement per axis. Pixels whose best SSD exceeds the rejection
// threshold are invalid, as are unmasked pixels.
inline FlowField block_matching_flow(const Frame& demo, const Frame& live,
                                     const BlockMatchParams& params = {}) {
    if (demo.width() != live.width() || demo.height() != live.height())
        throw std::invalid_argument("block_matching_flow: dimension mismatch");
    if (params.patch % 2 == 0 || params.patch < 3)
        throw std::invalid_argument("block_matching_flow: patch must be odd and >= 3");
    const int W = demo.width(), H = demo.height();
    if (params.patch > W || params.patch > H)
        throw std::invalid_argument("block_matching_flow: patch larger than image");

    FlowField flow(W, H);
    const int half = params.patch / 2;
    const double tau = params.threshold();
    const auto& offsets = detail::bm_offsets(params.search);

    auto ssd_at = [&](int x, int y, int u, int v, double bound) {
        return detail::patch_ssd(demo.rgb, x, y, live.rgb, x + u, y + v, params.patch, bound);
    };

    for (int y = half; y < H - half; ++y) {
        for (int x = half; x < W - half; ++x) {
            if (!demo.mask.at(x, y)) continue;

            const float* dc = demo.rgb.px(x, y);
            double best = std::numeric_limits<double>::infinity();
            int best_u = 0, best_v = 0;
            for (const auto& [u, v] : offsets) {
                int bx = x + u, by = y + v;
                if (bx - half < 0 || bx + half >= W || by - half < 0 || by + half >= H)
                    continue;
                // Exceeding tau makes the pixel invalid regardless of the
                // argmin, so tau also bounds the scan.
                double bound = std::min(best, tau);
                // center-pixel difference is a lower bound on the patch SSD
                const float* lc = live.rgb.px(bx, by);
                double c0 = static_cast<double>(dc[0]) - lc[0];
                double c1 = static_cast<double>(dc[1]) - lc[1];
                double c2 = static_cast<double>(dc[2]) - lc[2];
                if (c0 * c0 + c1 * c1 + c2 * c2 > bound) continue;
                double s = ssd_at(x, y, u, v, bound);
                if (s < best) {
                    best = s;
                    best_u = u;
                    best_v = v;
                }
            }
            if (!(best <= tau)) continue;  // rejected (or no candidate fit)

            // parabolic refinement along each axis; an exact match needs none
            double du = 0, dv = 0;
            if (best > 0.0 && std::abs(best_u) < params.search && x + best_u - half - 1 >= 0 &&
                x + best_u + half + 1 < W) {
                double sm = ssd_at(x, y, best_u - 1, best_v, 1e30);
                double sp = ssd_at(x, y, best_u + 1, best_v, 1e30);
                double denom = sm - 2 * best + sp;
                if (denom > 1e-12) du = std::clamp(0.5 * (sm - sp) / denom, -0.5, 0.5);
            }
            if (best > 0.0 && std::abs(best_v) < params.search && y + best_v - half - 1 >= 0 &&
                y + best_v + half + 1 < H) {
                double sm = ssd_at(x, y, best_u, best_v - 1, 1e30);
                double sp = ssd_at(x, y, best_u, best_v + 1, 1e30);
                double denom = sm - 2 * best + sp;
                if (denom > 1e-12) dv = std::clamp(0.5 * (sm - sp) / denom, -0.5, 0.5);
            }
            flow.set(x, y, static_cast<float>(best_u + du), static_cast<float>(best_v + dv));
        }
    }
    return flow;
}

class BlockMatchingEstimator : public FlowEstimator {
public:
    explicit BlockMatchingEstimator(BlockMatchParams params = {}) : params_(params) {}

    FlowField estimate(const FrameRef& demo, const FrameRef& live) const override {
        return block_matching_flow(*demo.frame, *live.frame, params_);
    }

    std::string name() const override { return "blockmatch"; }

private:
    BlockMatchParams params_;
};

inline std::unique_ptr<FlowEstimator> make_estimator(const std::string& name) {
    if (name == "oracle") return std::make_unique<OracleFlowEstimator>();
    if (name == "blockmatch") return std::make_unique<BlockMatchingEstimator>();
    throw std::invalid_argument("unknown flow estimator: " + name);
}

// ---------------------------------------------------------------------------
// Warp

struct WarpedImage {
    Image3f rgb;
    MaskImage valid;
};

// warp(x, y) = bilinear sample of live at (x + u, y + v). Samples outside the
// image or on invalid flow are marked invalid.
inline WarpedImage warp(const Image3f& live_rgb, const FlowField& flow) {
    if (live_rgb.width != flow.width || live_rgb.height != flow.height)
        throw std::invalid_argument("warp: dimension mismatch");
    WarpedImage out;
    out.rgb = Image3f(flow.width, flow.height);
    out.valid = MaskImage(flow.width, flow.height, false);
    for (int y = 0; y < flow.height; ++y) {
        for (int x = 0; x < flow.width; ++x) {
            if (!flow.is_valid(x, y)) continue;
            double sx = x + flow.u[flow.idx(x, y)];
            double sy = y + flow.v[flow.idx(x, y)];
            if (sx < 0 || sx > flow.width - 1 || sy < 0 || sy > flow.height - 1) continue;
            bilinear_rgb(live_rgb, sx, sy, out.rgb.px(x, y));
            out.valid.set(x, y, true);
        }
    }
    return out;
}

}  // namespace condserv
