#pragma once

// The four demonstration-selection distances. Each demo is scored from its
// first frame against the current live view; lower is better.
//
//   point_quality  mean inlier 3D residual under the fitted transform
//   color_quality  mean inlier RGB distance over the same inlier set
//   reprojection   mean masked photometric error of the warped live view;
//                  pixels whose warp is invalid cost the maximum RGB
//                  distance sqrt(3) and stay in the denominator
//   mlp_distance   1 - predicted success probability from the three above
//
// Registration failures make the point/color distances unscorable rather
// than erroring; the reprojection distance only needs flow and survives them.

#include "condserv/mlp.hpp"
#include "condserv/registration.hpp"

namespace condserv {

enum class UnscorableReason { InsufficientCorrespondences, InsufficientInliers, EmptyMask };

inline const char* to_string(UnscorableReason r) {
    switch (r) {
        case UnscorableReason::InsufficientCorrespondences: return "insufficient_correspondences";
        case UnscorableReason::InsufficientInliers: return "insufficient_inliers";
        default: return "empty_mask";
    }
}

struct ScoreReport {
    std::string demo_id;
    std::optional<double> d_pq;
    std::optional<double> d_cq;
    std::optional<double> d_rp;
    std::optional<double> d_mlp;
    int inlier_count = 0;
    std::optional<UnscorableReason> reason;  // why any missing score is missing
};

inline constexpr double kInvalidWarpPenalty = 1.7320508075688772;  // sqrt(3)

inline double point_quality(const Registration& reg, const PointCloudPair& pair) {
    if (reg.inliers.size() < 3)
        throw RegistrationError(RegistrationError::Kind::InsufficientInliers,
                                "point_quality: needs >= 3 inliers");
    double sum = 0.0;
    for (int i : reg.inliers) {
        size_t k = static_cast<size_t>(i);
        sum += (reg.transform.apply(pair.demo_points[k]) - pair.live_points[k]).norm();
    }
    return sum / static_cast<double>(reg.inliers.size());
}

inline double color_quality(const Registration& reg, const PointCloudPair& pair) {
    if (reg.inliers.size() < 3)
        throw RegistrationError(RegistrationError::Kind::InsufficientInliers,
                                "color_quality: needs >= 3 inliers");
    double sum = 0.0;
    for (int i : reg.inliers) {
        size_t k = static_cast<size_t>(i);
        sum += (pair.demo_colors[k] - pair.live_colors[k]).norm();
    }
    return sum / static_cast<double>(reg.inliers.size());
}

struct EmptyMaskError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Computed in double precision throughout; the warp validity rule matches
// warp() exactly.
inline double reprojection(const Frame& demo, const Frame& live, const FlowField& flow) {
    if (live.width() != flow.width || live.height() != flow.height ||
        demo.width() != flow.width || demo.height() != flow.height)
        throw std::invalid_argument("reprojection: dimension mismatch");
    double sum = 0.0;
    size_t count = 0;
    for (int y = 0; y < demo.height(); ++y) {
        for (int x = 0; x < demo.width(); ++x) {
            if (!demo.mask.at(x, y)) continue;
            ++count;
            if (!flow.is_valid(x, y)) {
                sum += kInvalidWarpPenalty;
                continue;
            }
            double sx = x + flow.u[flow.idx(x, y)];
            double sy = y + flow.v[flow.idx(x, y)];
            if (sx < 0 || sx > demo.width() - 1 || sy < 0 || sy > demo.height() - 1) {
                sum += kInvalidWarpPenalty;
                continue;
            }
            int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, demo.width() - 1);
            int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, demo.height() - 1);
            int x1 = std::min(x0 + 1, demo.width() - 1);
            int y1 = std::min(y0 + 1, demo.height() - 1);
            double fx = sx - x0, fy = sy - y0;
            double err2 = 0.0;
            for (int c = 0; c < 3; ++c) {
                double top = live.rgb.px(x0, y0)[c] * (1 - fx) + live.rgb.px(x1, y0)[c] * fx;
                double bot = live.rgb.px(x0, y1)[c] * (1 - fx) + live.rgb.px(x1, y1)[c] * fx;
                double w = top * (1 - fy) + bot * fy;
                double d = w - demo.rgb.px(x, y)[c];
                err2 += d * d;
            }
            sum += std::sqrt(err2);
        }
    }
    if (count == 0) throw EmptyMaskError("reprojection: demo mask is empty");
    return sum / static_cast<double>(count);
}

inline double mlp_distance(const ScoreReport& report, const MlpModel& model) {
    if (!report.d_pq || !report.d_cq || !report.d_rp)
        throw std::invalid_argument("mlp_distance: requires d_pq, d_cq, d_rp");
    return 1.0 - model.predict({*report.d_pq, *report.d_cq, *report.d_rp});
}

// ---------------------------------------------------------------------------

// Score one demo's first frame against the live view. Never throws for
// registration/mask failures; those yield a partial report with a reason.
inline ScoreReport score_demo(const FrameRef& live, const Demonstration& demo,
                              const FrameRef& demo_first, const FlowEstimator& estimator,
                              const MlpModel* model = nullptr) {
    ScoreReport report;
    report.demo_id = demo.id;

    const Frame& d0 = *demo_first.frame;
    if (d0.mask.count() == 0) {
        report.reason = UnscorableReason::EmptyMask;
        return report;
    }

    FlowField flow = estimator.estimate(demo_first, live);
    report.d_rp = reprojection(d0, *live.frame, flow);

    try {
        PointCloudPair pair = unproject(d0, flow, *live.frame);
        Registration reg = register_clouds(pair);
        report.inlier_count = static_cast<int>(reg.inliers.size());
        report.d_pq = point_quality(reg, pair);
        report.d_cq = color_quality(reg, pair);
    } catch (const RegistrationError& e) {
        report.reason = e.kind == RegistrationError::Kind::InsufficientInliers
                            ? UnscorableReason::InsufficientInliers
                            : UnscorableReason::InsufficientCorrespondences;
    }

    if (model && report.d_pq && report.d_cq && report.d_rp)
        report.d_mlp = mlp_distance(report, *model);
    return report;
}

// A demonstration plus the simulator states it was recorded from. States are
// privileged information used only by the oracle flow estimator; demos loaded
// without them still work with file-based estimators.
struct DemoBundle {
    Demonstration demo;
    std::vector<SimState> states;
    const SimConfig* config = nullptr;

    FrameRef frame_ref(size_t k) const {
        if (k < states.size() && config)
            return FrameRef(demo.frames[k], states[k], *config);
        return FrameRef(demo.frames[k]);
    }
    FrameRef first_ref() const { return frame_ref(0); }
};

inline std::vector<ScoreReport> score_all(const FrameRef& live,
                                          const std::vector<DemoBundle>& demos,
                                          const FlowEstimator& estimator,
                                          const MlpModel* model = nullptr) {
    std::vector<ScoreReport> reports;
    reports.reserve(demos.size());
    for (const DemoBundle& b : demos)
        reports.push_back(score_demo(live, b.demo, b.first_ref(), estimator, model));
    return reports;
}

inline json score_report_to_json(const ScoreReport& r) {
    json j;
    j["demo_id"] = r.demo_id;
    j["d_pq"] = r.d_pq ? json(*r.d_pq) : json(nullptr);
    j["d_cq"] = r.d_cq ? json(*r.d_cq) : json(nullptr);
    j["d_rp"] = r.d_rp ? json(*r.d_rp) : json(nullptr);
    j["d_mlp"] = r.d_mlp ? json(*r.d_mlp) : json(nullptr);
    j["inlier_count"] = r.inlier_count;
    if (r.reason) j["unscorable"] = to_string(*r.reason);
    return j;
}

}  // namespace condserv
