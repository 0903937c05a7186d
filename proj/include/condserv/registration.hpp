#pragma once

// Masked flow correspondences -> 3D point pairs -> rigid transform.
//
// Convention: the fitted transform maps demo points into live points,
// R * p_demo + t ~ p_live. Residuals and the inlier set follow that
// direction. The SVD is a self-contained one-sided Jacobi on the 3x3
// cross-covariance, so this header has no linear-algebra dependency.

#include "condserv/flow.hpp"

namespace condserv {

struct PointCloudPair {
    std::vector<Vec3> demo_points, live_points;  // camera-frame, meters
    std::vector<Vec3> demo_colors, live_colors;  // rgb in [0,1]

    size_t size() const { return demo_points.size(); }
};

struct RigidTransform {
    Mat3 R;
    Vec3 t;

    Vec3 apply(const Vec3& p) const { return R * p + t; }
};

struct Registration {
    RigidTransform transform;
    std::vector<int> inliers;     // indices into the correspondence list
    double mean_residual = 0.0;   // meters, over inliers
};

struct RegistrationError : std::runtime_error {
    enum class Kind { InsufficientCorrespondences, DegenerateGeometry, InsufficientInliers };
    Kind kind;

    RegistrationError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

inline double yaw_of(const Mat3& R) { return std::atan2(R(1, 0), R(0, 0)); }

// ---------------------------------------------------------------------------
// 3x3 SVD, one-sided Jacobi: A V = B with orthogonal columns, A = U S V^T.

struct Svd3 {
    Mat3 U, V;
    Vec3 sigma;
};

inline Svd3 svd3(const Mat3& A) {
    Mat3 B = A;
    Mat3 V = Mat3::identity();

    auto col = [](const Mat3& M, int c) { return Vec3{M(0, c), M(1, c), M(2, c)}; };
    auto rotate_cols = [](Mat3& M, int p, int q, double c, double s) {
        for (int r = 0; r < 3; ++r) {
            double mp = M(r, p), mq = M(r, q);
            M(r, p) = c * mp - s * mq;
            M(r, q) = s * mp + c * mq;
        }
    };

    for (int sweep = 0; sweep < 60; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < 2; ++p) {
            for (int q = p + 1; q < 3; ++q) {
                Vec3 bp = col(B, p), bq = col(B, q);
                double a = bp.dot(bp), b = bq.dot(bq), c = bp.dot(bq);
                off = std::max(off, std::abs(c) / std::max(1e-300, std::sqrt(a * b)));
                if (std::abs(c) < 1e-300) continue;
                double zeta = (b - a) / (2.0 * c);
                double t = (zeta >= 0 ? 1.0 : -1.0) /
                           (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                double cs = 1.0 / std::sqrt(1.0 + t * t);
                double sn = cs * t;
                rotate_cols(B, p, q, cs, sn);
                rotate_cols(V, p, q, cs, sn);
            }
        }
        if (off < 1e-15) break;
    }

    double s[3];
    Vec3 u[3];
    for (int c = 0; c < 3; ++c) {
        Vec3 bc = col(B, c);
        s[c] = bc.norm();
        u[c] = s[c] > 0 ? bc * (1.0 / s[c]) : Vec3{};
    }
    // sort singular values descending, permuting U and V columns together
    int ord[3] = {0, 1, 2};
    std::sort(ord, ord + 3, [&](int a, int b) { return s[a] > s[b]; });
    double ss[3];
    Vec3 uu[3];
    Mat3 Vs;
    for (int c = 0; c < 3; ++c) {
        ss[c] = s[ord[c]];
        uu[c] = u[ord[c]];
        for (int r = 0; r < 3; ++r) Vs(r, c) = V(r, ord[c]);
    }
    // A vanishing third direction (planar cloud) leaves B's smallest column
    // noise-dominated; rebuild it orthogonal to the first two.
    if (ss[0] > 0 && ss[2] <= 1e-12 * ss[0]) {
        Vec3 n = uu[0].cross(uu[1]);
        if (n.norm() > 0.5) uu[2] = n.normalized();
    }

    Svd3 out;
    out.sigma = {ss[0], ss[1], ss[2]};
    for (int c = 0; c < 3; ++c)
        for (int r = 0; r < 3; ++r)
            out.U(r, c) = (r == 0 ? uu[c].x : r == 1 ? uu[c].y : uu[c].z);
    out.V = Vs;
    return out;
}

// ---------------------------------------------------------------------------
// unproject

// Build camera-frame 3D correspondences from masked, valid-flow pixels with
// valid depth on both sides. Live depth is read at the nearest pixel of the
// warped location (bilinear depth across object boundaries would invent
// phantom points); live color is sampled bilinearly.
inline PointCloudPair unproject(const Frame& demo, const FlowField& flow, const Frame& live) {
    if (demo.width() != flow.width || demo.height() != flow.height ||
        live.width() != flow.width || live.height() != flow.height)
        throw std::invalid_argument("unproject: dimension mismatch");

    PointCloudPair pair;
    const CameraIntrinsics& K = demo.intrinsics;
    for (int y = 0; y < flow.height; ++y) {
        for (int x = 0; x < flow.width; ++x) {
            if (!demo.mask.at(x, y) || !flow.is_valid(x, y)) continue;
            double dd = demo.depth.at(x, y);
            if (!(dd > 0)) continue;
            double lx = x + flow.u[flow.idx(x, y)];
            double ly = y + flow.v[flow.idx(x, y)];
            int lxi = static_cast<int>(std::lround(lx));
            int lyi = static_cast<int>(std::lround(ly));
            if (lxi < 0 || lxi >= flow.width || lyi < 0 || lyi >= flow.height) continue;
            double ld = live.depth.at(lxi, lyi);
            if (!(ld > 0)) continue;

            pair.demo_points.push_back(unproject_pixel(K, x, y, dd));
            pair.live_points.push_back(unproject_pixel(K, lxi, lyi, ld));
            const float* dc = demo.rgb.px(x, y);
            pair.demo_colors.push_back({dc[0], dc[1], dc[2]});
            float lc[3];
            bilinear_rgb(live.rgb, std::clamp(lx, 0.0, flow.width - 1.0),
                         std::clamp(ly, 0.0, flow.height - 1.0), lc);
            pair.live_colors.push_back({lc[0], lc[1], lc[2]});
        }
    }
    if (pair.size() < 3)
        throw RegistrationError(RegistrationError::Kind::InsufficientCorrespondences,
                                "unproject: fewer than 3 correspondences survive");
    return pair;
}

// ---------------------------------------------------------------------------
// kabsch

namespace detail {

inline RigidTransform kabsch_indices(const PointCloudPair& pair, const std::vector<int>& idx) {
    size_t n = idx.size();
    Vec3 c_demo{}, c_live{};
    for (int i : idx) {
        c_demo += pair.demo_points[static_cast<size_t>(i)];
        c_live += pair.live_points[static_cast<size_t>(i)];
    }
    c_demo = c_demo * (1.0 / static_cast<double>(n));
    c_live = c_live * (1.0 / static_cast<double>(n));

    Mat3 H;
    H.m = {{{0, 0, 0}, {0, 0, 0}, {0, 0, 0}}};
    for (int i : idx) {
        Vec3 d = pair.demo_points[static_cast<size_t>(i)] - c_demo;
        Vec3 l = pair.live_points[static_cast<size_t>(i)] - c_live;
        H(0, 0) += d.x * l.x; H(0, 1) += d.x * l.y; H(0, 2) += d.x * l.z;
        H(1, 0) += d.y * l.x; H(1, 1) += d.y * l.y; H(1, 2) += d.y * l.z;
        H(2, 0) += d.z * l.x; H(2, 1) += d.z * l.y; H(2, 2) += d.z * l.z;
    }

    Svd3 svd = svd3(H);
    if (!(svd.sigma.y > 1e-13 * std::max(svd.sigma.x, 1e-300)) || svd.sigma.x <= 0.0)
        throw RegistrationError(RegistrationError::Kind::DegenerateGeometry,
                                "kabsch: rank-deficient cross-covariance");

    double d = (svd.V * svd.U.transposed()).det();
    Mat3 D;
    D.m = {{{1, 0, 0}, {0, 1, 0}, {0, 0, d < 0 ? -1.0 : 1.0}}};
    RigidTransform tf;
    tf.R = svd.V * D * svd.U.transposed();
    tf.t = c_live - tf.R * c_demo;
    return tf;
}

}  // namespace detail

inline RigidTransform kabsch(const PointCloudPair& pair) {
    if (pair.size() < 3)
        throw RegistrationError(RegistrationError::Kind::InsufficientCorrespondences,
                                "kabsch: need at least 3 points");
    std::vector<int> all(pair.size());
    for (size_t i = 0; i < pair.size(); ++i) all[i] = static_cast<int>(i);
    return detail::kabsch_indices(pair, all);
}

// ---------------------------------------------------------------------------
// register with outlier rejection

// Fit on all pairs, drop correspondences whose residual exceeds outlier_m,
// refit once on the inliers. The reported inlier set and mean residual are
// measured under the refit transform.
inline Registration register_clouds(const PointCloudPair& pair, double outlier_m = 0.005) {
    RigidTransform initial = kabsch(pair);

    auto residual = [&](const RigidTransform& tf, size_t i) {
        return (tf.apply(pair.demo_points[i]) - pair.live_points[i]).norm();
    };

    std::vector<int> inliers;
    for (size_t i = 0; i < pair.size(); ++i)
        if (residual(initial, i) <= outlier_m) inliers.push_back(static_cast<int>(i));
    if (inliers.size() < 3)
        throw RegistrationError(RegistrationError::Kind::InsufficientInliers,
                                "register: fewer than 3 inliers");

    Registration reg;
    reg.transform = detail::kabsch_indices(pair, inliers);

    reg.inliers.clear();
    double sum = 0.0;
    for (size_t i = 0; i < pair.size(); ++i) {
        double r = residual(reg.transform, i);
        if (r <= outlier_m) {
            reg.inliers.push_back(static_cast<int>(i));
            sum += r;
        }
    }
    if (reg.inliers.size() < 3)
        throw RegistrationError(RegistrationError::Kind::InsufficientInliers,
                                "register: fewer than 3 inliers after refit");
    reg.mean_residual = sum / static_cast<double>(reg.inliers.size());
    return reg;
}

// ---------------------------------------------------------------------------
// transform -> action

// The camera mounting in camera.hpp makes the corrective end-effector motion
// the plain negation of the fitted transform: dx,dy,dz = -t and
// dtheta = -yaw(R). The demo frame's recorded gripper command rides along.
inline Action transform_to_action(const Registration& reg, GripperCmd demo_gripper,
                                  const ActionLimits& limits = {}) {
    Action a;
    a.dx = -reg.transform.t.x;
    a.dy = -reg.transform.t.y;
    a.dz = -reg.transform.t.z;
    a.dtheta = -yaw_of(reg.transform.R);
    a.gripper = demo_gripper;
    return a.clamped(limits);
}

}  // namespace condserv
