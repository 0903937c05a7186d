#pragma once

// Test-side oracles. These re-derive results through routes independent of
// the library code they check: Rodrigues rotations for generating rigid
// transforms, Horn's quaternion method as an independent least-squares
// fit, and plain per-element loops for the distance formulas.

#include <cmath>
#include <vector>

#include "condserv/registration.hpp"
#include "condserv/scoring.hpp"

namespace oracle {

using condserv::Mat3;
using condserv::PointCloudPair;
using condserv::RigidTransform;
using condserv::Vec3;

inline Mat3 rodrigues(const Vec3& axis_in, double angle) {
    Vec3 k = axis_in.normalized();
    double c = std::cos(angle), s = std::sin(angle), v = 1.0 - c;
    Mat3 R;
    R.m = {{{c + k.x * k.x * v, k.x * k.y * v - k.z * s, k.x * k.z * v + k.y * s},
            {k.y * k.x * v + k.z * s, c + k.y * k.y * v, k.y * k.z * v - k.x * s},
            {k.z * k.x * v - k.y * s, k.z * k.y * v + k.x * s, c + k.z * k.z * v}}};
    return R;
}

// Horn's closed-form absolute orientation via the largest eigenvector of the
// 4x4 quaternion matrix, found by power iteration with deflation-free
// shifting. Completely independent of the Jacobi SVD route.
inline RigidTransform horn_fit(const PointCloudPair& pair) {
    size_t n = pair.size();
    Vec3 cd{}, cl{};
    for (size_t i = 0; i < n; ++i) {
        cd += pair.demo_points[i];
        cl += pair.live_points[i];
    }
    cd = cd * (1.0 / static_cast<double>(n));
    cl = cl * (1.0 / static_cast<double>(n));

    double Sxx = 0, Sxy = 0, Sxz = 0, Syx = 0, Syy = 0, Syz = 0, Szx = 0, Szy = 0, Szz = 0;
    for (size_t i = 0; i < n; ++i) {
        Vec3 a = pair.demo_points[i] - cd;
        Vec3 b = pair.live_points[i] - cl;
        Sxx += a.x * b.x; Sxy += a.x * b.y; Sxz += a.x * b.z;
        Syx += a.y * b.x; Syy += a.y * b.y; Syz += a.y * b.z;
        Szx += a.z * b.x; Szy += a.z * b.y; Szz += a.z * b.z;
    }

    double N[4][4] = {
        {Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx},
        {Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz},
        {Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy},
        {Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz}};

    // shift to make the largest eigenvalue dominant in magnitude
    double shift = 0;
    for (auto& row : N)
        for (double v : row) shift += std::abs(v);
    for (int i = 0; i < 4; ++i) N[i][i] += shift;

    double q[4] = {1, 0.3, -0.2, 0.1};
    for (int it = 0; it < 400; ++it) {
        double r[4] = {0, 0, 0, 0};
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) r[i] += N[i][j] * q[j];
        double norm = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + r[3] * r[3]);
        for (int i = 0; i < 4; ++i) q[i] = r[i] / norm;
    }

    double w = q[0], x = q[1], y = q[2], z = q[3];
    RigidTransform tf;
    tf.R.m = {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
               {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
               {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
    tf.t = cl - tf.R * cd;
    return tf;
}

// Naive per-element re-summations of the three distances.

inline double naive_point_quality(const condserv::Registration& reg,
                                  const PointCloudPair& pair) {
    double sum = 0;
    for (int i : reg.inliers) {
        size_t k = static_cast<size_t>(i);
        Vec3 m = reg.transform.R * pair.demo_points[k];
        double dx = m.x + reg.transform.t.x - pair.live_points[k].x;
        double dy = m.y + reg.transform.t.y - pair.live_points[k].y;
        double dz = m.z + reg.transform.t.z - pair.live_points[k].z;
        sum += std::sqrt(dx * dx + dy * dy + dz * dz);
    }
    return sum / static_cast<double>(reg.inliers.size());
}

inline double naive_color_quality(const condserv::Registration& reg,
                                  const PointCloudPair& pair) {
    double sum = 0;
    for (int i : reg.inliers) {
        size_t k = static_cast<size_t>(i);
        double dx = pair.demo_colors[k].x - pair.live_colors[k].x;
        double dy = pair.demo_colors[k].y - pair.live_colors[k].y;
        double dz = pair.demo_colors[k].z - pair.live_colors[k].z;
        sum += std::sqrt(dx * dx + dy * dy + dz * dz);
    }
    return sum / static_cast<double>(reg.inliers.size());
}

inline double naive_reprojection(const condserv::Frame& demo, const condserv::Frame& live,
                                 const condserv::FlowField& flow) {
    double sum = 0;
    size_t count = 0;
    for (int y = 0; y < demo.height(); ++y) {
        for (int x = 0; x < demo.width(); ++x) {
            if (!demo.mask.at(x, y)) continue;
            ++count;
            double penalty = std::sqrt(3.0);
            if (!flow.is_valid(x, y)) {
                sum += penalty;
                continue;
            }
            double sx = x + flow.u[flow.idx(x, y)];
            double sy = y + flow.v[flow.idx(x, y)];
            if (sx < 0 || sx > demo.width() - 1 || sy < 0 || sy > demo.height() - 1) {
                sum += penalty;
                continue;
            }
            // bilinear sample, re-derived
            int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, demo.width() - 1);
            int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, demo.height() - 1);
            int x1 = std::min(x0 + 1, demo.width() - 1);
            int y1 = std::min(y0 + 1, demo.height() - 1);
            double fx = sx - x0, fy = sy - y0;
            double err2 = 0;
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
    return sum / static_cast<double>(count);
}

// Central finite differences of the mean batch BCE with respect to one
// parameter of the model.
inline double fd_gradient(condserv::MlpModel model, bool is_weight, int layer, size_t index,
                          const std::vector<condserv::BatchRow>& batch, double h = 1e-4) {
    auto loss_of = [&](double delta) {
        auto& param = is_weight ? model.weights[static_cast<size_t>(layer)]
                                : model.biases[static_cast<size_t>(layer)];
        double saved = param[index];
        param[index] = saved + delta;
        double loss = 0;
        for (const auto& row : batch) loss += condserv::bce_loss(model.forward(row.x), row.y);
        param[index] = saved;
        return loss / static_cast<double>(batch.size());
    };
    return (loss_of(h) - loss_of(-h)) / (2 * h);
}

// Independent forward pass recording the sign of every ReLU pre-activation.
inline std::vector<int> relu_signs(const condserv::MlpModel& m, const std::vector<double>& x) {
    std::vector<int> signs;
    std::vector<double> act = x;
    for (int l = 0; l < m.layer_count(); ++l) {
        std::vector<double> z(static_cast<size_t>(m.sizes[l + 1]));
        for (int o = 0; o < m.sizes[l + 1]; ++o) {
            double s = m.biases[static_cast<size_t>(l)][static_cast<size_t>(o)];
            for (int i = 0; i < m.sizes[l]; ++i)
                s += m.weights[static_cast<size_t>(l)][static_cast<size_t>(o) * m.sizes[l] + i] *
                     act[static_cast<size_t>(i)];
            z[static_cast<size_t>(o)] = s;
        }
        if (l < m.layer_count() - 1) {
            for (double& v : z) {
                signs.push_back(v > 0 ? 1 : 0);
                v = v > 0 ? v : 0.0;
            }
        }
        act = std::move(z);
    }
    return signs;
}

// Central differences are meaningless across a ReLU kink: true when a +-h
// perturbation of the parameter flips any hidden unit's activation sign for
// any row of the batch.
inline bool crosses_relu_kink(condserv::MlpModel model, bool is_weight, int layer,
                              size_t index, const std::vector<condserv::BatchRow>& batch,
                              double h = 1e-4) {
    auto& param = is_weight ? model.weights[static_cast<size_t>(layer)]
                            : model.biases[static_cast<size_t>(layer)];
    double saved = param[index];
    for (const auto& row : batch) {
        param[index] = saved + h;
        std::vector<int> plus = relu_signs(model, row.x);
        param[index] = saved - h;
        std::vector<int> minus = relu_signs(model, row.x);
        param[index] = saved;
        if (plus != minus) return true;
    }
    return false;
}

}  // namespace oracle
