#pragma once

// Pinhole camera for the eye-in-hand setup. The camera hangs a fixed distance
// above the tool, looks straight down, and is mounted rotated 180 degrees
// about its optical axis relative to the tool frame (a common mounting for
// wrist cameras). With tool yaw phi the camera axes in world coordinates are
//
//   x_cam = (-cos phi, -sin phi, 0)
//   y_cam = (-sin phi,  cos phi, 0)
//   z_cam = (0, 0, -1)              (optical axis, pointing at the table)
//
// which is right-handed. Depth is the camera-frame z coordinate. Under this
// mounting the registration transform between a demo view and the live view
// converts to a corrective tool motion by plain negation of its components,
// which is what transform_to_action relies on.

#include "condserv/core.hpp"

namespace condserv {

struct CameraIntrinsics {
    double fx = 0, fy = 0, cx = 0, cy = 0;

    void validate() const {
        if (!(fx > 0) || !(fy > 0))
            throw std::invalid_argument("CameraIntrinsics: focal lengths must be positive");
    }
};

// Tool center point pose: position in meters, yaw in radians. The tool points
// down; yaw is rotation about the vertical.
struct ToolPose {
    double x = 0, y = 0, z = 0, theta = 0;
};

struct CameraPose {
    double x = 0, y = 0, z = 0, yaw = 0;  // yaw = tool yaw

    Vec3 x_axis() const { return {-std::cos(yaw), -std::sin(yaw), 0.0}; }
    Vec3 y_axis() const { return {-std::sin(yaw), std::cos(yaw), 0.0}; }
    static Vec3 z_axis() { return {0.0, 0.0, -1.0}; }
    Vec3 position() const { return {x, y, z}; }

    Vec3 world_to_cam(const Vec3& p) const {
        Vec3 d = p - position();
        return {d.dot(x_axis()), d.dot(y_axis()), d.dot(z_axis())};
    }

    Vec3 cam_to_world(const Vec3& q) const {
        return position() + x_axis() * q.x + y_axis() * q.y + z_axis() * q.z;
    }
};

inline CameraPose camera_for_tool(const ToolPose& tool, double camera_offset) {
    return CameraPose{tool.x, tool.y, tool.z + camera_offset, tool.theta};
}

struct PixelProjection {
    double px = 0, py = 0, depth = 0;
    bool in_front = false;
};

inline PixelProjection project_point(const CameraPose& cam, const CameraIntrinsics& K,
                                     const Vec3& world) {
    Vec3 q = cam.world_to_cam(world);
    PixelProjection out;
    out.depth = q.z;
    out.in_front = q.z > 1e-9;
    if (out.in_front) {
        out.px = K.fx * q.x / q.z + K.cx;
        out.py = K.fy * q.y / q.z + K.cy;
    }
    return out;
}

// Camera-frame point for pixel (px, py) at the given depth.
inline Vec3 unproject_pixel(const CameraIntrinsics& K, double px, double py, double depth) {
    return {depth * (px - K.cx) / K.fx, depth * (py - K.cy) / K.fy, depth};
}

// World position where the ray of pixel (px, py) crosses the horizontal plane
// z = plane_z. Only meaningful when the plane is below the camera.
inline Vec3 pixel_ray_at_height(const CameraPose& cam, const CameraIntrinsics& K,
                                double px, double py, double plane_z) {
    double t = cam.z - plane_z;  // camera-frame depth of the plane
    Vec3 q{t * (px - K.cx) / K.fx, t * (py - K.cy) / K.fy, t};
    return cam.cam_to_world(q);
}

}  // namespace condserv
