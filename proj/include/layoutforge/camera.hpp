#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "layoutforge/layout.hpp"
#include "layoutforge/math.hpp"

namespace layoutforge {

struct Ray {
    Vec3 origin;
    Vec3 dir;  // unit length
};

/// Pinhole camera. Extrinsics are world-from-camera; camera frame is
/// +z forward, +x right, +y down.
struct Camera {
    double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
    Mat3 rotation;     // world-from-camera
    Vec3 translation;  // camera center in world space
    int width = 0, height = 0;

    void validate() const {
        if (!(fx > 0.0 && fy > 0.0))
            throw ValidationError("camera: focal lengths must be positive");
        if (!(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height))
            throw ValidationError("camera: principal point outside image");
        if (width <= 0 || height <= 0) throw ValidationError("camera: empty image");
    }

    /// Central ray through pixel (x, y).
    Ray pixel_ray(int x, int y) const {
        Vec3 d_cam{(x + 0.5 - cx) / fx, (y + 0.5 - cy) / fy, 1.0};
        return Ray{translation, (rotation * d_cam).normalized()};
    }

    /// Camera looking from `eye` toward `target` with +z world up.
    static Camera look_at(const Vec3& eye, const Vec3& target, int w, int h,
                          double focal_px) {
        Vec3 fwd = (target - eye).normalized();
        Vec3 right = fwd.cross(Vec3{0, 0, 1}).normalized();
        Vec3 down = fwd.cross(right).normalized();
        Camera cam;
        cam.rotation = Mat3(right.x, down.x, fwd.x,
                            right.y, down.y, fwd.y,
                            right.z, down.z, fwd.z);
        cam.translation = eye;
        cam.width = w;
        cam.height = h;
        cam.fx = cam.fy = focal_px;
        cam.cx = w / 2.0;
        cam.cy = h / 2.0;
        return cam;
    }

    /// Flattened extrinsics (rotation row-major, then translation), the
    /// denoiser's camera-conditioning input.
    std::array<double, 12> flat_extrinsics() const {
        std::array<double, 12> out{};
        for (int i = 0; i < 9; ++i) out[static_cast<size_t>(i)] = rotation.m[static_cast<size_t>(i)];
        out[9] = translation.x;
        out[10] = translation.y;
        out[11] = translation.z;
        return out;
    }
};

inline Camera camera_from_json(const nlohmann::json& j) {
    Camera cam;
    cam.fx = j.at("fx").get<double>();
    cam.fy = j.at("fy").get<double>();
    cam.cx = j.at("cx").get<double>();
    cam.cy = j.at("cy").get<double>();
    cam.width = j.at("width").get<int>();
    cam.height = j.at("height").get<int>();
    cam.rotation = detail::mat3_from_json(j.at("rotation"), "camera rotation");
    cam.translation = detail::vec3_from_json(j.at("translation"), "camera translation");
    cam.validate();
    return cam;
}

inline nlohmann::json camera_to_json(const Camera& cam) {
    return {{"fx", cam.fx},       {"fy", cam.fy},
            {"cx", cam.cx},       {"cy", cam.cy},
            {"width", cam.width}, {"height", cam.height},
            {"rotation", cam.rotation.m},
            {"translation", {cam.translation.x, cam.translation.y, cam.translation.z}}};
}

/// Trajectory file: JSON list of camera records.
inline std::vector<Camera> load_trajectory(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open trajectory file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("trajectory parse error in " + path + ": " + e.what());
    }
    if (!j.is_array()) throw ParseError("trajectory: expected a JSON list of cameras");
    std::vector<Camera> cams;
    try {
        for (const auto& jc : j) cams.push_back(camera_from_json(jc));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("trajectory schema error in " + path + ": " + e.what());
    }
    return cams;
}

inline void save_trajectory(const std::string& path, const std::vector<Camera>& cams) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& c : cams) j.push_back(camera_to_json(c));
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << j.dump(2) << "\n";
}

}  // namespace layoutforge
