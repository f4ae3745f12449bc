#pragma once

#include <limits>
#include <string>
#include <vector>

#include "layoutforge/camera.hpp"
#include "layoutforge/image.hpp"
#include "layoutforge/image_io.hpp"
#include "layoutforge/layout.hpp"
#include "layoutforge/parallel.hpp"

namespace layoutforge {

/// Per-view 2D projection of the 3D layout: class-id map, nearest-hit depth
/// (0 where sky), and sky mask. sky[p] <=> semantic[p]==0 <=> depth[p]==0.
struct ConditionMaps {
    int width = 0, height = 0;
    std::vector<int> semantic;   // class id per pixel
    std::vector<double> depth;   // meters, 0 encodes +inf (sky)
    std::vector<uint8_t> sky;    // 1 where no instance is hit

    int at_semantic(int y, int x) const { return semantic[static_cast<size_t>(y) * width + x]; }
    double at_depth(int y, int x) const { return depth[static_cast<size_t>(y) * width + x]; }
    bool at_sky(int y, int x) const { return sky[static_cast<size_t>(y) * width + x] != 0; }
};

/// Casts the central ray of every pixel and records the nearest interval
/// entry over all instances; pixels with no hit are sky.
inline ConditionMaps rasterize(const SceneLayout& layout, const Camera& cam) {
    cam.validate();
    ConditionMaps maps;
    maps.width = cam.width;
    maps.height = cam.height;
    size_t n = static_cast<size_t>(cam.width) * cam.height;
    maps.semantic.assign(n, 0);
    maps.depth.assign(n, 0.0);
    maps.sky.assign(n, 1);

    parallel_for(cam.height, [&](int64_t y) {
        for (int x = 0; x < cam.width; ++x) {
            Ray ray = cam.pixel_ray(x, static_cast<int>(y));
            double best_t = std::numeric_limits<double>::infinity();
            int best_class = 0;
            for (const auto& inst : layout.instances) {
                for (const auto& iv : ray_instance_intervals(ray.origin, ray.dir, inst)) {
                    if (iv.t_near < best_t) {
                        best_t = iv.t_near;
                        best_class = inst.class_id;
                    }
                }
            }
            size_t idx = static_cast<size_t>(y) * cam.width + x;
            if (best_class != 0) {
                maps.semantic[idx] = best_class;
                maps.depth[idx] = best_t;
                maps.sky[idx] = 0;
            }
        }
    });
    return maps;
}

struct ConditionEncodeOptions {
    /// Inverse depths are divided by this and clamped to [0,1]; the default
    /// saturates at 2 m.
    double max_inverse_depth = 0.5;
};

/// Channel encoding of the condition maps at target_res x target_res:
/// one-hot semantics (class_count channels, area-averaged) followed by one
/// channel of normalized inverse depth (sky pixels contribute 0).
inline Image encode_condition(const ConditionMaps& maps, int class_count, int target_res,
                              const ConditionEncodeOptions& opt = {}) {
    if (class_count < 1) throw std::invalid_argument("encode_condition: class_count < 1");
    Image native(class_count + 1, maps.height, maps.width);
    for (int y = 0; y < maps.height; ++y) {
        for (int x = 0; x < maps.width; ++x) {
            int cls = maps.at_semantic(y, x);
            if (cls < 0 || cls >= class_count)
                throw std::invalid_argument("encode_condition: class id out of range");
            native.at(cls, y, x) = 1.0;
            if (!maps.at_sky(y, x)) {
                double inv = 1.0 / maps.at_depth(y, x);
                native.at(class_count, y, x) = clamp01(inv / opt.max_inverse_depth);
            }
        }
    }
    return resample_area(native, target_res, target_res);
}

/// Writes semantic indexed PNG + JSON palette sidecar, depth PFM and sky PNG
/// using `prefix` as the common path stem.
inline void export_condition_maps(const std::string& prefix, const ConditionMaps& maps,
                                  const SceneLayout& layout) {
    std::vector<uint8_t> idx(maps.semantic.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<uint8_t>(maps.semantic[i]);
    write_png_indexed(prefix + "_semantic.png", maps.width, maps.height, idx, layout.palette());

    nlohmann::json pal;
    pal["classes"] = nlohmann::json::array();
    for (const auto& c : layout.classes)
        pal["classes"].push_back({{"id", c.id},
                                  {"name", c.name},
                                  {"color", {c.color[0], c.color[1], c.color[2]}}});
    std::ofstream f(prefix + "_palette.json");
    f << pal.dump(2) << "\n";

    write_pfm(prefix + "_depth.pfm", maps.width, maps.height, maps.depth);

    std::vector<uint8_t> sky(maps.sky.size());
    for (size_t i = 0; i < sky.size(); ++i) sky[i] = maps.sky[i] ? 255 : 0;
    write_png_gray(prefix + "_sky.png", maps.width, maps.height, sky);
}

}  // namespace layoutforge
