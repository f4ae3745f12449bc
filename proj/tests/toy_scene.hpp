#pragma once

// Shared fixtures: the desk-scale street scene (road slab + building + car
// object), its camera trajectory, and small train configs sized for tests.

#include <vector>

#include "layoutforge/camera.hpp"
#include "layoutforge/field.hpp"
#include "layoutforge/layout.hpp"
#include "layoutforge/train.hpp"

namespace toy {

using namespace layoutforge;

inline std::vector<SemanticClass> street_classes() {
    return {{0, "sky", {0, 0, 0}},
            {1, "road", {90, 90, 90}},
            {2, "sidewalk", {160, 160, 160}},
            {3, "car", {30, 90, 200}},
            {4, "building", {180, 120, 60}},
            {5, "vegetation", {40, 160, 60}}};
}

inline LayoutInstance make_instance(int id, int class_id, Shape shape, const Vec3& t,
                                    const Vec3& size, bool object = false,
                                    const Mat3& rot = Mat3::identity()) {
    LayoutInstance inst;
    inst.id = id;
    inst.class_id = class_id;
    inst.shape = shape;
    inst.pose.rotation = rot;
    inst.pose.translation = t;
    inst.pose.size = size;
    inst.is_object = object;
    return inst;
}

/// The 3-instance acceptance scene: road slab, building, car (object).
inline SceneLayout street_scene() {
    SceneLayout layout;
    layout.classes = street_classes();
    layout.instances = {
        make_instance(1, 1, Shape::Plane, {0.0, 0.0, 0.0}, {48.0, 10.0, 0.2}),
        make_instance(2, 4, Shape::Cuboid, {6.0, 8.0, 4.0}, {8.0, 6.0, 8.0}),
        make_instance(3, 3, Shape::Cuboid, {2.0, -2.0, 1.0}, {3.5, 1.75, 1.5}, true),
    };
    return layout;
}

/// Five-class layout with every primitive shape, for layout/raster tests.
inline SceneLayout mixed_scene() {
    SceneLayout layout = street_scene();
    layout.instances.push_back(
        make_instance(4, 5, Shape::Ellipsoid, {-4.0, 6.0, 2.0}, {3.0, 3.0, 4.0}));
    layout.instances.push_back(
        make_instance(5, 2, Shape::Plane, {0.0, -7.0, 0.0}, {48.0, 4.0, 0.2}));
    return layout;
}

inline std::vector<Camera> base_trajectory(int res) {
    std::vector<Camera> cams;
    for (int k = 0; k < 5; ++k) {
        Vec3 eye{-14.0 + 3.0 * k, -1.0, 2.0};
        Vec3 target{eye.x + 12.0, 0.5, 1.5};
        cams.push_back(Camera::look_at(eye, target, res, res, static_cast<double>(res)));
    }
    return cams;
}

inline TrajectorySampler street_sampler(int res, double yaw_deg = 45.0) {
    TrajectorySampler sampler;
    sampler.base = base_trajectory(res);
    sampler.yaw_range = deg2rad(yaw_deg);
    sampler.pos_jitter = 0.5;
    sampler.min_height = 0.2;
    return sampler;
}

/// Desk-scale config: small hash grids, 64x64 images, budgets tuned for a
/// single-core run.
inline TrainConfig toy_config() {
    TrainConfig cfg;
    cfg.seed = 1;
    cfg.coarse_resolution = 64;
    cfg.refine_resolution = 64;
    cfg.optimize_steps = 600;
    cfg.refine_steps = 120;
    cfg.learning_rate = 5e-3;
    cfg.adapter_lr = 1e-3;
    cfg.samples_per_ray = 24;
    cfg.samples_per_ray_refine = 32;
    cfg.near = 0.1;
    cfg.far = 80.0;
    cfg.field_levels = 6;
    cfg.field_base_resolution = 16;
    cfg.field_per_level_scale = 1.5;
    cfg.field_table_size = 1u << 14;
    cfg.field_features = 2;
    cfg.field_decoder_hidden = 32;
    cfg.denoiser_layers = 4;
    cfg.denoiser_channels = 24;
    cfg.denoiser_time_dim = 32;
    cfg.style_count = 3;
    cfg.lora_rank = 4;
    cfg.pretrain_steps = 1200;
    cfg.pretrain_lr = 2e-3;
    cfg.refine_denoise_steps = 12;
    cfg.max_inverse_depth = 0.5;
    return cfg;
}

/// Even smaller: 16x16 images and tiny grids for gradient checks.
inline TrainConfig micro_config() {
    TrainConfig cfg = toy_config();
    cfg.coarse_resolution = 16;
    cfg.refine_resolution = 16;
    cfg.optimize_steps = 5;
    cfg.refine_steps = 3;
    cfg.samples_per_ray = 12;
    cfg.samples_per_ray_refine = 12;
    cfg.field_levels = 4;
    cfg.field_table_size = 1u << 10;
    cfg.field_decoder_hidden = 16;
    cfg.denoiser_layers = 3;
    cfg.denoiser_channels = 8;
    cfg.denoiser_time_dim = 8;
    cfg.pretrain_steps = 0;
    return cfg;
}

/// Analytic indicator field: constant density inside layout instances, zero
/// outside, flat per-class colors. Drives the rasterizer/renderer consistency
/// checks without any learned state.
struct IndicatorField {
    const SceneLayout* layout = nullptr;
    double sigma_inside = 50.0;
    Vec3 sky{0.2, 0.3, 0.9};

    Vec3 class_color(int class_id) const {
        const SemanticClass* c = layout->find_class(class_id);
        if (!c) return {0.5, 0.5, 0.5};
        return {c->color[0] / 255.0, c->color[1] / 255.0, c->color[2] / 255.0};
    }

    void query(const Vec3& p, const Assignment&, HashGrid::QueryScratch&, double& sigma,
               Vec3& color) const {
        sigma = 0.0;
        color = {0.5, 0.5, 0.5};
        for (const auto& inst : layout->instances) {
            if (point_in_instance(p, inst)) {
                sigma = sigma_inside;
                color = class_color(inst.class_id);
                if (inst.is_object) break;  // object precedence on overlap
            }
        }
    }

    Vec3 sky_color(const Vec3&) const { return sky; }
};

}  // namespace toy
