#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "layoutforge/math.hpp"

namespace layoutforge {

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Semantic vocabulary entry. Id 0 is reserved for sky/void and is implicit.
struct SemanticClass {
    int id = 0;
    std::string name;
    std::array<uint8_t, 3> color{0, 0, 0};
};

/// Rigid pose plus per-axis extents. Extents are full sizes in meters;
/// geometry kernels halve them internally.
struct Pose {
    Mat3 rotation;
    Vec3 translation;
    Vec3 size{1.0, 1.0, 1.0};

    bool operator==(const Pose& o) const {
        return rotation == o.rotation && translation == o.translation && size == o.size;
    }
};

enum class Shape { Cuboid, Ellipsoid, Plane };

inline const char* shape_name(Shape s) {
    switch (s) {
        case Shape::Cuboid: return "cuboid";
        case Shape::Ellipsoid: return "ellipsoid";
        case Shape::Plane: return "plane";
    }
    return "?";
}

struct LayoutInstance {
    int id = 0;
    int class_id = 0;
    Shape shape = Shape::Cuboid;
    Pose pose;
    bool is_object = false;
};

struct SceneLayout {
    std::vector<SemanticClass> classes;
    std::vector<LayoutInstance> instances;
    std::optional<Aabb> world_bounds;

    const LayoutInstance* find(int id) const {
        for (const auto& inst : instances)
            if (inst.id == id) return &inst;
        return nullptr;
    }
    LayoutInstance* find(int id) {
        for (auto& inst : instances)
            if (inst.id == id) return &inst;
        return nullptr;
    }
    const SemanticClass* find_class(int id) const {
        for (const auto& c : classes)
            if (c.id == id) return &c;
        return nullptr;
    }

    /// Number of one-hot channels needed to encode every class id, sky included.
    int class_count() const {
        int max_id = 0;
        for (const auto& c : classes) max_id = std::max(max_id, c.id);
        return max_id + 1;
    }

    /// Indexed-PNG palette: entry per class id, unknown ids black.
    std::vector<std::array<uint8_t, 3>> palette() const {
        std::vector<std::array<uint8_t, 3>> pal(static_cast<size_t>(class_count()), {0, 0, 0});
        for (const auto& c : classes) pal[static_cast<size_t>(c.id)] = c.color;
        return pal;
    }
};

/// World point mapped into the instance's canonical frame: R^T (p - t) / s.
/// The canonical cuboid is [-1/2,1/2]^3, the canonical ellipsoid the inscribed
/// ball of radius 1/2.
inline Vec3 to_canonical(const Pose& pose, const Vec3& p) {
    return pose.rotation.transposed_mul(p - pose.translation).cwise_div(pose.size);
}

inline bool point_in_instance(const Vec3& p, const LayoutInstance& inst) {
    Vec3 q = to_canonical(inst.pose, p);
    switch (inst.shape) {
        case Shape::Cuboid:
        case Shape::Plane:
            return std::abs(q.x) <= 0.5 && std::abs(q.y) <= 0.5 && std::abs(q.z) <= 0.5;
        case Shape::Ellipsoid:
            return q.dot(q) <= 0.25;
    }
    return false;
}

/// Containment in the instance's oriented bounding box regardless of shape.
/// Object grids own their full box interior.
inline bool point_in_instance_box(const Vec3& p, const LayoutInstance& inst) {
    Vec3 q = to_canonical(inst.pose, p);
    return std::abs(q.x) <= 0.5 && std::abs(q.y) <= 0.5 && std::abs(q.z) <= 0.5;
}

struct RayInterval {
    double t_near = 0.0;
    double t_far = 0.0;
};

/// Parametric intervals of the ray interior to the instance, clipped to t >= 0.
/// Tangencies (t_near == t_far) produce no interval. Direction must be unit
/// length; the returned parameters are then metric distances.
inline std::vector<RayInterval> ray_instance_intervals(const Vec3& origin, const Vec3& dir,
                                                       const LayoutInstance& inst) {
    Vec3 o = inst.pose.rotation.transposed_mul(origin - inst.pose.translation)
                 .cwise_div(inst.pose.size);
    Vec3 d = inst.pose.rotation.transposed_mul(dir).cwise_div(inst.pose.size);

    double t0 = 0.0;
    double t1 = std::numeric_limits<double>::infinity();

    if (inst.shape == Shape::Ellipsoid) {
        double a = d.dot(d);
        double b = 2.0 * o.dot(d);
        double c = o.dot(o) - 0.25;
        double disc = b * b - 4.0 * a * c;
        if (disc <= 0.0) return {};
        double sq = std::sqrt(disc);
        double ta = (-b - sq) / (2.0 * a);
        double tb = (-b + sq) / (2.0 * a);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    } else {
        for (int axis = 0; axis < 3; ++axis) {
            double oi = o[axis], di = d[axis];
            if (std::abs(di) < 1e-300) {
                if (std::abs(oi) > 0.5) return {};
                continue;
            }
            double ta = (-0.5 - oi) / di;
            double tb = (0.5 - oi) / di;
            if (ta > tb) std::swap(ta, tb);
            t0 = std::max(t0, ta);
            t1 = std::min(t1, tb);
        }
    }
    if (!(t0 < t1)) return {};
    return {RayInterval{t0, t1}};
}

// ---------------------------------------------------------------------------
// Editing: value-producing, the input layout is never mutated.
// ---------------------------------------------------------------------------

inline SceneLayout insert_instance(const SceneLayout& layout, const LayoutInstance& inst) {
    if (layout.find(inst.id))
        throw ValidationError("insert_instance: duplicate instance id " + std::to_string(inst.id));
    if (!layout.find_class(inst.class_id))
        throw ValidationError("insert_instance: unknown class id " + std::to_string(inst.class_id));
    SceneLayout out = layout;
    out.instances.push_back(inst);
    return out;
}

inline SceneLayout remove_instance(const SceneLayout& layout, int id) {
    if (!layout.find(id))
        throw ValidationError("remove_instance: unknown instance id " + std::to_string(id));
    SceneLayout out = layout;
    std::erase_if(out.instances, [id](const LayoutInstance& i) { return i.id == id; });
    return out;
}

/// Composes a rigid delta onto an instance pose: rotation and translation act
/// in world space (p -> dR p + dt), sizes multiply componentwise.
inline Pose compose_pose(const Pose& delta, const Pose& pose) {
    Pose out;
    out.rotation = delta.rotation * pose.rotation;
    out.translation = delta.rotation * pose.translation + delta.translation;
    out.size = pose.size.cwise_mul(delta.size);
    return out;
}

inline SceneLayout transform_instance(const SceneLayout& layout, int id, const Pose& delta) {
    SceneLayout out = layout;
    LayoutInstance* inst = out.find(id);
    if (!inst)
        throw ValidationError("transform_instance: unknown instance id " + std::to_string(id));
    inst->pose = compose_pose(delta, inst->pose);
    return out;
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

struct LayoutLoadOptions {
    double slab_thickness = 0.2;   // plane primitives become slabs this thick
    double rotation_tolerance = 1e-6;
};

namespace detail {

inline Vec3 vec3_from_json(const nlohmann::json& j, const char* what) {
    if (!j.is_array() || j.size() != 3)
        throw ParseError(std::string("expected 3-element array for ") + what);
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline Mat3 mat3_from_json(const nlohmann::json& j, const char* what) {
    if (!j.is_array() || j.size() != 9)
        throw ParseError(std::string("expected 9-element array for ") + what);
    Mat3 m;
    for (int i = 0; i < 9; ++i) m.m[static_cast<size_t>(i)] = j[i].get<double>();
    return m;
}

inline Shape shape_from_string(const std::string& s) {
    if (s == "cuboid") return Shape::Cuboid;
    if (s == "ellipsoid") return Shape::Ellipsoid;
    if (s == "plane") return Shape::Plane;
    throw ParseError("unknown shape: " + s);
}

}  // namespace detail

inline void validate_layout(SceneLayout& layout, const LayoutLoadOptions& opt = {}) {
    std::vector<int> class_ids;
    for (const auto& c : layout.classes) {
        if (std::find(class_ids.begin(), class_ids.end(), c.id) != class_ids.end())
            throw ValidationError("duplicate class id " + std::to_string(c.id));
        class_ids.push_back(c.id);
    }
    std::vector<int> inst_ids;
    for (auto& inst : layout.instances) {
        if (std::find(inst_ids.begin(), inst_ids.end(), inst.id) != inst_ids.end())
            throw ValidationError("duplicate instance id " + std::to_string(inst.id));
        inst_ids.push_back(inst.id);

        if (inst.class_id == 0)
            throw ValidationError("instance " + std::to_string(inst.id) +
                                  " uses reserved sky class 0");
        if (!layout.find_class(inst.class_id))
            throw ValidationError("instance " + std::to_string(inst.id) + " references unknown class " +
                                  std::to_string(inst.class_id));

        if (inst.shape == Shape::Plane) inst.pose.size.z = opt.slab_thickness;
        if (!(inst.pose.size.x > 0.0 && inst.pose.size.y > 0.0 && inst.pose.size.z > 0.0))
            throw ValidationError("instance " + std::to_string(inst.id) +
                                  " has non-positive size");

        double err = orthonormality_error(inst.pose.rotation);
        if (err > opt.rotation_tolerance)
            throw ValidationError("instance " + std::to_string(inst.id) +
                                  " rotation is not orthonormal (error " + std::to_string(err) + ")");
        if (err > 0.0) inst.pose.rotation = nearest_rotation(inst.pose.rotation);
    }
}

inline SceneLayout layout_from_json(const nlohmann::json& j, const LayoutLoadOptions& opt = {}) {
    if (!j.is_object()) throw ParseError("layout: top level must be an object");
    if (!j.contains("version") || j["version"].get<int>() != 1)
        throw ParseError("layout: missing or unsupported version (expected 1)");

    SceneLayout layout;
    for (const auto& jc : j.value("classes", nlohmann::json::array())) {
        SemanticClass c;
        c.id = jc.at("id").get<int>();
        c.name = jc.at("name").get<std::string>();
        if (jc.contains("color")) {
            const auto& col = jc["color"];
            if (!col.is_array() || col.size() != 3) throw ParseError("class color must be [r,g,b]");
            for (int i = 0; i < 3; ++i)
                c.color[static_cast<size_t>(i)] = static_cast<uint8_t>(col[i].get<int>());
        }
        layout.classes.push_back(c);
    }
    if (!layout.find_class(0))
        layout.classes.insert(layout.classes.begin(), SemanticClass{0, "sky", {0, 0, 0}});

    for (const auto& ji : j.value("instances", nlohmann::json::array())) {
        LayoutInstance inst;
        inst.id = ji.at("id").get<int>();
        inst.class_id = ji.at("class").get<int>();
        inst.shape = detail::shape_from_string(ji.at("shape").get<std::string>());
        inst.pose.rotation = detail::mat3_from_json(ji.at("rotation"), "rotation");
        inst.pose.translation = detail::vec3_from_json(ji.at("translation"), "translation");
        inst.pose.size = detail::vec3_from_json(ji.at("size"), "size");
        inst.is_object = ji.value("object", false);
        layout.instances.push_back(inst);
    }

    if (j.contains("bounds")) {
        Aabb b(detail::vec3_from_json(j["bounds"].at("min"), "bounds.min"),
               detail::vec3_from_json(j["bounds"].at("max"), "bounds.max"));
        layout.world_bounds = b;
    }

    validate_layout(layout, opt);
    return layout;
}

inline SceneLayout load_layout(const std::string& path, const LayoutLoadOptions& opt = {}) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open layout file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("layout parse error in " + path + ": " + e.what());
    }
    try {
        return layout_from_json(j, opt);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("layout schema error in " + path + ": " + e.what());
    }
}

inline nlohmann::json layout_to_json(const SceneLayout& layout) {
    nlohmann::json j;
    j["version"] = 1;
    j["classes"] = nlohmann::json::array();
    for (const auto& c : layout.classes)
        j["classes"].push_back({{"id", c.id},
                                {"name", c.name},
                                {"color", {c.color[0], c.color[1], c.color[2]}}});
    j["instances"] = nlohmann::json::array();
    for (const auto& inst : layout.instances) {
        nlohmann::json ji;
        ji["id"] = inst.id;
        ji["class"] = inst.class_id;
        ji["shape"] = shape_name(inst.shape);
        ji["rotation"] = inst.pose.rotation.m;
        ji["translation"] = {inst.pose.translation.x, inst.pose.translation.y,
                             inst.pose.translation.z};
        ji["size"] = {inst.pose.size.x, inst.pose.size.y, inst.pose.size.z};
        ji["object"] = inst.is_object;
        j["instances"].push_back(ji);
    }
    if (layout.world_bounds) {
        j["bounds"] = {{"min", {layout.world_bounds->min.x, layout.world_bounds->min.y,
                                layout.world_bounds->min.z}},
                       {"max", {layout.world_bounds->max.x, layout.world_bounds->max.y,
                                layout.world_bounds->max.z}}};
    }
    return j;
}

inline void save_layout(const std::string& path, const SceneLayout& layout) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << layout_to_json(layout).dump(2) << "\n";
}

/// World-space AABB enclosing the instance's oriented box.
inline Aabb instance_world_aabb(const LayoutInstance& inst) {
    Aabb box;
    for (int corner = 0; corner < 8; ++corner) {
        Vec3 q{(corner & 1) ? 0.5 : -0.5, (corner & 2) ? 0.5 : -0.5, (corner & 4) ? 0.5 : -0.5};
        box.expand(inst.pose.rotation * q.cwise_mul(inst.pose.size) + inst.pose.translation);
    }
    return box;
}

}  // namespace layoutforge
