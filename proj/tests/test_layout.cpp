#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "layoutforge/layout.hpp"
#include "layoutforge/rng.hpp"
#include "toy_scene.hpp"

using namespace layoutforge;

namespace {

std::string write_temp_json(const std::string& name, const std::string& body) {
    std::string path = (std::filesystem::temp_directory_path() / name).string();
    std::ofstream f(path);
    f << body;
    return path;
}

const char* kCuboidLayout = R"({
  "version": 1,
  "classes": [{"id": 4, "name": "building", "color": [180, 120, 60]}],
  "instances": [{
    "id": 1, "class": 4, "shape": "cuboid",
    "rotation": [1,0,0, 0,1,0, 0,0,1],
    "translation": [0, 0, 1],
    "size": [2, 2, 2],
    "object": false
  }]
})";

}  // namespace

TEST_CASE("load_layout accepts a single axis-aligned cuboid", "[layout]") {
    auto path = write_temp_json("lf_cuboid.json", kCuboidLayout);
    SceneLayout layout = load_layout(path);
    REQUIRE(layout.instances.size() == 1);
    REQUIRE(layout.instances[0].pose.size == Vec3{2, 2, 2});
    REQUIRE(layout.find_class(4)->name == "building");
    REQUIRE(layout.find_class(0) != nullptr);  // sky class implicit
}

TEST_CASE("load_layout parses the five-class mixed layout", "[layout]") {
    SceneLayout mixed = toy::mixed_scene();
    auto path = write_temp_json("lf_mixed.json", layout_to_json(mixed).dump());
    SceneLayout layout = load_layout(path);
    REQUIRE(layout.classes.size() == 6);  // sky + 5
    REQUIRE(layout.instances.size() == 5);
    for (const auto& inst : layout.instances) {
        bool is_car = layout.find_class(inst.class_id)->name == "car";
        REQUIRE(inst.is_object == is_car);
    }
}

TEST_CASE("load_layout rejects invalid files", "[layout]") {
    std::string bad_size = kCuboidLayout;
    bad_size.replace(bad_size.find("[2, 2, 2]"), 9, "[-1, 1, 1]");
    REQUIRE_THROWS_AS(load_layout(write_temp_json("lf_badsize.json", bad_size)), ValidationError);

    std::string bad_rot = kCuboidLayout;
    bad_rot.replace(bad_rot.find("1,0,0, 0,1,0, 0,0,1"), 19, "1,0.1,0, 0,1,0, 0,0,1");
    REQUIRE_THROWS_AS(load_layout(write_temp_json("lf_badrot.json", bad_rot)), ValidationError);

    REQUIRE_THROWS_AS(load_layout(write_temp_json("lf_garbage.json", "{nope")), ParseError);
    REQUIRE_THROWS_AS(load_layout("/nonexistent/file.json"), ParseError);

    SceneLayout dup = toy::street_scene();
    dup.instances.push_back(dup.instances[0]);
    REQUIRE_THROWS_AS(load_layout(write_temp_json("lf_dup.json", layout_to_json(dup).dump())),
                      ValidationError);
}

TEST_CASE("rotations within tolerance are re-orthonormalized", "[layout]") {
    SceneLayout layout = toy::street_scene();
    Rng rng(5);
    for (auto& v : layout.instances[0].pose.rotation.m) v += rng.uniform(-2e-7, 2e-7);
    auto path = write_temp_json("lf_noisyrot.json", layout_to_json(layout).dump());
    SceneLayout loaded = load_layout(path);
    REQUIRE(orthonormality_error(loaded.instances[0].pose.rotation) < 1e-12);
}

TEST_CASE("plane instances get the configured slab thickness", "[layout]") {
    SceneLayout layout = toy::street_scene();
    auto path = write_temp_json("lf_plane.json", layout_to_json(layout).dump());
    SceneLayout loaded = load_layout(path, LayoutLoadOptions{0.4, 1e-6});
    REQUIRE(loaded.instances[0].shape == Shape::Plane);
    REQUIRE(loaded.instances[0].pose.size.z == 0.4);
}

TEST_CASE("point_in_instance basics", "[layout]") {
    auto cuboid = toy::make_instance(1, 4, Shape::Cuboid, {1, 2, 3}, {2, 4, 6});
    REQUIRE(point_in_instance({1, 2, 3}, cuboid));
    REQUIRE_FALSE(point_in_instance({2.1, 2, 3}, cuboid));

    auto ellipsoid = toy::make_instance(2, 5, Shape::Ellipsoid, {0, 0, 0}, {4, 2, 2});
    REQUIRE(point_in_instance({0.6 * 2.0, 0, 0}, ellipsoid));   // 0.6 of the x semi-axis
    REQUIRE_FALSE(point_in_instance({1.1 * 2.0, 0, 0}, ellipsoid));
}

TEST_CASE("yawed cuboid containment matches a dense rotation oracle", "[layout]") {
    double yaw = deg2rad(45.0);
    Vec3 center{1.0, -2.0, 0.5};
    Vec3 size{3.0, 1.5, 2.0};
    auto inst = toy::make_instance(7, 4, Shape::Cuboid, center, size, false, Mat3::rotation_z(yaw));

    // oracle: rotate the probe into the box frame with explicit trigonometry
    double c = std::cos(-yaw), s = std::sin(-yaw);
    int mismatches = 0;
    Rng rng(17);
    for (int k = 0; k < 10000; ++k) {
        Vec3 p{rng.uniform(-4, 6), rng.uniform(-7, 3), rng.uniform(-2, 3)};
        Vec3 rel = p - center;
        double qx = c * rel.x - s * rel.y;
        double qy = s * rel.x + c * rel.y;
        bool oracle = std::abs(qx) <= size.x / 2 && std::abs(qy) <= size.y / 2 &&
                      std::abs(rel.z) <= size.z / 2;
        if (oracle != point_in_instance(p, inst)) ++mismatches;
    }
    REQUIRE(mismatches == 0);
}

TEST_CASE("ray through unit cube center", "[layout]") {
    auto cube = toy::make_instance(1, 4, Shape::Cuboid, {0, 0, 0}, {1, 1, 1});
    auto hits = ray_instance_intervals({-2, 0, 0}, {1, 0, 0}, cube);
    REQUIRE(hits.size() == 1);
    REQUIRE(hits[0].t_near == Catch::Approx(1.5));
    REQUIRE(hits[0].t_far - hits[0].t_near == Catch::Approx(1.0));

    REQUIRE(ray_instance_intervals({-2, 0.7, 0}, {1, 0, 0}, cube).empty());
}

TEST_CASE("ellipsoid chords match an independent quadratic oracle", "[layout]") {
    Vec3 center{0.5, -1.0, 2.0};
    Vec3 size{4.0, 2.0, 3.0};
    Mat3 rot = Mat3::rotation_z(0.4) * Mat3::rotation_x(-0.9);
    auto inst = toy::make_instance(3, 5, Shape::Ellipsoid, center, size, false, rot);

    // world-space quadratic: (p - t)^T Q (p - t) = 1 with Q = R diag(4/s^2) R^T
    Mat3 diag;
    diag.m = {4.0 / sqr(size.x), 0, 0, 0, 4.0 / sqr(size.y), 0, 0, 0, 4.0 / sqr(size.z)};
    Mat3 q = rot * diag * rot.transposed();

    Rng rng(23);
    for (int k = 0; k < 100; ++k) {
        Vec3 origin{rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-10, 10)};
        Vec3 dir = rng.normal_vec3().normalized();
        Vec3 rel = origin - center;
        double a = dir.dot(q * dir);
        double b = 2.0 * dir.dot(q * rel);
        double cq = rel.dot(q * rel) - 1.0;
        double disc = b * b - 4 * a * cq;
        auto hits = ray_instance_intervals(origin, dir, inst);
        if (disc <= 0.0) {
            REQUIRE(hits.empty());
            continue;
        }
        double t0 = (-b - std::sqrt(disc)) / (2 * a);
        double t1 = (-b + std::sqrt(disc)) / (2 * a);
        if (t1 <= 0.0) {
            REQUIRE(hits.empty());
            continue;
        }
        double chord = t1 - std::max(t0, 0.0);
        REQUIRE(hits.size() == 1);
        REQUIRE(hits[0].t_far - hits[0].t_near == Catch::Approx(chord).margin(1e-9));
    }
}

TEST_CASE("interval midpoints are inside, points beyond ends are outside", "[layout]") {
    SceneLayout layout = toy::mixed_scene();
    Rng rng(31);
    for (int k = 0; k < 300; ++k) {
        Vec3 origin{rng.uniform(-30, 30), rng.uniform(-30, 30), rng.uniform(-5, 15)};
        Vec3 dir = rng.normal_vec3().normalized();
        for (const auto& inst : layout.instances) {
            for (const auto& iv : ray_instance_intervals(origin, dir, inst)) {
                Vec3 mid = origin + 0.5 * (iv.t_near + iv.t_far) * dir;
                REQUIRE(point_in_instance(mid, inst));
                if (iv.t_far - iv.t_near > 1e-4) {
                    if (iv.t_near > 1e-5)
                        REQUIRE_FALSE(point_in_instance(origin + (iv.t_near - 1e-6) * dir, inst));
                    REQUIRE_FALSE(point_in_instance(origin + (iv.t_far + 1e-6) * dir, inst));
                }
            }
        }
    }
}

TEST_CASE("containment is invariant under simultaneous rigid transforms", "[layout]") {
    Rng rng(41);
    for (int k = 0; k < 200; ++k) {
        auto inst = toy::make_instance(1, 4, k % 2 ? Shape::Cuboid : Shape::Ellipsoid,
                                       {rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)},
                                       {rng.uniform(0.5, 4), rng.uniform(0.5, 4), rng.uniform(0.5, 4)},
                                       false, Mat3::rotation_z(rng.uniform(-kPi, kPi)));
        Vec3 p{rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-8, 8)};
        // skip boundary-grazing probes, the transform perturbs rounding there
        Vec3 q = to_canonical(inst.pose, p);
        double margin = inst.shape == Shape::Ellipsoid ? std::abs(q.dot(q) - 0.25)
                                                       : std::abs(0.5 - std::abs(q.x));
        if (margin < 1e-6) continue;

        Mat3 rigid_r = Mat3::rotation_z(rng.uniform(-kPi, kPi)) * Mat3::rotation_y(rng.uniform(-1, 1));
        Vec3 rigid_t{rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-10, 10)};
        LayoutInstance moved = inst;
        moved.pose.rotation = rigid_r * inst.pose.rotation;
        moved.pose.translation = rigid_r * inst.pose.translation + rigid_t;
        REQUIRE(point_in_instance(p, inst) == point_in_instance(rigid_r * p + rigid_t, moved));
    }
}

TEST_CASE("insert and remove are value edits", "[layout]") {
    SceneLayout layout = toy::street_scene();
    LayoutInstance car = *layout.find(3);

    SceneLayout removed = remove_instance(layout, 3);
    REQUIRE(layout.instances.size() == 3);  // original untouched
    REQUIRE(removed.instances.size() == 2);
    SceneLayout restored = insert_instance(removed, car);
    REQUIRE(restored.instances.size() == 3);
    // equal up to ordering
    for (const auto& inst : layout.instances) {
        const LayoutInstance* match = restored.find(inst.id);
        REQUIRE(match != nullptr);
        REQUIRE(match->pose == inst.pose);
        REQUIRE(match->class_id == inst.class_id);
    }

    REQUIRE_THROWS_AS(remove_instance(layout, 99), ValidationError);
    REQUIRE_THROWS_AS(insert_instance(layout, car), ValidationError);
}

TEST_CASE("identity transform leaves the layout unchanged", "[layout]") {
    SceneLayout layout = toy::street_scene();
    SceneLayout same = transform_instance(layout, 3, Pose{});
    REQUIRE(same.find(3)->pose == layout.find(3)->pose);
    REQUIRE_THROWS_AS(transform_instance(layout, 99, Pose{}), ValidationError);
}

TEST_CASE("translating the car shifts its ray interval by the ray-parameter equivalent",
          "[layout]") {
    SceneLayout layout = toy::street_scene();
    Vec3 origin{-20, -2, 1};
    Vec3 dir{1, 0, 0};
    auto before = ray_instance_intervals(origin, dir, *layout.find(3));
    REQUIRE(before.size() == 1);

    Pose delta;
    delta.translation = {5, 0, 0};
    SceneLayout moved = transform_instance(layout, 3, delta);
    auto after = ray_instance_intervals(origin, dir, *moved.find(3));
    REQUIRE(after.size() == 1);
    REQUIRE(after[0].t_near == Catch::Approx(before[0].t_near + 5.0).margin(1e-12));
    REQUIRE(after[0].t_far == Catch::Approx(before[0].t_far + 5.0).margin(1e-12));
}
