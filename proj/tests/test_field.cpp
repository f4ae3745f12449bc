#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "layoutforge/field.hpp"
#include "layoutforge/render.hpp"
#include "fd_check.hpp"
#include "toy_scene.hpp"

using namespace layoutforge;

namespace {

HashGridConfig small_grid_config() {
    HashGridConfig cfg;
    cfg.levels = 4;
    cfg.base_resolution = 8;
    cfg.per_level_scale = 1.5;
    cfg.table_size = 1u << 10;
    cfg.features_per_level = 2;
    cfg.decoder_hidden = {16};
    cfg.tile_size = {8.0, 8.0, 8.0};
    return cfg;
}

}  // namespace

TEST_CASE("assign_point gives objects precedence over stuff tiles", "[field]") {
    SceneLayout layout = toy::street_scene();
    SceneField field(small_grid_config(), 3);
    field.ensure_object_grids(layout);
    field.spawn_stuff_grid(field.tile_of({2.0, -2.0, 1.0}));

    // point inside the car box, which also lies inside an existing tile
    Assignment a = field.assign_point(layout, {2.0, -2.0, 1.0});
    REQUIRE(a.kind == Assignment::Kind::Object);
    REQUIRE(a.object_id == 3);

    // outside the car but in the same spawned tile: the stuff tile wins
    Assignment b = field.assign_point(layout, {2.0, -5.0, 1.0});
    REQUIRE(b.kind == Assignment::Kind::Stuff);
}

TEST_CASE("empty field marks any point spawn-required at its lattice cell", "[field]") {
    SceneLayout layout;
    layout.classes = toy::street_classes();
    SceneField field(small_grid_config(), 3);
    Vec3 p{-3.7, 12.2, 5.1};
    Assignment a = field.assign_point(layout, p);
    REQUIRE(a.kind == Assignment::Kind::SpawnRequired);
    REQUIRE(a.tile.x == static_cast<int64_t>(std::floor(p.x / 8.0)));
    REQUIRE(a.tile.y == static_cast<int64_t>(std::floor(p.y / 8.0)));
    REQUIRE(a.tile.z == static_cast<int64_t>(std::floor(p.z / 8.0)));
}

TEST_CASE("assign_point matches the brute-force containment oracle", "[field]") {
    SceneLayout layout = toy::mixed_scene();
    SceneField field(small_grid_config(), 3);
    field.ensure_object_grids(layout);
    for (int x = -3; x <= 3; ++x)
        for (int y = -2; y <= 2; ++y) field.spawn_stuff_grid(Vec3i{x, y, 0});

    Rng rng(19);
    for (int k = 0; k < 10000; ++k) {
        Vec3 p{rng.uniform(-25, 25), rng.uniform(-15, 15), rng.uniform(-2, 10)};

        // oracle: test every object box, then plain lattice arithmetic
        int best = -1;
        double best_d = std::numeric_limits<double>::max();
        for (const auto& inst : layout.instances) {
            if (!inst.is_object) continue;
            Vec3 q = inst.pose.rotation.transposed_mul(p - inst.pose.translation)
                         .cwise_div(inst.pose.size);
            if (std::abs(q.x) <= 0.5 && std::abs(q.y) <= 0.5 && std::abs(q.z) <= 0.5) {
                double d = (p - inst.pose.translation).norm();
                if (d < best_d) {
                    best_d = d;
                    best = inst.id;
                }
            }
        }
        Assignment got = field.assign_point(layout, p);
        if (best >= 0) {
            REQUIRE(got.kind == Assignment::Kind::Object);
            REQUIRE(got.object_id == best);
        } else {
            Vec3i tile{static_cast<int64_t>(std::floor(p.x / 8.0)),
                       static_cast<int64_t>(std::floor(p.y / 8.0)),
                       static_cast<int64_t>(std::floor(p.z / 8.0))};
            REQUIRE(got.kind != Assignment::Kind::Object);
            REQUIRE(got.tile == tile);
            bool exists = field.stuff.count(tile) > 0;
            REQUIRE(got.kind ==
                    (exists ? Assignment::Kind::Stuff : Assignment::Kind::SpawnRequired));
        }
    }
}

TEST_CASE("spawning the same tile twice is an error; one spawn per tile", "[field]") {
    SceneField field(small_grid_config(), 3);
    field.spawn_stuff_grid(Vec3i{1, 2, 3});
    REQUIRE_THROWS_AS(field.spawn_stuff_grid(Vec3i{1, 2, 3}), ValidationError);
    REQUIRE(field.stuff.size() == 1);
}

TEST_CASE("spawn initialization is a pure function of the tile index", "[field]") {
    SceneField a(small_grid_config(), 42);
    SceneField b(small_grid_config(), 42);
    a.spawn_stuff_grid(Vec3i{0, 0, 0});
    a.spawn_stuff_grid(Vec3i{5, 0, 0});
    b.spawn_stuff_grid(Vec3i{5, 0, 0});  // reversed spawn order
    b.spawn_stuff_grid(Vec3i{0, 0, 0});
    REQUIRE(a.stuff.at({5, 0, 0})->table.w == b.stuff.at({5, 0, 0})->table.w);
    REQUIRE(a.stuff.at({0, 0, 0})->decoder.params.w == b.stuff.at({0, 0, 0})->decoder.params.w);
}

TEST_CASE("corner and cell-center encodes match the table directly", "[field]") {
    HashGridConfig cfg = small_grid_config();
    Rng rng(7);
    HashGrid grid;
    grid.init(cfg, rng);
    for (auto& v : grid.table.w) v = static_cast<float>(rng.uniform(-1, 1));

    int level = 2;
    int res = cfg.level_resolution(level);
    uint32_t mask = cfg.table_size - 1;
    const float* tbl = grid.table.w.data() +
                       static_cast<size_t>(level) * cfg.table_size * cfg.features_per_level;

    // exact lattice corner (3, 5, 7)
    Vec3 corner{3.0 / (res - 1), 5.0 / (res - 1), 7.0 / (res - 1)};
    std::vector<double> feat(static_cast<size_t>(cfg.feature_dim()));
    grid.encode(corner, feat.data());
    uint32_t idx = HashGrid::spatial_hash(3, 5, 7, mask);
    for (int f = 0; f < cfg.features_per_level; ++f)
        REQUIRE(feat[static_cast<size_t>(level * cfg.features_per_level + f)] ==
                Catch::Approx(static_cast<double>(tbl[idx * cfg.features_per_level + f]))
                    .margin(1e-12));

    // cell center: mean of the 8 corner features
    Vec3 center{3.5 / (res - 1), 5.5 / (res - 1), 7.5 / (res - 1)};
    grid.encode(center, feat.data());
    for (int f = 0; f < cfg.features_per_level; ++f) {
        double mean = 0.0;
        for (int c = 0; c < 8; ++c) {
            uint32_t h = HashGrid::spatial_hash(3 + (c & 1), 5 + ((c >> 1) & 1),
                                                7 + ((c >> 2) & 1), mask);
            mean += static_cast<double>(tbl[h * cfg.features_per_level + f]) / 8.0;
        }
        REQUIRE(feat[static_cast<size_t>(level * cfg.features_per_level + f)] ==
                Catch::Approx(mean).margin(1e-12));
    }
}

TEST_CASE("encode matches an independent interpolation oracle", "[field]") {
    HashGridConfig cfg = small_grid_config();
    Rng rng(11);
    HashGrid grid;
    grid.init(cfg, rng);
    for (auto& v : grid.table.w) v = static_cast<float>(rng.uniform(-1, 1));

    std::vector<double> feat(static_cast<size_t>(cfg.feature_dim()));
    for (int k = 0; k < 100; ++k) {
        Vec3 p{rng.uniform(), rng.uniform(), rng.uniform()};
        grid.encode(p, feat.data());
        // straight-line oracle: per level, lerp along x, then y, then z
        for (int level = 0; level < cfg.levels; ++level) {
            int res = cfg.level_resolution(level);
            uint32_t mask = cfg.table_size - 1;
            const float* tbl = grid.table.w.data() +
                               static_cast<size_t>(level) * cfg.table_size * cfg.features_per_level;
            double xf = p.x * (res - 1), yf = p.y * (res - 1), zf = p.z * (res - 1);
            int x0 = std::min(static_cast<int>(xf), res - 2);
            int y0 = std::min(static_cast<int>(yf), res - 2);
            int z0 = std::min(static_cast<int>(zf), res - 2);
            double fx = xf - x0, fy = yf - y0, fz = zf - z0;
            for (int f = 0; f < cfg.features_per_level; ++f) {
                auto fetch = [&](int dx, int dy, int dz) {
                    uint32_t h = HashGrid::spatial_hash(static_cast<uint32_t>(x0 + dx),
                                                        static_cast<uint32_t>(y0 + dy),
                                                        static_cast<uint32_t>(z0 + dz), mask);
                    return static_cast<double>(tbl[h * cfg.features_per_level + f]);
                };
                auto lerp = [](double a, double b, double u) { return a + (b - a) * u; };
                double c00 = lerp(fetch(0, 0, 0), fetch(1, 0, 0), fx);
                double c10 = lerp(fetch(0, 1, 0), fetch(1, 1, 0), fx);
                double c01 = lerp(fetch(0, 0, 1), fetch(1, 0, 1), fx);
                double c11 = lerp(fetch(0, 1, 1), fetch(1, 1, 1), fx);
                double expect = lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz);
                REQUIRE(feat[static_cast<size_t>(level * cfg.features_per_level + f)] ==
                        Catch::Approx(expect).margin(1e-12));
            }
        }
    }
}

TEST_CASE("per-level interpolation is bounded by the corner-feature spread", "[field]") {
    HashGridConfig cfg = small_grid_config();
    Rng rng(13);
    HashGrid grid;
    grid.init(cfg, rng);
    for (auto& v : grid.table.w) v = static_cast<float>(rng.uniform(-1, 1));

    std::vector<double> fa(static_cast<size_t>(cfg.feature_dim()));
    std::vector<double> fb(fa.size());
    int level = 1;
    int res = cfg.level_resolution(level);
    for (int k = 0; k < 200; ++k) {
        // two points inside one cell of the probed level
        int cx = static_cast<int>(rng.below(static_cast<uint32_t>(res - 1)));
        auto in_cell = [&](double u) { return (cx + u) / (res - 1); };
        Vec3 a{in_cell(rng.uniform()), in_cell(rng.uniform()), in_cell(rng.uniform())};
        Vec3 b{in_cell(rng.uniform()), in_cell(rng.uniform()), in_cell(rng.uniform())};
        grid.encode(a, fa.data());
        grid.encode(b, fb.data());
        double spread = 2.0;  // features are in [-1, 1]
        double l1 = (std::abs(a.x - b.x) + std::abs(a.y - b.y) + std::abs(a.z - b.z)) * (res - 1);
        for (int f = 0; f < cfg.features_per_level; ++f) {
            size_t i = static_cast<size_t>(level * cfg.features_per_level + f);
            REQUIRE(std::abs(fa[i] - fb[i]) <= spread * l1 + 1e-12);
        }
    }
}

TEST_CASE("freshly initialized grids decode to near-uniform density", "[field]") {
    HashGridConfig cfg = small_grid_config();
    Rng rng(21);
    HashGrid grid;
    grid.init(cfg, rng);
    HashGrid::QueryScratch scratch;
    for (int k = 0; k < 50; ++k) {
        Vec3 p{rng.uniform(), rng.uniform(), rng.uniform()};
        double sigma;
        Vec3 color;
        grid.query(p, scratch, sigma, color);
        REQUIRE(sigma == Catch::Approx(softplus(0.0)).margin(1e-3));
        for (int c = 0; c < 3; ++c) REQUIRE((color[c] >= 0.0 && color[c] <= 1.0));
    }
}

TEST_CASE("object grids are rigid: translated instance, translated query", "[field]") {
    SceneLayout layout = toy::street_scene();
    SceneField field(small_grid_config(), 9);
    field.ensure_object_grids(layout);
    // give the car grid structure
    Rng rng(33);
    for (auto& v : field.objects.at(3)->grid.table.w) v = static_cast<float>(rng.uniform(-1, 1));

    HashGrid::QueryScratch scratch;
    Vec3 p{2.5, -1.75, 1.25};
    Assignment a = field.assign_point(layout, p);
    REQUIRE(a.kind == Assignment::Kind::Object);
    double sigma_before;
    Vec3 color_before;
    field.query(p, a, scratch, sigma_before, color_before);

    Vec3 delta{4.0, 2.0, 0.5};  // dyadic, so the transform round-trips exactly
    SceneLayout moved = transform_instance(layout, 3, Pose{Mat3::identity(), delta, {1, 1, 1}});
    field.objects.at(3)->pose = moved.find(3)->pose;
    Vec3 p2 = p + delta;
    Assignment a2 = field.assign_point(moved, p2);
    REQUIRE(a2.kind == Assignment::Kind::Object);
    double sigma_after;
    Vec3 color_after;
    field.query(p2, a2, scratch, sigma_after, color_after);
    REQUIRE(sigma_after == sigma_before);
    REQUIRE(color_after == color_before);

    // exact 90-degree yaw about the origin: entries are 0/±1, still bit-exact
    Mat3 yaw90(0, -1, 0, 1, 0, 0, 0, 0, 1);
    SceneLayout turned = transform_instance(layout, 3, Pose{yaw90, {0, 0, 0}, {1, 1, 1}});
    field.objects.at(3)->pose = turned.find(3)->pose;
    Vec3 p3 = yaw90 * p;
    double sigma_rot;
    Vec3 color_rot;
    Assignment a3 = field.assign_point(turned, p3);
    field.query(p3, a3, scratch, sigma_rot, color_rot);
    REQUIRE(sigma_rot == sigma_before);
    REQUIRE(color_rot == color_before);
}

TEST_CASE("density gradients match finite differences", "[field]") {
    HashGridConfig cfg = small_grid_config();
    Rng rng(55);
    HashGrid grid;
    grid.init(cfg, rng);
    for (auto& v : grid.table.w) v = static_cast<float>(rng.uniform(-0.5, 0.5));

    HashGrid::QueryScratch scratch;
    Vec3 p{0.37, 0.81, 0.22};
    auto eval_sigma = [&]() {
        double sigma;
        Vec3 c;
        grid.query(p, scratch, sigma, c);
        return sigma;
    };
    grid.table.zero_grad();
    grid.decoder.params.zero_grad();
    grid.query_backward(p, scratch, 1.0, Vec3{});
    REQUIRE(fd::check_block(grid.table, eval_sigma, 8) < 1e-3);
    REQUIRE(fd::check_block(grid.decoder.params, eval_sigma, 12) < 1e-3);

    // color channel gradient too
    auto eval_red = [&]() {
        double sigma;
        Vec3 c;
        grid.query(p, scratch, sigma, c);
        return c.x;
    };
    grid.table.zero_grad();
    grid.decoder.params.zero_grad();
    grid.query_backward(p, scratch, 0.0, Vec3{1, 0, 0});
    REQUIRE(fd::check_block(grid.decoder.params, eval_red, 12) < 1e-3);
}

TEST_CASE("sky color is deterministic, asymmetric and differentiable", "[field]") {
    Rng rng(66);
    SkyModel sky;
    sky.init(rng);
    for (auto& v : sky.net.params.w) v = static_cast<float>(rng.uniform(-0.8, 0.8));

    Vec3 d = Vec3{0.3, -0.5, 0.8}.normalized();
    REQUIRE(sky.color(d) == sky.color(d));
    REQUIRE_FALSE(sky.color(d) == sky.color(-d));
    REQUIRE_THROWS_AS(sky.color({1.0, 1.0, 0.0}), std::invalid_argument);
    for (int c = 0; c < 3; ++c) REQUIRE((sky.color(d)[c] >= 0.0 && sky.color(d)[c] <= 1.0));

    auto eval = [&]() { return sky.color(d).y; };
    sky.net.params.zero_grad();
    sky.color_backward(d, Vec3{0, 1, 0});
    REQUIRE(fd::check_block(sky.net.params, eval, 12) < 1e-3);
}

TEST_CASE("queries outside the assigned grid are a contract violation", "[field]") {
    SceneLayout layout = toy::street_scene();
    SceneField field(small_grid_config(), 9);
    field.ensure_object_grids(layout);
    HashGrid::QueryScratch scratch;
    double sigma;
    Vec3 color;
    Assignment a;
    a.kind = Assignment::Kind::Object;
    a.object_id = 3;
    REQUIRE_THROWS_AS(field.query({50, 50, 50}, a, scratch, sigma, color), std::logic_error);
}
