#include <catch2/catch_amalgamated.hpp>

#include "layoutforge/render.hpp"
#include "fd_check.hpp"
#include "toy_scene.hpp"

using namespace layoutforge;

namespace {

SamplingConfig toy_sampling(int spp = 16, uint64_t seed = 5) {
    SamplingConfig cfg;
    cfg.samples_per_ray = spp;
    cfg.near = 0.1;
    cfg.far = 80.0;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("sample midpoints lie inside their owning instance", "[render]") {
    SceneLayout layout = toy::mixed_scene();
    Rng rng(71);
    int checked = 0;
    for (int k = 0; k < 200; ++k) {
        Vec3 origin{rng.uniform(-25, -15), rng.uniform(-6, 6), rng.uniform(0.5, 5)};
        Vec3 target{rng.uniform(-5, 10), rng.uniform(-6, 8), rng.uniform(0, 6)};
        Ray ray{origin, (target - origin).normalized()};
        RaySampleSet set = sample_ray(layout, ray, toy_sampling(), rng);
        for (const auto& s : set.samples) {
            REQUIRE(s.instance_id >= 0);
            const LayoutInstance* inst = layout.find(s.instance_id);
            REQUIRE(inst != nullptr);
            Vec3 mid = ray.origin + (s.t + 0.5 * s.delta) * ray.dir;
            REQUIRE(point_in_instance(mid, *inst));
            ++checked;
        }
    }
    REQUIRE(checked > 1000);
}

TEST_CASE("rays missing the layout sample nothing", "[render]") {
    SceneLayout layout = toy::street_scene();
    Rng rng(72);
    Ray ray{{0, 0, 50}, Vec3{0, 0, 1}};
    RaySampleSet set = sample_ray(layout, ray, toy_sampling(), rng);
    REQUIRE(set.samples.empty());
    REQUIRE(set.merged.empty());
}

TEST_CASE("two disjoint boxes: counts proportional, intervals match a ray march", "[render]") {
    SceneLayout layout;
    layout.classes = toy::street_classes();
    layout.instances = {
        toy::make_instance(1, 4, Shape::Cuboid, {10, 0, 0}, {2, 4, 4}),
        toy::make_instance(2, 3, Shape::Cuboid, {20, 0, 0}, {6, 4, 4}),
    };
    Ray ray{{0, 0, 0}, {1, 0, 0}};
    Rng rng(73);
    SamplingConfig cfg = toy_sampling(64);
    RaySampleSet set = sample_ray(layout, ray, cfg, rng);

    // dense epsilon-step march recovers the interval structure
    const double eps = 1e-3;
    std::vector<std::pair<double, double>> oracle;
    bool inside = false;
    double start = 0.0;
    for (double t = cfg.near; t <= cfg.far; t += eps) {
        Vec3 p = ray.origin + t * ray.dir;
        bool now = false;
        for (const auto& inst : layout.instances) now |= point_in_instance(p, inst);
        if (now && !inside) start = t;
        if (!now && inside) oracle.emplace_back(start, t);
        inside = now;
    }
    REQUIRE(set.merged.size() == oracle.size());
    for (size_t i = 0; i < oracle.size(); ++i) {
        REQUIRE(set.merged[i].t_near == Catch::Approx(oracle[i].first).margin(2 * eps));
        REQUIRE(set.merged[i].t_far == Catch::Approx(oracle[i].second).margin(2 * eps));
    }

    // counts proportional to lengths within stratification slack
    int in_first = 0, in_second = 0;
    for (const auto& s : set.samples) (s.instance_id == 1 ? in_first : in_second)++;
    double len1 = 2.0, len2 = 6.0;
    double expect1 = 64.0 * len1 / (len1 + len2);
    REQUIRE(std::abs(in_first - expect1) <= 1.0);
    REQUIRE(in_first + in_second == 64);
}

TEST_CASE("opacity is monotone in density", "[render]") {
    Rng rng(74);
    HashGrid::QueryScratch scratch;
    for (int trial = 0; trial < 200; ++trial) {
        int n = 2 + static_cast<int>(rng.below(12));
        std::vector<double> sigmas(static_cast<size_t>(n)), deltas(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            sigmas[static_cast<size_t>(i)] = rng.uniform(0, 3);
            deltas[static_cast<size_t>(i)] = rng.uniform(0.01, 1.0);
        }
        RaySampleSet set;
        set.dir = {0, 0, 1};
        double t = 1.0;
        for (int i = 0; i < n; ++i) {
            RaySample s;
            s.position = {static_cast<double>(i), 0, 0};
            s.t = t;
            s.delta = deltas[static_cast<size_t>(i)];
            set.samples.push_back(s);
            t += s.delta;
        }
        set.merged = {{1.0, t}};

        struct SeqField {
            const std::vector<double>* sig;
            void query(const Vec3& p, const Assignment&, HashGrid::QueryScratch&, double& s,
                       Vec3& c) const {
                s = (*sig)[static_cast<size_t>(p.x)];
                c = {0.5, 0.5, 0.5};
            }
            Vec3 sky_color(const Vec3&) const { return {0, 0, 0}; }
        };
        SeqField field{&sigmas};
        double base = composite(set, field, scratch).opacity;
        size_t bump = rng.below(static_cast<uint32_t>(n));
        sigmas[bump] += rng.uniform(0.1, 2.0);
        double raised = composite(set, field, scratch).opacity;
        REQUIRE(raised >= base - 1e-15);
    }
}

TEST_CASE("empty layout renders pure sky", "[render]") {
    SceneLayout layout;
    layout.classes = toy::street_classes();
    SceneField field(toy::micro_config().field_config(), 4);
    Camera cam = Camera::look_at({0, 0, 2}, {1, 0, 2}, 16, 16, 16.0);
    RenderFrame frame = render_image(field, layout, cam, toy_sampling());
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            REQUIRE(frame.opacity.at(0, y, x) == 0.0);
            Vec3 sky = field.sky_color(cam.pixel_ray(x, y).dir);
            REQUIRE((frame.color.pixel(y, x) - sky).norm() < 1e-12);
            REQUIRE(frame.semantic[static_cast<size_t>(y) * 16 + x] == 0);
        }
}

TEST_CASE("opaque fronto-parallel slab renders its rasterized depth", "[render]") {
    SceneLayout layout;
    layout.classes = toy::street_classes();
    layout.instances = {toy::make_instance(1, 4, Shape::Cuboid, {10.5, 0, 0}, {1, 30, 30})};
    toy::IndicatorField field{&layout, 1000.0};
    Camera cam = Camera::look_at({0, 0, 0}, {1, 0, 0}, 17, 17, 17.0);
    SamplingConfig cfg = toy_sampling(32);
    RenderFrame frame = render_image(field, layout, cam, cfg);
    // center ray hits the front face at exactly 10; spacing = 1m / 32 samples
    double spacing = 1.0 / 32.0;
    REQUIRE(frame.depth.at(0, 8, 8) == Catch::Approx(10.0).margin(spacing));
    REQUIRE(frame.opacity.at(0, 8, 8) == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("saturated semantic render equals the rasterizer away from silhouettes", "[render]") {
    SceneLayout layout = toy::mixed_scene();
    toy::IndicatorField field{&layout, 50.0};
    Camera cam = Camera::look_at({-14, -1, 2}, {4, 0.5, 1.5}, 48, 48, 48.0);
    RenderFrame frame = render_image(field, layout, cam, toy_sampling(64));
    ConditionMaps maps = rasterize(layout, cam);

    int checked = 0, agreed = 0;
    for (int y = 1; y < 47; ++y) {
        for (int x = 1; x < 47; ++x) {
            int cls = maps.at_semantic(y, x);
            bool interior = true;
            for (int dy = -1; dy <= 1 && interior; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    if (maps.at_semantic(y + dy, x + dx) != cls) {
                        interior = false;
                        break;
                    }
            if (!interior || cls == 0) continue;
            ++checked;
            if (frame.semantic[static_cast<size_t>(y) * 48 + x] == cls) ++agreed;
        }
    }
    REQUIRE(checked > 400);
    REQUIRE(agreed == checked);
}

TEST_CASE("rendered pixels differentiate against every field parameter class", "[render]") {
    SceneLayout layout = toy::street_scene();
    TrainConfig cfg = toy::micro_config();
    SceneField field(cfg.field_config(), 17);
    Camera cam = Camera::look_at({-12, -1, 2}, {4, 0, 1.5}, 16, 16, 16.0);
    SamplingConfig sampling = toy_sampling(8, 99);
    ensure_coverage(field, layout, cam, sampling);

    // randomize parameters a little so colors and densities vary
    Rng rng(91);
    field.for_each_param_block([&](ParamBlock& b) {
        for (auto& v : b.w) v += static_cast<float>(rng.uniform(-0.05, 0.05));
    });

    // random projection of (color, depth, opacity) over all pixels
    Image wc(3, 16, 16), wd(1, 16, 16), wo(1, 16, 16);
    for (auto& v : wc.data) v = rng.uniform(-1, 1);
    for (auto& v : wd.data) v = rng.uniform(-0.1, 0.1);
    for (auto& v : wo.data) v = rng.uniform(-1, 1);

    auto eval = [&]() {
        RenderFrame f = render_image(field, layout, cam, sampling);
        double s = 0.0;
        for (size_t i = 0; i < f.color.data.size(); ++i) s += wc.data[i] * f.color.data[i];
        for (size_t i = 0; i < f.depth.data.size(); ++i) s += wd.data[i] * f.depth.data[i];
        for (size_t i = 0; i < f.opacity.data.size(); ++i) s += wo.data[i] * f.opacity.data[i];
        return s;
    };

    RenderCache cache;
    render_image(field, layout, cam, sampling, &cache);
    field.zero_grad();
    render_backward(field, cache, wc, wd, wo);

    // one block of every parameter class: stuff table+decoder, object ditto, sky
    REQUIRE(!field.stuff.empty());
    HashGrid& stuff_grid = *field.stuff.begin()->second;
    HashGrid& car_grid = field.objects.at(3)->grid;
    REQUIRE(fd::check_block(stuff_grid.table, eval, 6, 1e-3) < 1e-3);
    REQUIRE(fd::check_block(stuff_grid.decoder.params, eval, 8, 1e-3) < 1e-3);
    REQUIRE(fd::check_block(car_grid.table, eval, 6, 1e-3) < 1e-3);
    REQUIRE(fd::check_block(car_grid.decoder.params, eval, 8, 1e-3) < 1e-3);
    REQUIRE(fd::check_block(field.sky.net.params, eval, 8, 1e-3) < 1e-3);
}

TEST_CASE("rendering is deterministic and schedule independent", "[render]") {
    SceneLayout layout = toy::street_scene();
    TrainConfig cfg = toy::micro_config();
    SceneField field(cfg.field_config(), 23);
    Camera cam = Camera::look_at({-12, -1, 2}, {4, 0, 1.5}, 16, 16, 16.0);
    SamplingConfig sampling = toy_sampling(8, 7);
    ensure_coverage(field, layout, cam, sampling);

    RenderFrame a = render_image(field, layout, cam, sampling);
    set_thread_count(3);
    RenderFrame b = render_image(field, layout, cam, sampling);
    set_thread_count(1);
    REQUIRE(a.color.data == b.color.data);
    REQUIRE(a.depth.data == b.depth.data);
    REQUIRE(a.semantic == b.semantic);
}

TEST_CASE("spawning grids outside the view leaves renders bit-identical", "[render]") {
    SceneLayout layout = toy::street_scene();
    TrainConfig cfg = toy::micro_config();
    SceneField field(cfg.field_config(), 29);
    Camera cam = Camera::look_at({-12, -1, 2}, {4, 0, 1.5}, 16, 16, 16.0);
    SamplingConfig sampling = toy_sampling(8, 31);
    ensure_coverage(field, layout, cam, sampling);

    RenderFrame before = render_image(field, layout, cam, sampling);
    field.spawn_stuff_grid(Vec3i{50, 50, 5});
    field.spawn_stuff_grid(Vec3i{-40, 12, 1});
    RenderFrame after = render_image(field, layout, cam, sampling);
    REQUIRE(before.color.data == after.color.data);
    REQUIRE(before.depth.data == after.depth.data);
    REQUIRE(before.opacity.data == after.opacity.data);
}
