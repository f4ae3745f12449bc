#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "layoutforge/checkpoint.hpp"
#include "layoutforge/field.hpp"
#include "layoutforge/guidance.hpp"
#include "layoutforge/losses.hpp"
#include "layoutforge/raster.hpp"
#include "layoutforge/render.hpp"

namespace layoutforge {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct TrainConfig {
    uint64_t seed = 1;
    int style = 0;

    // resolutions and schedule of the two phases
    int coarse_resolution = 256;
    int refine_resolution = 512;
    int optimize_steps = 1500;
    int optimize_steps_fine = 0;  // optional fine-resolution tail of optimize
    int refine_steps = 300;

    double learning_rate = 1e-3;
    double adapter_lr = 1e-3;
    double grad_clip = 1.0;

    // loss weights
    double w_lg_vsd = 1.0;
    double w_feature = 0.1;
    double w_depth = 0.05;
    double w_sky = 0.1;
    double w_refine = 1.0;

    // rendering
    int samples_per_ray = 64;
    int samples_per_ray_refine = 96;
    double near = 0.1;
    double far = 200.0;
    double focal_scale = 1.0;  // focal length = focal_scale * resolution
    bool layout_constraint = true;
    double max_inverse_depth = 0.5;

    // field
    int field_levels = 8;
    int field_base_resolution = 16;
    double field_per_level_scale = 1.5;
    uint32_t field_table_size = 1u << 16;
    int field_features = 2;
    int field_decoder_hidden = 64;
    double tile_size_x = 64.0, tile_size_y = 64.0, tile_size_z = 32.0;

    // diffusion schedule
    int schedule_steps = 1000;
    double beta_min = 1e-4;
    double beta_max = 2e-2;
    double t_lo = 0.02, t_hi = 0.98;

    // denoiser
    int denoiser_layers = 4;
    int denoiser_channels = 32;
    int denoiser_time_dim = 32;
    int style_count = 3;
    int lora_rank = 4;

    // pretraining
    int pretrain_steps = 2000;
    double pretrain_lr = 1e-3;
    int pretrain_val_views = 8;

    // layout-aware refinement
    double refine_t0_frac = 0.2;
    int refine_denoise_steps = 15;
    bool refine_stochastic = true;
    bool conditional_refine = true;

    // trajectory sampling
    double yaw_jitter_deg = 45.0;
    double pos_jitter = 0.5;
    double min_camera_height = 0.2;

    // painter oracle
    uint64_t painter_seed = 77;
    double painter_texture_amp = 0.04;

    // editing
    double edit_finetune_frac = 0.1;

    // bookkeeping
    int checkpoint_every = 0;  // 0: final only
    std::string out_dir;

    void validate() const {
        auto pow2 = [](int v) { return v > 0 && (v & (v - 1)) == 0; };
        if (!pow2(coarse_resolution) || !pow2(refine_resolution))
            throw ValidationError("config: resolutions must be powers of two");
        for (double w : {w_lg_vsd, w_feature, w_depth, w_sky, w_refine})
            if (w < 0.0) throw ValidationError("config: loss weights must be >= 0");
        if (!(t_lo >= 0.0 && t_hi <= 1.0 && t_lo < t_hi))
            throw ValidationError("config: t range must satisfy 0 <= t_lo < t_hi <= 1");
    }

    HashGridConfig field_config() const {
        HashGridConfig cfg;
        cfg.levels = field_levels;
        cfg.base_resolution = field_base_resolution;
        cfg.per_level_scale = field_per_level_scale;
        cfg.table_size = field_table_size;
        cfg.features_per_level = field_features;
        cfg.decoder_hidden = {field_decoder_hidden};
        cfg.tile_size = {tile_size_x, tile_size_y, tile_size_z};
        return cfg;
    }

    NoiseSchedule schedule() const {
        NoiseSchedule s = NoiseSchedule::linear(schedule_steps, beta_min, beta_max);
        s.t_lo = t_lo;
        s.t_hi = t_hi;
        return s;
    }

    SamplingConfig sampling(int spp, uint64_t stream) const {
        SamplingConfig s;
        s.samples_per_ray = spp;
        s.near = near;
        s.far = far;
        s.constrain_to_layout = layout_constraint;
        s.seed = stream;
        return s;
    }
};

namespace detail {

inline bool parse_bool(const std::string& v) {
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    throw ParseError("config: bad boolean value '" + v + "'");
}

}  // namespace detail

/// Run configs are `key = value` lines; '#' starts a comment. Unknown keys are
/// rejected so typos fail loudly.
inline void apply_config_line(TrainConfig& c, const std::string& key, const std::string& value) {
    auto d = [&] { return std::stod(value); };
    auto i = [&] { return std::stoi(value); };
    auto b = [&] { return detail::parse_bool(value); };
    if (key == "seed") c.seed = std::stoull(value);
    else if (key == "style") c.style = i();
    else if (key == "coarse_resolution") c.coarse_resolution = i();
    else if (key == "refine_resolution") c.refine_resolution = i();
    else if (key == "optimize_steps") c.optimize_steps = i();
    else if (key == "optimize_steps_fine") c.optimize_steps_fine = i();
    else if (key == "refine_steps") c.refine_steps = i();
    else if (key == "learning_rate") c.learning_rate = d();
    else if (key == "adapter_lr") c.adapter_lr = d();
    else if (key == "grad_clip") c.grad_clip = d();
    else if (key == "w_lg_vsd") c.w_lg_vsd = d();
    else if (key == "w_feature") c.w_feature = d();
    else if (key == "w_depth") c.w_depth = d();
    else if (key == "w_sky") c.w_sky = d();
    else if (key == "w_refine") c.w_refine = d();
    else if (key == "samples_per_ray") c.samples_per_ray = i();
    else if (key == "samples_per_ray_refine") c.samples_per_ray_refine = i();
    else if (key == "near") c.near = d();
    else if (key == "far") c.far = d();
    else if (key == "focal_scale") c.focal_scale = d();
    else if (key == "layout_constraint") c.layout_constraint = b();
    else if (key == "max_inverse_depth") c.max_inverse_depth = d();
    else if (key == "field_levels") c.field_levels = i();
    else if (key == "field_base_resolution") c.field_base_resolution = i();
    else if (key == "field_per_level_scale") c.field_per_level_scale = d();
    else if (key == "field_table_size") c.field_table_size = static_cast<uint32_t>(std::stoul(value));
    else if (key == "field_features") c.field_features = i();
    else if (key == "field_decoder_hidden") c.field_decoder_hidden = i();
    else if (key == "tile_size_x") c.tile_size_x = d();
    else if (key == "tile_size_y") c.tile_size_y = d();
    else if (key == "tile_size_z") c.tile_size_z = d();
    else if (key == "schedule_steps") c.schedule_steps = i();
    else if (key == "beta_min") c.beta_min = d();
    else if (key == "beta_max") c.beta_max = d();
    else if (key == "t_lo") c.t_lo = d();
    else if (key == "t_hi") c.t_hi = d();
    else if (key == "denoiser_layers") c.denoiser_layers = i();
    else if (key == "denoiser_channels") c.denoiser_channels = i();
    else if (key == "denoiser_time_dim") c.denoiser_time_dim = i();
    else if (key == "style_count") c.style_count = i();
    else if (key == "lora_rank") c.lora_rank = i();
    else if (key == "pretrain_steps") c.pretrain_steps = i();
    else if (key == "pretrain_lr") c.pretrain_lr = d();
    else if (key == "pretrain_val_views") c.pretrain_val_views = i();
    else if (key == "refine_t0_frac") c.refine_t0_frac = d();
    else if (key == "refine_denoise_steps") c.refine_denoise_steps = i();
    else if (key == "refine_stochastic") c.refine_stochastic = b();
    else if (key == "conditional_refine") c.conditional_refine = b();
    else if (key == "yaw_jitter_deg") c.yaw_jitter_deg = d();
    else if (key == "pos_jitter") c.pos_jitter = d();
    else if (key == "min_camera_height") c.min_camera_height = d();
    else if (key == "painter_seed") c.painter_seed = std::stoull(value);
    else if (key == "painter_texture_amp") c.painter_texture_amp = d();
    else if (key == "edit_finetune_frac") c.edit_finetune_frac = d();
    else if (key == "checkpoint_every") c.checkpoint_every = i();
    else throw ParseError("config: unknown key '" + key + "'");
}

inline TrainConfig load_train_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open config file: " + path);
    TrainConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            if (line.find_first_not_of(" \t\r") != std::string::npos)
                throw ParseError("config line " + std::to_string(line_no) + ": expected key = value");
            continue;
        }
        auto trim = [](std::string s) {
            size_t a = s.find_first_not_of(" \t\r");
            size_t b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ParseError("config line " + std::to_string(line_no) + ": empty key");
        try {
            apply_config_line(cfg, key, value);
        } catch (const std::invalid_argument&) {
            throw ParseError("config line " + std::to_string(line_no) + ": bad value for " + key);
        }
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Painter oracle: the deterministic toy target distribution
// ---------------------------------------------------------------------------

inline Vec3 hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    double r = std::abs(h * 6.0 - 3.0) - 1.0;
    double g = 2.0 - std::abs(h * 6.0 - 2.0);
    double b = 2.0 - std::abs(h * 6.0 - 4.0);
    Vec3 rgb{clamp01(r), clamp01(g), clamp01(b)};
    return ((rgb - Vec3{1, 1, 1}) * s + Vec3{1, 1, 1}) * v;
}

/// Deterministic ConditionMaps x style -> image function. Per-class base
/// colors, depth shading, and a gentle class-dependent procedural band
/// pattern; sky is a flat per-style color. Serves as the known toy target in
/// place of a real image corpus.
struct PainterOracle {
    uint64_t seed = 77;
    double texture_amp = 0.04;

    Vec3 class_base_color(int class_id, int style) const {
        double hue = (splitmix64(mix_seed(seed, 0xc01u, static_cast<uint64_t>(class_id))) >> 11) *
                     0x1.0p-53;
        switch (style) {
            case 1: return hsv_to_rgb(hue * 0.5 + 0.55, 0.35, 0.30);  // night: dim, blue-shifted
            case 2: return hsv_to_rgb(hue, 0.15, 0.92);               // snow: bright, desaturated
            default: return hsv_to_rgb(hue, 0.55, 0.85);              // day
        }
    }

    Vec3 sky_color(int style) const {
        switch (style) {
            case 1: return {0.05, 0.06, 0.16};
            case 2: return {0.82, 0.85, 0.88};
            default: return {0.55, 0.70, 0.92};
        }
    }

    Image paint(const ConditionMaps& maps, int style) const {
        Image img(3, maps.height, maps.width);
        for (int y = 0; y < maps.height; ++y) {
            for (int x = 0; x < maps.width; ++x) {
                Vec3 rgb;
                if (maps.at_sky(y, x)) {
                    rgb = sky_color(style);
                } else {
                    int cls = maps.at_semantic(y, x);
                    double d = maps.at_depth(y, x);
                    uint64_t h = mix_seed(seed, 0x7e4u, static_cast<uint64_t>(cls));
                    double freq = 0.15 + 0.30 * ((splitmix64(h) >> 11) * 0x1.0p-53);
                    double phase = (splitmix64(h ^ 0x9e37u) >> 11) * 0x1.0p-53;
                    double shade = 0.45 + 0.55 * std::exp(-d / 60.0);
                    double tex = texture_amp * std::sin(2.0 * kPi * (freq * d + phase));
                    Vec3 base = class_base_color(cls, style);
                    rgb = base * (shade + tex);
                }
                img.set_pixel(y, x, {clamp01(rgb.x), clamp01(rgb.y), clamp01(rgb.z)});
            }
        }
        return img;
    }
};

// ---------------------------------------------------------------------------
// Trajectory sampling
// ---------------------------------------------------------------------------

/// Base trajectory poses perturbed by uniform yaw (about world z) and
/// positional jitter; sampled cameras are kept above the ground plane.
struct TrajectorySampler {
    std::vector<Camera> base;
    double yaw_range = deg2rad(45.0);
    double pos_jitter = 0.5;
    double min_height = 0.2;

    Camera perturbed(size_t index, double yaw, const Vec3& jitter) const {
        Camera cam = base[index % base.size()];
        cam.rotation = Mat3::rotation_z(yaw) * cam.rotation;
        cam.translation += jitter;
        cam.translation.z = std::max(cam.translation.z, min_height);
        return cam;
    }

    Camera sample(Rng& rng) const {
        if (base.empty()) throw ValidationError("trajectory sampler: empty base trajectory");
        size_t index = rng.below(static_cast<uint32_t>(base.size()));
        double yaw = rng.uniform(-yaw_range, yaw_range);
        Vec3 jitter{rng.uniform(-pos_jitter, pos_jitter), rng.uniform(-pos_jitter, pos_jitter),
                    rng.uniform(-pos_jitter, pos_jitter)};
        return perturbed(index, yaw, jitter);
    }

    /// Deterministic held-out views, a separate stream from training samples.
    std::vector<Camera> held_out(int count, uint64_t seed) const {
        std::vector<Camera> cams;
        for (int k = 0; k < count; ++k) {
            Rng rng(mix_seed(seed, 0x4e1dull, static_cast<uint64_t>(k)));
            cams.push_back(sample(rng));
        }
        return cams;
    }
};

// ---------------------------------------------------------------------------
// Guidance stack and loss providers
// ---------------------------------------------------------------------------

struct GuidanceStack {
    NoiseSchedule schedule;
    std::unique_ptr<ToyDenoiser> base;
    AdaptedDenoiser adapted;
    int style = 0;

    static GuidanceStack make(ToyDenoiser denoiser, const NoiseSchedule& schedule, int style,
                              int lora_rank, uint64_t seed) {
        GuidanceStack stack;
        stack.schedule = schedule;
        stack.base = std::make_unique<ToyDenoiser>(std::move(denoiser));
        stack.adapted.init(*stack.base, lora_rank, seed);
        stack.style = style;
        return stack;
    }
};

struct LossStack {
    FeatureEncoder features;
    MonoDepthProvider mono;
};

// ---------------------------------------------------------------------------
// Metrics log
// ---------------------------------------------------------------------------

/// Append-only CSV: header written once, rows as the loop progresses.
struct MetricsLog {
    std::ofstream file;
    bool enabled = false;

    void open(const std::string& path) {
        bool exists = std::filesystem::exists(path);
        file.open(path, std::ios::app);
        enabled = file.is_open();
        if (enabled && !exists)
            file << "step,phase,lg_vsd,feature,depth,sky,refine,adapter,painter_distance\n";
    }

    void row(int step, const std::string& phase, double lgvsd, double feature, double depth,
             double sky, double refine, double adapter, double painter_dist) {
        if (!enabled) return;
        file << step << ',' << phase << ',' << lgvsd << ',' << feature << ',' << depth << ','
             << sky << ',' << refine << ',' << adapter << ',' << painter_dist << '\n';
        file.flush();
    }
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Mean per-pixel |render - painter(rasterize)| over the given cameras.
inline double painter_distance(const SceneField& field, const SceneLayout& layout,
                               const std::vector<Camera>& cams, const PainterOracle& painter,
                               int style, const SamplingConfig& sampling) {
    double total = 0.0;
    for (size_t k = 0; k < cams.size(); ++k) {
        SamplingConfig cfg = sampling;
        cfg.seed = mix_seed(sampling.seed, 0xe7a1ull, k);
        RenderFrame frame = render_image(field, layout, cams[k], cfg);
        ConditionMaps maps = rasterize(layout, cams[k]);
        Image target = painter.paint(maps, style);
        total += mean_abs_diff(frame.color, target);
    }
    return cams.empty() ? 0.0 : total / static_cast<double>(cams.size());
}

/// Fraction of non-sky pixels (per the rasterizer) whose rendered semantic
/// class matches the rasterized one.
inline double semantic_agreement(const SceneField& field, const SceneLayout& layout,
                                 const Camera& cam, const SamplingConfig& sampling) {
    RenderFrame frame = render_image(field, layout, cam, sampling);
    ConditionMaps maps = rasterize(layout, cam);
    int64_t total = 0, match = 0;
    for (size_t i = 0; i < maps.semantic.size(); ++i) {
        if (maps.sky[i]) continue;
        ++total;
        if (frame.semantic[i] == maps.semantic[i]) ++match;
    }
    return total == 0 ? 1.0 : static_cast<double>(match) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Pretraining the toy denoiser
// ---------------------------------------------------------------------------

struct PretrainItem {
    SceneLayout layout;
    TrajectorySampler sampler;
};

struct PretrainResult {
    ToyDenoiser denoiser;
    double final_val_loss = 0.0;
};

inline Camera scaled_camera(const Camera& base, int resolution, double focal_scale) {
    Camera cam = base;
    double sx = static_cast<double>(resolution) / base.width;
    double sy = static_cast<double>(resolution) / base.height;
    cam.fx *= sx;
    cam.fy *= sy;
    cam.cx *= sx;
    cam.cy *= sy;
    cam.width = cam.height = resolution;
    cam.fx *= focal_scale;
    cam.fy *= focal_scale;
    return cam;
}

/// Trains the noise predictor on painter images of the layouts, conditioned
/// on their rasterized maps and style tokens. Aborts on divergence. Zero
/// steps returns the freshly initialized network.
inline PretrainResult pretrain_toy_denoiser(const std::vector<PretrainItem>& items,
                                            const PainterOracle& painter,
                                            const NoiseSchedule& schedule,
                                            const TrainConfig& config,
                                            MetricsLog* metrics = nullptr) {
    if (items.empty()) throw ValidationError("pretrain: empty layout set");
    int class_count = items.front().layout.class_count();
    for (const auto& item : items)
        if (item.layout.class_count() != class_count)
            throw ValidationError("pretrain: layouts must share one class vocabulary");

    ToyDenoiserConfig dcfg;
    dcfg.condition_channels = class_count + 1;
    dcfg.layers = config.denoiser_layers;
    dcfg.channels = config.denoiser_channels;
    dcfg.time_dim = config.denoiser_time_dim;
    dcfg.style_count = config.style_count;
    ToyDenoiser denoiser(dcfg, mix_seed(config.seed, 0xde0ull));

    int res = config.coarse_resolution;
    ConditionEncodeOptions enc_opt{config.max_inverse_depth};

    struct Sample {
        Image x0;
        Image cond;
        int style;
    };
    auto make_sample = [&](Rng& rng) {
        const auto& item = items[rng.below(static_cast<uint32_t>(items.size()))];
        Camera cam = scaled_camera(item.sampler.sample(rng), res, config.focal_scale);
        ConditionMaps maps = rasterize(item.layout, cam);
        Sample s;
        s.style = static_cast<int>(rng.below(static_cast<uint32_t>(config.style_count)));
        s.x0 = painter.paint(maps, s.style);
        s.cond = encode_condition(maps, class_count, res, enc_opt);
        return s;
    };

    // fixed validation set with fixed noise draws
    std::vector<Sample> val;
    std::vector<int> val_t;
    std::vector<Image> val_eps;
    for (int k = 0; k < config.pretrain_val_views; ++k) {
        Rng rng(mix_seed(config.seed, 0x7a1ull, static_cast<uint64_t>(k)));
        val.push_back(make_sample(rng));
        val_t.push_back(1 + static_cast<int>(rng.below(static_cast<uint32_t>(schedule.steps))));
        val_eps.push_back(gaussian_like(3, res, res, rng));
    }
    auto val_loss = [&]() {
        double loss = 0.0;
        for (size_t k = 0; k < val.size(); ++k) {
            Image x_t = perturb(schedule, val[k].x0, val_t[k], val_eps[k]);
            Image pred = denoiser.predict_noise(x_t, val_t[k], val[k].cond, val[k].style);
            double s = 0.0;
            for (size_t i = 0; i < pred.data.size(); ++i)
                s += sqr(pred.data[i] - val_eps[k].data[i]);
            loss += s / static_cast<double>(pred.data.size());
        }
        return val.empty() ? 0.0 : loss / static_cast<double>(val.size());
    };

    AdamOptimizer opt;
    opt.lr = config.pretrain_lr;
    for (int step = 0; step < config.pretrain_steps; ++step) {
        Rng rng(mix_seed(config.seed, 0x9e7ull, static_cast<uint64_t>(step)));
        Sample s = make_sample(rng);
        int t = 1 + static_cast<int>(rng.below(static_cast<uint32_t>(schedule.steps)));
        Image eps = gaussian_like(3, res, res, rng);
        Image x_t = perturb(schedule, s.x0, t, eps);

        denoiser.for_each_param_block([](ParamBlock& b) { b.zero_grad(); });
        convnet::Cache cache;
        Image pred = denoiser.forward_cached(x_t, t, s.cond, s.style, cache);
        Image dout = pred;
        double loss = 0.0;
        double n = static_cast<double>(pred.data.size());
        for (size_t i = 0; i < pred.data.size(); ++i) {
            double r = pred.data[i] - eps.data[i];
            loss += r * r / n;
            dout.data[i] = 2.0 * r / n;
        }
        if (!std::isfinite(loss))
            throw std::runtime_error("pretrain: loss diverged (non-finite) at step " +
                                     std::to_string(step));
        denoiser.backward_cached(cache, dout);
        opt.begin_step();
        denoiser.for_each_param_block([&](ParamBlock& b) { opt.update(b); });
        if (metrics && (step % 50 == 0))
            metrics->row(step, "pretrain", 0, 0, 0, 0, 0, loss, -1.0);
    }
    PretrainResult out{std::move(denoiser), val_loss()};
    if (metrics) metrics->row(config.pretrain_steps, "pretrain_val", 0, 0, 0, 0, 0,
                              out.final_val_loss, -1.0);
    return out;
}

// ---------------------------------------------------------------------------
// Scene optimization (LG-VSD loop)
// ---------------------------------------------------------------------------

namespace detail {

inline void finite_check(SceneField& field, const char* where) {
    bool ok = true;
    field.for_each_param_block([&](ParamBlock& b) {
        for (float v : b.w)
            if (!std::isfinite(v)) ok = false;
    });
    if (!ok) throw std::runtime_error(std::string(where) + ": non-finite parameters");
}

inline void field_adam_step(SceneField& field, AdamOptimizer& opt, double grad_clip) {
    std::vector<ParamBlock*> blocks;
    field.for_each_param_block([&](ParamBlock& b) { blocks.push_back(&b); });
    if (grad_clip > 0.0) clip_global_grad_norm(blocks, grad_clip);
    opt.begin_step();
    for (ParamBlock* b : blocks) opt.update(*b);
}

}  // namespace detail

/// One LG-VSD optimization phase at the given resolution.
inline void optimize_phase(SceneLayout& layout, SceneField& field, GuidanceStack& stack,
                           LossStack& losses, const TrajectorySampler& sampler,
                           const TrainConfig& config, int resolution, int steps, int step_offset,
                           AdamOptimizer& field_opt, AdamOptimizer& adapter_opt,
                           MetricsLog* metrics, const char* phase) {
    int class_count = layout.class_count();
    ConditionEncodeOptions enc_opt{config.max_inverse_depth};

    for (int step = 0; step < steps; ++step) {
        int global_step = step_offset + step;
        Rng cam_rng(mix_seed(config.seed, 0xca3ull, static_cast<uint64_t>(global_step)));
        Camera cam = scaled_camera(sampler.sample(cam_rng), resolution, config.focal_scale);

        ConditionMaps maps = rasterize(layout, cam);
        Image cond = encode_condition(maps, class_count, resolution, enc_opt);

        SamplingConfig sampling =
            config.sampling(config.samples_per_ray, mix_seed(config.seed, 0x5aull,
                                                             static_cast<uint64_t>(global_step)));
        ensure_coverage(field, layout, cam, sampling);
        RenderCache cache;
        RenderFrame frame = render_image(field, layout, cam, sampling, &cache);

        Rng distill_rng(mix_seed(config.seed, 0xd15ull, static_cast<uint64_t>(global_step)));
        DistillResult distill = lg_vsd_distill(frame.color, *stack.base, stack.adapted,
                                               stack.schedule, cond, cam, stack.style, distill_rng);

        Image dcolor(3, resolution, resolution);
        for (size_t i = 0; i < dcolor.data.size(); ++i)
            dcolor.data[i] = config.w_lg_vsd * distill.gradient.data[i];
        double lg_mag = mean_abs(distill.gradient);

        double feature_loss = 0.0;
        if (config.w_feature > 0.0) {
            Image generated = distill.denoised;
            generated.clamp01();
            Image dfeat;
            feature_loss = feature_consistency_backward(frame.color, generated, losses.features, dfeat);
            for (size_t i = 0; i < dcolor.data.size(); ++i)
                dcolor.data[i] += config.w_feature * dfeat.data[i];
        }

        Image ddepth;
        double depth_l = 0.0;
        if (config.w_depth > 0.0) {
            auto mono = losses.mono.predict(maps, static_cast<uint64_t>(global_step));
            std::vector<double> rendered(frame.depth.data.begin(), frame.depth.data.end());
            try {
                std::vector<double> dr;
                depth_l = depth_loss(mono.depth, rendered, mono.valid, &dr);
                ddepth = Image(1, resolution, resolution);
                for (size_t i = 0; i < dr.size(); ++i)
                    ddepth.data[i] = config.w_depth * dr[i];
            } catch (const std::domain_error&) {
                // degenerate alignment (flat depth early in training): skip
            }
        }

        Image dopacity;
        double sky_l = 0.0;
        if (config.w_sky > 0.0) {
            Image dsky;
            sky_l = sky_loss(frame.opacity, maps.sky, &dsky);
            dopacity = Image(1, resolution, resolution);
            for (size_t i = 0; i < dsky.data.size(); ++i)
                dopacity.data[i] = config.w_sky * dsky.data[i];
        }

        double total = config.w_feature * feature_loss + config.w_depth * depth_l +
                       config.w_sky * sky_l;
        if (!std::isfinite(total) || !std::isfinite(lg_mag))
            throw std::runtime_error("optimize_scene: non-finite loss at step " +
                                     std::to_string(global_step));

        field.zero_grad();
        render_backward(field, cache, dcolor, ddepth, dopacity);
        detail::field_adam_step(field, field_opt, config.grad_clip);

        Rng adapter_rng(mix_seed(config.seed, 0xadaull, static_cast<uint64_t>(global_step)));
        double adapter_loss = adapter_step(stack.adapted, {frame.color}, {cam}, {cond}, stack.style,
                                           stack.schedule, adapter_opt, adapter_rng);

        if (metrics && global_step % 10 == 0)
            metrics->row(global_step, phase, lg_mag, feature_loss, depth_l, sky_l, 0.0,
                         adapter_loss, -1.0);
        if (config.checkpoint_every > 0 && !config.out_dir.empty() &&
            (global_step + 1) % config.checkpoint_every == 0) {
            detail::finite_check(field, "optimize_scene");
            save_field_checkpoint(config.out_dir + "/field_last.shg", field);
        }
    }
    detail::finite_check(field, "optimize_scene");
}

/// LG-VSD scene optimization: alternates field updates (distillation gradient
/// chained through the renderer, plus feature/depth/sky losses) with adapter
/// noise-loss steps, coarse resolution first, then the optional fine tail.
inline void optimize_scene(SceneLayout& layout, SceneField& field, GuidanceStack& stack,
                           LossStack& losses, const TrajectorySampler& sampler,
                           const TrainConfig& config, MetricsLog* metrics = nullptr) {
    config.validate();
    AdamOptimizer field_opt;
    field_opt.lr = config.learning_rate;
    AdamOptimizer adapter_opt;
    adapter_opt.lr = config.adapter_lr;
    optimize_phase(layout, field, stack, losses, sampler, config, config.coarse_resolution,
                   config.optimize_steps, 0, field_opt, adapter_opt, metrics, "coarse");
    if (config.optimize_steps_fine > 0)
        optimize_phase(layout, field, stack, losses, sampler, config, config.refine_resolution,
                       config.optimize_steps_fine, config.optimize_steps, field_opt, adapter_opt,
                       metrics, "fine");
    if (!config.out_dir.empty())
        save_field_checkpoint(config.out_dir + "/field_optimized.shg", field);
}

// ---------------------------------------------------------------------------
// Layout-aware refinement
// ---------------------------------------------------------------------------

/// Perturb-then-denoise refinement: renders are resampled through the
/// conditional denoiser and distilled back into the field with an MSE loss,
/// plus the depth and sky terms.
inline void refine_scene(SceneLayout& layout, SceneField& field, GuidanceStack& stack,
                         LossStack& losses, const TrajectorySampler& sampler,
                         const TrainConfig& config, MetricsLog* metrics = nullptr) {
    config.validate();
    int res = config.refine_resolution;
    int class_count = layout.class_count();
    ConditionEncodeOptions enc_opt{config.max_inverse_depth};
    int t0 = static_cast<int>(config.refine_t0_frac * stack.schedule.steps);
    AdamOptimizer opt;
    opt.lr = config.learning_rate;

    for (int step = 0; step < config.refine_steps; ++step) {
        Rng cam_rng(mix_seed(config.seed, 0x2ca3ull, static_cast<uint64_t>(step)));
        Camera cam = scaled_camera(sampler.sample(cam_rng), res, config.focal_scale);
        ConditionMaps maps = rasterize(layout, cam);
        Image cond = config.conditional_refine
                         ? encode_condition(maps, class_count, res, enc_opt)
                         : Image(class_count + 1, res, res);

        SamplingConfig sampling = config.sampling(
            config.samples_per_ray_refine, mix_seed(config.seed, 0x25aull, static_cast<uint64_t>(step)));
        ensure_coverage(field, layout, cam, sampling);
        RenderCache cache;
        RenderFrame frame = render_image(field, layout, cam, sampling, &cache);

        Rng refine_rng(mix_seed(config.seed, 0x0f1ull, static_cast<uint64_t>(step)));
        Image refined = resample_refine(frame.color, cond, stack.style, *stack.base,
                                        stack.schedule, t0,
                                        config.refine_stochastic ? RefineMode::Stochastic
                                                                 : RefineMode::Deterministic,
                                        refine_rng, config.refine_denoise_steps);
        refined.clamp01();

        Image dcolor;
        double mse = refine_mse(frame.color, refined, &dcolor);
        for (auto& v : dcolor.data) v *= config.w_refine;

        Image ddepth;
        double depth_l = 0.0;
        if (config.w_depth > 0.0) {
            auto mono = losses.mono.predict(maps, 0x8000000ull + static_cast<uint64_t>(step));
            std::vector<double> rendered(frame.depth.data.begin(), frame.depth.data.end());
            try {
                std::vector<double> dr;
                depth_l = depth_loss(mono.depth, rendered, mono.valid, &dr);
                ddepth = Image(1, res, res);
                for (size_t i = 0; i < dr.size(); ++i) ddepth.data[i] = config.w_depth * dr[i];
            } catch (const std::domain_error&) {
            }
        }
        Image dopacity;
        double sky_l = 0.0;
        if (config.w_sky > 0.0) {
            Image dsky;
            sky_l = sky_loss(frame.opacity, maps.sky, &dsky);
            dopacity = Image(1, res, res);
            for (size_t i = 0; i < dsky.data.size(); ++i)
                dopacity.data[i] = config.w_sky * dsky.data[i];
        }

        double total = config.w_refine * mse + config.w_depth * depth_l + config.w_sky * sky_l;
        if (!std::isfinite(total))
            throw std::runtime_error("refine_scene: non-finite loss at step " +
                                     std::to_string(step));

        field.zero_grad();
        render_backward(field, cache, dcolor, ddepth, dopacity);
        detail::field_adam_step(field, opt, config.grad_clip);
        if (metrics && step % 10 == 0)
            metrics->row(step, "refine", 0, 0, depth_l, sky_l, mse, 0, -1.0);
    }
    detail::finite_check(field, "refine_scene");
    if (!config.out_dir.empty())
        save_field_checkpoint(config.out_dir + "/field_refined.shg", field);
}

// ---------------------------------------------------------------------------
// Scene editing
// ---------------------------------------------------------------------------

struct EditOp {
    enum class Kind { Transform, Insert, Remove, Style };
    Kind kind = Kind::Transform;
    int instance_id = -1;
    Pose delta;               // Transform
    LayoutInstance instance;  // Insert
    int style = 0;            // Style
};

inline EditOp edit_op_from_json(const nlohmann::json& j) {
    EditOp op;
    std::string kind = j.at("op").get<std::string>();
    if (kind == "transform") {
        op.kind = EditOp::Kind::Transform;
        op.instance_id = j.at("instance").get<int>();
        if (j.contains("rotation")) op.delta.rotation = detail::mat3_from_json(j["rotation"], "rotation");
        if (j.contains("translation"))
            op.delta.translation = detail::vec3_from_json(j["translation"], "translation");
        if (j.contains("size")) op.delta.size = detail::vec3_from_json(j["size"], "size");
    } else if (kind == "insert") {
        op.kind = EditOp::Kind::Insert;
        const auto& ji = j.at("instance");
        op.instance.id = ji.at("id").get<int>();
        op.instance.class_id = ji.at("class").get<int>();
        op.instance.shape = detail::shape_from_string(ji.at("shape").get<std::string>());
        op.instance.pose.rotation = detail::mat3_from_json(ji.at("rotation"), "rotation");
        op.instance.pose.translation = detail::vec3_from_json(ji.at("translation"), "translation");
        op.instance.pose.size = detail::vec3_from_json(ji.at("size"), "size");
        op.instance.is_object = ji.value("object", false);
    } else if (kind == "remove") {
        op.kind = EditOp::Kind::Remove;
        op.instance_id = j.at("instance").get<int>();
    } else if (kind == "style") {
        op.kind = EditOp::Kind::Style;
        op.style = j.at("style").get<int>();
    } else {
        throw ParseError("edit script: unknown op '" + kind + "'");
    }
    return op;
}

inline std::vector<EditOp> load_edit_script(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open edit script: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("edit script parse error: " + std::string(e.what()));
    }
    if (!j.is_array()) throw ParseError("edit script: expected a JSON list");
    std::vector<EditOp> ops;
    for (const auto& op : j) ops.push_back(edit_op_from_json(op));
    return ops;
}

/// Applies one edit. Object transforms move the instance and its grid pose
/// together and need no retraining; stuff edits and style changes request a
/// short fine-tune (returned flag).
inline bool apply_edit(SceneField& field, SceneLayout& layout, GuidanceStack& stack,
                       const EditOp& op) {
    switch (op.kind) {
        case EditOp::Kind::Transform: {
            const LayoutInstance* inst = layout.find(op.instance_id);
            if (!inst)
                throw ValidationError("edit: unknown instance id " + std::to_string(op.instance_id));
            bool is_object = inst->is_object;
            layout = transform_instance(layout, op.instance_id, op.delta);
            if (is_object) {
                auto it = field.objects.find(op.instance_id);
                if (it != field.objects.end())
                    it->second->pose = layout.find(op.instance_id)->pose;
                return false;  // rigid object move: zero retraining
            }
            return true;
        }
        case EditOp::Kind::Insert: {
            layout = insert_instance(layout, op.instance);
            if (op.instance.is_object) {
                field.ensure_object_grids(layout);
                return false;
            }
            return true;
        }
        case EditOp::Kind::Remove: {
            const LayoutInstance* inst = layout.find(op.instance_id);
            if (!inst)
                throw ValidationError("edit: unknown instance id " + std::to_string(op.instance_id));
            bool was_object = inst->is_object;
            layout = remove_instance(layout, op.instance_id);
            if (was_object) {
                field.objects.erase(op.instance_id);
                return false;
            }
            return true;
        }
        case EditOp::Kind::Style:
            if (op.style < 0 || op.style >= stack.base->cfg.style_count)
                throw ValidationError("edit: style id out of range");
            stack.style = op.style;
            return true;
    }
    return false;
}

/// Applies the edits and, when any of them demands it, runs the short
/// LG-VSD fine-tune with the edited layout, condition maps and style token.
inline void edit_scene(SceneField& field, SceneLayout& layout, GuidanceStack& stack,
                       LossStack& losses, const TrajectorySampler& sampler,
                       const std::vector<EditOp>& ops, const TrainConfig& config,
                       bool allow_finetune = true, MetricsLog* metrics = nullptr) {
    bool wants_finetune = false;
    for (const auto& op : ops) wants_finetune |= apply_edit(field, layout, stack, op);
    if (!wants_finetune || !allow_finetune) return;
    TrainConfig ft = config;
    ft.optimize_steps = std::max(1, static_cast<int>(config.edit_finetune_frac *
                                                     config.optimize_steps));
    ft.optimize_steps_fine = 0;
    ft.seed = mix_seed(config.seed, 0xed17ull);
    optimize_scene(layout, field, stack, losses, sampler, ft, metrics);
}

}  // namespace layoutforge
