#pragma once

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "layoutforge/checkpoint.hpp"
#include "layoutforge/mesh.hpp"
#include "layoutforge/train.hpp"

namespace layoutforge::cli {

enum ExitCode { kOk = 0, kRuntime = 1, kUsage = 2, kValidation = 3 };

inline int log_level() {
    static int level = [] {
        const char* env = std::getenv("LAYOUTFORGE_LOG");
        if (!env) return 1;
        std::string v = env;
        if (v == "quiet" || v == "0") return 0;
        if (v == "debug" || v == "2") return 2;
        return 1;
    }();
    return level;
}

inline void log_info(const std::string& msg) {
    if (log_level() >= 1) std::cout << "[layoutforge] " << msg << "\n";
}
inline void log_debug(const std::string& msg) {
    if (log_level() >= 2) std::cout << "[layoutforge:debug] " << msg << "\n";
}

struct CliOptions {
    std::string layout_path;
    std::string trajectory_path;
    std::string config_path;
    std::string checkpoint_path;
    std::string denoiser_path;
    std::string edits_path;
    std::string out_dir = ".";
    int64_t seed = -1;
    int threads = 1;
    bool no_layout_constraint = false;
    bool unconditional_refine = false;
    double voxel = 0.25;
    double threshold = softplus(0.0) + 1.0;
};

namespace detail {

inline TrainConfig make_config(const CliOptions& opt) {
    TrainConfig cfg;
    if (!opt.config_path.empty()) cfg = load_train_config(opt.config_path);
    if (opt.seed >= 0) cfg.seed = static_cast<uint64_t>(opt.seed);
    if (opt.no_layout_constraint) cfg.layout_constraint = false;
    if (opt.unconditional_refine) cfg.conditional_refine = false;
    cfg.out_dir = opt.out_dir;
    cfg.validate();
    return cfg;
}

inline TrajectorySampler make_sampler(const CliOptions& opt, const TrainConfig& cfg) {
    TrajectorySampler sampler;
    sampler.base = load_trajectory(opt.trajectory_path);
    sampler.yaw_range = deg2rad(cfg.yaw_jitter_deg);
    sampler.pos_jitter = cfg.pos_jitter;
    sampler.min_height = cfg.min_camera_height;
    return sampler;
}

inline GuidanceStack load_stack(const CliOptions& opt, const TrainConfig& cfg) {
    auto [denoiser, schedule] = load_denoiser_checkpoint(opt.denoiser_path);
    schedule.t_lo = cfg.t_lo;
    schedule.t_hi = cfg.t_hi;
    return GuidanceStack::make(std::move(denoiser), schedule, cfg.style, cfg.lora_rank,
                               mix_seed(cfg.seed, 0x10adull));
}

inline Aabb mesh_region(const SceneLayout& layout, double pad) {
    if (layout.world_bounds) return *layout.world_bounds;
    Aabb region;
    for (const auto& inst : layout.instances) {
        Aabb b = instance_world_aabb(inst);
        region.expand(b.min);
        region.expand(b.max);
    }
    region.min -= Vec3{pad, pad, pad};
    region.max += Vec3{pad, pad, pad};
    return region;
}

inline std::string frame_prefix(const std::string& out_dir, size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%04zu", index);
    return out_dir + "/" + buf;
}

}  // namespace detail

inline int cmd_validate(const CliOptions& opt) {
    SceneLayout layout = load_layout(opt.layout_path);
    log_info("layout ok: " + std::to_string(layout.classes.size()) + " classes, " +
             std::to_string(layout.instances.size()) + " instances");
    return kOk;
}

inline int cmd_rasterize(const CliOptions& opt) {
    SceneLayout layout = load_layout(opt.layout_path);
    std::vector<Camera> cams = load_trajectory(opt.trajectory_path);
    std::filesystem::create_directories(opt.out_dir);
    for (size_t k = 0; k < cams.size(); ++k) {
        ConditionMaps maps = rasterize(layout, cams[k]);
        export_condition_maps(detail::frame_prefix(opt.out_dir, k), maps, layout);
    }
    log_info("rasterized " + std::to_string(cams.size()) + " view(s) to " + opt.out_dir);
    return kOk;
}

inline int cmd_pretrain(const CliOptions& opt) {
    TrainConfig cfg = detail::make_config(opt);
    SceneLayout layout = load_layout(opt.layout_path);
    TrajectorySampler sampler = detail::make_sampler(opt, cfg);
    PainterOracle painter{cfg.painter_seed, cfg.painter_texture_amp};
    NoiseSchedule schedule = cfg.schedule();
    std::filesystem::create_directories(opt.out_dir);
    MetricsLog metrics;
    metrics.open(opt.out_dir + "/metrics.csv");
    PretrainResult result =
        pretrain_toy_denoiser({{layout, sampler}}, painter, schedule, cfg, &metrics);
    save_denoiser_checkpoint(opt.out_dir + "/denoiser.den", result.denoiser, schedule);
    log_info("pretraining done, validation noise loss " + std::to_string(result.final_val_loss));
    return kOk;
}

inline int cmd_optimize(const CliOptions& opt) {
    TrainConfig cfg = detail::make_config(opt);
    SceneLayout layout = load_layout(opt.layout_path);
    TrajectorySampler sampler = detail::make_sampler(opt, cfg);
    GuidanceStack stack = detail::load_stack(opt, cfg);
    LossStack losses{FeatureEncoder(mix_seed(cfg.seed, 0xfeull)),
                     MonoDepthProvider{0.5, 3.0, 0.05, mix_seed(cfg.seed, 0x30ull)}};
    std::filesystem::create_directories(opt.out_dir);
    MetricsLog metrics;
    metrics.open(opt.out_dir + "/metrics.csv");

    SceneField field = opt.checkpoint_path.empty()
                           ? SceneField(cfg.field_config(), mix_seed(cfg.seed, 0xf1e1dull))
                           : load_field_checkpoint(opt.checkpoint_path);
    optimize_scene(layout, field, stack, losses, sampler, cfg, &metrics);
    log_info("optimization done, checkpoint at " + opt.out_dir + "/field_optimized.shg");
    return kOk;
}

inline int cmd_refine(const CliOptions& opt) {
    TrainConfig cfg = detail::make_config(opt);
    SceneLayout layout = load_layout(opt.layout_path);
    TrajectorySampler sampler = detail::make_sampler(opt, cfg);
    GuidanceStack stack = detail::load_stack(opt, cfg);
    LossStack losses{FeatureEncoder(mix_seed(cfg.seed, 0xfeull)),
                     MonoDepthProvider{0.5, 3.0, 0.05, mix_seed(cfg.seed, 0x30ull)}};
    std::filesystem::create_directories(opt.out_dir);
    MetricsLog metrics;
    metrics.open(opt.out_dir + "/metrics.csv");
    SceneField field = load_field_checkpoint(opt.checkpoint_path);
    refine_scene(layout, field, stack, losses, sampler, cfg, &metrics);
    log_info("refinement done, checkpoint at " + opt.out_dir + "/field_refined.shg");
    return kOk;
}

inline int cmd_render(const CliOptions& opt) {
    TrainConfig cfg = detail::make_config(opt);
    SceneLayout layout = load_layout(opt.layout_path);
    std::vector<Camera> cams = load_trajectory(opt.trajectory_path);
    SceneField field = load_field_checkpoint(opt.checkpoint_path);
    std::filesystem::create_directories(opt.out_dir);
    for (size_t k = 0; k < cams.size(); ++k) {
        SamplingConfig sampling =
            cfg.sampling(cfg.samples_per_ray_refine, mix_seed(cfg.seed, 0x3e4d3ull, k));
        ensure_coverage(field, layout, cams[k], sampling);
        RenderFrame frame = render_image(field, layout, cams[k], sampling);
        export_render_frame(detail::frame_prefix(opt.out_dir, k), frame, layout);
    }
    log_info("rendered " + std::to_string(cams.size()) + " frame(s) to " + opt.out_dir);
    return kOk;
}

inline int cmd_edit(const CliOptions& opt) {
    TrainConfig cfg = detail::make_config(opt);
    SceneLayout layout = load_layout(opt.layout_path);
    SceneField field = load_field_checkpoint(opt.checkpoint_path);
    std::vector<EditOp> ops = load_edit_script(opt.edits_path);
    std::filesystem::create_directories(opt.out_dir);

    bool can_finetune = !opt.denoiser_path.empty() && !opt.trajectory_path.empty();
    if (can_finetune) {
        GuidanceStack stack = detail::load_stack(opt, cfg);
        TrajectorySampler sampler = detail::make_sampler(opt, cfg);
        LossStack losses{FeatureEncoder(mix_seed(cfg.seed, 0xfeull)),
                         MonoDepthProvider{0.5, 3.0, 0.05, mix_seed(cfg.seed, 0x30ull)}};
        MetricsLog metrics;
        metrics.open(opt.out_dir + "/metrics.csv");
        edit_scene(field, layout, stack, losses, sampler, ops, cfg, true, &metrics);
    } else {
        GuidanceStack dummy;  // style edits need a denoiser; reject them here
        for (const auto& op : ops)
            if (op.kind == EditOp::Kind::Style)
                throw ValidationError("edit: style change requires --denoiser and --trajectory");
        SceneLayout edited = layout;
        for (const auto& op : ops) apply_edit(field, edited, dummy, op);
        layout = edited;
        log_info("edits applied without fine-tune (pass --denoiser and --trajectory to enable)");
    }
    save_layout(opt.out_dir + "/layout_edited.json", layout);
    save_field_checkpoint(opt.out_dir + "/field_edited.shg", field);
    log_info("edited layout and field written to " + opt.out_dir);
    return kOk;
}

inline int cmd_mesh(const CliOptions& opt) {
    SceneLayout layout = load_layout(opt.layout_path);
    SceneField field = load_field_checkpoint(opt.checkpoint_path);
    std::filesystem::create_directories(opt.out_dir);
    Aabb region = detail::mesh_region(layout, opt.voxel);
    TriangleMesh mesh = extract_mesh(field, layout, region, opt.voxel, opt.threshold);
    save_obj(opt.out_dir + "/scene.obj", mesh);
    log_info("mesh with " + std::to_string(mesh.vertices.size()) + " vertices, " +
             std::to_string(mesh.triangles.size()) + " triangles");
    return kOk;
}

/// Entry point shared by the binary and the tests. Exit codes: 0 success,
/// 1 runtime failure, 2 usage error, 3 validation/parse error.
inline int run(const std::vector<std::string>& args) {
    CLI::App app{"layoutforge: layout-conditioned 3D scene synthesis"};
    app.require_subcommand(1);
    CliOptions opt;

    auto add_common = [&](CLI::App* sub, bool needs_layout) {
        if (needs_layout)
            sub->add_option("--layout", opt.layout_path, "layout JSON file")->required();
        sub->add_option("--config", opt.config_path, "run config (key = value lines)");
        sub->add_option("--out-dir", opt.out_dir, "output directory");
        sub->add_option("--seed", opt.seed, "override config seed");
        sub->add_option("--threads", opt.threads, "worker thread cap");
        return sub;
    };

    CLI::App* validate = add_common(app.add_subcommand("validate", "schema-check a layout"), true);
    CLI::App* raster = add_common(app.add_subcommand("rasterize", "emit condition maps"), true);
    raster->add_option("--trajectory", opt.trajectory_path, "camera trajectory JSON")->required();
    CLI::App* pretrain = add_common(app.add_subcommand("pretrain", "train the toy denoiser"), true);
    pretrain->add_option("--trajectory", opt.trajectory_path)->required();
    CLI::App* optimize = add_common(app.add_subcommand("optimize", "LG-VSD scene optimization"), true);
    optimize->add_option("--trajectory", opt.trajectory_path)->required();
    optimize->add_option("--denoiser", opt.denoiser_path, "denoiser checkpoint")->required();
    optimize->add_option("--checkpoint", opt.checkpoint_path, "resume from field checkpoint");
    optimize->add_flag("--no-layout-constraint", opt.no_layout_constraint,
                       "sample the full ray range (comparison mode)");
    CLI::App* refine = add_common(app.add_subcommand("refine", "layout-aware refinement"), true);
    refine->add_option("--trajectory", opt.trajectory_path)->required();
    refine->add_option("--denoiser", opt.denoiser_path)->required();
    refine->add_option("--checkpoint", opt.checkpoint_path)->required();
    refine->add_flag("--unconditional-refine", opt.unconditional_refine,
                     "refine without condition maps (comparison mode)");
    refine->add_flag("--no-layout-constraint", opt.no_layout_constraint);
    CLI::App* render = add_common(app.add_subcommand("render", "render frames"), true);
    render->add_option("--trajectory", opt.trajectory_path)->required();
    render->add_option("--checkpoint", opt.checkpoint_path)->required();
    render->add_flag("--no-layout-constraint", opt.no_layout_constraint);
    CLI::App* edit = add_common(app.add_subcommand("edit", "apply an edit script"), true);
    edit->add_option("--checkpoint", opt.checkpoint_path)->required();
    edit->add_option("--edits", opt.edits_path, "edit script JSON")->required();
    edit->add_option("--trajectory", opt.trajectory_path);
    edit->add_option("--denoiser", opt.denoiser_path);
    CLI::App* mesh = add_common(app.add_subcommand("mesh", "extract an OBJ mesh"), true);
    mesh->add_option("--checkpoint", opt.checkpoint_path)->required();
    mesh->add_option("--voxel", opt.voxel, "voxel size in meters");
    mesh->add_option("--threshold", opt.threshold, "density threshold");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        set_thread_count(opt.threads);
        if (validate->parsed()) return cmd_validate(opt);
        if (raster->parsed()) return cmd_rasterize(opt);
        if (pretrain->parsed()) return cmd_pretrain(opt);
        if (optimize->parsed()) return cmd_optimize(opt);
        if (refine->parsed()) return cmd_refine(opt);
        if (render->parsed()) return cmd_render(opt);
        if (edit->parsed()) return cmd_edit(opt);
        if (mesh->parsed()) return cmd_mesh(opt);
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return kUsage;
}

}  // namespace layoutforge::cli
