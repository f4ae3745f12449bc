#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "layoutforge/camera.hpp"
#include "layoutforge/field.hpp"
#include "layoutforge/image.hpp"
#include "layoutforge/layout.hpp"
#include "layoutforge/parallel.hpp"
#include "layoutforge/raster.hpp"
#include "layoutforge/rng.hpp"

namespace layoutforge {

struct SamplingConfig {
    int samples_per_ray = 64;
    double near = 0.1;
    double far = 200.0;
    /// When false, sampling covers the whole [near, far] range instead of the
    /// layout interiors (the degraded comparison mode).
    bool constrain_to_layout = true;
    uint64_t seed = 0;
};

struct RaySample {
    Vec3 position;
    double t = 0.0;       // ray parameter; metric distance for unit directions
    double delta = 0.0;   // integration segment length
    int instance_id = -1; // owning layout instance, -1 in free space
    int class_id = 0;
    int component = 0;    // index of the merged interval containing the sample
    Assignment assignment;
};

struct RaySampleSet {
    Vec3 origin;
    Vec3 dir;
    std::vector<RayInterval> merged;  // disjoint union components, sorted
    std::vector<RaySample> samples;   // sorted by t
};

namespace detail {

struct OwnedSegment {
    double t0, t1;
    int instance_id;
    int class_id;
    int component;
};

/// Decomposes the union of per-instance intervals into disjoint segments,
/// attributing overlaps by precedence: objects first, then earlier interval
/// entry, then lower instance id.
inline std::vector<OwnedSegment> owned_segments(const SceneLayout& layout, const Vec3& origin,
                                                const Vec3& dir, double near, double far) {
    struct Cover {
        double t0, t1;
        const LayoutInstance* inst;
    };
    std::vector<Cover> covers;
    std::vector<double> cuts;
    for (const auto& inst : layout.instances) {
        for (const auto& iv : ray_instance_intervals(origin, dir, inst)) {
            double a = std::max(iv.t_near, near);
            double b = std::min(iv.t_far, far);
            if (!(a < b)) continue;
            covers.push_back({a, b, &inst});
            cuts.push_back(a);
            cuts.push_back(b);
        }
    }
    if (covers.empty()) return {};
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

    std::vector<OwnedSegment> segments;
    int component = -1;
    double prev_end = -std::numeric_limits<double>::infinity();
    for (size_t k = 0; k + 1 < cuts.size(); ++k) {
        double a = cuts[k], b = cuts[k + 1];
        if (!(a < b)) continue;
        const Cover* best = nullptr;
        for (const auto& c : covers) {
            if (c.t0 > a || c.t1 < b) continue;
            if (!best) {
                best = &c;
                continue;
            }
            bool better = false;
            if (c.inst->is_object != best->inst->is_object)
                better = c.inst->is_object;
            else if (c.t0 != best->t0)
                better = c.t0 < best->t0;
            else
                better = c.inst->id < best->inst->id;
            if (better) best = &c;
        }
        if (!best) continue;
        if (a > prev_end + 1e-12) ++component;
        prev_end = b;
        segments.push_back({a, b, best->inst->id, best->inst->class_id, component});
    }
    return segments;
}

}  // namespace detail

/// Layout-constrained stratified sampling: the union of instance intervals is
/// clipped to [near, far], merged, and jittered samples are placed with
/// density proportional to interval length. Empty result when nothing is hit.
inline RaySampleSet sample_ray(const SceneLayout& layout, const Ray& ray,
                               const SamplingConfig& cfg, Rng& rng) {
    if (!(cfg.near < cfg.far)) throw std::invalid_argument("sample_ray: near must be < far");
    RaySampleSet set;
    set.origin = ray.origin;
    set.dir = ray.dir;

    std::vector<detail::OwnedSegment> segments;
    if (cfg.constrain_to_layout) {
        segments = detail::owned_segments(layout, ray.origin, ray.dir, cfg.near, cfg.far);
    } else {
        segments.push_back({cfg.near, cfg.far, -1, 0, 0});
    }
    if (segments.empty()) return set;

    for (const auto& s : segments) {
        if (!set.merged.empty() && s.component == static_cast<int>(set.merged.size()) - 1)
            set.merged.back().t_far = s.t1;
        else
            set.merged.push_back({s.t0, s.t1});
    }

    double total = 0.0;
    for (const auto& s : segments) total += s.t1 - s.t0;
    if (total <= 0.0) return set;

    int n = cfg.samples_per_ray;
    set.samples.reserve(static_cast<size_t>(n));
    size_t seg = 0;
    double consumed = 0.0;  // arc length before current segment
    for (int k = 0; k < n; ++k) {
        double u = (k + rng.uniform()) / n * total;
        while (seg + 1 < segments.size() && consumed + (segments[seg].t1 - segments[seg].t0) < u) {
            consumed += segments[seg].t1 - segments[seg].t0;
            ++seg;
        }
        const auto& s = segments[seg];
        double t = std::min(s.t0 + (u - consumed), s.t1);
        RaySample sample;
        sample.t = t;
        sample.position = ray.origin + t * ray.dir;
        sample.instance_id = s.instance_id;
        sample.class_id = s.class_id;
        sample.component = s.component;
        set.samples.push_back(sample);
    }

    // In unconstrained mode attribute classes by containment so semantics stay
    // meaningful where instances do exist.
    if (!cfg.constrain_to_layout) {
        for (auto& sample : set.samples) {
            for (const auto& inst : layout.instances) {
                if (point_in_instance(sample.position, inst)) {
                    bool replace = sample.instance_id < 0;
                    if (!replace && inst.is_object) {
                        const LayoutInstance* cur = layout.find(sample.instance_id);
                        replace = cur && !cur->is_object;
                    }
                    if (replace) {
                        sample.instance_id = inst.id;
                        sample.class_id = inst.class_id;
                    }
                }
            }
        }
    }

    for (size_t i = 0; i < set.samples.size(); ++i) {
        auto& s = set.samples[i];
        double end = set.merged[static_cast<size_t>(s.component)].t_far;
        if (i + 1 < set.samples.size() && set.samples[i + 1].component == s.component)
            s.delta = set.samples[i + 1].t - s.t;
        else
            s.delta = end - s.t;
    }
    return set;
}

/// Fills per-sample grid assignments from the field. Separate from sampling
/// so spawn pre-passes can inspect requirements without touching the field.
inline void resolve_assignments(const SceneField& field, const SceneLayout& layout,
                                RaySampleSet& set) {
    for (auto& s : set.samples) s.assignment = field.assign_point(layout, s.position);
}

/// Analytic test fields have no grid assignments; sampling leaves them empty.
template <typename FieldT>
void resolve_assignments(const FieldT&, const SceneLayout&, RaySampleSet&) {}

struct CompositeResult {
    Vec3 color;
    double depth = 0.0;
    double opacity = 0.0;
};

constexpr double kDepthEps = 1e-6;

/// Front-to-back volumetric compositing with the sky closing the ray:
/// alpha_i = 1 - exp(-sigma_i delta_i), T_i = prod_{j<i} (1 - alpha_j),
/// C = sum T_i alpha_i c_i + (1 - sum T_i alpha_i) * sky(d).
/// `sigma_out`/`color_out`/`weight_out`, when non-null, receive per-sample
/// values for reuse by the backward pass and the semantic render.
template <typename FieldT>
CompositeResult composite(const RaySampleSet& set, const FieldT& field,
                          HashGrid::QueryScratch& scratch, std::vector<double>* sigma_out = nullptr,
                          std::vector<Vec3>* color_out = nullptr,
                          std::vector<double>* weight_out = nullptr) {
    size_t n = set.samples.size();
    if (sigma_out) sigma_out->assign(n, 0.0);
    if (color_out) color_out->assign(n, Vec3{});
    if (weight_out) weight_out->assign(n, 0.0);

    Vec3 accum_color{};
    double accum_depth = 0.0;
    double transmittance = 1.0;
    double opacity = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const auto& s = set.samples[i];
        double sigma;
        Vec3 c;
        field.query(s.position, s.assignment, scratch, sigma, c);
        double alpha = 1.0 - std::exp(-sigma * s.delta);
        double w = transmittance * alpha;
        accum_color += w * c;
        accum_depth += w * s.t;
        opacity += w;
        transmittance *= 1.0 - alpha;
        if (sigma_out) (*sigma_out)[i] = sigma;
        if (color_out) (*color_out)[i] = c;
        if (weight_out) (*weight_out)[i] = w;
    }
    Vec3 sky = field.sky_color(set.dir);
    CompositeResult out;
    out.color = accum_color + (1.0 - opacity) * sky;
    out.depth = accum_depth / std::max(opacity, kDepthEps);
    out.opacity = opacity;
    return out;
}

struct RenderFrame {
    int width = 0, height = 0;
    Image color;              // 3 channels
    Image depth;              // 1 channel, expected termination distance
    Image opacity;            // 1 channel
    std::vector<int> semantic;  // argmax class, 0 where opacity < 0.5
};

/// Per-ray state kept for the backward pass.
struct RenderCache {
    Camera cam;
    SamplingConfig cfg;
    std::vector<RaySampleSet> rays;          // one per pixel, row-major
    std::vector<std::vector<double>> sigma;  // cached forward values
    std::vector<std::vector<Vec3>> color;
    std::vector<std::vector<double>> weight;
};

template <typename FieldT>
RenderFrame render_image(const FieldT& field, const SceneLayout& layout, const Camera& cam,
                         const SamplingConfig& cfg, RenderCache* cache = nullptr) {
    cam.validate();
    RenderFrame frame;
    frame.width = cam.width;
    frame.height = cam.height;
    frame.color = Image(3, cam.height, cam.width);
    frame.depth = Image(1, cam.height, cam.width);
    frame.opacity = Image(1, cam.height, cam.width);
    frame.semantic.assign(static_cast<size_t>(cam.width) * cam.height, 0);

    size_t n_px = static_cast<size_t>(cam.width) * cam.height;
    if (cache) {
        cache->cam = cam;
        cache->cfg = cfg;
        cache->rays.assign(n_px, {});
        cache->sigma.assign(n_px, {});
        cache->color.assign(n_px, {});
        cache->weight.assign(n_px, {});
    }

    int class_count = layout.class_count();
    parallel_for(cam.height, [&](int64_t y) {
        HashGrid::QueryScratch scratch;
        std::vector<double> sigmas, weights;
        std::vector<Vec3> colors;
        std::vector<double> class_weight(static_cast<size_t>(class_count));
        for (int x = 0; x < cam.width; ++x) {
            size_t px = static_cast<size_t>(y) * cam.width + x;
            Rng rng(mix_seed(cfg.seed, px));
            RaySampleSet set = sample_ray(layout, cam.pixel_ray(x, static_cast<int>(y)), cfg, rng);
            resolve_assignments(field, layout, set);
            CompositeResult res = composite(set, field, scratch, &sigmas, &colors, &weights);
            frame.color.set_pixel(static_cast<int>(y), x, res.color);
            frame.depth.at(0, static_cast<int>(y), x) = res.depth;
            frame.opacity.at(0, static_cast<int>(y), x) = res.opacity;

            std::fill(class_weight.begin(), class_weight.end(), 0.0);
            for (size_t i = 0; i < set.samples.size(); ++i) {
                int cls = set.samples[i].class_id;
                if (cls >= 0 && cls < class_count) class_weight[static_cast<size_t>(cls)] += weights[i];
            }
            int best = 0;
            for (int c = 1; c < class_count; ++c)
                if (class_weight[static_cast<size_t>(c)] > class_weight[static_cast<size_t>(best)])
                    best = c;
            frame.semantic[px] = (res.opacity < 0.5) ? 0 : best;

            if (cache) {
                cache->rays[px] = std::move(set);
                cache->sigma[px] = sigmas;
                cache->color[px] = colors;
                cache->weight[px] = weights;
            }
        }
    });
    return frame;
}

/// Accumulates d(loss)/d(field parameters) given per-pixel adjoints of the
/// rendered color, expected depth and opacity. Any adjoint image may be empty.
inline void render_backward(SceneField& field, const RenderCache& cache, const Image& dcolor,
                            const Image& ddepth, const Image& dopacity) {
    HashGrid::QueryScratch scratch;
    int width = cache.cam.width, height = cache.cam.height;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            size_t px = static_cast<size_t>(y) * width + x;
            const RaySampleSet& set = cache.rays[px];
            const auto& sigmas = cache.sigma[px];
            const auto& colors = cache.color[px];
            const auto& weights = cache.weight[px];
            size_t n = set.samples.size();

            Vec3 gC{};
            if (dcolor.channels == 3) gC = dcolor.pixel(y, x);
            double gD = (ddepth.channels == 1) ? ddepth.at(0, y, x) : 0.0;
            double gO = (dopacity.channels == 1) ? dopacity.at(0, y, x) : 0.0;
            if (gC.x == 0 && gC.y == 0 && gC.z == 0 && gD == 0 && gO == 0) continue;

            double opacity = 0.0, depth_num = 0.0;
            for (size_t i = 0; i < n; ++i) {
                opacity += weights[i];
                depth_num += weights[i] * set.samples[i].t;
            }
            double o_hat = std::max(opacity, kDepthEps);
            double depth = depth_num / o_hat;
            bool above_eps = opacity > kDepthEps;

            Vec3 sky = field.sky_color(set.dir);
            field.sky.color_backward(set.dir, gC * (1.0 - opacity));

            // dL/dw_i, then the suffix-sum form of dL/dsigma_i.
            std::vector<double> dw(n);
            for (size_t i = 0; i < n; ++i) {
                dw[i] = gC.dot(colors[i] - sky) + gO;
                dw[i] += gD * (set.samples[i].t - (above_eps ? depth : 0.0)) / o_hat;
            }
            double suffix = 0.0;  // sum_{j>i} dL/dw_j * w_j
            double transmittance = 1.0;
            std::vector<double> trans(n);
            for (size_t i = 0; i < n; ++i) {
                trans[i] = transmittance;
                double alpha = 1.0 - std::exp(-sigmas[i] * set.samples[i].delta);
                transmittance *= 1.0 - alpha;
            }
            for (size_t i = n; i-- > 0;) {
                const auto& s = set.samples[i];
                double alpha = 1.0 - std::exp(-sigmas[i] * s.delta);
                double dsigma = s.delta * (dw[i] * trans[i] * (1.0 - alpha) - suffix);
                suffix += dw[i] * weights[i];
                Vec3 dc = gC * weights[i];
                if (dsigma != 0.0 || dc.x != 0.0 || dc.y != 0.0 || dc.z != 0.0)
                    field.query_backward(s.position, s.assignment, scratch, dsigma, dc);
            }
        }
    }
}

/// Spawn pre-pass: samples every pixel of the view exactly as rendering will
/// and creates the stuff grids those samples require. Returns spawned tiles.
inline std::vector<Vec3i> ensure_coverage(SceneField& field, const SceneLayout& layout,
                                          const Camera& cam, const SamplingConfig& cfg) {
    field.ensure_object_grids(layout);
    std::set<Vec3i> required;
    for (int y = 0; y < cam.height; ++y) {
        for (int x = 0; x < cam.width; ++x) {
            size_t px = static_cast<size_t>(y) * cam.width + x;
            Rng rng(mix_seed(cfg.seed, px));
            RaySampleSet set = sample_ray(layout, cam.pixel_ray(x, y), cfg, rng);
            for (const auto& s : set.samples) {
                Assignment a = field.assign_point(layout, s.position);
                if (a.kind == Assignment::Kind::SpawnRequired) required.insert(a.tile);
            }
        }
    }
    std::vector<Vec3i> spawned;
    for (const auto& tile : required) {
        field.spawn_stuff_grid(tile);
        spawned.push_back(tile);
    }
    return spawned;
}

inline void export_render_frame(const std::string& prefix, const RenderFrame& frame,
                                const SceneLayout& layout) {
    write_png_rgb(prefix + "_color.png", frame.color);
    write_pfm(prefix + "_depth.pfm", frame.width, frame.height,
              std::vector<double>(frame.depth.data.begin(), frame.depth.data.end()));
    std::vector<uint8_t> idx(frame.semantic.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<uint8_t>(frame.semantic[i]);
    write_png_indexed(prefix + "_semantic.png", frame.width, frame.height, idx, layout.palette());
}

}  // namespace layoutforge
