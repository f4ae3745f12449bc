#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "layoutforge/layout.hpp"
#include "layoutforge/math.hpp"
#include "layoutforge/rng.hpp"

namespace layoutforge {

/// Learnable parameters are stored as 32-bit floats (the checkpoint width);
/// all math runs in double. Gradients and Adam moments accumulate in double.
struct ParamBlock {
    std::vector<float> w;
    std::vector<double> g;
    std::vector<double> adam_m, adam_v;

    void resize(size_t n) {
        w.assign(n, 0.0f);
        g.assign(n, 0.0);
    }
    void zero_grad() { std::fill(g.begin(), g.end(), 0.0); }
    void ensure_adam() {
        if (adam_m.size() != w.size()) {
            adam_m.assign(w.size(), 0.0);
            adam_v.assign(w.size(), 0.0);
        }
    }
    size_t size() const { return w.size(); }
};

/// Fully connected net with tanh hidden layers and a linear output layer.
/// Weights live in one flat block: per layer W (out x in, row-major) then b.
struct Mlp {
    int in_dim = 0;
    std::vector<int> layer_dims;  // hidden sizes then output size
    ParamBlock params;

    struct Workspace {
        std::vector<std::vector<double>> acts;  // input + post-activation per layer
    };

    void init(int input, const std::vector<int>& hidden, int output, Rng& rng,
              double last_layer_scale = 1.0) {
        in_dim = input;
        layer_dims = hidden;
        layer_dims.push_back(output);
        size_t total = 0;
        int prev = input;
        for (int d : layer_dims) {
            total += static_cast<size_t>(d) * prev + d;
            prev = d;
        }
        params.resize(total);
        size_t off = 0;
        prev = input;
        for (size_t l = 0; l < layer_dims.size(); ++l) {
            int d = layer_dims[l];
            double a = std::sqrt(6.0 / (prev + d));
            if (l + 1 == layer_dims.size()) a *= last_layer_scale;
            for (int i = 0; i < d * prev; ++i)
                params.w[off + static_cast<size_t>(i)] = static_cast<float>(rng.uniform(-a, a));
            off += static_cast<size_t>(d) * prev + d;  // biases stay zero
            prev = d;
        }
    }

    int out_dim() const { return layer_dims.back(); }

    void forward(const double* in, Workspace& ws) const {
        size_t n_layers = layer_dims.size();
        ws.acts.resize(n_layers + 1);
        ws.acts[0].assign(in, in + in_dim);
        size_t off = 0;
        int prev = in_dim;
        for (size_t l = 0; l < n_layers; ++l) {
            int d = layer_dims[l];
            auto& out = ws.acts[l + 1];
            out.assign(static_cast<size_t>(d), 0.0);
            const double* src = ws.acts[l].data();
            bool last = (l + 1 == n_layers);
            for (int i = 0; i < d; ++i) {
                const float* wrow = params.w.data() + off + static_cast<size_t>(i) * prev;
                double s = static_cast<double>(params.w[off + static_cast<size_t>(d) * prev + i]);
                for (int j = 0; j < prev; ++j) s += static_cast<double>(wrow[j]) * src[j];
                out[static_cast<size_t>(i)] = last ? s : std::tanh(s);
            }
            off += static_cast<size_t>(d) * prev + d;
            prev = d;
        }
    }

    const std::vector<double>& output(const Workspace& ws) const { return ws.acts.back(); }

    /// Backward through a cached forward pass. Accumulates parameter
    /// gradients; optionally returns the adjoint of the input vector.
    void backward(const Workspace& ws, const double* dout, double* din) {
        size_t n_layers = layer_dims.size();
        std::vector<double> delta(dout, dout + layer_dims.back());
        // offsets of each layer's weights
        std::vector<size_t> offs(n_layers);
        {
            size_t off = 0;
            int prev = in_dim;
            for (size_t l = 0; l < n_layers; ++l) {
                offs[l] = off;
                off += static_cast<size_t>(layer_dims[l]) * prev + layer_dims[l];
                prev = layer_dims[l];
            }
        }
        for (size_t l = n_layers; l-- > 0;) {
            int d = layer_dims[l];
            int prev = (l == 0) ? in_dim : layer_dims[l - 1];
            const auto& input = ws.acts[l];
            bool last = (l + 1 == n_layers);
            if (!last) {
                const auto& act = ws.acts[l + 1];
                for (int i = 0; i < d; ++i)
                    delta[static_cast<size_t>(i)] *=
                        1.0 - act[static_cast<size_t>(i)] * act[static_cast<size_t>(i)];
            }
            std::vector<double> din_l(static_cast<size_t>(prev), 0.0);
            size_t off = offs[l];
            for (int i = 0; i < d; ++i) {
                double di = delta[static_cast<size_t>(i)];
                const float* wrow = params.w.data() + off + static_cast<size_t>(i) * prev;
                double* grow = params.g.data() + off + static_cast<size_t>(i) * prev;
                for (int j = 0; j < prev; ++j) {
                    grow[j] += di * input[static_cast<size_t>(j)];
                    din_l[static_cast<size_t>(j)] += di * static_cast<double>(wrow[j]);
                }
                params.g[off + static_cast<size_t>(d) * prev + i] += di;
            }
            delta = std::move(din_l);
        }
        if (din)
            for (int j = 0; j < in_dim; ++j) din[j] = delta[static_cast<size_t>(j)];
    }
};

struct HashGridConfig {
    int levels = 8;
    int base_resolution = 16;
    double per_level_scale = 1.5;
    uint32_t table_size = 1u << 16;
    int features_per_level = 2;
    std::vector<int> decoder_hidden = {64};
    Vec3 tile_size{64.0, 64.0, 32.0};

    void validate() const {
        if (levels < 1) throw ValidationError("hash grid: levels must be >= 1");
        if (table_size == 0 || (table_size & (table_size - 1)) != 0)
            throw ValidationError("hash grid: table_size must be a power of two");
        if (base_resolution < 2) throw ValidationError("hash grid: base_resolution must be >= 2");
        if (!(tile_size.x > 0 && tile_size.y > 0 && tile_size.z > 0))
            throw ValidationError("hash grid: tile size must be positive");
    }

    int feature_dim() const { return levels * features_per_level; }
    int level_resolution(int level) const {
        return static_cast<int>(base_resolution * std::pow(per_level_scale, level));
    }
};

/// One multi-resolution hash-encoded field over the canonical cube [0,1]^3,
/// decoding to a density logit and an RGB color.
struct HashGrid {
    HashGridConfig cfg;
    ParamBlock table;  // [level][entry][feature]
    Mlp decoder;

    struct QueryScratch {
        std::vector<double> feat;
        std::vector<double> dfeat;
        Mlp::Workspace ws;
    };

    void init(const HashGridConfig& config, Rng& rng) {
        cfg = config;
        table.resize(static_cast<size_t>(cfg.levels) * cfg.table_size * cfg.features_per_level);
        for (auto& v : table.w) v = static_cast<float>(rng.uniform(-1e-4, 1e-4));
        decoder.init(cfg.feature_dim(), cfg.decoder_hidden, 4, rng, 0.1);
    }

    static uint32_t spatial_hash(uint32_t ix, uint32_t iy, uint32_t iz, uint32_t mask) {
        return (ix * 1u ^ iy * 2654435761u ^ iz * 805459861u) & mask;
    }

    /// Per level: scale to the level resolution, fetch 8 corner features by
    /// spatial hash and blend trilinearly; levels are concatenated.
    void encode(const Vec3& p_canonical, double* out) const {
        uint32_t mask = cfg.table_size - 1;
        int F = cfg.features_per_level;
        for (int level = 0; level < cfg.levels; ++level) {
            int res = cfg.level_resolution(level);
            const float* tbl =
                table.w.data() + static_cast<size_t>(level) * cfg.table_size * F;
            double xf = clamp01(p_canonical.x) * (res - 1);
            double yf = clamp01(p_canonical.y) * (res - 1);
            double zf = clamp01(p_canonical.z) * (res - 1);
            int x0 = std::min(static_cast<int>(xf), res - 2);
            int y0 = std::min(static_cast<int>(yf), res - 2);
            int z0 = std::min(static_cast<int>(zf), res - 2);
            double fx = xf - x0, fy = yf - y0, fz = zf - z0;
            double* dst = out + static_cast<size_t>(level) * F;
            for (int f = 0; f < F; ++f) dst[f] = 0.0;
            for (int corner = 0; corner < 8; ++corner) {
                int dx = corner & 1, dy = (corner >> 1) & 1, dz = (corner >> 2) & 1;
                double wgt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) * (dz ? fz : 1.0 - fz);
                uint32_t idx = spatial_hash(static_cast<uint32_t>(x0 + dx),
                                            static_cast<uint32_t>(y0 + dy),
                                            static_cast<uint32_t>(z0 + dz), mask);
                const float* entry = tbl + static_cast<size_t>(idx) * F;
                for (int f = 0; f < F; ++f) dst[f] += wgt * static_cast<double>(entry[f]);
            }
        }
    }

    void encode_backward(const Vec3& p_canonical, const double* dfeat) {
        uint32_t mask = cfg.table_size - 1;
        int F = cfg.features_per_level;
        for (int level = 0; level < cfg.levels; ++level) {
            int res = cfg.level_resolution(level);
            double* gtbl = table.g.data() + static_cast<size_t>(level) * cfg.table_size * F;
            double xf = clamp01(p_canonical.x) * (res - 1);
            double yf = clamp01(p_canonical.y) * (res - 1);
            double zf = clamp01(p_canonical.z) * (res - 1);
            int x0 = std::min(static_cast<int>(xf), res - 2);
            int y0 = std::min(static_cast<int>(yf), res - 2);
            int z0 = std::min(static_cast<int>(zf), res - 2);
            double fx = xf - x0, fy = yf - y0, fz = zf - z0;
            const double* src = dfeat + static_cast<size_t>(level) * F;
            for (int corner = 0; corner < 8; ++corner) {
                int dx = corner & 1, dy = (corner >> 1) & 1, dz = (corner >> 2) & 1;
                double wgt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) * (dz ? fz : 1.0 - fz);
                uint32_t idx = spatial_hash(static_cast<uint32_t>(x0 + dx),
                                            static_cast<uint32_t>(y0 + dy),
                                            static_cast<uint32_t>(z0 + dz), mask);
                double* entry = gtbl + static_cast<size_t>(idx) * F;
                for (int f = 0; f < F; ++f) entry[f] += wgt * src[f];
            }
        }
    }

    /// Density (softplus, per meter) and color (sigmoid) at a canonical point.
    void query(const Vec3& p_canonical, QueryScratch& s, double& sigma, Vec3& color) const {
        s.feat.resize(static_cast<size_t>(cfg.feature_dim()));
        encode(p_canonical, s.feat.data());
        decoder.forward(s.feat.data(), s.ws);
        const auto& out = decoder.output(s.ws);
        sigma = softplus(out[0]);
        color = {sigmoid(out[1]), sigmoid(out[2]), sigmoid(out[3])};
    }

    /// Recomputes the forward pass and accumulates adjoints of density and
    /// color into the table and decoder gradients.
    void query_backward(const Vec3& p_canonical, QueryScratch& s, double dsigma,
                        const Vec3& dcolor) {
        s.feat.resize(static_cast<size_t>(cfg.feature_dim()));
        encode(p_canonical, s.feat.data());
        decoder.forward(s.feat.data(), s.ws);
        const auto& out = decoder.output(s.ws);
        double dlogit[4];
        dlogit[0] = dsigma * sigmoid(out[0]);
        for (int k = 0; k < 3; ++k) {
            double c = sigmoid(out[k + 1]);
            dlogit[k + 1] = dcolor[k] * c * (1.0 - c);
        }
        s.dfeat.assign(static_cast<size_t>(cfg.feature_dim()), 0.0);
        decoder.backward(s.ws, dlogit, s.dfeat.data());
        encode_backward(p_canonical, s.dfeat.data());
    }
};

// ---------------------------------------------------------------------------
// Sky model: unit direction -> RGB through a low-order spherical basis.
// ---------------------------------------------------------------------------

/// Real spherical harmonics bands 0..3, 16 basis values.
inline void eval_sh_basis(const Vec3& d, double* out) {
    double x = d.x, y = d.y, z = d.z;
    out[0] = 0.28209479177387814;
    out[1] = -0.48860251190291987 * y;
    out[2] = 0.48860251190291987 * z;
    out[3] = -0.48860251190291987 * x;
    out[4] = 1.0925484305920792 * x * y;
    out[5] = -1.0925484305920792 * y * z;
    out[6] = 0.31539156525252005 * (3.0 * z * z - 1.0);
    out[7] = -1.0925484305920792 * x * z;
    out[8] = 0.5462742152960396 * (x * x - y * y);
    out[9] = -0.5900435899266435 * y * (3.0 * x * x - y * y);
    out[10] = 2.890611442640554 * x * y * z;
    out[11] = -0.4570457994644658 * y * (5.0 * z * z - 1.0);
    out[12] = 0.3731763325901154 * z * (5.0 * z * z - 3.0);
    out[13] = -0.4570457994644658 * x * (5.0 * z * z - 1.0);
    out[14] = 1.445305721320277 * z * (x * x - y * y);
    out[15] = 0.5900435899266435 * x * (x * x - 3.0 * y * y);
}

struct SkyModel {
    static constexpr int kBasisDim = 16;
    Mlp net;

    void init(Rng& rng, const std::vector<int>& hidden = {16}) {
        net.init(kBasisDim, hidden, 3, rng);
    }

    static void check_unit(const Vec3& d) {
        if (std::abs(d.norm() - 1.0) > 1e-6)
            throw std::invalid_argument("sky_color: direction must be unit length");
    }

    Vec3 color(const Vec3& d) const {
        check_unit(d);
        double basis[kBasisDim];
        eval_sh_basis(d, basis);
        Mlp::Workspace ws;
        net.forward(basis, ws);
        const auto& out = net.output(ws);
        return {sigmoid(out[0]), sigmoid(out[1]), sigmoid(out[2])};
    }

    void color_backward(const Vec3& d, const Vec3& dcolor) {
        double basis[kBasisDim];
        eval_sh_basis(d, basis);
        Mlp::Workspace ws;
        net.forward(basis, ws);
        const auto& out = net.output(ws);
        double dlogit[3];
        for (int k = 0; k < 3; ++k) {
            double c = sigmoid(out[k]);
            dlogit[k] = dcolor[k] * c * (1.0 - c);
        }
        net.backward(ws, dlogit, nullptr);
    }
};

// ---------------------------------------------------------------------------
// Scene field: lattice-spawned stuff grids + posed object grids + sky.
// ---------------------------------------------------------------------------

struct Assignment {
    enum class Kind { None, Object, Stuff, SpawnRequired };
    Kind kind = Kind::None;
    int object_id = -1;
    Vec3i tile;

    bool operator==(const Assignment& o) const {
        return kind == o.kind && object_id == o.object_id && tile == o.tile;
    }
};

struct ObjectGridEntry {
    Pose pose;  // mirrors the paired layout instance at all times
    HashGrid grid;
};

struct SceneField {
    HashGridConfig config;
    std::unordered_map<Vec3i, std::unique_ptr<HashGrid>, Vec3iHash> stuff;
    std::unordered_map<int, std::unique_ptr<ObjectGridEntry>> objects;
    SkyModel sky;
    uint64_t init_seed = 1;

    explicit SceneField(const HashGridConfig& cfg = {}, uint64_t seed = 1)
        : config(cfg), init_seed(seed) {
        config.validate();
        Rng rng(mix_seed(seed, 0x5489u));
        sky.init(rng);
    }

    Vec3i tile_of(const Vec3& p) const {
        return {static_cast<int64_t>(std::floor(p.x / config.tile_size.x)),
                static_cast<int64_t>(std::floor(p.y / config.tile_size.y)),
                static_cast<int64_t>(std::floor(p.z / config.tile_size.z))};
    }
    Vec3 tile_min(const Vec3i& t) const {
        return {t.x * config.tile_size.x, t.y * config.tile_size.y, t.z * config.tile_size.z};
    }
    Vec3 tile_center(const Vec3i& t) const {
        return tile_min(t) + config.tile_size * 0.5;
    }

    /// Object precedence: a point inside any is_object instance box belongs to
    /// that object's grid (nearest instance center breaks ties); otherwise the
    /// stuff tile containing it, flagged spawn-required if absent.
    Assignment assign_point(const SceneLayout& layout, const Vec3& p) const {
        int best_id = -1;
        double best_d = std::numeric_limits<double>::max();
        for (const auto& inst : layout.instances) {
            if (!inst.is_object) continue;
            if (!point_in_instance_box(p, inst)) continue;
            double d = (p - inst.pose.translation).norm();
            if (d < best_d || (d == best_d && inst.id < best_id)) {
                best_d = d;
                best_id = inst.id;
            }
        }
        Assignment a;
        if (best_id >= 0) {
            a.kind = Assignment::Kind::Object;
            a.object_id = best_id;
            return a;
        }
        a.tile = tile_of(p);
        a.kind = stuff.count(a.tile) ? Assignment::Kind::Stuff : Assignment::Kind::SpawnRequired;
        return a;
    }

    /// Creates the grid for a lattice cell. Initialization is a pure function
    /// of (field seed, tile index), so spawn order never matters.
    HashGrid& spawn_stuff_grid(const Vec3i& tile) {
        if (stuff.count(tile))
            throw ValidationError("spawn_stuff_grid: tile already exists");
        Rng rng(mix_seed(init_seed, 0x57u, static_cast<uint64_t>(tile.x) * 3 + 0x100000,
                         static_cast<uint64_t>(tile.y) * 5 + 0x200000,
                         static_cast<uint64_t>(tile.z) * 7 + 0x300000));
        auto grid = std::make_unique<HashGrid>();
        grid->init(config, rng);
        auto& ref = *grid;
        stuff.emplace(tile, std::move(grid));
        return ref;
    }

    /// Creates object grids for every is_object instance that lacks one and
    /// keeps existing poses synchronized with the layout.
    void ensure_object_grids(const SceneLayout& layout) {
        for (const auto& inst : layout.instances) {
            if (!inst.is_object) continue;
            auto it = objects.find(inst.id);
            if (it == objects.end()) {
                Rng rng(mix_seed(init_seed, 0x0bu, static_cast<uint64_t>(inst.id)));
                auto entry = std::make_unique<ObjectGridEntry>();
                entry->pose = inst.pose;
                entry->grid.init(config, rng);
                objects.emplace(inst.id, std::move(entry));
            } else {
                it->second->pose = inst.pose;
            }
        }
    }

    /// Canonical [0,1]^3 coordinates of p within its assigned grid.
    Vec3 canonical_point(const Assignment& a, const Vec3& p) const {
        Vec3 q;
        if (a.kind == Assignment::Kind::Object) {
            const auto& entry = *objects.at(a.object_id);
            q = to_canonical(entry.pose, p) + Vec3{0.5, 0.5, 0.5};
        } else {
            q = (p - tile_min(a.tile)).cwise_div(config.tile_size);
        }
        constexpr double tol = 1e-7;
        for (int i = 0; i < 3; ++i) {
            if (q[i] < -tol || q[i] > 1.0 + tol)
                throw std::logic_error("query: point outside assigned grid after transform");
            q[i] = clamp01(q[i]);
        }
        return q;
    }

    HashGrid* grid_for(const Assignment& a) {
        if (a.kind == Assignment::Kind::Object) {
            auto it = objects.find(a.object_id);
            return it == objects.end() ? nullptr : &it->second->grid;
        }
        if (a.kind == Assignment::Kind::Stuff) {
            auto it = stuff.find(a.tile);
            return it == stuff.end() ? nullptr : it->second.get();
        }
        return nullptr;
    }
    const HashGrid* grid_for(const Assignment& a) const {
        return const_cast<SceneField*>(this)->grid_for(a);
    }

    void query(const Vec3& p_world, const Assignment& a, HashGrid::QueryScratch& scratch,
               double& sigma, Vec3& color) const {
        const HashGrid* grid = grid_for(a);
        if (!grid) throw std::logic_error("query: assignment does not resolve to a grid");
        grid->query(canonical_point(a, p_world), scratch, sigma, color);
    }

    void query_backward(const Vec3& p_world, const Assignment& a,
                        HashGrid::QueryScratch& scratch, double dsigma, const Vec3& dcolor) {
        HashGrid* grid = grid_for(a);
        if (!grid) throw std::logic_error("query_backward: assignment does not resolve to a grid");
        grid->query_backward(canonical_point(a, p_world), scratch, dsigma, dcolor);
    }

    Vec3 sky_color(const Vec3& d) const { return sky.color(d); }

    template <typename Fn>
    void for_each_param_block(Fn&& fn) {
        std::vector<Vec3i> tiles;
        tiles.reserve(stuff.size());
        for (const auto& [tile, _] : stuff) tiles.push_back(tile);
        std::sort(tiles.begin(), tiles.end());
        for (const auto& tile : tiles) {
            fn(stuff.at(tile)->table);
            fn(stuff.at(tile)->decoder.params);
        }
        std::vector<int> ids;
        ids.reserve(objects.size());
        for (const auto& [id, _] : objects) ids.push_back(id);
        std::sort(ids.begin(), ids.end());
        for (int id : ids) {
            fn(objects.at(id)->grid.table);
            fn(objects.at(id)->grid.decoder.params);
        }
        fn(sky.net.params);
    }

    void zero_grad() {
        for_each_param_block([](ParamBlock& b) { b.zero_grad(); });
    }
};

}  // namespace layoutforge
