#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "layoutforge/field.hpp"
#include "layoutforge/guidance.hpp"

namespace layoutforge {

static_assert(std::endian::native == std::endian::little,
              "checkpoint containers assume a little-endian host");

namespace detail {

struct ByteWriter {
    std::vector<uint8_t> buf;

    void raw(const void* p, size_t n) {
        const uint8_t* b = static_cast<const uint8_t*>(p);
        buf.insert(buf.end(), b, b + n);
    }
    void magic(const char m[4]) { raw(m, 4); }
    void u32(uint32_t v) { raw(&v, 4); }
    void i32(int32_t v) { raw(&v, 4); }
    void u64(uint64_t v) { raw(&v, 8); }
    void i64(int64_t v) { raw(&v, 8); }
    void f64(double v) { raw(&v, 8); }
    void floats(const std::vector<float>& v) {
        u64(v.size());
        raw(v.data(), v.size() * 4);
    }

    void write_atomic(const std::string& path) const {
        std::string tmp = path + ".tmp";
        {
            std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
            if (!f) throw std::runtime_error("cannot open for writing: " + tmp);
            f.write(reinterpret_cast<const char*>(buf.data()),
                    static_cast<std::streamsize>(buf.size()));
            if (!f) throw std::runtime_error("short write: " + tmp);
        }
        if (std::rename(tmp.c_str(), path.c_str()) != 0)
            throw std::runtime_error("cannot rename " + tmp + " to " + path);
    }
};

struct ByteReader {
    std::vector<uint8_t> buf;
    size_t pos = 0;

    explicit ByteReader(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
        buf.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    }

    void raw(void* p, size_t n) {
        if (pos + n > buf.size()) throw std::runtime_error("checkpoint: truncated file");
        std::memcpy(p, buf.data() + pos, n);
        pos += n;
    }
    void expect_magic(const char m[4]) {
        char got[4];
        raw(got, 4);
        if (std::memcmp(got, m, 4) != 0)
            throw std::runtime_error(std::string("checkpoint: bad magic, expected ") +
                                     std::string(m, 4));
    }
    uint32_t u32() { uint32_t v; raw(&v, 4); return v; }
    int32_t i32() { int32_t v; raw(&v, 4); return v; }
    uint64_t u64() { uint64_t v; raw(&v, 8); return v; }
    int64_t i64() { int64_t v; raw(&v, 8); return v; }
    double f64() { double v; raw(&v, 8); return v; }
    std::vector<float> floats() {
        uint64_t n = u64();
        std::vector<float> v(n);
        raw(v.data(), n * 4);
        return v;
    }
    bool done() const { return pos == buf.size(); }
};

inline void write_pose(ByteWriter& w, const Pose& p) {
    for (double v : p.rotation.m) w.f64(v);
    for (int i = 0; i < 3; ++i) w.f64(p.translation[i]);
    for (int i = 0; i < 3; ++i) w.f64(p.size[i]);
}

inline Pose read_pose(ByteReader& r) {
    Pose p;
    for (double& v : p.rotation.m) v = r.f64();
    for (int i = 0; i < 3; ++i) p.translation[i] = r.f64();
    for (int i = 0; i < 3; ++i) p.size[i] = r.f64();
    return p;
}

inline void load_block(ByteReader& r, ParamBlock& block, const char* what) {
    std::vector<float> w = r.floats();
    if (w.size() != block.w.size())
        throw std::runtime_error(std::string("checkpoint: size mismatch for ") + what);
    block.w = std::move(w);
    block.zero_grad();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Field checkpoints, magic "SHG1". Layout documented in docs/FORMATS.md;
// round-trips are bit-exact because parameters are stored as the same 32-bit
// floats they hold in memory.
// ---------------------------------------------------------------------------

inline void save_field_checkpoint(const std::string& path, const SceneField& field) {
    detail::ByteWriter w;
    w.magic("SHG1");
    w.u32(1);
    const auto& cfg = field.config;
    w.u32(static_cast<uint32_t>(cfg.levels));
    w.u32(static_cast<uint32_t>(cfg.base_resolution));
    w.f64(cfg.per_level_scale);
    w.u32(cfg.table_size);
    w.u32(static_cast<uint32_t>(cfg.features_per_level));
    w.u32(static_cast<uint32_t>(cfg.decoder_hidden.size()));
    for (int h : cfg.decoder_hidden) w.u32(static_cast<uint32_t>(h));
    for (int i = 0; i < 3; ++i) w.f64(cfg.tile_size[i]);
    w.u64(field.init_seed);

    std::vector<Vec3i> tiles;
    for (const auto& [tile, _] : field.stuff) tiles.push_back(tile);
    std::sort(tiles.begin(), tiles.end());
    std::vector<int> ids;
    for (const auto& [id, _] : field.objects) ids.push_back(id);
    std::sort(ids.begin(), ids.end());

    w.u32(static_cast<uint32_t>(tiles.size()));
    w.u32(static_cast<uint32_t>(ids.size()));
    for (const auto& tile : tiles) {
        const HashGrid& g = *field.stuff.at(tile);
        w.i64(tile.x);
        w.i64(tile.y);
        w.i64(tile.z);
        w.floats(g.table.w);
        w.floats(g.decoder.params.w);
    }
    for (int id : ids) {
        const ObjectGridEntry& e = *field.objects.at(id);
        w.i32(id);
        detail::write_pose(w, e.pose);
        w.floats(e.grid.table.w);
        w.floats(e.grid.decoder.params.w);
    }
    w.floats(field.sky.net.params.w);
    w.write_atomic(path);
}

inline SceneField load_field_checkpoint(const std::string& path) {
    detail::ByteReader r(path);
    r.expect_magic("SHG1");
    uint32_t version = r.u32();
    if (version != 1) throw std::runtime_error("field checkpoint: unsupported version");
    HashGridConfig cfg;
    cfg.levels = static_cast<int>(r.u32());
    cfg.base_resolution = static_cast<int>(r.u32());
    cfg.per_level_scale = r.f64();
    cfg.table_size = r.u32();
    cfg.features_per_level = static_cast<int>(r.u32());
    cfg.decoder_hidden.resize(r.u32());
    for (auto& h : cfg.decoder_hidden) h = static_cast<int>(r.u32());
    for (int i = 0; i < 3; ++i) cfg.tile_size[i] = r.f64();
    uint64_t seed = r.u64();

    SceneField field(cfg, seed);
    uint32_t n_stuff = r.u32();
    uint32_t n_obj = r.u32();
    for (uint32_t k = 0; k < n_stuff; ++k) {
        Vec3i tile{r.i64(), r.i64(), r.i64()};
        HashGrid& g = field.spawn_stuff_grid(tile);
        detail::load_block(r, g.table, "stuff table");
        detail::load_block(r, g.decoder.params, "stuff decoder");
    }
    for (uint32_t k = 0; k < n_obj; ++k) {
        int id = r.i32();
        auto entry = std::make_unique<ObjectGridEntry>();
        entry->pose = detail::read_pose(r);
        Rng rng(mix_seed(seed, 0x0bu, static_cast<uint64_t>(id)));
        entry->grid.init(cfg, rng);
        detail::load_block(r, entry->grid.table, "object table");
        detail::load_block(r, entry->grid.decoder.params, "object decoder");
        field.objects.emplace(id, std::move(entry));
    }
    detail::load_block(r, field.sky.net.params, "sky");
    return field;
}

// ---------------------------------------------------------------------------
// Denoiser checkpoints, magic "DEN1"; schedule parameters ride along.
// ---------------------------------------------------------------------------

inline void save_denoiser_checkpoint(const std::string& path, const ToyDenoiser& denoiser,
                                     const NoiseSchedule& schedule) {
    detail::ByteWriter w;
    w.magic("DEN1");
    w.u32(1);
    const auto& cfg = denoiser.cfg;
    w.u32(static_cast<uint32_t>(cfg.image_channels));
    w.u32(static_cast<uint32_t>(cfg.condition_channels));
    w.u32(static_cast<uint32_t>(cfg.layers));
    w.u32(static_cast<uint32_t>(cfg.channels));
    w.u32(static_cast<uint32_t>(cfg.time_dim));
    w.u32(static_cast<uint32_t>(cfg.style_count));
    w.u32(static_cast<uint32_t>(schedule.steps));
    w.f64(schedule.beta_min);
    w.f64(schedule.beta_max);
    for (const auto& block : denoiser.convs) w.floats(block.w);
    w.floats(denoiser.time_proj.w);
    w.floats(denoiser.style_embed.w);
    w.write_atomic(path);
}

inline std::pair<ToyDenoiser, NoiseSchedule> load_denoiser_checkpoint(const std::string& path) {
    detail::ByteReader r(path);
    r.expect_magic("DEN1");
    uint32_t version = r.u32();
    if (version != 1) throw std::runtime_error("denoiser checkpoint: unsupported version");
    ToyDenoiserConfig cfg;
    cfg.image_channels = static_cast<int>(r.u32());
    cfg.condition_channels = static_cast<int>(r.u32());
    cfg.layers = static_cast<int>(r.u32());
    cfg.channels = static_cast<int>(r.u32());
    cfg.time_dim = static_cast<int>(r.u32());
    cfg.style_count = static_cast<int>(r.u32());
    int steps = static_cast<int>(r.u32());
    double beta_min = r.f64(), beta_max = r.f64();

    ToyDenoiser denoiser(cfg);
    for (auto& block : denoiser.convs) detail::load_block(r, block, "conv");
    detail::load_block(r, denoiser.time_proj, "time projection");
    detail::load_block(r, denoiser.style_embed, "style embedding");
    return {std::move(denoiser), NoiseSchedule::linear(steps, beta_min, beta_max)};
}

}  // namespace layoutforge
