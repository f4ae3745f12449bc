#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <unordered_map>
#include <vector>

#include "layoutforge/detail/mc_tables.hpp"
#include "layoutforge/field.hpp"
#include "layoutforge/layout.hpp"
#include "layoutforge/math.hpp"

namespace layoutforge {

struct TriangleMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<uint32_t, 3>> triangles;
    std::vector<Vec3> colors;  // optional, per vertex
};

namespace detail {

// Corner offsets of the marching-cubes cell, Bourke numbering.
inline constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                                      {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
inline constexpr int kEdgeEnds[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                                         {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};

/// Canonical identity of a cell edge on the global lattice: the lattice
/// coordinate of its lower corner plus the edge axis. Shared edges of
/// neighboring cells map to the same key, so interpolated vertices are
/// created once and shared exactly.
inline uint64_t edge_key(int ix, int iy, int iz, int axis) {
    return (static_cast<uint64_t>(ix) & 0xfffffu) |
           ((static_cast<uint64_t>(iy) & 0xfffffu) << 20) |
           ((static_cast<uint64_t>(iz) & 0xfffffu) << 40) |
           (static_cast<uint64_t>(axis) << 60);
}

}  // namespace detail

/// Classic 256-case marching cubes over a density lattice sampled from
/// `density` on region.min + (i,j,k)*voxel. Emits triangles where the field
/// crosses `threshold`, with linear interpolation along cell edges.
/// `color`, when provided, is sampled at each emitted vertex.
template <typename DensityFn, typename ColorFn>
TriangleMesh marching_cubes(DensityFn&& density, ColorFn&& color, const Aabb& region,
                            double voxel, double threshold, bool with_colors) {
    if (!(voxel > 0.0)) throw std::invalid_argument("marching_cubes: voxel size must be > 0");
    Vec3 ext = region.extent();
    if (!(ext.x > 0 && ext.y > 0 && ext.z > 0))
        throw std::invalid_argument("marching_cubes: region must be a finite box");

    int nx = std::max(1, static_cast<int>(std::ceil(ext.x / voxel)));
    int ny = std::max(1, static_cast<int>(std::ceil(ext.y / voxel)));
    int nz = std::max(1, static_cast<int>(std::ceil(ext.z / voxel)));

    auto lattice_point = [&](int i, int j, int k) {
        return region.min + Vec3{i * voxel, j * voxel, k * voxel};
    };

    std::vector<double> values(static_cast<size_t>(nx + 1) * (ny + 1) * (nz + 1));
    auto vidx = [&](int i, int j, int k) {
        return (static_cast<size_t>(k) * (ny + 1) + j) * (nx + 1) + i;
    };
    for (int k = 0; k <= nz; ++k)
        for (int j = 0; j <= ny; ++j)
            for (int i = 0; i <= nx; ++i) values[vidx(i, j, k)] = density(lattice_point(i, j, k));

    TriangleMesh mesh;
    std::unordered_map<uint64_t, uint32_t> edge_vertices;

    auto vertex_on_edge = [&](int ix, int iy, int iz, int edge) -> uint32_t {
        const int* c0 = detail::kCorner[detail::kEdgeEnds[edge][0]];
        const int* c1 = detail::kCorner[detail::kEdgeEnds[edge][1]];
        int ax = ix + c0[0], ay = iy + c0[1], az = iz + c0[2];
        int bx = ix + c1[0], by = iy + c1[1], bz = iz + c1[2];
        int axis = (ax != bx) ? 0 : (ay != by) ? 1 : 2;
        // key anchored at the lower corner along the edge axis
        uint64_t key = detail::edge_key(std::min(ax, bx), std::min(ay, by), std::min(az, bz), axis);
        auto it = edge_vertices.find(key);
        if (it != edge_vertices.end()) return it->second;

        double va = values[vidx(ax, ay, az)];
        double vb = values[vidx(bx, by, bz)];
        double denom = vb - va;
        double u = (std::abs(denom) < 1e-300) ? 0.5 : (threshold - va) / denom;
        u = std::clamp(u, 0.0, 1.0);
        Vec3 pa = lattice_point(ax, ay, az);
        Vec3 pb = lattice_point(bx, by, bz);
        Vec3 p = pa + u * (pb - pa);
        uint32_t id = static_cast<uint32_t>(mesh.vertices.size());
        mesh.vertices.push_back(p);
        if (with_colors) mesh.colors.push_back(color(p));
        edge_vertices.emplace(key, id);
        return id;
    };

    for (int iz = 0; iz < nz; ++iz) {
        for (int iy = 0; iy < ny; ++iy) {
            for (int ix = 0; ix < nx; ++ix) {
                int cube = 0;
                for (int c = 0; c < 8; ++c) {
                    double v = values[vidx(ix + detail::kCorner[c][0], iy + detail::kCorner[c][1],
                                           iz + detail::kCorner[c][2])];
                    if (v < threshold) cube |= 1 << c;
                }
                if (detail::kEdgeTable[cube] == 0) continue;
                const int8_t* tris = detail::kTriTable[cube];
                for (int n = 0; tris[n] != -1; n += 3) {
                    uint32_t a = vertex_on_edge(ix, iy, iz, tris[n]);
                    uint32_t b = vertex_on_edge(ix, iy, iz, tris[n + 1]);
                    uint32_t c = vertex_on_edge(ix, iy, iz, tris[n + 2]);
                    if (a == b || b == c || a == c) continue;
                    Vec3 e1 = mesh.vertices[b] - mesh.vertices[a];
                    Vec3 e2 = mesh.vertices[c] - mesh.vertices[a];
                    if (e1.cross(e2).dot(e1.cross(e2)) < 1e-24) continue;
                    mesh.triangles.push_back({a, b, c});
                }
            }
        }
    }
    return mesh;
}

template <typename DensityFn>
TriangleMesh marching_cubes(DensityFn&& density, const Aabb& region, double voxel,
                            double threshold) {
    return marching_cubes(std::forward<DensityFn>(density),
                          [](const Vec3&) { return Vec3{0.7, 0.7, 0.7}; }, region, voxel,
                          threshold, false);
}

/// Field density for meshing: zero outside every layout instance, the grid
/// density inside. Colors come from the same query.
inline TriangleMesh extract_mesh(const SceneField& field, const SceneLayout& layout,
                                 const Aabb& region, double voxel, double threshold) {
    HashGrid::QueryScratch scratch;
    auto sample = [&](const Vec3& p, double& sigma, Vec3& color) {
        sigma = 0.0;
        color = {0.7, 0.7, 0.7};
        bool inside = false;
        for (const auto& inst : layout.instances) {
            if (point_in_instance(p, inst)) {
                inside = true;
                break;
            }
        }
        if (!inside) return;
        Assignment a = field.assign_point(layout, p);
        if (!field.grid_for(a)) return;  // region with no grids: density 0
        field.query(p, a, scratch, sigma, color);
    };
    auto density = [&](const Vec3& p) {
        double sigma;
        Vec3 c;
        sample(p, sigma, c);
        return sigma;
    };
    auto color = [&](const Vec3& p) {
        double sigma;
        Vec3 c;
        sample(p, sigma, c);
        return c;
    };
    return marching_cubes(density, color, region, voxel, threshold, true);
}

/// ASCII OBJ: `v x y z [r g b]` records then 1-based `f` records.
inline void save_obj(const std::string& path, const TriangleMesh& mesh) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    bool colored = mesh.colors.size() == mesh.vertices.size();
    for (size_t i = 0; i < mesh.vertices.size(); ++i) {
        const Vec3& v = mesh.vertices[i];
        f << "v " << v.x << " " << v.y << " " << v.z;
        if (colored) {
            const Vec3& c = mesh.colors[i];
            f << " " << c.x << " " << c.y << " " << c.z;
        }
        f << "\n";
    }
    for (const auto& t : mesh.triangles)
        f << "f " << t[0] + 1 << " " << t[1] + 1 << " " << t[2] + 1 << "\n";
}

}  // namespace layoutforge
