#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>

namespace layoutforge {

constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double sqr(double x) { return x * x; }
inline double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3() = default;
    Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

    double& operator[](int i) { return (&x)[i]; }
    double operator[](int i) const { return (&x)[i]; }

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator-() const { return {-x, -y, -z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
    Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
    Vec3& operator*=(double s) { x *= s; y *= s; z *= s; return *this; }
    bool operator==(const Vec3& o) const { return x == o.x && y == o.y && z == o.z; }

    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const { return *this / norm(); }
    Vec3 cwise_mul(const Vec3& o) const { return {x * o.x, y * o.y, z * o.z}; }
    Vec3 cwise_div(const Vec3& o) const { return {x / o.x, y / o.y, z / o.z}; }
    double max_component() const { return std::max(x, std::max(y, z)); }
    double min_component() const { return std::min(x, std::min(y, z)); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

inline Vec3 cwise_min(const Vec3& a, const Vec3& b) {
    return {std::min(a.x, b.x), std::min(a.y, b.y), std::min(a.z, b.z)};
}
inline Vec3 cwise_max(const Vec3& a, const Vec3& b) {
    return {std::max(a.x, b.x), std::max(a.y, b.y), std::max(a.z, b.z)};
}

/// Row-major 3x3 matrix.
struct Mat3 {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    Mat3() = default;
    Mat3(double a, double b, double c,
         double d, double e, double f,
         double g, double h, double i) : m{a, b, c, d, e, f, g, h, i} {}

    static Mat3 identity() { return Mat3(); }

    double& operator()(int r, int c) { return m[r * 3 + c]; }
    double operator()(int r, int c) const { return m[r * 3 + c]; }
    bool operator==(const Mat3& o) const { return m == o.m; }

    Vec3 operator*(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
                m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }

    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0.0;
                for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
                r(i, j) = s;
            }
        return r;
    }

    Mat3 operator+(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 9; ++i) r.m[i] = m[i] + o.m[i];
        return r;
    }

    Mat3 operator*(double s) const {
        Mat3 r;
        for (int i = 0; i < 9; ++i) r.m[i] = m[i] * s;
        return r;
    }

    Mat3 transposed() const {
        return Mat3(m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]);
    }

    /// R^T * v, the inverse rotation applied to v when the matrix is orthonormal.
    Vec3 transposed_mul(const Vec3& v) const {
        return {m[0] * v.x + m[3] * v.y + m[6] * v.z,
                m[1] * v.x + m[4] * v.y + m[7] * v.z,
                m[2] * v.x + m[5] * v.y + m[8] * v.z};
    }

    double det() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7])
             - m[1] * (m[3] * m[8] - m[5] * m[6])
             + m[2] * (m[3] * m[7] - m[4] * m[6]);
    }

    Mat3 inverse() const {
        double d = det();
        Mat3 r;
        r.m[0] = (m[4] * m[8] - m[5] * m[7]) / d;
        r.m[1] = (m[2] * m[7] - m[1] * m[8]) / d;
        r.m[2] = (m[1] * m[5] - m[2] * m[4]) / d;
        r.m[3] = (m[5] * m[6] - m[3] * m[8]) / d;
        r.m[4] = (m[0] * m[8] - m[2] * m[6]) / d;
        r.m[5] = (m[2] * m[3] - m[0] * m[5]) / d;
        r.m[6] = (m[3] * m[7] - m[4] * m[6]) / d;
        r.m[7] = (m[1] * m[6] - m[0] * m[7]) / d;
        r.m[8] = (m[0] * m[4] - m[1] * m[3]) / d;
        return r;
    }

    static Mat3 rotation_x(double a) {
        double c = std::cos(a), s = std::sin(a);
        return Mat3(1, 0, 0, 0, c, -s, 0, s, c);
    }
    static Mat3 rotation_y(double a) {
        double c = std::cos(a), s = std::sin(a);
        return Mat3(c, 0, s, 0, 1, 0, -s, 0, c);
    }
    static Mat3 rotation_z(double a) {
        double c = std::cos(a), s = std::sin(a);
        return Mat3(c, -s, 0, s, c, 0, 0, 0, 1);
    }
};

/// Max deviation of R^T R from identity plus determinant sign check.
inline double orthonormality_error(const Mat3& r) {
    Mat3 g = r.transposed() * r;
    double e = 0.0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            e = std::max(e, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
    if (r.det() < 0.0) e = std::max(e, 2.0);
    return e;
}

/// Nearest rotation matrix by Higham's iteration for the polar decomposition.
/// Converges quadratically for inputs near a rotation.
inline Mat3 nearest_rotation(const Mat3& a) {
    Mat3 r = a;
    for (int it = 0; it < 32; ++it) {
        Mat3 rit = r.inverse().transposed();
        Mat3 next;
        for (int i = 0; i < 9; ++i) next.m[i] = 0.5 * (r.m[i] + rit.m[i]);
        double diff = 0.0;
        for (int i = 0; i < 9; ++i) diff = std::max(diff, std::abs(next.m[i] - r.m[i]));
        r = next;
        if (diff < 1e-15) break;
    }
    return r;
}

struct Aabb {
    Vec3 min{std::numeric_limits<double>::max(),
             std::numeric_limits<double>::max(),
             std::numeric_limits<double>::max()};
    Vec3 max{std::numeric_limits<double>::lowest(),
             std::numeric_limits<double>::lowest(),
             std::numeric_limits<double>::lowest()};

    Aabb() = default;
    Aabb(const Vec3& lo, const Vec3& hi) : min(lo), max(hi) {}

    bool contains(const Vec3& p) const {
        return p.x >= min.x && p.x <= max.x &&
               p.y >= min.y && p.y <= max.y &&
               p.z >= min.z && p.z <= max.z;
    }
    void expand(const Vec3& p) { min = cwise_min(min, p); max = cwise_max(max, p); }
    Vec3 extent() const { return max - min; }
};

/// Integer lattice coordinate, used for stuff-grid tiles.
struct Vec3i {
    int64_t x = 0, y = 0, z = 0;
    bool operator==(const Vec3i& o) const { return x == o.x && y == o.y && z == o.z; }
    bool operator<(const Vec3i& o) const {
        if (x != o.x) return x < o.x;
        if (y != o.y) return y < o.y;
        return z < o.z;
    }
};

struct Vec3iHash {
    size_t operator()(const Vec3i& v) const {
        uint64_t h = 1469598103934665603ull;
        for (int64_t c : {v.x, v.y, v.z}) {
            h ^= static_cast<uint64_t>(c);
            h *= 1099511628211ull;
        }
        return static_cast<size_t>(h);
    }
};

inline double softplus(double x) {
    if (x > 30.0) return x;
    return std::log1p(std::exp(x));
}
inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}
inline double silu(double x) { return x * sigmoid(x); }
inline double silu_derivative(double x) {
    double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

}  // namespace layoutforge
