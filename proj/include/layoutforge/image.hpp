#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "layoutforge/math.hpp"

namespace layoutforge {

/// Dense channel-major image / feature tensor, CxHxW doubles.
struct Image {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;

    Image() = default;
    Image(int c, int h, int w, double fill = 0.0)
        : channels(c), height(h), width(w),
          data(static_cast<size_t>(c) * h * w, fill) {}

    double& at(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
    double at(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
    double* channel(int c) { return data.data() + static_cast<size_t>(c) * height * width; }
    const double* channel(int c) const {
        return data.data() + static_cast<size_t>(c) * height * width;
    }

    size_t size() const { return data.size(); }
    bool same_shape(const Image& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }

    Image& operator+=(const Image& o) {
        for (size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
        return *this;
    }
    Image& operator-=(const Image& o) {
        for (size_t i = 0; i < data.size(); ++i) data[i] -= o.data[i];
        return *this;
    }
    Image& operator*=(double s) {
        for (double& v : data) v *= s;
        return *this;
    }

    void clamp01() {
        for (double& v : data) v = layoutforge::clamp01(v);
    }

    void set_pixel(int y, int x, const Vec3& rgb) {
        at(0, y, x) = rgb.x;
        at(1, y, x) = rgb.y;
        at(2, y, x) = rgb.z;
    }
    Vec3 pixel(int y, int x) const { return {at(0, y, x), at(1, y, x), at(2, y, x)}; }
};

inline Image operator-(const Image& a, const Image& b) {
    Image r = a;
    r -= b;
    return r;
}

inline double mean_abs(const Image& a) {
    if (a.data.empty()) return 0.0;
    double s = 0.0;
    for (double v : a.data) s += std::abs(v);
    return s / static_cast<double>(a.data.size());
}

inline double mean_abs_diff(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("mean_abs_diff: shape mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) s += std::abs(a.data[i] - b.data[i]);
    return a.data.empty() ? 0.0 : s / static_cast<double>(a.data.size());
}

/// Exact area-weighted box resampling, channel-wise. Handles non-integer
/// scale factors; integer downsampling reduces to plain average pooling.
inline Image resample_area(const Image& src, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resample_area: bad size");
    if (out_h == src.height && out_w == src.width) return src;
    Image dst(src.channels, out_h, out_w);
    double sy = static_cast<double>(src.height) / out_h;
    double sx = static_cast<double>(src.width) / out_w;
    for (int c = 0; c < src.channels; ++c) {
        for (int oy = 0; oy < out_h; ++oy) {
            double y0 = oy * sy, y1 = (oy + 1) * sy;
            int iy0 = static_cast<int>(std::floor(y0));
            int iy1 = std::min(src.height, static_cast<int>(std::ceil(y1)));
            for (int ox = 0; ox < out_w; ++ox) {
                double x0 = ox * sx, x1 = (ox + 1) * sx;
                int ix0 = static_cast<int>(std::floor(x0));
                int ix1 = std::min(src.width, static_cast<int>(std::ceil(x1)));
                double acc = 0.0, area = 0.0;
                for (int iy = iy0; iy < iy1; ++iy) {
                    double wy = std::min<double>(iy + 1, y1) - std::max<double>(iy, y0);
                    for (int ix = ix0; ix < ix1; ++ix) {
                        double wx = std::min<double>(ix + 1, x1) - std::max<double>(ix, x0);
                        acc += wy * wx * src.at(c, iy, ix);
                        area += wy * wx;
                    }
                }
                dst.at(c, oy, ox) = acc / area;
            }
        }
    }
    return dst;
}

}  // namespace layoutforge
