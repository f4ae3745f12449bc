#pragma once

#include <zlib.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "layoutforge/image.hpp"

namespace layoutforge {

namespace detail {

inline void push_be32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

inline void push_chunk(std::vector<uint8_t>& out, const char type[4],
                       const std::vector<uint8_t>& payload) {
    push_be32(out, static_cast<uint32_t>(payload.size()));
    size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    uint32_t crc = static_cast<uint32_t>(
        ::crc32(0, out.data() + start, static_cast<uInt>(out.size() - start)));
    push_be32(out, crc);
}

inline std::vector<uint8_t> deflate_bytes(const std::vector<uint8_t>& raw) {
    uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> out(bound);
    if (::compress2(out.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw std::runtime_error("png: deflate failed");
    out.resize(bound);
    return out;
}

inline void write_png(const std::string& path, int width, int height, int color_type,
                      const std::vector<uint8_t>& pixels, int bytes_per_pixel,
                      const std::vector<std::array<uint8_t, 3>>* palette) {
    std::vector<uint8_t> png;
    const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    png.insert(png.end(), sig, sig + 8);

    std::vector<uint8_t> ihdr;
    push_be32(ihdr, static_cast<uint32_t>(width));
    push_be32(ihdr, static_cast<uint32_t>(height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(static_cast<uint8_t>(color_type));
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    push_chunk(png, "IHDR", ihdr);

    if (palette) {
        std::vector<uint8_t> plte;
        for (const auto& rgb : *palette) {
            plte.push_back(rgb[0]);
            plte.push_back(rgb[1]);
            plte.push_back(rgb[2]);
        }
        push_chunk(png, "PLTE", plte);
    }

    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(height) * (1 + static_cast<size_t>(width) * bytes_per_pixel));
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);  // filter: none
        const uint8_t* row = pixels.data() + static_cast<size_t>(y) * width * bytes_per_pixel;
        raw.insert(raw.end(), row, row + static_cast<size_t>(width) * bytes_per_pixel);
    }
    push_chunk(png, "IDAT", deflate_bytes(raw));
    push_chunk(png, "IEND", {});

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
}

}  // namespace detail

/// 8-bit RGB PNG from a 3-channel image in [0,1].
inline void write_png_rgb(const std::string& path, const Image& img) {
    if (img.channels != 3) throw std::invalid_argument("write_png_rgb: need 3 channels");
    std::vector<uint8_t> px(static_cast<size_t>(img.height) * img.width * 3);
    size_t k = 0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                px[k++] = static_cast<uint8_t>(std::lround(clamp01(img.at(c, y, x)) * 255.0));
    detail::write_png(path, img.width, img.height, 2, px, 3, nullptr);
}

/// 8-bit indexed PNG with explicit palette.
inline void write_png_indexed(const std::string& path, int width, int height,
                              const std::vector<uint8_t>& indices,
                              const std::vector<std::array<uint8_t, 3>>& palette) {
    if (indices.size() != static_cast<size_t>(width) * height)
        throw std::invalid_argument("write_png_indexed: index buffer size mismatch");
    detail::write_png(path, width, height, 3, indices, 1, &palette);
}

/// 8-bit grayscale PNG from raw bytes.
inline void write_png_gray(const std::string& path, int width, int height,
                           const std::vector<uint8_t>& gray) {
    if (gray.size() != static_cast<size_t>(width) * height)
        throw std::invalid_argument("write_png_gray: buffer size mismatch");
    detail::write_png(path, width, height, 0, gray, 1, nullptr);
}

/// Grayscale PFM, 32-bit floats, scale header -1.0 (little-endian), rows
/// stored bottom-to-top per the format convention.
inline void write_pfm(const std::string& path, int width, int height,
                      const std::vector<double>& values) {
    if (values.size() != static_cast<size_t>(width) * height)
        throw std::invalid_argument("write_pfm: buffer size mismatch");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << "Pf\n" << width << " " << height << "\n-1.0\n";
    for (int y = height - 1; y >= 0; --y) {
        for (int x = 0; x < width; ++x) {
            float v = static_cast<float>(values[static_cast<size_t>(y) * width + x]);
            f.write(reinterpret_cast<const char*>(&v), 4);
        }
    }
}

inline std::vector<double> read_pfm(const std::string& path, int& width, int& height) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::string magic;
    double scale = 0.0;
    f >> magic >> width >> height >> scale;
    if (magic != "Pf") throw std::runtime_error("read_pfm: not a grayscale PFM: " + path);
    if (scale >= 0.0) throw std::runtime_error("read_pfm: big-endian PFM unsupported");
    f.get();  // single whitespace after the scale line
    std::vector<double> values(static_cast<size_t>(width) * height);
    for (int y = height - 1; y >= 0; --y) {
        for (int x = 0; x < width; ++x) {
            float v = 0.0f;
            f.read(reinterpret_cast<char*>(&v), 4);
            values[static_cast<size_t>(y) * width + x] = v;
        }
    }
    if (!f) throw std::runtime_error("read_pfm: truncated file: " + path);
    return values;
}

}  // namespace layoutforge
