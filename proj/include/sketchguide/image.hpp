// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "errors.hpp"

namespace sketchguide {

// 8-bit interleaved RGB image.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(int w, int h, std::uint8_t fill = 255)
        : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {}

    std::uint8_t* at(int x, int y) { return &pixels[(static_cast<std::size_t>(y) * width + x) * 3]; }
    [[nodiscard]] const std::uint8_t* at(int x, int y) const {
        return &pixels[(static_cast<std::size_t>(y) * width + x) * 3];
    }
    [[nodiscard]] bool empty() const { return width == 0 || height == 0; }
    bool operator==(const Image&) const = default;
};

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw io_error("short write to '" + path.string() + "'");
}

inline Image decode_png(const std::vector<std::uint8_t>& bytes) {
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
        throw io_error(std::string("undecodable PNG: ") + img.message);
    }
    img.format = PNG_FORMAT_RGB;
    // Composite any alpha over white, as a sketch canvas would.
    png_color white{255, 255, 255};
    Image out(static_cast<int>(img.width), static_cast<int>(img.height));
    if (!png_image_finish_read(&img, &white, out.pixels.data(), 0, nullptr)) {
        std::string msg = img.message;
        png_image_free(&img);
        throw io_error("undecodable PNG: " + msg);
    }
    return out;
}

inline std::vector<std::uint8_t> encode_png(const Image& image) {
    if (image.empty()) throw parameter_error("cannot encode an empty image");
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.pixels.data(), 0, nullptr)) {
        throw io_error(std::string("PNG encode failed: ") + img.message);
    }
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
        throw io_error(std::string("PNG encode failed: ") + img.message);
    }
    out.resize(size);
    return out;
}

inline Image read_png(const std::filesystem::path& path) { return decode_png(read_file_bytes(path)); }

inline void write_png(const std::filesystem::path& path, const Image& image) {
    write_file_bytes(path, encode_png(image));
}

// Area-weighted resampling; exact box averaging when downscaling by an
// integer factor.
inline Image resize_area(const Image& src, int width, int height) {
    if (src.empty() || width <= 0 || height <= 0) throw parameter_error("resize of empty image");
    if (src.width == width && src.height == height) return src;
    Image dst(width, height);
    const double sx = static_cast<double>(src.width) / width;
    const double sy = static_cast<double>(src.height) / height;
    for (int y = 0; y < height; ++y) {
        const double y0 = y * sy, y1 = (y + 1) * sy;
        for (int x = 0; x < width; ++x) {
            const double x0 = x * sx, x1 = (x + 1) * sx;
            double acc[3] = {0, 0, 0};
            double total = 0.0;
            for (int iy = static_cast<int>(y0); iy < src.height && iy < y1; ++iy) {
                const double wy = std::min<double>(iy + 1, y1) - std::max<double>(iy, y0);
                if (wy <= 0) continue;
                for (int ix = static_cast<int>(x0); ix < src.width && ix < x1; ++ix) {
                    const double wx = std::min<double>(ix + 1, x1) - std::max<double>(ix, x0);
                    if (wx <= 0) continue;
                    const double w = wx * wy;
                    const auto* p = src.at(ix, iy);
                    for (int c = 0; c < 3; ++c) acc[c] += w * p[c];
                    total += w;
                }
            }
            auto* q = dst.at(x, y);
            for (int c = 0; c < 3; ++c) {
                q[c] = static_cast<std::uint8_t>(std::clamp(std::lround(acc[c] / total), 0L, 255L));
            }
        }
    }
    return dst;
}

inline Image upscale_nearest(const Image& src, int factor) {
    if (factor <= 1) return src;
    Image dst(src.width * factor, src.height * factor);
    for (int y = 0; y < dst.height; ++y) {
        for (int x = 0; x < dst.width; ++x) {
            std::memcpy(dst.at(x, y), src.at(x / factor, y / factor), 3);
        }
    }
    return dst;
}

} // namespace sketchguide
