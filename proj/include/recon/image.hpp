// Image carriers and 8-bit image file IO (PGM/PPM binary, PNG).
// PGM/PPM is the bit-exact interchange format used by the tests.
#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "recon/geometry.hpp"

namespace recon {

// Row-major grayscale image with values in [0, 1].
struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<float> pixels;

    GrayImage() = default;
    GrayImage(int w, int h, float fill = 0.0f)
        : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

    float& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    float at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }

    // Clamped fetch for border-touching kernels.
    float at_clamped(int x, int y) const {
        x = std::clamp(x, 0, width - 1);
        y = std::clamp(y, 0, height - 1);
        return at(x, y);
    }

    bool in_bounds(double x, double y) const {
        return x >= 0.0 && y >= 0.0 && x < width && y < height;
    }
};

// Interleaved 8-bit RGB.
struct ColorImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;

    ColorImage() = default;
    ColorImage(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}

    std::uint8_t* px(int x, int y) { return &rgb[(static_cast<std::size_t>(y) * width + x) * 3]; }
    const std::uint8_t* px(int x, int y) const {
        return &rgb[(static_cast<std::size_t>(y) * width + x) * 3];
    }
};

inline std::uint8_t quantize8(double v) {
    double q = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
    return static_cast<std::uint8_t>(q);
}

// Conventional luma weights.
inline GrayImage to_gray(const ColorImage& c) {
    GrayImage g(c.width, c.height);
    const std::uint8_t* p = c.rgb.data();
    for (std::size_t i = 0; i < g.pixels.size(); ++i, p += 3) {
        g.pixels[i] = static_cast<float>((0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]) / 255.0);
    }
    return g;
}

namespace detail {
struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw Error("cannot open " + path);
    return f;
}

// Reads one PNM header token, skipping whitespace and '#' comments.
inline std::string pnm_token(std::FILE* f) {
    std::string tok;
    int c = std::fgetc(f);
    while (c != EOF && (std::isspace(c) || c == '#')) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = std::fgetc(f);
        }
        c = std::fgetc(f);
    }
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = std::fgetc(f);
    }
    if (tok.empty()) throw Error("truncated PNM header");
    return tok;
}
}  // namespace detail

inline void write_pgm(const GrayImage& img, const std::string& path) {
    auto f = detail::open_file(path, "wb");
    std::fprintf(f.get(), "P5\n%d %d\n255\n", img.width, img.height);
    std::vector<std::uint8_t> row(img.width);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) row[x] = quantize8(img.at(x, y));
        std::fwrite(row.data(), 1, row.size(), f.get());
    }
}

inline GrayImage read_pgm(const std::string& path) {
    auto f = detail::open_file(path, "rb");
    if (detail::pnm_token(f.get()) != "P5") throw Error(path + ": not a binary PGM");
    int w = std::stoi(detail::pnm_token(f.get()));
    int h = std::stoi(detail::pnm_token(f.get()));
    int maxval = std::stoi(detail::pnm_token(f.get()));
    if (w <= 0 || h <= 0 || maxval != 255) throw Error(path + ": unsupported PGM");
    GrayImage img(w, h);
    std::vector<std::uint8_t> row(w);
    for (int y = 0; y < h; ++y) {
        if (std::fread(row.data(), 1, row.size(), f.get()) != row.size())
            throw Error(path + ": truncated PGM data");
        for (int x = 0; x < w; ++x) img.at(x, y) = row[x] / 255.0f;
    }
    return img;
}

inline void write_ppm(const ColorImage& img, const std::string& path) {
    auto f = detail::open_file(path, "wb");
    std::fprintf(f.get(), "P6\n%d %d\n255\n", img.width, img.height);
    std::fwrite(img.rgb.data(), 1, img.rgb.size(), f.get());
}

inline ColorImage read_ppm(const std::string& path) {
    auto f = detail::open_file(path, "rb");
    if (detail::pnm_token(f.get()) != "P6") throw Error(path + ": not a binary PPM");
    int w = std::stoi(detail::pnm_token(f.get()));
    int h = std::stoi(detail::pnm_token(f.get()));
    int maxval = std::stoi(detail::pnm_token(f.get()));
    if (w <= 0 || h <= 0 || maxval != 255) throw Error(path + ": unsupported PPM");
    ColorImage img(w, h);
    if (std::fread(img.rgb.data(), 1, img.rgb.size(), f.get()) != img.rgb.size())
        throw Error(path + ": truncated PPM data");
    return img;
}

namespace detail {
inline void write_png_impl(const std::string& path, int w, int h, int color_type,
                           const std::vector<std::uint8_t>& data, int stride) {
    auto f = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw Error("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw Error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("libpng write error for " + path);
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, w, h, 8, color_type, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < h; ++y)
        png_write_row(png, const_cast<png_bytep>(data.data() + static_cast<std::size_t>(y) * stride));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

struct PngPixels {
    int width = 0, height = 0, channels = 0;
    std::vector<std::uint8_t> data;
};

inline PngPixels read_png_impl(const std::string& path) {
    auto f = open_file(path, "rb");
    png_byte sig[8];
    if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8))
        throw Error(path + ": not a PNG file");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw Error("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw Error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error("libpng read error for " + path);
    }
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    // Normalize everything to 8-bit gray or RGB.
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);

    PngPixels out;
    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.channels = static_cast<int>(png_get_channels(png, info));
    std::size_t stride = png_get_rowbytes(png, info);
    out.data.resize(stride * out.height);
    for (int y = 0; y < out.height; ++y) png_read_row(png, out.data.data() + stride * y, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}
}  // namespace detail

inline void write_png(const GrayImage& img, const std::string& path) {
    std::vector<std::uint8_t> data(static_cast<std::size_t>(img.width) * img.height);
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = quantize8(img.pixels[i]);
    detail::write_png_impl(path, img.width, img.height, PNG_COLOR_TYPE_GRAY, data, img.width);
}

inline void write_png(const ColorImage& img, const std::string& path) {
    detail::write_png_impl(path, img.width, img.height, PNG_COLOR_TYPE_RGB, img.rgb,
                           img.width * 3);
}

inline GrayImage read_png_gray(const std::string& path) {
    auto px = detail::read_png_impl(path);
    GrayImage img(px.width, px.height);
    if (px.channels == 1) {
        for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = px.data[i] / 255.0f;
    } else if (px.channels == 3) {
        ColorImage c(px.width, px.height);
        c.rgb = std::move(px.data);
        img = to_gray(c);
    } else {
        throw Error(path + ": unsupported PNG channel count");
    }
    return img;
}

inline ColorImage read_png_color(const std::string& path) {
    auto px = detail::read_png_impl(path);
    ColorImage img(px.width, px.height);
    if (px.channels == 3) {
        img.rgb = std::move(px.data);
    } else if (px.channels == 1) {
        for (std::size_t i = 0, j = 0; i < px.data.size(); ++i) {
            img.rgb[j++] = px.data[i];
            img.rgb[j++] = px.data[i];
            img.rgb[j++] = px.data[i];
        }
    } else {
        throw Error(path + ": unsupported PNG channel count");
    }
    return img;
}

}  // namespace recon
