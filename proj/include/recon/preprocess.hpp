// Frame pre-processing: blur-based frame rejection and clipped adaptive
// histogram equalization, plus pass-through hooks for inpainting and
// undistortion stages (disabled in the default pipeline).
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "recon/image.hpp"

namespace recon {

// Variance of the 3x3 Laplacian over interior pixels. Low values flag
// blurry or content-less frames.
inline double blur_score(const GrayImage& img) {
    if (img.width < 3 || img.height < 3) return 0.0;
    const auto laplacian = [&img](int x, int y) {
        return static_cast<double>(img.at(x - 1, y)) + img.at(x + 1, y) + img.at(x, y - 1) +
               img.at(x, y + 1) - 4.0 * img.at(x, y);
    };
    const std::size_t n =
        static_cast<std::size_t>(img.width - 2) * static_cast<std::size_t>(img.height - 2);
    double sum = 0.0;
    for (int y = 1; y + 1 < img.height; ++y)
        for (int x = 1; x + 1 < img.width; ++x) sum += laplacian(x, y);
    const double mean = sum / static_cast<double>(n);
    double var = 0.0;
    for (int y = 1; y + 1 < img.height; ++y)
        for (int x = 1; x + 1 < img.width; ++x) {
            const double d = laplacian(x, y) - mean;
            var += d * d;
        }
    return var / static_cast<double>(n);
}

namespace detail {

constexpr int kEqualizeBins = 256;

struct TileMapping {
    bool identity = false;
    std::vector<double> cdf;  // cumulative counts, interpolated at lookup
    double count = 0.0;

    double map(double v) const {
        if (identity) return v;
        double pos = std::clamp(v, 0.0, 1.0) * kEqualizeBins;
        int k = std::min(static_cast<int>(pos), kEqualizeBins - 1);
        double frac = pos - k;
        double below = k > 0 ? cdf[k - 1] : 0.0;
        double within = cdf[k] - below;
        return (below + frac * within) / count;
    }
};

inline TileMapping build_tile_mapping(const GrayImage& img, int x0, int x1, int y0, int y1,
                                      double clip) {
    TileMapping m;
    std::vector<double> hist(kEqualizeBins, 0.0);
    float lo = 1.0f, hi = 0.0f;
    for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
            float v = img.at(x, y);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            int bin = std::min(static_cast<int>(v * kEqualizeBins), kEqualizeBins - 1);
            hist[bin] += 1.0;
        }
    }
    m.count = static_cast<double>((x1 - x0) * (y1 - y0));
    if (m.count <= 0.0 || lo >= hi) {
        m.identity = true;
        return m;
    }
    // Clip at a multiple of the mean bin height, spread the excess evenly.
    double limit = clip * m.count / kEqualizeBins;
    double excess = 0.0;
    for (double& h : hist) {
        if (h > limit) {
            excess += h - limit;
            h = limit;
        }
    }
    double add = excess / kEqualizeBins;
    for (double& h : hist) h += add;
    m.cdf.resize(kEqualizeBins);
    double acc = 0.0;
    for (int k = 0; k < kEqualizeBins; ++k) {
        acc += hist[k];
        m.cdf[k] = acc;
    }
    return m;
}

}  // namespace detail

// Clipped adaptive histogram equalization over a tiles x tiles grid with
// bilinear blending between neighboring tile mappings.
inline GrayImage equalize_adaptive(const GrayImage& img, int tiles, double clip) {
    if (tiles < 1) throw Error("equalize_adaptive: tile grid must be >= 1");
    if (img.width == 0 || img.height == 0) return img;
    tiles = std::min({tiles, img.width, img.height});

    std::vector<detail::TileMapping> maps(static_cast<std::size_t>(tiles) * tiles);
    auto tile_lo = [](int extent, int tiles_, int i) { return extent * i / tiles_; };
    for (int ty = 0; ty < tiles; ++ty) {
        for (int tx = 0; tx < tiles; ++tx) {
            maps[static_cast<std::size_t>(ty) * tiles + tx] = detail::build_tile_mapping(
                img, tile_lo(img.width, tiles, tx), tile_lo(img.width, tiles, tx + 1),
                tile_lo(img.height, tiles, ty), tile_lo(img.height, tiles, ty + 1), clip);
        }
    }

    const double tw = static_cast<double>(img.width) / tiles;
    const double th = static_cast<double>(img.height) / tiles;
    GrayImage out(img.width, img.height);
    for (int y = 0; y < img.height; ++y) {
        double gy = (y + 0.5) / th - 0.5;
        int j0 = std::clamp(static_cast<int>(std::floor(gy)), 0, tiles - 1);
        int j1 = std::min(j0 + 1, tiles - 1);
        double fy = std::clamp(gy - std::floor(gy), 0.0, 1.0);
        if (gy < 0.0) fy = 0.0;
        for (int x = 0; x < img.width; ++x) {
            double gx = (x + 0.5) / tw - 0.5;
            int i0 = std::clamp(static_cast<int>(std::floor(gx)), 0, tiles - 1);
            int i1 = std::min(i0 + 1, tiles - 1);
            double fx = std::clamp(gx - std::floor(gx), 0.0, 1.0);
            if (gx < 0.0) fx = 0.0;
            double v = img.at(x, y);
            double m00 = maps[static_cast<std::size_t>(j0) * tiles + i0].map(v);
            double m10 = maps[static_cast<std::size_t>(j0) * tiles + i1].map(v);
            double m01 = maps[static_cast<std::size_t>(j1) * tiles + i0].map(v);
            double m11 = maps[static_cast<std::size_t>(j1) * tiles + i1].map(v);
            double blended = (1 - fy) * ((1 - fx) * m00 + fx * m10) +
                             fy * ((1 - fx) * m01 + fx * m11);
            out.at(x, y) = static_cast<float>(std::clamp(blended, 0.0, 1.0));
        }
    }
    return out;
}

// Hook points for the inpainting / undistortion stages; identity by default.
using FrameFilter = std::function<GrayImage(const GrayImage&)>;

struct PreprocessConfig {
    double blur_threshold = 1e-5;  // frames scoring below are rejected
    int equalize_tiles = 8;
    double equalize_clip = 3.0;
    FrameFilter inpaint_hook;     // stage 2, no-op unless set
    FrameFilter undistort_hook;   // stage 3, no-op unless set
};

// Full pre-processing chain; nullopt means the frame was rejected.
inline std::optional<GrayImage> preprocess_frame(const GrayImage& frame,
                                                 const PreprocessConfig& cfg) {
    if (blur_score(frame) < cfg.blur_threshold) return std::nullopt;
    GrayImage img = frame;
    if (cfg.inpaint_hook) img = cfg.inpaint_hook(img);
    if (cfg.undistort_hook) img = cfg.undistort_hook(img);
    return equalize_adaptive(img, cfg.equalize_tiles, cfg.equalize_clip);
}

}  // namespace recon
