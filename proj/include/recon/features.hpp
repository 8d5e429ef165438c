// ORB-style feature stack: scale pyramid, segment-test corner detection,
// steered binary descriptors over a fixed seeded pattern, and
// Hamming-distance matching with ratio and mutual-best filtering.
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <vector>

#include "recon/image.hpp"
#include "recon/prng.hpp"

namespace recon {

struct ImagePyramid {
    std::vector<GrayImage> levels;
    double scale_factor = 1.2;

    double level_scale(int k) const { return std::pow(scale_factor, k); }
};

namespace detail {
// Area-averaging resample to exact target dimensions.
inline GrayImage resize_area(const GrayImage& src, int dst_w, int dst_h) {
    GrayImage dst(dst_w, dst_h);
    const double sx = static_cast<double>(src.width) / dst_w;
    const double sy = static_cast<double>(src.height) / dst_h;
    for (int y = 0; y < dst_h; ++y) {
        const double y0 = y * sy, y1 = (y + 1) * sy;
        const int iy0 = static_cast<int>(y0), iy1 = std::min(src.height - 1, static_cast<int>(std::ceil(y1)) - 1);
        for (int x = 0; x < dst_w; ++x) {
            const double x0 = x * sx, x1 = (x + 1) * sx;
            const int ix0 = static_cast<int>(x0), ix1 = std::min(src.width - 1, static_cast<int>(std::ceil(x1)) - 1);
            double acc = 0.0, wsum = 0.0;
            for (int iy = iy0; iy <= iy1; ++iy) {
                const double wy = std::min<double>(iy + 1, y1) - std::max<double>(iy, y0);
                for (int ix = ix0; ix <= ix1; ++ix) {
                    const double wx = std::min<double>(ix + 1, x1) - std::max<double>(ix, x0);
                    acc += wx * wy * src.at(ix, iy);
                    wsum += wx * wy;
                }
            }
            dst.at(x, y) = static_cast<float>(acc / wsum);
        }
    }
    return dst;
}
}  // namespace detail

inline ImagePyramid build_pyramid(const GrayImage& img, int levels, double scale_factor) {
    if (levels < 8) throw Error("build_pyramid: at least 8 levels required");
    if (scale_factor <= 1.0) throw Error("build_pyramid: scale factor must exceed 1");
    const double top = std::pow(scale_factor, levels - 1);
    if (static_cast<int>(img.width / top) < 16 || static_cast<int>(img.height / top) < 16)
        throw Error("build_pyramid: image too small, top level would fall below 16x16");

    ImagePyramid pyr;
    pyr.scale_factor = scale_factor;
    pyr.levels.reserve(levels);
    pyr.levels.push_back(img);
    for (int k = 1; k < levels; ++k) {
        const double inv = std::pow(scale_factor, k);
        const int w = static_cast<int>(img.width / inv);
        const int h = static_cast<int>(img.height / inv);
        pyr.levels.push_back(detail::resize_area(pyr.levels.back(), w, h));
    }
    return pyr;
}

struct Keypoint {
    Vec2 position = Vec2::Zero();  // base-level pixel coordinates
    int level = 0;
    double orientation = 0.0;      // [0, 2pi)
    double response = 0.0;
};

namespace detail {

// FAST-16 circle, radius 3.
inline constexpr std::array<std::array<int, 2>, 16> kCircle = {{{0, -3}, {1, -3}, {2, -2}, {3, -1},
                                                                {3, 0},  {3, 1},  {2, 2},  {1, 3},
                                                                {0, 3},  {-1, 3}, {-2, 2}, {-3, 1},
                                                                {-3, 0}, {-3, -1}, {-2, -2}, {-1, -3}}};

inline bool has_arc(unsigned mask, int min_len) {
    const unsigned wrapped = mask | (mask << 16);
    int run = 0;
    for (int i = 0; i < 32; ++i) {
        if (wrapped & (1u << i)) {
            if (++run >= min_len) return true;
        } else {
            run = 0;
        }
    }
    return false;
}

// Segment test at one pixel; returns a score > 0 if it is a corner.
inline double fast_score(const GrayImage& img, int x, int y, double t, int arc_len) {
    const double c = img.at(x, y);
    std::array<double, 16> vals;
    unsigned brighter = 0, darker = 0;
    for (int i = 0; i < 16; ++i) {
        vals[i] = img.at(x + kCircle[i][0], y + kCircle[i][1]);
        if (vals[i] > c + t) brighter |= 1u << i;
        if (vals[i] < c - t) darker |= 1u << i;
    }
    // Quick reject: an arc of 9 always covers 2 of the 4 compass points.
    const unsigned compass = 0x1111;
    if (std::popcount(brighter & compass) < 2 && std::popcount(darker & compass) < 2) return 0.0;
    if (!has_arc(brighter, arc_len) && !has_arc(darker, arc_len)) return 0.0;
    double score = 0.0;
    for (int i = 0; i < 16; ++i) score += std::max(0.0, std::abs(vals[i] - c) - t);
    return score;
}

// Intensity-centroid orientation over a disc of radius 7, clamped at borders.
inline double centroid_orientation(const GrayImage& img, int x, int y) {
    double m10 = 0.0, m01 = 0.0;
    for (int dy = -7; dy <= 7; ++dy) {
        for (int dx = -7; dx <= 7; ++dx) {
            if (dx * dx + dy * dy > 49) continue;
            const double v = img.at_clamped(x + dx, y + dy);
            m10 += dx * v;
            m01 += dy * v;
        }
    }
    double a = std::atan2(m01, m10);
    if (a < 0.0) a += 6.283185307179586476925286766559;
    return a;
}

}  // namespace detail

// Corners passing the 12-of-16 contiguous segment test, 3x3 non-maximum
// suppressed per level, merged across levels, sorted by response and
// truncated to max_count. Positions are base-level coordinates.
inline std::vector<Keypoint> detect_keypoints(const ImagePyramid& pyr, double threshold,
                                              int max_count) {
    // ORB's segment test: 9 contiguous of 16. A right-angle corner subtends a
    // 270-degree dissimilar arc, which discretizes to 11 samples; arc lengths
    // above 11 would never fire on it.
    constexpr int kArcLen = 9;
    std::vector<Keypoint> all;
    for (int k = 0; k < static_cast<int>(pyr.levels.size()); ++k) {
        const GrayImage& img = pyr.levels[k];
        if (img.width < 7 || img.height < 7) continue;
        GrayImage score(img.width, img.height, 0.0f);
        for (int y = 3; y < img.height - 3; ++y)
            for (int x = 3; x < img.width - 3; ++x)
                score.at(x, y) = static_cast<float>(detail::fast_score(img, x, y, threshold, kArcLen));
        const double s = pyr.level_scale(k);
        for (int y = 3; y < img.height - 3; ++y) {
            for (int x = 3; x < img.width - 3; ++x) {
                const float r = score.at(x, y);
                if (r <= 0.0f) continue;
                bool is_max = true;
                for (int dy = -1; dy <= 1 && is_max; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (dx == 0 && dy == 0) continue;
                        const float q = score.at_clamped(x + dx, y + dy);
                        // Strict on earlier neighbors, lenient on later: keeps one of equal plateau.
                        if (q > r || (q == r && (dy < 0 || (dy == 0 && dx < 0)))) {
                            is_max = false;
                            break;
                        }
                    }
                if (!is_max) continue;
                Keypoint kp;
                kp.position = Vec2((x + 0.5) * s - 0.5, (y + 0.5) * s - 0.5);
                kp.level = k;
                kp.response = r;
                kp.orientation = detail::centroid_orientation(img, x, y);
                all.push_back(kp);
            }
        }
    }
    std::stable_sort(all.begin(), all.end(), [](const Keypoint& a, const Keypoint& b) {
        if (a.response != b.response) return a.response > b.response;
        if (a.level != b.level) return a.level < b.level;
        if (a.position.y() != b.position.y()) return a.position.y() < b.position.y();
        return a.position.x() < b.position.x();
    });
    if (max_count >= 0 && static_cast<int>(all.size()) > max_count) all.resize(max_count);
    return all;
}

struct BinaryDescriptor {
    std::array<std::uint64_t, 4> words{};

    void set_bit(int i) { words[i >> 6] |= 1ull << (i & 63); }
};

inline int hamming_distance(const BinaryDescriptor& a, const BinaryDescriptor& b) {
    int d = 0;
    for (int i = 0; i < 4; ++i) d += std::popcount(a.words[i] ^ b.words[i]);
    return d;
}

namespace detail {

struct PatternPair {
    double ax, ay, bx, by;
};

// Fixed 256-pair comparison pattern inside a radius-14 disc, generated once
// from a constant seed so descriptors are reproducible across runs.
inline const std::array<PatternPair, 256>& descriptor_pattern() {
    static const std::array<PatternPair, 256> pattern = [] {
        std::array<PatternPair, 256> p{};
        Rng rng(0x9c0ffee123456789ull);
        auto draw = [&rng](double& x, double& y) {
            for (;;) {
                double cx = rng.uniform(-14.0, 14.0);
                double cy = rng.uniform(-14.0, 14.0);
                if (cx * cx + cy * cy <= 14.0 * 14.0) {
                    x = cx;
                    y = cy;
                    return;
                }
            }
        };
        for (auto& pair : p) {
            draw(pair.ax, pair.ay);
            draw(pair.bx, pair.by);
        }
        return p;
    }();
    return pattern;
}

}  // namespace detail

struct DescribeResult {
    std::vector<BinaryDescriptor> descriptors;
    std::vector<std::size_t> keypoint_indices;  // surviving keypoints, in input order
    std::vector<std::size_t> dropped;           // too close to the border at their level
};

// One 256-bit descriptor per keypoint with >= 15 px margin at its level;
// the comparison pattern is rotated by the keypoint orientation.
inline DescribeResult describe_keypoints(const ImagePyramid& pyr,
                                         const std::vector<Keypoint>& kps) {
    constexpr int kMargin = 15;
    const auto& pattern = detail::descriptor_pattern();
    DescribeResult out;
    for (std::size_t i = 0; i < kps.size(); ++i) {
        const Keypoint& kp = kps[i];
        const GrayImage& img = pyr.levels[kp.level];
        const double s = pyr.level_scale(kp.level);
        const int lx = static_cast<int>(std::lround((kp.position.x() + 0.5) / s - 0.5));
        const int ly = static_cast<int>(std::lround((kp.position.y() + 0.5) / s - 0.5));
        if (lx < kMargin || ly < kMargin || lx >= img.width - kMargin || ly >= img.height - kMargin) {
            out.dropped.push_back(i);
            continue;
        }
        const double ca = std::cos(kp.orientation), sa = std::sin(kp.orientation);
        BinaryDescriptor d;
        for (int b = 0; b < 256; ++b) {
            const auto& pp = pattern[b];
            const int ax = lx + static_cast<int>(std::lround(ca * pp.ax - sa * pp.ay));
            const int ay = ly + static_cast<int>(std::lround(sa * pp.ax + ca * pp.ay));
            const int bx = lx + static_cast<int>(std::lround(ca * pp.bx - sa * pp.by));
            const int by = ly + static_cast<int>(std::lround(sa * pp.bx + ca * pp.by));
            if (img.at_clamped(ax, ay) < img.at_clamped(bx, by)) d.set_bit(b);
        }
        out.descriptors.push_back(d);
        out.keypoint_indices.push_back(i);
    }
    return out;
}

struct Match {
    std::size_t index_a = 0;
    std::size_t index_b = 0;
    int hamming = 0;
};

// Nearest-neighbor Hamming matching. A pair survives if it is mutual-best
// and passes the ratio test in both directions (vacuous for single-element
// lists).
inline std::vector<Match> match_descriptors(const std::vector<BinaryDescriptor>& a,
                                            const std::vector<BinaryDescriptor>& b,
                                            double ratio) {
    std::vector<Match> matches;
    if (a.empty() || b.empty()) return matches;

    struct Best {
        int best = 257, second = 257;
        std::size_t idx = 0;
    };
    std::vector<Best> fwd(a.size()), rev(b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < b.size(); ++j) {
            const int d = hamming_distance(a[i], b[j]);
            if (d < fwd[i].best) {
                fwd[i].second = fwd[i].best;
                fwd[i].best = d;
                fwd[i].idx = j;
            } else if (d < fwd[i].second) {
                fwd[i].second = d;
            }
            if (d < rev[j].best) {
                rev[j].second = rev[j].best;
                rev[j].best = d;
                rev[j].idx = i;
            } else if (d < rev[j].second) {
                rev[j].second = d;
            }
        }
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        const std::size_t j = fwd[i].idx;
        if (rev[j].idx != i) continue;
        if (b.size() > 1 && !(fwd[i].best < ratio * fwd[i].second)) continue;
        if (a.size() > 1 && !(rev[j].best < ratio * rev[j].second)) continue;
        matches.push_back({i, j, fwd[i].best});
    }
    return matches;
}

}  // namespace recon
