// Feature-based interior mapping: two-view bootstrap with skip-ahead retry,
// per-frame tracking with pose-only refinement, covisibility-windowed local
// mapping, and multi-view densification at fixed poses.
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "recon/bundle.hpp"
#include "recon/cloud.hpp"
#include "recon/epipolar.hpp"
#include "recon/features.hpp"
#include "recon/geometry.hpp"
#include "recon/image.hpp"
#include "recon/kdtree.hpp"

namespace recon {

struct SlamConfig {
    CameraIntrinsics intrinsics;

    // feature extraction
    int pyramid_levels = 8;
    double pyramid_scale = 1.2;
    double fast_threshold = 0.02;
    int max_keypoints = 1500;
    double match_ratio = 0.8;
    bool refine_subpixel = true;

    // two-view bootstrap
    int ransac_iterations = 2000;
    double ransac_threshold_px = 1.5;
    int min_init_inliers = 50;
    int init_window = 30;  // candidate partners tried per reference frame

    // tracking
    int min_track_matches = 15;
    double track_inlier_px = 2.0;
    double guided_radius_px = 6.0;  // projection search window of the second match pass
    int guided_max_hamming = 64;
    double keyframe_tracked_ratio = 0.9;
    double keyframe_parallax_rad = std::numbers::pi / 180.0;

    // local mapping
    int local_window = 8;
    double cull_redundancy = 0.9;  // fraction of points seen in >= 3 other keyframes
    int min_keyframe_links = 8;

    // densification
    double dense_fast_threshold = 0.008;
    int dense_max_keypoints = 6000;
    double dense_match_ratio = 0.85;
    double dense_inlier_px = 2.0;
    double dense_min_triangulation_deg = 2.0;
    int dense_view_mode = 1;  // 0 adjacent later keyframes, 1 baseline-spread
    double outlier_fraction_max = 0.3;
    double outlier_median_mult = 5.0;
    int denoise_k = 16;
    double denoise_stddev_mult = 2.0;

    std::uint64_t seed = 0x51a917;
};

struct FrameFeatures {
    int frame_id = 0;
    std::vector<Keypoint> keypoints;  // aligned index-for-index with descriptors
    std::vector<BinaryDescriptor> descriptors;
};

namespace detail {

// Subpixel corner localization at the keypoint's own pyramid level: one
// least-squares step of the gradient-intersection (Forstner) estimate over a
// 7x7 window. Cuts the pixel quantization noise that otherwise dominates
// triangulation depth error.
inline void refine_keypoint(Keypoint& kp, const ImagePyramid& pyr) {
    const GrayImage& lvl = pyr.levels[kp.level];
    const double s = pyr.level_scale(kp.level);
    const int x = static_cast<int>(std::lround((kp.position.x() + 0.5) / s - 0.5));
    const int y = static_cast<int>(std::lround((kp.position.y() + 0.5) / s - 0.5));
    if (x < 4 || y < 4 || x > lvl.width - 5 || y > lvl.height - 5) return;
    Eigen::Matrix2d a = Eigen::Matrix2d::Zero();
    Vec2 b = Vec2::Zero();
    for (int dy = -3; dy <= 3; ++dy)
        for (int dx = -3; dx <= 3; ++dx) {
            const double gx = 0.5 * (lvl.at(x + dx + 1, y + dy) - lvl.at(x + dx - 1, y + dy));
            const double gy = 0.5 * (lvl.at(x + dx, y + dy + 1) - lvl.at(x + dx, y + dy - 1));
            a(0, 0) += gx * gx;
            a(0, 1) += gx * gy;
            a(1, 1) += gy * gy;
            b += Vec2(gx * gx * dx + gx * gy * dy, gx * gy * dx + gy * gy * dy);
        }
    a(1, 0) = a(0, 1);
    const double det = a(0, 0) * a(1, 1) - a(0, 1) * a(0, 1);
    const double tr = a(0, 0) + a(1, 1);
    if (det <= 1e-12 * tr * tr || tr <= 0.0) return;
    const Vec2 shift = a.inverse() * b;
    if (!shift.allFinite() || shift.norm() > 1.0) return;
    kp.position = Vec2((x + shift.x() + 0.5) * s - 0.5, (y + shift.y() + 0.5) * s - 0.5);
}

}  // namespace detail

// Detect and describe in one step; keypoints that fail description are
// dropped so keypoint index == descriptor index everywhere downstream.
inline FrameFeatures extract_features(const GrayImage& img, int frame_id, const SlamConfig& cfg,
                                      bool dense = false) {
    const ImagePyramid pyr = build_pyramid(img, cfg.pyramid_levels, cfg.pyramid_scale);
    const double threshold = dense ? cfg.dense_fast_threshold : cfg.fast_threshold;
    const auto kps = detect_keypoints(pyr, threshold, dense ? cfg.dense_max_keypoints
                                                            : cfg.max_keypoints);
    const DescribeResult desc = describe_keypoints(pyr, kps);
    FrameFeatures out;
    out.frame_id = frame_id;
    out.descriptors = desc.descriptors;
    out.keypoints.reserve(desc.keypoint_indices.size());
    for (std::size_t idx : desc.keypoint_indices) out.keypoints.push_back(kps[idx]);
    if (cfg.refine_subpixel) {
        for (Keypoint& kp : out.keypoints) detail::refine_keypoint(kp, pyr);
    }
    return out;
}

struct Keyframe {
    int id = 0;        // strictly increasing with insertion order
    int frame_id = 0;  // index of the source frame in the input sequence
    CameraPose pose;   // world-to-camera
    std::vector<Keypoint> keypoints;
    std::vector<BinaryDescriptor> descriptors;
    std::map<std::size_t, int> map_point_links;  // keypoint index -> MapPoint id
};

struct MapPoint {
    int id = 0;
    Vec3 position = Vec3::Zero();
    std::set<std::pair<int, std::size_t>> observations;  // (keyframe id, keypoint index)
};

struct CovisibilityGraph {
    std::set<int> nodes;
    std::map<std::pair<int, int>, int> edges;  // (low id, high id) -> shared MapPoint count

    int weight(int a, int b) const {
        const auto it = edges.find({std::min(a, b), std::max(a, b)});
        return it == edges.end() ? 0 : it->second;
    }

    std::vector<int> neighbors(int id) const {
        std::vector<int> out;
        for (const auto& [key, w] : edges) {
            if (key.first == id) out.push_back(key.second);
            else if (key.second == id) out.push_back(key.first);
        }
        std::sort(out.begin(), out.end());
        return out;
    }
};

enum class SlamState { initializing, tracking, lost };

struct TrajectoryEntry {
    int frame_id = 0;
    CameraPose pose;
    bool tracked = false;  // false for frames consumed before/after a usable estimate
};

struct SlamMap {
    SlamConfig config;
    std::vector<Keyframe> keyframes;  // ascending id
    std::map<int, MapPoint> map_points;
    CovisibilityGraph graph;
    std::vector<TrajectoryEntry> trajectory;  // one entry per processed frame
    SlamState state = SlamState::initializing;
    int next_keyframe_id = 0;
    int next_map_point_id = 0;
    int lost_at_frame = -1;
};

namespace detail {

inline std::size_t keyframe_index(const SlamMap& map, int id) {
    for (std::size_t i = map.keyframes.size(); i-- > 0;)
        if (map.keyframes[i].id == id) return i;
    throw Error("slam: unknown keyframe id " + std::to_string(id));
}

// Recompute every edge weight as the exact shared MapPoint count.
inline void rebuild_covisibility(SlamMap& map) {
    map.graph.nodes.clear();
    map.graph.edges.clear();
    std::vector<std::pair<int, std::set<int>>> sets;
    sets.reserve(map.keyframes.size());
    for (const Keyframe& kf : map.keyframes) {
        map.graph.nodes.insert(kf.id);
        std::set<int> pts;
        for (const auto& [kp, mp] : kf.map_point_links) pts.insert(mp);
        sets.emplace_back(kf.id, std::move(pts));
    }
    for (std::size_t a = 0; a < sets.size(); ++a)
        for (std::size_t b = a + 1; b < sets.size(); ++b) {
            int shared = 0;
            for (int id : sets[a].second) shared += sets[b].second.count(id);
            if (shared > 0)
                map.graph.edges[{std::min(sets[a].first, sets[b].first),
                                 std::max(sets[a].first, sets[b].first)}] = shared;
        }
}

// Fundamental matrix between two posed cameras: x_b^T F x_a = 0 in pixels.
inline Mat3 fundamental_from_poses(const CameraIntrinsics& k, const CameraPose& a,
                                   const CameraPose& b) {
    const CameraPose rel = b.compose(a.inverse());
    const Mat3 e = skew(rel.translation) * rel.rotation;
    const Mat3 km = k.matrix();
    return Mat3(km.transpose().inverse() * e * km.inverse());
}

// Descriptor of the most recent observation, used as the match template.
inline const BinaryDescriptor& representative_descriptor(const SlamMap& map, const MapPoint& mp) {
    const auto& [kf_id, kp_idx] = *mp.observations.rbegin();
    return map.keyframes[keyframe_index(map, kf_id)].descriptors[kp_idx];
}

inline Vec3 dehomogenize(const HomPoint3& x) {
    if (std::abs(x.w()) < 1e-12) throw ParallelRaysError();
    return Vec3(x.head<3>() / x.w());
}

// Largest angle subtended at x by any pair of camera centers. Low angles mean
// the triangulation smears along the rays no matter how small the residuals.
inline double max_ray_angle(const std::vector<Vec3>& centers, const Vec3& x) {
    double best = 0.0;
    for (std::size_t a = 0; a < centers.size(); ++a)
        for (std::size_t b = a + 1; b < centers.size(); ++b) {
            const Vec3 ra = (centers[a] - x).normalized();
            const Vec3 rb = (centers[b] - x).normalized();
            best = std::max(best, std::acos(std::clamp(ra.dot(rb), -1.0, 1.0)));
        }
    return best;
}

// Second-pass matching for tracking: project each candidate MapPoint with the
// current pose estimate and search frame keypoints inside a small window,
// keeping the best descriptor within the hamming budget. Recovers the many
// matches the mutual-ratio pass loses against a large candidate set.
inline std::vector<Match> guided_match(const std::vector<Vec3>& positions,
                                       const std::vector<BinaryDescriptor>& desc,
                                       const FrameFeatures& frame, const CameraPose& pose,
                                       const SlamConfig& cfg) {
    std::vector<Match> out;
    if (frame.keypoints.empty()) return out;
    const double cell = std::max(1.0, cfg.guided_radius_px);
    std::map<std::pair<int, int>, std::vector<std::size_t>> grid;
    for (std::size_t j = 0; j < frame.keypoints.size(); ++j) {
        const Vec2& p = frame.keypoints[j].position;
        grid[{static_cast<int>(std::floor(p.x() / cell)),
              static_cast<int>(std::floor(p.y() / cell))}].push_back(j);
    }
    std::map<std::size_t, std::size_t> best_for_kp;  // keypoint -> index into out
    for (std::size_t i = 0; i < positions.size(); ++i) {
        const ProjectResult r = project(cfg.intrinsics, pose, positions[i]);
        if (r.behind) continue;
        const int cx = static_cast<int>(std::floor(r.pixel.x() / cell));
        const int cy = static_cast<int>(std::floor(r.pixel.y() / cell));
        int best = cfg.guided_max_hamming + 1, second = best;
        std::size_t best_j = 0;
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const auto it = grid.find({cx + dx, cy + dy});
                if (it == grid.end()) continue;
                for (std::size_t j : it->second) {
                    if ((frame.keypoints[j].position - r.pixel).norm() > cfg.guided_radius_px)
                        continue;
                    const int d = hamming_distance(desc[i], frame.descriptors[j]);
                    if (d < best) {
                        second = best;
                        best = d;
                        best_j = j;
                    } else if (d < second) {
                        second = d;
                    }
                }
            }
        if (best > cfg.guided_max_hamming) continue;
        if (second <= cfg.guided_max_hamming && best > 0.9 * second) continue;
        Match m;
        m.index_a = i;
        m.index_b = best_j;
        m.hamming = best;
        const auto prev = best_for_kp.find(best_j);
        if (prev == best_for_kp.end()) {
            best_for_kp[best_j] = out.size();
            out.push_back(m);
        } else if (m.hamming < out[prev->second].hamming) {
            out[prev->second] = m;
        }
    }
    std::sort(out.begin(), out.end(),
              [](const Match& a, const Match& b) { return a.index_a < b.index_a; });
    return out;
}

// Keep-mask for the k-NN statistical filter: a point survives when its mean
// neighbor distance stays below mean + mult * stddev of that statistic.
inline std::vector<char> statistical_keep_mask(const std::vector<Vec3>& pts, int k, double mult) {
    const std::size_t n = pts.size();
    std::vector<char> keep(n, 1);
    if (n <= static_cast<std::size_t>(k) + 1 || k < 1) return keep;
    const KdTree3 tree(pts);
    std::vector<double> stat(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto nn = tree.knn(pts[i], static_cast<std::size_t>(k) + 1);  // includes self
        double sum = 0.0;
        std::size_t used = 0;
        for (const auto& [d2, idx] : nn) {
            if (idx == i) continue;
            sum += std::sqrt(d2);
            ++used;
        }
        stat[i] = used ? sum / static_cast<double>(used) : 0.0;
    }
    double mean = 0.0;
    for (double s : stat) mean += s;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double s : stat) var += (s - mean) * (s - mean);
    var /= static_cast<double>(n);
    const double cutoff = mean + mult * std::sqrt(var);
    for (std::size_t i = 0; i < n; ++i) keep[i] = stat[i] <= cutoff;
    return keep;
}

}  // namespace detail

// Fraction of points farther from the centroid than mult times the median
// distance. Used to reject sub-clouds produced by degenerate geometry.
inline double dense_outlier_fraction(const std::vector<Vec3>& pts, double median_mult = 5.0) {
    if (pts.empty()) return 0.0;
    Vec3 c = Vec3::Zero();
    for (const Vec3& p : pts) c += p;
    c /= static_cast<double>(pts.size());
    std::vector<double> d(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) d[i] = (pts[i] - c).norm();
    std::vector<double> tmp = d;
    std::nth_element(tmp.begin(), tmp.begin() + tmp.size() / 2, tmp.end());
    const double median = tmp[tmp.size() / 2];
    if (median < 1e-300) return 0.0;
    std::size_t far = 0;
    for (double v : d)
        if (v > median_mult * median) ++far;
    return static_cast<double>(far) / static_cast<double>(pts.size());
}

// Throws unless the map satisfies its structural contracts: monotone ids,
// identity first pose, link/observation reciprocity, and exact covisibility
// weights.
inline void check_map_integrity(const SlamMap& map) {
    for (std::size_t i = 1; i < map.keyframes.size(); ++i)
        if (map.keyframes[i].id <= map.keyframes[i - 1].id)
            throw Error("integrity: keyframe ids not strictly increasing");
    if (!map.keyframes.empty()) {
        const CameraPose& p0 = map.keyframes.front().pose;
        if (p0.rotation != Mat3::Identity() || p0.translation != Vec3::Zero())
            throw Error("integrity: first keyframe pose is not the identity");
    }
    for (const Keyframe& kf : map.keyframes) {
        for (const auto& [kp, mp_id] : kf.map_point_links) {
            if (kp >= kf.keypoints.size()) throw Error("integrity: link to missing keypoint");
            const auto it = map.map_points.find(mp_id);
            if (it == map.map_points.end()) throw Error("integrity: link to missing map point");
            if (!it->second.observations.count({kf.id, kp}))
                throw Error("integrity: map point does not back-reference its link");
        }
    }
    for (const auto& [id, mp] : map.map_points) {
        if (mp.id != id) throw Error("integrity: map point id mismatch");
        if (mp.observations.size() < 2) throw Error("integrity: map point with < 2 observations");
        for (const auto& [kf_id, kp] : mp.observations) {
            const Keyframe& kf = map.keyframes[detail::keyframe_index(map, kf_id)];
            const auto it = kf.map_point_links.find(kp);
            if (it == kf.map_point_links.end() || it->second != id)
                throw Error("integrity: observation without matching link");
        }
    }
    std::set<int> ids;
    for (const Keyframe& kf : map.keyframes) ids.insert(kf.id);
    if (ids != map.graph.nodes) throw Error("integrity: graph nodes differ from keyframe ids");
    for (const Keyframe& a : map.keyframes)
        for (const Keyframe& b : map.keyframes) {
            if (a.id >= b.id) continue;
            std::set<int> pa;
            for (const auto& [kp, mp] : a.map_point_links) pa.insert(mp);
            int shared = 0;
            for (const auto& [kp, mp] : b.map_point_links) shared += pa.count(mp);
            if (map.graph.weight(a.id, b.id) != shared ||
                map.graph.weight(b.id, a.id) != shared)
                throw Error("integrity: covisibility weight is not the shared point count");
        }
    for (std::size_t i = 1; i < map.trajectory.size(); ++i)
        if (map.trajectory[i].frame_id <= map.trajectory[i - 1].frame_id)
            throw Error("integrity: trajectory frame ids not strictly increasing");
}

// Bootstrap from the first frame pair with enough parallax: pairs are tried
// in order and rejected pairs are skipped, so degenerate leading frames delay
// rather than poison the map. The interior never presents a usable planar
// structure, so only the fundamental-matrix model is fit. Throws when no
// pair over the whole sequence initializes.
inline SlamMap initialize_map(const std::vector<FrameFeatures>& frames, const SlamConfig& cfg) {
    if (frames.size() < 2) throw Error("initialize_map: need at least 2 frames");
    std::string last_reason = "no candidate pair had enough matches";

    for (std::size_t ref = 0; ref + 1 < frames.size(); ++ref) {
        const std::size_t last_cand =
            std::min(frames.size() - 1, ref + static_cast<std::size_t>(std::max(1, cfg.init_window)));
        for (std::size_t cand = ref + 1; cand <= last_cand; ++cand) {
            const auto matches =
                match_descriptors(frames[ref].descriptors, frames[cand].descriptors, cfg.match_ratio);
            if (matches.size() < static_cast<std::size_t>(std::max(8, cfg.min_init_inliers))) {
                last_reason = "too few descriptor matches";
                continue;
            }
            std::vector<Correspondence> corrs(matches.size());
            for (std::size_t i = 0; i < matches.size(); ++i)
                corrs[i] = {frames[ref].keypoints[matches[i].index_a].position,
                            frames[cand].keypoints[matches[i].index_b].position};

            TwoViewGeometry g;
            try {
                g = ransac_two_view(corrs, cfg.intrinsics, cfg.ransac_iterations,
                                    cfg.ransac_threshold_px, cfg.seed);
            } catch (const DegenerateMotionError& e) {
                last_reason = e.what();
                continue;
            } catch (const NoConsensusError& e) {
                last_reason = e.what();
                continue;
            }
            if (g.inliers.size() < static_cast<std::size_t>(cfg.min_init_inliers)) {
                last_reason = "too few geometric inliers";
                continue;
            }

            const CameraPose identity;
            const ProjectionMatrix p1 = compose_camera_matrix(cfg.intrinsics, identity);
            const ProjectionMatrix p2 = compose_camera_matrix(cfg.intrinsics, g.pose2);
            struct Seed {
                std::size_t kp1, kp2;
                Vec3 x;
            };
            std::vector<Seed> seeds;
            for (std::size_t ii : g.inliers) {
                try {
                    const Vec3 x = detail::dehomogenize(
                        triangulate_nview({p1, p2}, {corrs[ii].x1, corrs[ii].x2}));
                    const ProjectResult r1 = project(cfg.intrinsics, identity, x);
                    const ProjectResult r2 = project(cfg.intrinsics, g.pose2, x);
                    if (r1.behind || r2.behind) continue;
                    if ((r1.pixel - corrs[ii].x1).norm() > 2.0 * cfg.ransac_threshold_px) continue;
                    if ((r2.pixel - corrs[ii].x2).norm() > 2.0 * cfg.ransac_threshold_px) continue;
                    seeds.push_back({matches[ii].index_a, matches[ii].index_b, x});
                } catch (const ParallelRaysError&) {
                    continue;
                }
            }
            if (seeds.size() < static_cast<std::size_t>(cfg.min_init_inliers)) {
                last_reason = "too few triangulated points";
                continue;
            }

            SlamMap map;
            map.config = cfg;
            Keyframe kf0;
            kf0.id = 0;
            kf0.frame_id = frames[ref].frame_id;
            kf0.keypoints = frames[ref].keypoints;
            kf0.descriptors = frames[ref].descriptors;
            Keyframe kf1;
            kf1.id = 1;
            kf1.frame_id = frames[cand].frame_id;
            kf1.pose = g.pose2;
            kf1.keypoints = frames[cand].keypoints;
            kf1.descriptors = frames[cand].descriptors;

            BaProblem prob;
            prob.intrinsics = cfg.intrinsics;
            prob.poses = {kf0.pose, kf1.pose};
            prob.points.reserve(seeds.size());
            for (std::size_t i = 0; i < seeds.size(); ++i) {
                prob.points.push_back(seeds[i].x);
                prob.observations.push_back({0, static_cast<int>(i),
                                             frames[ref].keypoints[seeds[i].kp1].position});
                prob.observations.push_back({1, static_cast<int>(i),
                                             frames[cand].keypoints[seeds[i].kp2].position});
            }
            BaOptions opt;
            opt.mode = BaMode::full;
            opt.fixed_poses = 1;
            opt.huber = true;
            opt.max_iters = 50;
            ba_optimize(prob, opt);
            kf1.pose = prob.poses[1];

            for (std::size_t i = 0; i < seeds.size(); ++i) {
                const Vec3& x = prob.points[i];
                const ProjectResult r1 = project(cfg.intrinsics, kf0.pose, x);
                const ProjectResult r2 = project(cfg.intrinsics, kf1.pose, x);
                if (r1.behind || r2.behind) continue;
                if ((r1.pixel - frames[ref].keypoints[seeds[i].kp1].position).norm() >
                    2.0 * cfg.ransac_threshold_px)
                    continue;
                if ((r2.pixel - frames[cand].keypoints[seeds[i].kp2].position).norm() >
                    2.0 * cfg.ransac_threshold_px)
                    continue;
                MapPoint mp;
                mp.id = map.next_map_point_id++;
                mp.position = x;
                mp.observations = {{0, seeds[i].kp1}, {1, seeds[i].kp2}};
                kf0.map_point_links[seeds[i].kp1] = mp.id;
                kf1.map_point_links[seeds[i].kp2] = mp.id;
                map.map_points.emplace(mp.id, std::move(mp));
            }
            if (map.map_points.size() < static_cast<std::size_t>(cfg.min_init_inliers)) {
                last_reason = "too few points survived refinement";
                continue;
            }

            map.keyframes = {std::move(kf0), std::move(kf1)};
            map.next_keyframe_id = 2;
            detail::rebuild_covisibility(map);
            for (std::size_t f = 0; f <= cand; ++f) {
                TrajectoryEntry e;
                e.frame_id = frames[f].frame_id;
                if (f == ref) {
                    e.pose = CameraPose{};
                    e.tracked = true;
                } else if (f == cand) {
                    e.pose = map.keyframes[1].pose;
                    e.tracked = true;
                }
                map.trajectory.push_back(e);
            }
            map.state = SlamState::tracking;
            return map;
        }
    }
    throw Error("initialize_map: initialization failed: " + last_reason);
}

struct TrackResult {
    bool lost = false;
    bool keyframe_inserted = false;
    int keyframe_id = -1;
    std::size_t matches = 0;
    std::size_t inliers = 0;
    CameraPose pose;
};

// Localize one frame against the MapPoints visible from the newest keyframe
// and its covisibility neighborhood, then decide whether it becomes a
// keyframe. Losing track is sticky: the run halts rather than relocalize.
inline TrackResult track_frame(SlamMap& map, const FrameFeatures& frame) {
    if (map.state == SlamState::initializing)
        throw Error("track_frame: map is not initialized");
    if (map.state == SlamState::lost) throw Error("track_frame: tracking already lost");
    const SlamConfig& cfg = map.config;
    TrackResult res;

    const Keyframe& ref_kf = map.keyframes.back();
    std::set<int> visible_kfs = {ref_kf.id};
    for (int n : map.graph.neighbors(ref_kf.id)) visible_kfs.insert(n);

    std::vector<int> mp_ids;
    std::vector<BinaryDescriptor> mp_desc;
    for (const auto& [id, mp] : map.map_points) {
        bool visible = false;
        for (const auto& [kf_id, kp] : mp.observations)
            if (visible_kfs.count(kf_id)) {
                visible = true;
                break;
            }
        if (!visible) continue;
        mp_ids.push_back(id);
        mp_desc.push_back(detail::representative_descriptor(map, mp));
    }

    CameraPose last_pose = ref_kf.pose;
    for (std::size_t i = map.trajectory.size(); i-- > 0;)
        if (map.trajectory[i].tracked) {
            last_pose = map.trajectory[i].pose;
            break;
        }

    const auto go_lost = [&]() {
        map.state = SlamState::lost;
        map.lost_at_frame = frame.frame_id;
        map.trajectory.push_back({frame.frame_id, last_pose, false});
        res.lost = true;
        res.pose = last_pose;
        return res;
    };

    // Pose-only refinement over a match set; the previous keyframe rides
    // along as the fixed gauge anchor required by the optimizer.
    std::vector<Vec3> mp_pos(mp_ids.size());
    for (std::size_t i = 0; i < mp_ids.size(); ++i)
        mp_pos[i] = map.map_points.at(mp_ids[i]).position;
    const auto refine_pose = [&](const std::vector<Match>& ms, const CameraPose& start) {
        BaProblem prob;
        prob.intrinsics = cfg.intrinsics;
        prob.poses = {ref_kf.pose, start};
        prob.points.reserve(ms.size());
        for (std::size_t i = 0; i < ms.size(); ++i) {
            prob.points.push_back(mp_pos[ms[i].index_a]);
            prob.observations.push_back({1, static_cast<int>(i),
                                         frame.keypoints[ms[i].index_b].position});
        }
        BaOptions opt;
        opt.mode = BaMode::poses_only;
        opt.fixed_poses = 1;
        opt.huber = true;
        opt.max_iters = 30;
        ba_optimize(prob, opt);
        return prob.poses[1];
    };

    // First pass: plain descriptor matching seeds the pose. Second pass:
    // project the candidates with that pose and re-match inside a window.
    const auto first = match_descriptors(mp_desc, frame.descriptors, cfg.match_ratio);
    CameraPose pose_seed = last_pose;
    if (first.size() >= static_cast<std::size_t>(cfg.min_track_matches))
        pose_seed = refine_pose(first, last_pose);
    const auto matches = detail::guided_match(mp_pos, mp_desc, frame, pose_seed, cfg);
    res.matches = matches.size();
    if (matches.size() < static_cast<std::size_t>(cfg.min_track_matches)) return go_lost();
    const CameraPose pose = refine_pose(matches, pose_seed);

    std::vector<std::size_t> inlier_matches;
    for (std::size_t i = 0; i < matches.size(); ++i) {
        const ProjectResult r = project(cfg.intrinsics, pose, mp_pos[matches[i].index_a]);
        if (r.behind) continue;
        if ((r.pixel - frame.keypoints[matches[i].index_b].position).norm() <= cfg.track_inlier_px)
            inlier_matches.push_back(i);
    }
    res.inliers = inlier_matches.size();
    if (inlier_matches.size() < static_cast<std::size_t>(cfg.min_track_matches)) return go_lost();

    res.pose = pose;
    map.trajectory.push_back({frame.frame_id, pose, true});

    // Keyframe decision: the reference keyframe's points are escaping view,
    // or the baseline since it has built up real parallax.
    std::size_t tracked_from_ref = 0;
    std::vector<double> parallax;
    parallax.reserve(inlier_matches.size());
    const Vec3 c_ref = ref_kf.pose.camera_center();
    const Vec3 c_cur = pose.camera_center();
    std::set<int> ref_links;
    for (const auto& [kp, mp] : ref_kf.map_point_links) ref_links.insert(mp);
    for (std::size_t i : inlier_matches) {
        const int mp_id = mp_ids[matches[i].index_a];
        if (ref_links.count(mp_id)) ++tracked_from_ref;
        const Vec3& x = map.map_points.at(mp_id).position;
        const Vec3 a = (x - c_ref).normalized();
        const Vec3 b = (x - c_cur).normalized();
        parallax.push_back(std::acos(std::clamp(a.dot(b), -1.0, 1.0)));
    }
    const double ratio = ref_links.empty()
                             ? 0.0
                             : static_cast<double>(tracked_from_ref) /
                                   static_cast<double>(ref_links.size());
    std::nth_element(parallax.begin(), parallax.begin() + parallax.size() / 2, parallax.end());
    const double median_parallax = parallax.empty() ? 0.0 : parallax[parallax.size() / 2];

    if (ratio < cfg.keyframe_tracked_ratio || median_parallax > cfg.keyframe_parallax_rad) {
        Keyframe kf;
        kf.id = map.next_keyframe_id++;
        kf.frame_id = frame.frame_id;
        kf.pose = pose;
        kf.keypoints = frame.keypoints;
        kf.descriptors = frame.descriptors;
        for (std::size_t i : inlier_matches) {
            const int mp_id = mp_ids[matches[i].index_a];
            const std::size_t kp = matches[i].index_b;
            if (kf.map_point_links.count(kp)) continue;
            kf.map_point_links[kp] = mp_id;
            map.map_points.at(mp_id).observations.insert({kf.id, kp});
        }
        map.keyframes.push_back(std::move(kf));
        detail::rebuild_covisibility(map);
        res.keyframe_inserted = true;
        res.keyframe_id = map.keyframes.back().id;
    }
    return res;
}

struct ProcessResult {
    int new_points = 0;
    int new_observations = 0;
    bool culled = false;
};

namespace detail {

// Remove a keyframe and every observation it contributed. Map points left
// with fewer than two observations are deleted outright.
inline void erase_keyframe(SlamMap& map, int kf_id) {
    const std::size_t ki = keyframe_index(map, kf_id);
    std::vector<int> touched;
    for (const auto& [kp, mp_id] : map.keyframes[ki].map_point_links) {
        auto it = map.map_points.find(mp_id);
        if (it == map.map_points.end()) continue;
        it->second.observations.erase({kf_id, kp});
        touched.push_back(mp_id);
    }
    map.keyframes.erase(map.keyframes.begin() + static_cast<std::ptrdiff_t>(ki));
    for (int mp_id : touched) {
        auto it = map.map_points.find(mp_id);
        if (it == map.map_points.end() || it->second.observations.size() >= 2) continue;
        for (const auto& [okf, okp] : it->second.observations) {
            Keyframe& kf = map.keyframes[keyframe_index(map, okf)];
            kf.map_point_links.erase(okp);
        }
        map.map_points.erase(it);
    }
    rebuild_covisibility(map);
}

}  // namespace detail

// Local mapping for a freshly inserted keyframe: triangulate new points
// against connected keyframes, refresh edge weights, bundle-adjust the
// covisibility window, then drop the keyframe again if it turned out to be
// redundant or nearly unmatched.
inline ProcessResult process_keyframe(SlamMap& map, int keyframe_id) {
    const SlamConfig& cfg = map.config;
    ProcessResult res;
    std::size_t ki = detail::keyframe_index(map, keyframe_id);

    // 1. Extend the map from unmatched descriptors.
    {
        const std::vector<int> nbs = map.graph.neighbors(keyframe_id);
        for (int nb_id : nbs) {
            Keyframe& kf = map.keyframes[ki];
            const std::size_t ni = detail::keyframe_index(map, nb_id);
            Keyframe& nb = map.keyframes[ni];

            std::vector<std::size_t> un;
            std::vector<BinaryDescriptor> und;
            for (std::size_t i = 0; i < kf.keypoints.size(); ++i)
                if (!kf.map_point_links.count(i)) {
                    un.push_back(i);
                    und.push_back(kf.descriptors[i]);
                }
            if (un.empty()) break;

            const Mat3 f = detail::fundamental_from_poses(cfg.intrinsics, kf.pose, nb.pose);
            const auto ms = match_descriptors(und, nb.descriptors, cfg.match_ratio);
            const ProjectionMatrix pm_kf = compose_camera_matrix(cfg.intrinsics, kf.pose);
            const ProjectionMatrix pm_nb = compose_camera_matrix(cfg.intrinsics, nb.pose);
            for (const Match& m : ms) {
                const std::size_t i = un[m.index_a];
                const std::size_t j = m.index_b;
                const Vec2 x1 = kf.keypoints[i].position;
                const Vec2 x2 = nb.keypoints[j].position;
                if (sampson_distance(f, x1, x2) > cfg.ransac_threshold_px) continue;
                const auto linked = nb.map_point_links.find(j);
                if (linked != nb.map_point_links.end()) {
                    // Extend an existing point into this keyframe.
                    MapPoint& mp = map.map_points.at(linked->second);
                    bool seen = false;
                    for (const auto& [okf, okp] : mp.observations)
                        if (okf == kf.id) seen = true;
                    if (seen) continue;
                    const ProjectResult r = project(cfg.intrinsics, kf.pose, mp.position);
                    if (r.behind || (r.pixel - x1).norm() > cfg.track_inlier_px) continue;
                    mp.observations.insert({kf.id, i});
                    kf.map_point_links[i] = mp.id;
                    ++res.new_observations;
                } else {
                    try {
                        const Vec3 x =
                            detail::dehomogenize(triangulate_nview({pm_kf, pm_nb}, {x1, x2}));
                        const ProjectResult r1 = project(cfg.intrinsics, kf.pose, x);
                        const ProjectResult r2 = project(cfg.intrinsics, nb.pose, x);
                        if (r1.behind || r2.behind) continue;
                        if ((r1.pixel - x1).norm() > cfg.track_inlier_px) continue;
                        if ((r2.pixel - x2).norm() > cfg.track_inlier_px) continue;
                        MapPoint mp;
                        mp.id = map.next_map_point_id++;
                        mp.position = x;
                        mp.observations = {{kf.id, i}, {nb.id, j}};
                        kf.map_point_links[i] = mp.id;
                        nb.map_point_links[j] = mp.id;
                        map.map_points.emplace(mp.id, std::move(mp));
                        ++res.new_points;
                    } catch (const ParallelRaysError&) {
                        continue;
                    }
                }
            }
        }
    }

    // 2. Edge weights reflect the new links.
    detail::rebuild_covisibility(map);

    // 3. Bundle-adjust the covisibility window around this keyframe.
    {
        std::vector<std::pair<int, int>> weighted;  // (weight, id)
        for (int nb : map.graph.neighbors(keyframe_id))
            weighted.push_back({map.graph.weight(keyframe_id, nb), nb});
        std::sort(weighted.begin(), weighted.end(), [](const auto& a, const auto& b) {
            return a.first != b.first ? a.first > b.first : a.second < b.second;
        });
        std::vector<int> window = {keyframe_id};
        for (const auto& [w, id] : weighted) {
            if (static_cast<int>(window.size()) >= cfg.local_window) break;
            window.push_back(id);
        }
        std::sort(window.begin(), window.end());

        if (window.size() >= 2) {
            std::map<int, int> pose_slot;
            BaProblem prob;
            prob.intrinsics = cfg.intrinsics;
            for (int id : window) {
                pose_slot[id] = static_cast<int>(prob.poses.size());
                prob.poses.push_back(map.keyframes[detail::keyframe_index(map, id)].pose);
            }
            // Points with at least two observations inside the window.
            std::map<int, int> point_slot;
            for (int id : window) {
                const Keyframe& kf = map.keyframes[detail::keyframe_index(map, id)];
                for (const auto& [kp, mp_id] : kf.map_point_links) {
                    if (point_slot.count(mp_id)) continue;
                    const MapPoint& mp = map.map_points.at(mp_id);
                    int inside = 0;
                    for (const auto& [okf, okp] : mp.observations) inside += pose_slot.count(okf);
                    if (inside >= 2) point_slot[mp_id] = -1;
                }
            }
            int next = 0;
            for (auto& [mp_id, slot] : point_slot) {
                slot = next++;
                prob.points.push_back(map.map_points.at(mp_id).position);
                for (const auto& [okf, okp] : map.map_points.at(mp_id).observations) {
                    const auto ps = pose_slot.find(okf);
                    if (ps == pose_slot.end()) continue;
                    const Keyframe& kf = map.keyframes[detail::keyframe_index(map, okf)];
                    prob.observations.push_back({ps->second, slot, kf.keypoints[okp].position});
                }
            }
            if (!prob.points.empty()) {
                BaOptions opt;
                opt.mode = BaMode::full;
                opt.fixed_poses = std::min<int>(2, static_cast<int>(window.size()) - 1);
                opt.huber = true;
                opt.renormalize_scale = false;  // the gauge was set at initialization
                opt.max_iters = 20;
                ba_optimize(prob, opt);
                for (int id : window)
                    map.keyframes[detail::keyframe_index(map, id)].pose =
                        prob.poses[pose_slot[id]];
                for (const auto& [mp_id, slot] : point_slot)
                    map.map_points.at(mp_id).position = prob.points[slot];
            }
        }
    }

    // 4. Cull the keyframe when it adds nothing: nearly all of its points are
    // already seen by three other keyframes, or it barely matched at all.
    {
        ki = detail::keyframe_index(map, keyframe_id);
        const Keyframe& kf = map.keyframes[ki];
        std::size_t redundant = 0;
        for (const auto& [kp, mp_id] : kf.map_point_links) {
            const MapPoint& mp = map.map_points.at(mp_id);
            std::size_t others = 0;
            for (const auto& [okf, okp] : mp.observations)
                if (okf != kf.id) ++others;
            if (others >= 3) ++redundant;
        }
        const bool lacks_matches =
            kf.map_point_links.size() < static_cast<std::size_t>(cfg.min_keyframe_links);
        const bool redundant_kf =
            !kf.map_point_links.empty() &&
            static_cast<double>(redundant) >=
                cfg.cull_redundancy * static_cast<double>(kf.map_point_links.size());
        if ((lacks_matches || redundant_kf) && map.keyframes.size() > 2) {
            detail::erase_keyframe(map, keyframe_id);
            res.culled = true;
        }
    }
    return res;
}

struct DenseCloud {
    OrientedPointCloud cloud;          // points plus per-point source camera center
    std::vector<int> source_keyframe;  // keyframe id per point
    std::vector<std::size_t> per_keyframe_count;  // slot sizes, ascending keyframe id
};

// Multi-view densification at fixed poses. Every keyframe anchors one slot:
// its dense features are matched against up to max_views-1 later connected
// keyframes, triangulated, screened by the centroid-distance outlier rule,
// and denoised with the k-NN statistical filter. Slots whose geometry is
// degenerate stay empty; the loop always continues.
inline DenseCloud densify_map(const SlamMap& map, int max_views,
                              const std::vector<GrayImage>& frames) {
    if (max_views <= 2) throw Error("densify_map: max views must exceed 2");
    const SlamConfig& cfg = map.config;
    DenseCloud out;

    std::map<int, FrameFeatures> cache;
    const auto dense_features = [&](const Keyframe& kf) -> const FrameFeatures& {
        auto it = cache.find(kf.id);
        if (it == cache.end()) {
            if (kf.frame_id < 0 || kf.frame_id >= static_cast<int>(frames.size()))
                throw Error("densify_map: keyframe frame index out of range");
            it = cache.emplace(kf.id, extract_features(frames[kf.frame_id], kf.frame_id, cfg, true))
                     .first;
        }
        return it->second;
    };

    for (const Keyframe& kf : map.keyframes) {
        std::vector<int> later;
        for (int nb : map.graph.neighbors(kf.id))
            if (nb > kf.id) later.push_back(nb);
        const int n_cv = static_cast<int>(later.size());
        const int m_v = std::min(max_views, n_cv);
        if (m_v < 2) {
            out.per_keyframe_count.push_back(0);
            continue;
        }

        std::vector<int> chosen;
        if (cfg.dense_view_mode == 0) {
            // Nearest later keyframes by id.
            chosen.assign(later.begin(), later.begin() + (m_v - 1));
        } else {
            // Partner views spread over the available baselines: bucket the
            // connected later keyframes by distance from this one and take
            // the strongest covisibility edge per bucket.
            struct Cand {
                double baseline;
                int weight;
                int id;
            };
            std::vector<Cand> cands;
            const Vec3 c_ref = kf.pose.camera_center();
            for (int id : later)
                cands.push_back(
                    {(map.keyframes[detail::keyframe_index(map, id)].pose.camera_center() - c_ref)
                         .norm(),
                     map.graph.weight(kf.id, id), id});
            std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
                return a.baseline != b.baseline ? a.baseline < b.baseline : a.id < b.id;
            });
            const int picks = m_v - 1;
            for (int bucket = 0; bucket < picks; ++bucket) {
                const std::size_t lo = (cands.size() * bucket) / picks;
                const std::size_t hi = (cands.size() * (bucket + 1)) / picks;
                int best_id = -1, best_w = -1;
                for (std::size_t c = lo; c < hi && c < cands.size(); ++c)
                    if (cands[c].weight > best_w) {
                        best_w = cands[c].weight;
                        best_id = cands[c].id;
                    }
                if (best_id >= 0) chosen.push_back(best_id);
            }
            std::sort(chosen.begin(), chosen.end());
        }

        std::vector<const Keyframe*> views = {&kf};
        for (int id : chosen) views.push_back(&map.keyframes[detail::keyframe_index(map, id)]);

        const FrameFeatures& fref = dense_features(kf);
        std::vector<ProjectionMatrix> pms(views.size());
        for (std::size_t v = 0; v < views.size(); ++v)
            pms[v] = compose_camera_matrix(cfg.intrinsics, views[v]->pose);

        std::vector<std::vector<std::pair<std::size_t, Vec2>>> tracks(fref.keypoints.size());
        for (std::size_t v = 1; v < views.size(); ++v) {
            const FrameFeatures& fv = dense_features(*views[v]);
            const Mat3 f = detail::fundamental_from_poses(cfg.intrinsics, kf.pose, views[v]->pose);
            for (const Match& m : match_descriptors(fref.descriptors, fv.descriptors,
                                                    cfg.dense_match_ratio)) {
                const Vec2& x1 = fref.keypoints[m.index_a].position;
                const Vec2& x2 = fv.keypoints[m.index_b].position;
                if (sampson_distance(f, x1, x2) > cfg.dense_inlier_px) continue;
                tracks[m.index_a].push_back({v, x2});
            }
        }

        std::vector<Vec3> pts;
        for (std::size_t i = 0; i < tracks.size(); ++i) {
            if (tracks[i].empty()) continue;
            std::vector<ProjectionMatrix> ps = {pms[0]};
            std::vector<Vec2> xs = {fref.keypoints[i].position};
            for (const auto& [v, px] : tracks[i]) {
                ps.push_back(pms[v]);
                xs.push_back(px);
            }
            try {
                const Vec3 x = detail::dehomogenize(triangulate_nview(ps, xs));
                bool ok = true;
                const ProjectResult r0 = project(cfg.intrinsics, kf.pose, x);
                ok = !r0.behind && (r0.pixel - xs[0]).norm() <= cfg.dense_inlier_px;
                std::vector<Vec3> centers = {kf.pose.camera_center()};
                for (std::size_t t = 0; ok && t < tracks[i].size(); ++t) {
                    const ProjectResult r =
                        project(cfg.intrinsics, views[tracks[i][t].first]->pose, x);
                    ok = !r.behind && (r.pixel - tracks[i][t].second).norm() <= cfg.dense_inlier_px;
                    centers.push_back(views[tracks[i][t].first]->pose.camera_center());
                }
                if (ok && detail::max_ray_angle(centers, x) <
                              cfg.dense_min_triangulation_deg * std::numbers::pi / 180.0)
                    ok = false;
                if (ok) pts.push_back(x);
            } catch (const ParallelRaysError&) {
                continue;
            }
        }

        if (pts.empty() ||
            dense_outlier_fraction(pts, cfg.outlier_median_mult) > cfg.outlier_fraction_max) {
            out.per_keyframe_count.push_back(0);
            continue;
        }
        const auto keep = detail::statistical_keep_mask(pts, cfg.denoise_k, cfg.denoise_stddev_mult);

        // Sub-cloud lives in the keyframe camera frame until concatenation.
        const CameraPose to_world = kf.pose.inverse();
        const Vec3 cam_center = kf.pose.camera_center();
        std::size_t added = 0;
        for (std::size_t i = 0; i < pts.size(); ++i) {
            if (!keep[i]) continue;
            const Vec3 local = kf.pose.apply(pts[i]);
            out.cloud.points.push_back(to_world.apply(local));
            out.cloud.source_camera.push_back(cam_center);
            out.source_keyframe.push_back(kf.id);
            ++added;
        }
        out.per_keyframe_count.push_back(added);
    }
    return out;
}

// Per-frame poses as "frame_id tx ty tz qw qx qy qz" with 17 significant
// digits, one line per processed frame.
inline void write_trajectory(const std::vector<TrajectoryEntry>& entries,
                             const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("write_trajectory: cannot open " + path);
    char buf[256];
    for (const TrajectoryEntry& e : entries) {
        const Vec4 q = quaternion_from_rotation(e.pose.rotation);
        std::snprintf(buf, sizeof buf, "%d %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n",
                      e.frame_id, e.pose.translation.x(), e.pose.translation.y(),
                      e.pose.translation.z(), q(0), q(1), q(2), q(3));
        out << buf;
    }
    if (!out) throw Error("write_trajectory: write failed on " + path);
}

}  // namespace recon
