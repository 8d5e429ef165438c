// Synthetic tube-interior scenes: swept ground-truth meshes with seeded bump
// relief, jittered interior camera paths, and a spotlight ray-cast renderer.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <utility>
#include <vector>

#include "recon/geometry.hpp"
#include "recon/image.hpp"
#include "recon/kdtree.hpp"
#include "recon/mesh.hpp"
#include "recon/parallel.hpp"
#include "recon/prng.hpp"

namespace recon {

struct TubeSpec {
    std::vector<Vec3> centerline;        // spline control points, at least 2
    std::vector<double> radius = {1.0};  // profile control values; single value = constant
    std::uint64_t texture_seed = 1;
    double bump_amplitude = 0.0;         // wall relief as a fraction of the local radius
};

// One entry of the dense centerline table carried with the ground truth.
struct CenterlineSample {
    double u = 0.0;  // spline parameter in [0, 1]
    double s = 0.0;  // arc length from the start
    Vec3 point = Vec3::Zero();
    Vec3 tangent = Vec3::UnitZ();
    Vec3 normal = Vec3::UnitX();  // rotation-minimizing frame vector
    double radius = 1.0;
};

struct GroundTruth {
    TriangleMesh mesh;
    double centerline_length = 0.0;
    std::vector<CenterlineSample> centerline;  // ascending in u and s
    std::uint64_t texture_seed = 1;
    double mean_radius = 1.0;
};

namespace detail {

// Cubic Hermite through the control points. Interior tangents are central
// differences; end tangents use the one-sided quadratic fit, which keeps
// circular-arc layouts accurate enough for tight arc-length tolerances.
template <class T>
class HermiteCurve {
public:
    explicit HermiteCurve(const std::vector<T>& ctrl) : q_(ctrl) {
        const std::size_t m = q_.size();
        if (m < 2) throw Error("spline: at least 2 control points required");
        d_.resize(m);
        if (m == 2) {
            d_[0] = T(q_[1] - q_[0]);
            d_[1] = d_[0];
        } else {
            d_[0] = T(-1.5 * q_[0] + 2.0 * q_[1] - 0.5 * q_[2]);
            for (std::size_t k = 1; k + 1 < m; ++k) d_[k] = T(0.5 * (q_[k + 1] - q_[k - 1]));
            d_[m - 1] = T(1.5 * q_[m - 1] - 2.0 * q_[m - 2] + 0.5 * q_[m - 3]);
        }
    }

    T point(double u) const {
        const auto [s, t] = locate(u);
        const double t2 = t * t, t3 = t2 * t;
        return T((2.0 * t3 - 3.0 * t2 + 1.0) * q_[s] + (t3 - 2.0 * t2 + t) * d_[s] +
                 (-2.0 * t3 + 3.0 * t2) * q_[s + 1] + (t3 - t2) * d_[s + 1]);
    }

    // Derivative with respect to the global parameter u.
    T derivative(double u) const {
        const auto [s, t] = locate(u);
        const double t2 = t * t;
        const double n = static_cast<double>(q_.size() - 1);
        return T(((6.0 * t2 - 6.0 * t) * q_[s] + (3.0 * t2 - 4.0 * t + 1.0) * d_[s] +
                  (-6.0 * t2 + 6.0 * t) * q_[s + 1] + (3.0 * t2 - 2.0 * t) * d_[s + 1]) *
                 n);
    }

    std::size_t segments() const { return q_.size() - 1; }

private:
    std::pair<std::size_t, double> locate(double u) const {
        const double x = std::clamp(u, 0.0, 1.0) * static_cast<double>(q_.size() - 1);
        const std::size_t s = std::min<std::size_t>(static_cast<std::size_t>(x), q_.size() - 2);
        return {s, x - static_cast<double>(s)};
    }

    std::vector<T> q_, d_;
};

inline double adaptive_simpson_rec(const std::function<double(double)>& f, double a, double fa,
                                   double b, double fb, double m, double fm, double whole,
                                   double tol, int depth) {
    const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
    const double flm = f(lm), frm = f(rm);
    const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    const double both = left + right;
    if (depth <= 0 || std::abs(both - whole) <= 15.0 * tol)
        return both + (both - whole) / 15.0;
    return adaptive_simpson_rec(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1) +
           adaptive_simpson_rec(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1);
}

inline double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                               double tol) {
    const double m = 0.5 * (a + b);
    const double fa = f(a), fb = f(b), fm = f(m);
    const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    return adaptive_simpson_rec(f, a, fa, b, fb, m, fm, whole, tol, 48);
}

inline double lattice01(std::int64_t x, std::int64_t y, std::int64_t z, std::uint64_t seed) {
    return static_cast<double>(hash_coords(x, y, z, seed) >> 11) * 0x1.0p-53;
}

inline double noise_fade(double t) { return t * t * t * (t * (6.0 * t - 15.0) + 10.0); }

// Trilinear value noise on a seeded integer lattice, range [0, 1).
inline double value_noise3(const Vec3& p, std::uint64_t seed) {
    const std::int64_t ix = static_cast<std::int64_t>(std::floor(p.x()));
    const std::int64_t iy = static_cast<std::int64_t>(std::floor(p.y()));
    const std::int64_t iz = static_cast<std::int64_t>(std::floor(p.z()));
    const double fx = noise_fade(p.x() - static_cast<double>(ix));
    const double fy = noise_fade(p.y() - static_cast<double>(iy));
    const double fz = noise_fade(p.z() - static_cast<double>(iz));
    double c[2][2] = {};
    for (int dy = 0; dy < 2; ++dy)
        for (int dz = 0; dz < 2; ++dz) {
            const double a = lattice01(ix, iy + dy, iz + dz, seed);
            const double b = lattice01(ix + 1, iy + dy, iz + dz, seed);
            c[dy][dz] = a + fx * (b - a);
        }
    const double d0 = c[0][0] + fz * (c[0][1] - c[0][0]);
    const double d1 = c[1][0] + fz * (c[1][1] - c[1][0]);
    return d0 + fy * (d1 - d0);
}

inline double fractal_noise3(Vec3 p, std::uint64_t seed, int octaves) {
    if (octaves <= 0) return 0.5;
    double sum = 0.0, amp = 1.0, norm = 0.0;
    for (int o = 0; o < octaves; ++o) {
        sum += amp * value_noise3(p, seed + 0x51ab5eedull * static_cast<std::uint64_t>(o + 1));
        norm += amp;
        amp *= 0.65;  // slow decay keeps fine detail visible to the feature detector
        p *= 2.0;
    }
    return sum / norm;
}

inline Vec3 any_perpendicular(const Vec3& t) {
    Vec3 e = Vec3::UnitX();
    if (std::abs(t.y()) < std::abs(t.x())) e = Vec3::UnitY();
    if (std::abs(t.z()) < std::abs(t.x()) && std::abs(t.z()) < std::abs(t.y())) e = Vec3::UnitZ();
    const Vec3 n = e - e.dot(t) * t;
    return n.normalized();
}

// Interpolate the dense table at arc length s.
inline CenterlineSample sample_centerline(const GroundTruth& gt, double s) {
    const auto& tab = gt.centerline;
    if (tab.size() < 2) throw Error("sample_centerline: ground truth lacks a centerline table");
    s = std::clamp(s, tab.front().s, tab.back().s);
    auto it = std::lower_bound(tab.begin(), tab.end(), s,
                               [](const CenterlineSample& c, double v) { return c.s < v; });
    if (it == tab.begin()) ++it;
    if (it == tab.end()) --it;
    const CenterlineSample& a = *(it - 1);
    const CenterlineSample& b = *it;
    const double w = std::clamp((s - a.s) / std::max(b.s - a.s, 1e-300), 0.0, 1.0);
    CenterlineSample out;
    out.u = a.u + w * (b.u - a.u);
    out.s = s;
    out.point = (1.0 - w) * a.point + w * b.point;
    out.tangent = ((1.0 - w) * a.tangent + w * b.tangent).normalized();
    Vec3 n = (1.0 - w) * a.normal + w * b.normal;
    n -= n.dot(out.tangent) * out.tangent;
    out.normal = n.norm() > 1e-12 ? Vec3(n.normalized()) : a.normal;
    out.radius = (1.0 - w) * a.radius + w * b.radius;
    return out;
}

constexpr double kHaustraSpacingRadii = 1.9;  // ring period as a multiple of mean radius

}  // namespace detail

// Sweep a bumpy circle along the centerline spline. The wall grid is
// segments_u x segments_v with fan caps at both ends; the result is a closed
// 2-manifold by construction. Throws when the tube would self-intersect.
inline GroundTruth generate_tube(const TubeSpec& spec, int segments_u, int segments_v) {
    if (segments_u < 8 || segments_v < 8)
        throw Error("generate_tube: need at least 8 segments along and around");
    if (spec.centerline.size() < 2)
        throw Error("generate_tube: centerline needs at least 2 control points");
    if (spec.radius.empty()) throw Error("generate_tube: empty radius profile");
    for (double r : spec.radius)
        if (!(r > 0.0)) throw Error("generate_tube: radius control values must be positive");
    if (spec.bump_amplitude < 0.0 || spec.bump_amplitude >= 1.0)
        throw Error("generate_tube: bump amplitude must lie in [0, 1)");

    const detail::HermiteCurve<Vec3> path(spec.centerline);
    std::function<double(double)> radius_at;
    if (spec.radius.size() == 1) {
        radius_at = [r0 = spec.radius[0]](double) { return r0; };
    } else {
        auto curve = std::make_shared<detail::HermiteCurve<double>>(spec.radius);
        radius_at = [curve](double u) { return curve->point(u); };
    }

    GroundTruth gt;
    gt.texture_seed = spec.texture_seed;

    // Dense centerline table with a rotation-minimizing frame.
    const int nd = segments_u * 32;
    gt.centerline.resize(nd + 1);
    for (int i = 0; i <= nd; ++i) {
        CenterlineSample& cs = gt.centerline[i];
        cs.u = static_cast<double>(i) / nd;
        cs.point = path.point(cs.u);
        const Vec3 d = path.derivative(cs.u);
        if (d.norm() < 1e-12) throw Error("generate_tube: degenerate centerline tangent");
        cs.tangent = d.normalized();
        cs.radius = radius_at(cs.u);
        if (!(cs.radius > 0.0)) throw Error("generate_tube: radius profile dips to zero");
    }
    gt.centerline[0].normal = detail::any_perpendicular(gt.centerline[0].tangent);
    for (int i = 1; i <= nd; ++i) {
        const Vec3& t = gt.centerline[i].tangent;
        Vec3 n = gt.centerline[i - 1].normal;
        n -= n.dot(t) * t;
        if (n.norm() < 1e-12) throw Error("generate_tube: centerline bends too sharply");
        gt.centerline[i].normal = n.normalized();
    }
    const auto speed = [&](double u) { return path.derivative(u).norm(); };
    for (int i = 1; i <= nd; ++i) {
        const double ua = gt.centerline[i - 1].u, ub = gt.centerline[i].u;
        const double um = 0.5 * (ua + ub);
        gt.centerline[i].s = gt.centerline[i - 1].s +
                             (ub - ua) / 6.0 * (speed(ua) + 4.0 * speed(um) + speed(ub));
    }

    // Exact arc length by adaptive quadrature, one spline segment at a time.
    const std::size_t nseg = path.segments();
    double chord_total = 0.0;
    for (std::size_t k = 0; k < nseg; ++k)
        chord_total += (spec.centerline[k + 1] - spec.centerline[k]).norm();
    for (std::size_t k = 0; k < nseg; ++k) {
        const double a = static_cast<double>(k) / nseg;
        const double b = static_cast<double>(k + 1) / nseg;
        const double chord = (spec.centerline[k + 1] - spec.centerline[k]).norm();
        const double tol = 1e-10 * std::max(chord, 1e-9 * std::max(chord_total, 1.0));
        gt.centerline_length += detail::adaptive_simpson(speed, a, b, tol);
    }

    double radius_sum = 0.0;
    for (const auto& cs : gt.centerline) radius_sum += cs.radius;
    gt.mean_radius = radius_sum / gt.centerline.size();

    // Self-intersection: distant-in-arc-length samples must stay apart in space.
    {
        const int stride = std::max(1, nd / 512);
        for (int i = 0; i <= nd; i += stride)
            for (int j = i + stride; j <= nd; j += stride) {
                const auto& a = gt.centerline[i];
                const auto& b = gt.centerline[j];
                if (b.s - a.s <= 2.5 * (a.radius + b.radius)) continue;
                if ((a.point - b.point).norm() < a.radius + b.radius)
                    throw Error("generate_tube: tube self-intersects");
            }
    }

    // Wall vertices, displaced by ring relief plus seeded roughness.
    const double ring_spacing = detail::kHaustraSpacingRadii * gt.mean_radius;
    const double noise_freq = 1.6 / gt.mean_radius;
    const double two_pi = 2.0 * std::numbers::pi;
    TriangleMesh& mesh = gt.mesh;
    mesh.vertices.reserve(static_cast<std::size_t>(segments_u + 1) * segments_v + 2);
    for (int i = 0; i <= segments_u; ++i) {
        const CenterlineSample& cs = gt.centerline[static_cast<std::size_t>(i) * 32];
        const Vec3 bvec = cs.tangent.cross(cs.normal);
        for (int j = 0; j < segments_v; ++j) {
            const double phi = two_pi * j / segments_v;
            const Vec3 radial = std::cos(phi) * cs.normal + std::sin(phi) * bvec;
            double bump = 0.0;
            if (spec.bump_amplitude > 0.0) {
                const Vec3 base = cs.point + cs.radius * radial;
                const double ring = std::sin(two_pi * cs.s / ring_spacing);
                const double rough =
                    2.0 * detail::fractal_noise3(base * noise_freq, spec.texture_seed, 3) - 1.0;
                bump = spec.bump_amplitude * (0.55 * ring + 0.45 * rough);
            }
            mesh.vertices.push_back(cs.point + cs.radius * (1.0 + bump) * radial);
        }
    }
    const std::uint32_t apex0 = static_cast<std::uint32_t>(mesh.vertices.size());
    mesh.vertices.push_back(gt.centerline.front().point);
    const std::uint32_t apex1 = apex0 + 1;
    mesh.vertices.push_back(gt.centerline.back().point);

    const auto vid = [segments_v](int i, int j) {
        return static_cast<std::uint32_t>(i * segments_v + (j % segments_v));
    };
    // Outward-facing winding: with B = T x N the wall quads split as below,
    // and the caps fan the opposite way at each end.
    for (int i = 0; i < segments_u; ++i)
        for (int j = 0; j < segments_v; ++j) {
            const std::uint32_t a = vid(i, j), b = vid(i, j + 1);
            const std::uint32_t c = vid(i + 1, j + 1), d = vid(i + 1, j);
            mesh.triangles.push_back({a, b, c});
            mesh.triangles.push_back({a, c, d});
        }
    for (int j = 0; j < segments_v; ++j) {
        mesh.triangles.push_back({apex0, vid(0, j + 1), vid(0, j)});
        mesh.triangles.push_back({apex1, vid(segments_u, j), vid(segments_u, j + 1)});
    }
    return gt;
}

struct TrajectorySpec {
    int frame_count = 1;
    double speed = 0.0;               // scene units per frame along the centerline
    double jitter_translation = 0.0;  // fraction of the local radius, must stay below 0.8
    double jitter_rotation = 0.0;     // per-frame rotation cap, radians
    std::uint64_t seed = 1;
};

struct Trajectory {
    // World-to-camera poses in the first-camera frame; poses[0] is exactly identity.
    std::vector<CameraPose> poses;
    // Maps ground-truth coordinates into that frame: the pose of camera k
    // relative to the mesh is poses[k].compose(world_from_gt).
    CameraPose world_from_gt;
};

// Interior camera path: anchored to the centerline with smooth seeded radial
// offsets and a per-frame rotation clamp toward a tangent-following view.
inline Trajectory generate_trajectory(const GroundTruth& gt, const TrajectorySpec& spec) {
    if (spec.frame_count < 1) throw Error("generate_trajectory: frame count must be positive");
    if (spec.speed < 0.0) throw Error("generate_trajectory: speed must be non-negative");
    if (spec.jitter_translation < 0.0 || spec.jitter_translation >= 0.8)
        throw Error("generate_trajectory: translation jitter must stay below 0.8 of the radius");
    if (spec.jitter_rotation < 0.0)
        throw Error("generate_trajectory: rotation jitter must be non-negative");
    if (spec.speed * (spec.frame_count - 1) > gt.centerline_length + 1e-12)
        throw Error("generate_trajectory: path runs past the end of the centerline");
    if (gt.centerline.size() < 2)
        throw Error("generate_trajectory: ground truth lacks a centerline table");

    Rng rng(spec.seed);
    const double two_pi = 2.0 * std::numbers::pi;
    const double rho_phase = rng.uniform(0.0, two_pi);
    const double rho_freq = rng.uniform(0.06, 0.22);
    const double dir_phase = rng.uniform(0.0, two_pi);
    const double dir_freq = rng.uniform(0.04, 0.17);
    const double wob_phase = rng.uniform(0.0, two_pi);
    const double wob_freq = rng.uniform(0.05, 0.20);
    const double yaw_phase = rng.uniform(0.0, two_pi);
    const double yaw_freq = rng.uniform(0.03, 0.15);

    std::vector<CameraPose> raw(spec.frame_count);
    Vec3 hint = gt.centerline.front().normal;
    Mat3 prev = Mat3::Identity();
    for (int k = 0; k < spec.frame_count; ++k) {
        const CenterlineSample cs = detail::sample_centerline(gt, spec.speed * k);
        const Vec3 bvec = cs.tangent.cross(cs.normal);
        const double rho = spec.jitter_translation * cs.radius * 0.98 *
                           (0.5 + 0.5 * std::sin(rho_phase + rho_freq * k));
        const double ang = dir_phase + dir_freq * k;
        const Vec3 center = cs.point + rho * (std::cos(ang) * cs.normal + std::sin(ang) * bvec);

        const double wobble = std::min(0.3, 1.5 * spec.jitter_rotation) *
                              (0.5 + 0.5 * std::sin(wob_phase + wob_freq * k));
        const double yaw = yaw_phase + yaw_freq * k;
        const Vec3 forward =
            (cs.tangent + std::tan(wobble) * (std::cos(yaw) * cs.normal + std::sin(yaw) * bvec))
                .normalized();
        Vec3 x = hint - hint.dot(forward) * forward;
        if (x.norm() < 1e-9) x = cs.normal - cs.normal.dot(forward) * forward;
        x.normalize();
        const Vec3 y = forward.cross(x);
        Mat3 rdes;
        rdes.row(0) = x.transpose();
        rdes.row(1) = y.transpose();
        rdes.row(2) = forward.transpose();
        Mat3 r = rdes;
        if (k > 0) {
            const Vec3 w = rotation_log(prev.transpose() * rdes);
            const double angle = w.norm();
            if (angle > spec.jitter_rotation)
                r = angle < 1e-15 ? prev
                                  : Mat3(prev * rotation_exp(w * (spec.jitter_rotation / angle)));
        }
        raw[k].rotation = r;
        raw[k].translation = -(r * center);
        prev = r;
        hint = r.row(0).transpose();
    }

    Trajectory out;
    out.world_from_gt = raw.front();
    const CameraPose undo = raw.front().inverse();
    out.poses.resize(raw.size());
    for (std::size_t k = 0; k < raw.size(); ++k) out.poses[k] = raw[k].compose(undo);
    out.poses[0] = CameraPose{};
    return out;
}

namespace detail {

// Midpoint-split bounding-box tree over mesh triangles.
class MeshBvh {
public:
    struct Hit {
        bool ok = false;
        double t = std::numeric_limits<double>::infinity();
        std::uint32_t triangle = 0;
    };

    explicit MeshBvh(const TriangleMesh& mesh) {
        const std::size_t n = mesh.triangles.size();
        if (n == 0) throw Error("ray caster: empty mesh");
        tris_.resize(n);
        std::vector<Vec3> centroids(n);
        for (std::size_t t = 0; t < n; ++t) {
            const auto& tri = mesh.triangles[t];
            const Vec3& a = mesh.vertices[tri[0]];
            tris_[t] = {a, mesh.vertices[tri[1]] - a, mesh.vertices[tri[2]] - a,
                        static_cast<std::uint32_t>(t)};
            centroids[t] = a + (tris_[t].e1 + tris_[t].e2) / 3.0;
        }
        order_.resize(n);
        for (std::size_t i = 0; i < n; ++i) order_[i] = i;
        nodes_.reserve(2 * n);
        build(0, n, centroids);
        std::vector<Tri> sorted(n);
        for (std::size_t i = 0; i < n; ++i) sorted[i] = tris_[order_[i]];
        tris_ = std::move(sorted);
    }

    Hit closest(const Vec3& o, const Vec3& d) const {
        Hit best;
        const Vec3 inv = safe_inverse(d);
        std::uint32_t stack[64];
        int top = 0;
        stack[top++] = 0;
        while (top > 0) {
            const Node& n = nodes_[stack[--top]];
            if (!slab_hit(n, o, inv, best.t)) continue;
            if (n.count > 0) {
                for (std::uint32_t i = n.first; i < n.first + n.count; ++i) {
                    double t;
                    if (intersect(tris_[i], o, d, t) && t < best.t) {
                        best.ok = true;
                        best.t = t;
                        best.triangle = tris_[i].index;
                    }
                }
            } else {
                stack[top++] = n.left;
                stack[top++] = n.right;
            }
        }
        return best;
    }

    // Number of crossings along the ray; odd means the origin is inside.
    int crossings(const Vec3& o, const Vec3& d) const {
        const Vec3 inv = safe_inverse(d);
        const double far = std::numeric_limits<double>::infinity();
        int count = 0;
        std::uint32_t stack[64];
        int top = 0;
        stack[top++] = 0;
        while (top > 0) {
            const Node& n = nodes_[stack[--top]];
            if (!slab_hit(n, o, inv, far)) continue;
            if (n.count > 0) {
                for (std::uint32_t i = n.first; i < n.first + n.count; ++i) {
                    double t;
                    if (intersect(tris_[i], o, d, t)) ++count;
                }
            } else {
                stack[top++] = n.left;
                stack[top++] = n.right;
            }
        }
        return count;
    }

private:
    struct Tri {
        Vec3 v0 = Vec3::Zero(), e1 = Vec3::Zero(), e2 = Vec3::Zero();
        std::uint32_t index = 0;
    };
    struct Node {
        Vec3 lo = Vec3::Zero(), hi = Vec3::Zero();
        std::uint32_t left = 0, right = 0;   // child node ids when count == 0
        std::uint32_t first = 0, count = 0;  // triangle run when count > 0
    };

    static Vec3 safe_inverse(const Vec3& d) {
        const auto nz = [](double v) { return v == 0.0 ? 1e-300 : v; };
        return {1.0 / nz(d.x()), 1.0 / nz(d.y()), 1.0 / nz(d.z())};
    }

    static bool intersect(const Tri& tr, const Vec3& o, const Vec3& d, double& t_out) {
        const Vec3 p = d.cross(tr.e2);
        const double det = tr.e1.dot(p);
        if (std::abs(det) < 1e-14) return false;
        const double invdet = 1.0 / det;
        const Vec3 s = o - tr.v0;
        const double u = s.dot(p) * invdet;
        if (u < 0.0 || u > 1.0) return false;
        const Vec3 q = s.cross(tr.e1);
        const double v = d.dot(q) * invdet;
        if (v < 0.0 || u + v > 1.0) return false;
        const double t = tr.e2.dot(q) * invdet;
        if (t <= 1e-9) return false;
        t_out = t;
        return true;
    }

    bool slab_hit(const Node& n, const Vec3& o, const Vec3& inv, double tbest) const {
        double tmin = 0.0, tmax = tbest;
        for (int a = 0; a < 3; ++a) {
            const double t1 = (n.lo(a) - o(a)) * inv(a);
            const double t2 = (n.hi(a) - o(a)) * inv(a);
            tmin = std::max(tmin, std::min(t1, t2));
            tmax = std::min(tmax, std::max(t1, t2));
        }
        return tmin <= tmax;
    }

    std::uint32_t build(std::size_t begin, std::size_t end, const std::vector<Vec3>& centroids) {
        Node node;
        Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
        Vec3 hi = -lo;
        Vec3 clo = lo, chi = hi;
        for (std::size_t i = begin; i < end; ++i) {
            const Tri& tr = tris_[order_[i]];
            for (const Vec3& v : {tr.v0, Vec3(tr.v0 + tr.e1), Vec3(tr.v0 + tr.e2)}) {
                lo = lo.cwiseMin(v);
                hi = hi.cwiseMax(v);
            }
            clo = clo.cwiseMin(centroids[order_[i]]);
            chi = chi.cwiseMax(centroids[order_[i]]);
        }
        node.lo = lo;
        node.hi = hi;
        node.first = static_cast<std::uint32_t>(begin);
        node.count = static_cast<std::uint32_t>(end - begin);
        const std::uint32_t id = static_cast<std::uint32_t>(nodes_.size());
        nodes_.push_back(node);
        const Vec3 extent = chi - clo;
        if (end - begin <= 4 || extent.maxCoeff() < 1e-12) return id;
        int axis = 0;
        if (extent.y() > extent.x()) axis = 1;
        if (extent.z() > extent(axis)) axis = 2;
        const std::size_t mid = begin + (end - begin) / 2;
        std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                         [&](std::size_t a, std::size_t b) {
                             return centroids[a](axis) < centroids[b](axis);
                         });
        const std::uint32_t left = build(begin, mid, centroids);
        const std::uint32_t right = build(mid, end, centroids);
        nodes_[id].left = left;
        nodes_[id].right = right;
        nodes_[id].count = 0;
        return id;
    }

    std::vector<Tri> tris_;
    std::vector<Node> nodes_;
    std::vector<std::size_t> order_;
};

}  // namespace detail

struct Ray {
    Vec3 origin = Vec3::Zero();
    Vec3 dir = Vec3::UnitZ();
};

// Scene-frame ray through continuous pixel coordinates.
inline Ray pixel_ray(const CameraPose& pose, const CameraIntrinsics& k, const Vec2& pixel) {
    Vec3 dc((pixel.x() - k.principal_px.x()) / k.focal_px,
            (pixel.y() - k.principal_px.y()) / k.focal_px, 1.0);
    dc.normalize();
    return {pose.camera_center(), pose.rotation.transpose() * dc};
}

// Intersection and reflectance queries against one ground-truth scene.
// Build once per scene; rendering many frames reuses the tree.
class RayCaster {
public:
    explicit RayCaster(const GroundTruth& gt)
        : mesh_(&gt.mesh),
          bvh_(gt.mesh),
          seed_(gt.texture_seed),
          ring_spacing_(detail::kHaustraSpacingRadii * gt.mean_radius),
          noise_freq_(2.3 / gt.mean_radius) {
        const auto& tab = gt.centerline;
        if (tab.size() >= 2) {
            const std::size_t stride = std::max<std::size_t>(1, tab.size() / 512);
            for (std::size_t i = 0; i < tab.size(); i += stride) {
                axis_points_.push_back(tab[i].point);
                axis_s_.push_back(tab[i].s);
            }
            axis_tree_ = std::make_unique<KdTree3>(axis_points_);
        }
    }

    struct SurfaceHit {
        bool ok = false;
        double distance = 0.0;
        Vec3 point = Vec3::Zero();
        Vec3 normal = Vec3::Zero();  // unit, facing the ray origin
        std::uint32_t triangle = 0;
    };

    SurfaceHit cast(const Ray& ray) const {
        SurfaceHit out;
        const auto h = bvh_.closest(ray.origin, ray.dir);
        if (!h.ok) return out;
        out.ok = true;
        out.distance = h.t;
        out.point = ray.origin + h.t * ray.dir;
        const auto& tri = mesh_->triangles[h.triangle];
        const Vec3& a = mesh_->vertices[tri[0]];
        Vec3 n = (mesh_->vertices[tri[1]] - a).cross(mesh_->vertices[tri[2]] - a);
        n.normalize();
        if (n.dot(ray.dir) > 0.0) n = -n;
        out.normal = n;
        out.triangle = h.triangle;
        return out;
    }

    bool contains(const Vec3& p) const {
        const Vec3 probe = Vec3(0.577215, 0.301029, 0.757575).normalized();
        return bvh_.crossings(p, probe) % 2 == 1;
    }

    // Seeded reflectance: fractal value noise blended with rings that follow
    // the centerline, kept away from zero so walls never go black.
    double reflectance(const Vec3& p, int noise_octaves) const {
        double ring = 0.5;
        if (axis_tree_) {
            const auto [idx, d2] = axis_tree_->nearest(p);
            (void)d2;
            ring = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * axis_s_[idx] / ring_spacing_);
        }
        const double rough = detail::fractal_noise3(p * noise_freq_, seed_ ^ 0x7e47, noise_octaves);
        return 0.3 + 0.7 * (0.6 * rough + 0.4 * ring);
    }

private:
    const TriangleMesh* mesh_;
    detail::MeshBvh bvh_;
    std::uint64_t seed_;
    double ring_spacing_;
    double noise_freq_;
    std::vector<Vec3> axis_points_;
    std::vector<double> axis_s_;
    std::unique_ptr<KdTree3> axis_tree_;
};

struct RenderConfig {
    int resolution = 500;
    CameraIntrinsics intrinsics = build_intrinsics(500);
    double cone_half_angle = 1.1;  // spotlight half-angle around the optical axis, radians
    double falloff = 1.7;          // light decays as distance^(-falloff)
    double ambient = 0.05;
    double diffuse = 1.0;
    int noise_octaves = 4;  // 0 renders the rings-only reflectance

    static RenderConfig for_resolution(int res) {
        RenderConfig c;
        c.resolution = res;
        c.intrinsics = build_intrinsics(res);
        return c;
    }
};

// Ray-cast one frame with the headlight model: shading is
// ambient + diffuse * max(0, n.l) * cone(theta) * distance^(-falloff),
// modulated by the seeded reflectance and clamped to [0, 1]. The camera must
// sit inside the tube; `pose` maps ground-truth coordinates to the camera.
inline GrayImage render_frame(const RayCaster& caster, const CameraPose& pose,
                              const RenderConfig& cfg) {
    if (cfg.resolution <= 0) throw Error("render_frame: resolution must be positive");
    if (cfg.falloff < 0.0) throw Error("render_frame: falloff must be non-negative");
    if (cfg.ambient < 0.0 || cfg.ambient > 1.0)
        throw Error("render_frame: ambient must lie in [0, 1]");
    const Vec3 center = pose.camera_center();
    if (!caster.contains(center)) throw Error("render_frame: camera is outside the mesh");

    const Mat3 rt = pose.rotation.transpose();
    const double f = cfg.intrinsics.focal_px;
    const Vec2 pp = cfg.intrinsics.principal_px;
    GrayImage img(cfg.resolution, cfg.resolution);
    parallel_for(0, static_cast<std::size_t>(img.height), [&](std::size_t y0, std::size_t y1) {
        for (std::size_t y = y0; y < y1; ++y) {
            for (int x = 0; x < img.width; ++x) {
                Vec3 dc((x - pp.x()) / f, (static_cast<double>(y) - pp.y()) / f, 1.0);
                dc.normalize();
                const RayCaster::SurfaceHit hit = caster.cast({center, rt * dc});
                if (!hit.ok) {
                    img.at(x, static_cast<int>(y)) = 0.0f;
                    continue;
                }
                const double ndotl = std::max(0.0, -hit.normal.dot(rt * dc));
                const double theta = std::acos(std::clamp(dc.z(), -1.0, 1.0));
                const double cone =
                    theta < cfg.cone_half_angle
                        ? std::cos(0.5 * std::numbers::pi * theta / cfg.cone_half_angle)
                        : 0.0;
                const double shade =
                    cfg.ambient + cfg.diffuse * ndotl * cone * std::pow(hit.distance, -cfg.falloff);
                const double v = shade * caster.reflectance(hit.point, cfg.noise_octaves);
                img.at(x, static_cast<int>(y)) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    });
    return img;
}

inline GrayImage render_frame(const GroundTruth& gt, const CameraPose& pose,
                              const RenderConfig& cfg) {
    return render_frame(RayCaster(gt), pose, cfg);
}

// Warm-tinted variant of the same shading.
inline ColorImage render_frame_color(const RayCaster& caster, const CameraPose& pose,
                                     const RenderConfig& cfg) {
    const GrayImage g = render_frame(caster, pose, cfg);
    ColorImage c(g.width, g.height);
    for (std::size_t i = 0; i < g.pixels.size(); ++i) {
        const double v = g.pixels[i];
        c.rgb[3 * i + 0] = quantize8(std::pow(v, 0.9));
        c.rgb[3 * i + 1] = quantize8(0.58 * v);
        c.rgb[3 * i + 2] = quantize8(0.50 * v);
    }
    return c;
}

inline ColorImage render_frame_color(const GroundTruth& gt, const CameraPose& pose,
                                     const RenderConfig& cfg) {
    return render_frame_color(RayCaster(gt), pose, cfg);
}

}  // namespace recon
