// Similarity alignment of point sets (absolute orientation), uniform surface
// sampling, and one-sided geometric error metrics against a reference model.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "recon/geometry.hpp"
#include "recon/kdtree.hpp"
#include "recon/mesh.hpp"
#include "recon/prng.hpp"

namespace recon {

struct DegenerateAlignmentError : Error {
    DegenerateAlignmentError() : Error("alignment needs at least 3 non-colinear pairs") {}
};

// Maps left-frame points onto the right frame: p -> s * R(p) + translation.
struct SimilarityTransform {
    double scale = 1.0;
    Vec4 rotation = Vec4(1, 0, 0, 0);  // unit quaternion (w, x, y, z)
    Vec3 translation = Vec3::Zero();
    Mat3 rotation_matrix() const { return rotation_from_quaternion(rotation); }
};

inline Vec3 apply_similarity(const SimilarityTransform& t, const Vec3& p) {
    return t.scale * (t.rotation_matrix() * p) + t.translation;
}

inline std::vector<Vec3> apply_similarity(const SimilarityTransform& t,
                                          const std::vector<Vec3>& points) {
    std::vector<Vec3> out;
    out.reserve(points.size());
    for (const auto& p : points) out.push_back(apply_similarity(t, p));
    return out;
}

namespace detail {

inline Vec4 quaternion_multiply(const Vec4& a, const Vec4& b) {
    return Vec4(a(0) * b(0) - a(1) * b(1) - a(2) * b(2) - a(3) * b(3),
                a(0) * b(1) + a(1) * b(0) + a(2) * b(3) - a(3) * b(2),
                a(0) * b(2) - a(1) * b(3) + a(2) * b(0) + a(3) * b(1),
                a(0) * b(3) + a(1) * b(2) - a(2) * b(1) + a(3) * b(0));
}

}  // namespace detail

// (b ∘ a): apply a first, then b.
inline SimilarityTransform compose_similarity(const SimilarityTransform& b,
                                              const SimilarityTransform& a) {
    SimilarityTransform c;
    c.scale = b.scale * a.scale;
    c.rotation = detail::quaternion_multiply(b.rotation, a.rotation).normalized();
    if (c.rotation(0) < 0.0) c.rotation = -c.rotation;
    c.translation = b.scale * (b.rotation_matrix() * a.translation) + b.translation;
    return c;
}

// Closed-form least-squares similarity between paired point sets: measurements
// are referred to their centroids, the rotation comes from the dominant
// eigenvector of the 4x4 quaternion data matrix, the scale is the asymmetric
// ratio sum(r' . R(l')) / sum(|l'|^2), and the translation closes the loop.
inline SimilarityTransform horn_align(const std::vector<Vec3>& left,
                                      const std::vector<Vec3>& right) {
    if (left.size() != right.size()) throw Error("horn_align: size mismatch");
    const std::size_t n = left.size();
    if (n < 3) throw DegenerateAlignmentError();

    Vec3 cl = Vec3::Zero(), cr = Vec3::Zero();
    for (std::size_t i = 0; i < n; ++i) {
        cl += left[i];
        cr += right[i];
    }
    cl /= double(n);
    cr /= double(n);

    // Cross-covariance S = sum(l' r'^T) and the left spread for the scale.
    Mat3 s = Mat3::Zero();
    Mat3 spread = Mat3::Zero();
    double left_norm2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec3 l = left[i] - cl;
        const Vec3 r = right[i] - cr;
        s += l * r.transpose();
        spread += l * l.transpose();
        left_norm2 += l.squaredNorm();
    }

    // Colinear or coincident left points leave the rotation under-determined.
    Eigen::SelfAdjointEigenSolver<Mat3> spread_eig(spread);
    const Vec3 ev = spread_eig.eigenvalues();  // ascending
    if (ev(1) <= 1e-12 * std::max(ev(2), 1e-300)) throw DegenerateAlignmentError();

    const double sxx = s(0, 0), sxy = s(0, 1), sxz = s(0, 2);
    const double syx = s(1, 0), syy = s(1, 1), syz = s(1, 2);
    const double szx = s(2, 0), szy = s(2, 1), szz = s(2, 2);
    Mat4 nmat;
    nmat << sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
            syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
            szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
            sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz;

    Eigen::SelfAdjointEigenSolver<Mat4> eig(nmat);
    Vec4 q = eig.eigenvectors().col(3);  // largest eigenvalue
    if (q(0) < 0.0 ||
        (q(0) == 0.0 && (q(1) < 0.0 || (q(1) == 0.0 && (q(2) < 0.0 ||
                                                        (q(2) == 0.0 && q(3) < 0.0))))))
        q = -q;

    SimilarityTransform t;
    t.rotation = q.normalized();
    const Mat3 r = t.rotation_matrix();
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        dot += (right[i] - cr).dot(r * (left[i] - cl));
    if (left_norm2 <= 0.0) throw DegenerateAlignmentError();
    t.scale = dot / left_norm2;
    if (t.scale <= 0.0) throw Error("horn_align: non-positive scale (reflected data?)");
    t.translation = cr - t.scale * (r * cl);
    return t;
}

inline double alignment_residual(const SimilarityTransform& t, const std::vector<Vec3>& left,
                                 const std::vector<Vec3>& right) {
    double sum = 0.0;
    for (std::size_t i = 0; i < left.size(); ++i)
        sum += (right[i] - apply_similarity(t, left[i])).squaredNorm();
    return sum;
}

// Area-weighted uniform sampling of a triangle mesh; exactly n points, seeded.
inline std::vector<Vec3> sample_surface_uniform(const TriangleMesh& mesh, std::size_t n,
                                                std::uint64_t seed = 0x5a3b1e5ull) {
    if (mesh.vertices.empty() || mesh.triangles.empty())
        throw Error("sample_surface_uniform: empty mesh");
    std::vector<double> cumulative(mesh.triangles.size());
    double total = 0.0;
    for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
        total += triangle_area(mesh, t);
        cumulative[t] = total;
    }
    if (total <= 0.0) throw Error("sample_surface_uniform: zero-area mesh");

    Rng rng(seed);
    std::vector<Vec3> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double u = rng.uniform() * total;
        const std::size_t t =
            std::min<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) -
                                      cumulative.begin(),
                                  cumulative.size() - 1);
        const auto& tri = mesh.triangles[t];
        double r1 = rng.uniform(), r2 = rng.uniform();
        if (r1 + r2 > 1.0) {
            r1 = 1.0 - r1;
            r2 = 1.0 - r2;
        }
        const Vec3& a = mesh.vertices[tri[0]];
        out.push_back(a + r1 * (mesh.vertices[tri[1]] - a) + r2 * (mesh.vertices[tri[2]] - a));
    }
    return out;
}

struct IcpOptions {
    int max_iters = 50;
    double tol = 1e-10;  // relative residual change
};

struct IcpResult {
    SimilarityTransform transform;
    double residual = 0.0;  // RMS correspondence distance at the last iteration
    int iterations = 0;
    bool converged = false;
};

// Iterative closest point with a similarity model: nearest neighbors in the
// fixed set give correspondences, the closed-form alignment refits from the
// original coordinates. Seeded by a bounding-box diagonal pre-scale plus
// centroid shift so mismatched model sizes start in the right basin; the
// residual is reported so callers can detect a bad one.
inline IcpResult icp_align(const std::vector<Vec3>& moving, const std::vector<Vec3>& fixed,
                           const IcpOptions& opts = {}) {
    if (moving.size() < 3 || fixed.size() < 3) throw DegenerateAlignmentError();

    const Aabb bm = bounding_box(moving), bf = bounding_box(fixed);
    SimilarityTransform t;
    t.scale = bm.diagonal() > 0.0 ? bf.diagonal() / bm.diagonal() : 1.0;
    if (t.scale <= 0.0) t.scale = 1.0;
    Vec3 cm = Vec3::Zero(), cf = Vec3::Zero();
    for (const auto& p : moving) cm += p;
    for (const auto& p : fixed) cf += p;
    cm /= double(moving.size());
    cf /= double(fixed.size());
    t.translation = cf - t.scale * cm;

    const KdTree3 tree(fixed);
    IcpResult result;
    result.transform = t;
    double prev = std::numeric_limits<double>::infinity();
    for (int it = 0; it < opts.max_iters; ++it) {
        std::vector<Vec3> matched(moving.size());
        double sum2 = 0.0;
        for (std::size_t i = 0; i < moving.size(); ++i) {
            const Vec3 p = apply_similarity(result.transform, moving[i]);
            const auto [idx, d2] = tree.nearest(p);
            matched[i] = fixed[idx];
            sum2 += d2;
        }
        result.residual = std::sqrt(sum2 / double(moving.size()));
        ++result.iterations;
        result.transform = horn_align(moving, matched);
        const double cur = alignment_residual(result.transform, moving, matched);
        if (prev < std::numeric_limits<double>::infinity() &&
            std::abs(prev - cur) <= opts.tol * std::max(prev, 1e-300)) {
            result.converged = true;
            break;
        }
        prev = cur;
    }
    // Residual reported against the final transform.
    double sum2 = 0.0;
    for (const auto& p : moving) sum2 += tree.nearest(apply_similarity(result.transform, p)).second;
    result.residual = std::sqrt(sum2 / double(moving.size()));
    return result;
}

struct ErrorReport {
    double rmse = 0.0;
    double max_error = 0.0;
    double relative_rmse = 0.0;
    double centerline_length = 0.0;
    std::size_t l_gt_samples = 0;
    std::size_t l_rec_samples = 0;
    double icp_residual = 0.0;
};

// One-sided metrics with the reference set as the query side: for every
// reference sample take the nearest reconstructed sample; RMSE over those
// distances, their max, and RMSE divided by the centerline length.
inline ErrorReport compute_errors(const std::vector<Vec3>& gt_samples,
                                  const std::vector<Vec3>& rec_samples,
                                  double centerline_length) {
    if (gt_samples.empty() || rec_samples.empty())
        throw Error("compute_errors: empty sample set");
    if (centerline_length <= 0.0) throw Error("compute_errors: centerline length must be > 0");

    const KdTree3 tree(rec_samples);
    double sum2 = 0.0, max2 = 0.0;
    for (const auto& g : gt_samples) {
        const double d2 = tree.nearest(g).second;
        sum2 += d2;
        max2 = std::max(max2, d2);
    }
    ErrorReport report;
    report.rmse = std::sqrt(sum2 / double(gt_samples.size()));
    report.max_error = std::sqrt(max2);
    report.relative_rmse = report.rmse / centerline_length;
    report.centerline_length = centerline_length;
    report.l_gt_samples = gt_samples.size();
    report.l_rec_samples = rec_samples.size();
    return report;
}

// 17-significant-digit JSON so reports round-trip exactly.
inline std::string error_report_json(const ErrorReport& r) {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "{\n"
                  "  \"rmse\": %.16e,\n"
                  "  \"max_error\": %.16e,\n"
                  "  \"relative_rmse\": %.16e,\n"
                  "  \"centerline_length\": %.16e,\n"
                  "  \"l_gt_samples\": %zu,\n"
                  "  \"l_rec_samples\": %zu,\n"
                  "  \"icp_residual\": %.16e\n"
                  "}\n",
                  r.rmse, r.max_error, r.relative_rmse, r.centerline_length, r.l_gt_samples,
                  r.l_rec_samples, r.icp_residual);
    return buf;
}

inline void write_error_report(const ErrorReport& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("write_error_report: cannot open " + path);
    out << error_report_json(r);
    if (!out) throw Error("write_error_report: write failed on " + path);
}

}  // namespace recon
