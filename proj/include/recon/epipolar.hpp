// Two-view geometry: normalized 8-point fundamental estimation, RANSAC with
// Sampson scoring, essential-matrix recovery, cheirality-based pose selection,
// DLT triangulation with one Gauss-Newton refinement step, and detection of
// the degenerate (pure rotation / no parallax) configuration.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "recon/geometry.hpp"
#include "recon/prng.hpp"

namespace recon {

struct Correspondence {
    Vec2 x1 = Vec2::Zero();
    Vec2 x2 = Vec2::Zero();
};

struct TwoViewGeometry {
    Mat3 F = Mat3::Zero();
    Mat3 E = Mat3::Zero();
    HomPoint2 epipole2 = HomPoint2::Zero();
    std::vector<std::size_t> inliers;
    CameraPose pose2;  // view 2 relative to view 1, unit-norm translation
};

struct InsufficientCorrespondencesError : Error {
    InsufficientCorrespondencesError() : Error("at least 8 correspondences required") {}
};
struct NoConsensusError : Error {
    NoConsensusError() : Error("RANSAC found no consensus of at least 8 inliers") {}
};
struct DegenerateMotionError : Error {
    explicit DegenerateMotionError(const std::string& diagnosis)
        : Error("degenerate two-view configuration: " + diagnosis), diagnosis(diagnosis) {}
    std::string diagnosis;
};
struct AmbiguousCheiralityError : Error {
    AmbiguousCheiralityError() : Error("no essential-matrix factorization wins cheirality") {}
};
struct ParallelRaysError : Error {
    ParallelRaysError() : Error("triangulation rays are parallel") {}
};

namespace detail {

// Similarity bringing the centroid to the origin and the RMS radius to sqrt(2).
inline Mat3 normalizing_transform(const std::vector<Correspondence>& corrs, bool second) {
    Vec2 c = Vec2::Zero();
    for (const auto& m : corrs) c += second ? m.x2 : m.x1;
    c /= static_cast<double>(corrs.size());
    double ms = 0.0;
    for (const auto& m : corrs) ms += ((second ? m.x2 : m.x1) - c).squaredNorm();
    ms /= static_cast<double>(corrs.size());
    const double s = ms > 0.0 ? std::sqrt(2.0 / ms) : 1.0;
    Mat3 t = Mat3::Identity();
    t(0, 0) = t(1, 1) = s;
    t(0, 2) = -s * c.x();
    t(1, 2) = -s * c.y();
    return t;
}

// Unit Frobenius norm, sign fixed so the largest-magnitude entry is positive.
inline Mat3 fix_gauge(Mat3 f) {
    const double n = f.norm();
    if (n > 0.0) f /= n;
    int r = 0, c = 0;
    f.cwiseAbs().maxCoeff(&r, &c);
    if (f(r, c) < 0.0) f = -f;
    return f;
}

}  // namespace detail

// Normalized 8-point algorithm with rank-2 enforcement. The returned matrix
// has unit Frobenius norm and positive largest-magnitude entry.
inline Mat3 estimate_fundamental_8pt(const std::vector<Correspondence>& corrs) {
    if (corrs.size() < 8) throw InsufficientCorrespondencesError();
    const Mat3 t1 = detail::normalizing_transform(corrs, false);
    const Mat3 t2 = detail::normalizing_transform(corrs, true);

    Eigen::MatrixXd a(corrs.size(), 9);
    for (std::size_t i = 0; i < corrs.size(); ++i) {
        const HomPoint2 p1 = t1 * corrs[i].x1.homogeneous();
        const HomPoint2 p2 = t2 * corrs[i].x2.homogeneous();
        a.row(static_cast<Eigen::Index>(i)) << p2.x() * p1.x(), p2.x() * p1.y(), p2.x(),
            p2.y() * p1.x(), p2.y() * p1.y(), p2.y(), p1.x(), p1.y(), 1.0;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
    if (svd.rank() < 8) throw Error("estimate_fundamental_8pt: rank-deficient design matrix");
    const Eigen::VectorXd f = svd.matrixV().col(8);
    Mat3 fn;
    fn << f(0), f(1), f(2), f(3), f(4), f(5), f(6), f(7), f(8);

    Eigen::JacobiSVD<Mat3> fsvd(fn, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Vec3 sv = fsvd.singularValues();
    sv(2) = 0.0;
    fn = fsvd.matrixU() * sv.asDiagonal() * fsvd.matrixV().transpose();

    return detail::fix_gauge(t2.transpose() * fn * t1);
}

// First-order geometric residual of the epipolar constraint, in pixels.
inline double sampson_distance(const Mat3& f, const Vec2& x1, const Vec2& x2) {
    const HomPoint2 p1 = x1.homogeneous();
    const HomPoint2 p2 = x2.homogeneous();
    const Vec3 l2 = f * p1;
    const Vec3 l1 = f.transpose() * p2;
    const double num = p2.dot(l2);
    const double den = l2.x() * l2.x() + l2.y() * l2.y() + l1.x() * l1.x() + l1.y() * l1.y();
    if (den <= 0.0) return std::numeric_limits<double>::infinity();
    return std::sqrt(num * num / den);
}

// E = K^T F K projected onto the essential manifold: singular values become
// (s, s, 0) with s the mean of the two largest.
inline Mat3 essential_from_fundamental(const Mat3& f, const CameraIntrinsics& k) {
    const Mat3 km = k.matrix();
    const Mat3 e = km.transpose() * f * km;
    Eigen::JacobiSVD<Mat3> svd(e, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Vec3 sv = svd.singularValues();
    const double s = 0.5 * (sv(0) + sv(1));
    sv << s, s, 0.0;
    return svd.matrixU() * sv.asDiagonal() * svd.matrixV().transpose();
}

// Homogeneous DLT triangulation from any number of views, without refinement.
inline HomPoint3 triangulate_linear(const std::vector<ProjectionMatrix>& ps,
                                    const std::vector<Vec2>& xs) {
    Eigen::MatrixXd a(2 * ps.size(), 4);
    for (std::size_t i = 0; i < ps.size(); ++i) {
        a.row(static_cast<Eigen::Index>(2 * i)) = xs[i].x() * ps[i].row(2) - ps[i].row(0);
        a.row(static_cast<Eigen::Index>(2 * i + 1)) = xs[i].y() * ps[i].row(2) - ps[i].row(1);
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
    return svd.matrixV().col(3);
}

namespace detail {

inline Vec3 camera_center_of(const ProjectionMatrix& p) {
    const Mat3 m = p.leftCols<3>();
    return -m.inverse() * p.col(3);
}

inline Vec3 ray_direction(const ProjectionMatrix& p, const Vec2& x) {
    const Mat3 m = p.leftCols<3>();
    return (m.inverse() * x.homogeneous()).normalized();
}

// One Gauss-Newton step on the summed squared reprojection error, kept only
// if it improves the cost.
inline HomPoint3 refine_triangulation(const std::vector<ProjectionMatrix>& ps,
                                      const std::vector<Vec2>& xs, const HomPoint3& x0) {
    Vec3 x;
    try {
        x = dehomogenize(x0);
    } catch (const PointAtInfinityError&) {
        return x0;
    }
    auto cost = [&](const Vec3& p) {
        double c = 0.0;
        for (std::size_t i = 0; i < ps.size(); ++i) {
            const ProjectResult pr = project(ps[i], p);
            c += (pr.pixel - xs[i]).squaredNorm();
        }
        return c;
    };
    Eigen::Matrix3d jtj = Eigen::Matrix3d::Zero();
    Vec3 jtr = Vec3::Zero();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const HomPoint3 h = x.homogeneous();
        const double u = ps[i].row(0).dot(h);
        const double v = ps[i].row(1).dot(h);
        const double w = ps[i].row(2).dot(h);
        if (w == 0.0) return x0;
        Eigen::Matrix<double, 2, 3> j;
        for (int c = 0; c < 3; ++c) {
            j(0, c) = (ps[i](0, c) * w - u * ps[i](2, c)) / (w * w);
            j(1, c) = (ps[i](1, c) * w - v * ps[i](2, c)) / (w * w);
        }
        const Vec2 r = xs[i] - Vec2(u / w, v / w);
        jtj += j.transpose() * j;
        jtr += j.transpose() * r;
    }
    const Eigen::LDLT<Eigen::Matrix3d> ldlt(jtj);
    if (ldlt.info() != Eigen::Success) return x0;
    const Vec3 xr = x + ldlt.solve(jtr);
    return cost(xr) < cost(x) ? xr.homogeneous().eval() : x0;
}

}  // namespace detail

// DLT triangulation of one correspondence, refined by a single Gauss-Newton
// step on the reprojection error. Throws when the two rays are (anti)parallel.
inline HomPoint3 triangulate(const Vec2& x1, const Vec2& x2, const ProjectionMatrix& p1,
                             const ProjectionMatrix& p2) {
    const Vec3 d1 = detail::ray_direction(p1, x1);
    const Vec3 d2 = detail::ray_direction(p2, x2);
    const double angle = std::asin(std::min(1.0, d1.cross(d2).norm()));
    if (angle < 1e-6) throw ParallelRaysError();
    const std::vector<ProjectionMatrix> ps{p1, p2};
    const std::vector<Vec2> xs{x1, x2};
    return detail::refine_triangulation(ps, xs, triangulate_linear(ps, xs));
}

// Multi-view variant used by densification; requires >= 2 views and at least
// one non-parallel ray pair.
inline HomPoint3 triangulate_nview(const std::vector<ProjectionMatrix>& ps,
                                   const std::vector<Vec2>& xs) {
    if (ps.size() < 2 || ps.size() != xs.size())
        throw Error("triangulate_nview: need matching lists of at least 2 views");
    bool ok = false;
    const Vec3 d0 = detail::ray_direction(ps[0], xs[0]);
    for (std::size_t i = 1; i < ps.size() && !ok; ++i)
        ok = std::asin(std::min(1.0, d0.cross(detail::ray_direction(ps[i], xs[i])).norm())) >= 1e-6;
    if (!ok) throw ParallelRaysError();
    return detail::refine_triangulation(ps, xs, triangulate_linear(ps, xs));
}

// Of the four (R, +-t) factorizations of E, returns the one placing the
// strict majority of triangulated correspondences at positive depth in both
// views. The translation is unit length.
inline CameraPose recover_pose(const Mat3& e, const std::vector<Correspondence>& corrs,
                               const CameraIntrinsics& k) {
    if (corrs.empty()) throw Error("recover_pose: at least one correspondence required");
    Eigen::JacobiSVD<Mat3> svd(e, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 u = svd.matrixU();
    Mat3 v = svd.matrixV();
    if (u.determinant() < 0.0) u.col(2) = -u.col(2);
    if (v.determinant() < 0.0) v.col(2) = -v.col(2);
    Mat3 w = Mat3::Zero();
    w(0, 1) = -1.0;
    w(1, 0) = 1.0;
    w(2, 2) = 1.0;
    const Mat3 r1 = u * w * v.transpose();
    const Mat3 r2 = u * w.transpose() * v.transpose();
    const Vec3 t = u.col(2).normalized();

    CameraPose identity;
    const ProjectionMatrix p1 = compose_camera_matrix(k, identity);
    std::array<CameraPose, 4> candidates;
    candidates[0] = {r1, t};
    candidates[1] = {r1, -t};
    candidates[2] = {r2, t};
    candidates[3] = {r2, -t};

    int best = -1, best_count = -1, second_count = -1;
    for (int c = 0; c < 4; ++c) {
        const ProjectionMatrix p2 = compose_camera_matrix(k, candidates[c]);
        int count = 0;
        for (const auto& m : corrs) {
            HomPoint3 xh;
            try {
                xh = triangulate(m.x1, m.x2, p1, p2);
            } catch (const ParallelRaysError&) {
                continue;
            }
            if (project(p1, xh).depth > 0.0 && project(p2, xh).depth > 0.0) ++count;
        }
        if (count > best_count) {
            second_count = best_count;
            best_count = count;
            best = c;
        } else if (count > second_count) {
            second_count = count;
        }
    }
    if (best_count <= 0 || best_count <= second_count) throw AmbiguousCheiralityError();
    return candidates[best];
}

struct DegeneracyReport {
    bool degenerate = false;
    std::string diagnosis;
};

namespace detail {

// Normalized 4-point DLT homography (x2 ~ H x1).
inline Mat3 estimate_homography(const std::vector<Correspondence>& corrs) {
    const Mat3 t1 = normalizing_transform(corrs, false);
    const Mat3 t2 = normalizing_transform(corrs, true);
    Eigen::MatrixXd a(2 * corrs.size(), 9);
    for (std::size_t i = 0; i < corrs.size(); ++i) {
        const HomPoint2 p1 = t1 * corrs[i].x1.homogeneous();
        const HomPoint2 p2 = t2 * corrs[i].x2.homogeneous();
        a.row(static_cast<Eigen::Index>(2 * i)) << p1.x(), p1.y(), 1.0, 0.0, 0.0, 0.0,
            -p2.x() * p1.x(), -p2.x() * p1.y(), -p2.x();
        a.row(static_cast<Eigen::Index>(2 * i + 1)) << 0.0, 0.0, 0.0, p1.x(), p1.y(), 1.0,
            -p2.y() * p1.x(), -p2.y() * p1.y(), -p2.y();
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
    const Eigen::VectorXd h = svd.matrixV().col(8);
    Mat3 hm;
    hm << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
    return t2.inverse() * hm * t1;
}

inline double homography_transfer_error(const Mat3& h, const Correspondence& m) {
    const HomPoint2 p = h * m.x1.homogeneous();
    if (std::abs(p.z()) < kHomogeneousEps) return std::numeric_limits<double>::infinity();
    return (p.hnormalized() - m.x2).norm();
}

inline std::vector<std::size_t> sample_indices(Rng& rng, std::size_t n, std::size_t k) {
    std::vector<std::size_t> idx;
    idx.reserve(k);
    while (idx.size() < k) {
        const std::size_t c = rng.uniform_index(n);
        if (std::find(idx.begin(), idx.end(), c) == idx.end()) idx.push_back(c);
    }
    return idx;
}

// Fraction of correspondences a RANSAC-fit homography explains within the
// pixel threshold.
inline double homography_support(const std::vector<Correspondence>& corrs, double threshold_px,
                                 Rng& rng, int iterations) {
    std::size_t best = 0;
    for (int it = 0; it < iterations; ++it) {
        const auto idx = sample_indices(rng, corrs.size(), 4);
        std::vector<Correspondence> sample;
        for (std::size_t i : idx) sample.push_back(corrs[i]);
        Mat3 h;
        try {
            h = estimate_homography(sample);
        } catch (...) {
            continue;
        }
        std::size_t count = 0;
        for (const auto& m : corrs)
            if (homography_transfer_error(h, m) < threshold_px) ++count;
        best = std::max(best, count);
    }
    return static_cast<double>(best) / static_cast<double>(corrs.size());
}

}  // namespace detail

// Pure-rotation / no-parallax detection. True when a homography explains
// nearly all correspondences while the rotation-compensated residual motion
// stays below min_parallax_px, or when the fitted fundamental collapses.
inline DegeneracyReport is_degenerate(const std::vector<Correspondence>& corrs,
                                      const CameraIntrinsics& k, double threshold_px = 1.5,
                                      double min_parallax_px = 1.0,
                                      std::uint64_t seed = 0x5eedbead) {
    if (corrs.size() < 8) throw InsufficientCorrespondencesError();

    std::vector<double> disp(corrs.size());
    for (std::size_t i = 0; i < corrs.size(); ++i) disp[i] = (corrs[i].x2 - corrs[i].x1).norm();
    std::nth_element(disp.begin(), disp.begin() + disp.size() / 2, disp.end());
    if (disp[disp.size() / 2] < min_parallax_px) return {true, "no parallax"};

    Rng rng(seed);
    const double support = detail::homography_support(corrs, threshold_px, rng, 200);
    if (support >= 0.98) {
        // A dominant homography also arises for planar scenes under real
        // translation. Undo the rotation implied by F/E; if the leftover
        // pixel motion is tiny, the camera only rotated.
        try {
            const Mat3 f = estimate_fundamental_8pt(corrs);
            if (f.norm() < 1e-14) return {true, "null fundamental"};
            const Mat3 e = essential_from_fundamental(f, k);
            const CameraPose pose = recover_pose(e, corrs, k);
            const Mat3 km = k.matrix();
            const Mat3 hinf = km * pose.rotation * km.inverse();
            std::vector<double> residual(corrs.size());
            for (std::size_t i = 0; i < corrs.size(); ++i)
                residual[i] = detail::homography_transfer_error(hinf, corrs[i]);
            std::nth_element(residual.begin(), residual.begin() + residual.size() / 2,
                             residual.end());
            if (residual[residual.size() / 2] < min_parallax_px) return {true, "pure rotation"};
        } catch (const Error&) {
            return {true, "pure rotation"};
        }
    }
    return {false, ""};
}

// Full two-view estimation: RANSAC over 8-point hypotheses scored by Sampson
// distance, refit on the consensus set, essential matrix and relative pose
// recovery. Throws DegenerateMotionError for rotation-only input and
// NoConsensusError when fewer than 8 inliers support the best model.
inline TwoViewGeometry ransac_two_view(const std::vector<Correspondence>& corrs,
                                       const CameraIntrinsics& k, int iterations = 2000,
                                       double inlier_threshold_px = 1.5,
                                       std::uint64_t seed = 0x2b00b1e5) {
    if (corrs.size() < 8) throw InsufficientCorrespondencesError();
    const DegeneracyReport deg = is_degenerate(corrs, k, inlier_threshold_px);
    if (deg.degenerate) throw DegenerateMotionError(deg.diagnosis);

    Rng rng(seed);
    Mat3 best_f = Mat3::Zero();
    std::size_t best_count = 0;
    double best_residual = std::numeric_limits<double>::infinity();
    for (int it = 0; it < iterations; ++it) {
        const auto idx = detail::sample_indices(rng, corrs.size(), 8);
        std::vector<Correspondence> sample;
        for (std::size_t i : idx) sample.push_back(corrs[i]);
        Mat3 f;
        try {
            f = estimate_fundamental_8pt(sample);
        } catch (const Error&) {
            continue;
        }
        // A minimal sample always nearly fits itself; consensus only counts
        // the correspondences outside the sample.
        std::size_t count = 0;
        double residual = 0.0;
        for (std::size_t i = 0; i < corrs.size(); ++i) {
            if (std::find(idx.begin(), idx.end(), i) != idx.end()) continue;
            const double d = sampson_distance(f, corrs[i].x1, corrs[i].x2);
            if (d < inlier_threshold_px) {
                ++count;
                residual += d * d;
            }
        }
        if (count > best_count || (count == best_count && residual < best_residual)) {
            best_count = count;
            best_residual = residual;
            best_f = f;
        }
    }
    if (best_count < 8) throw NoConsensusError();

    std::vector<Correspondence> consensus;
    for (const auto& m : corrs)
        if (sampson_distance(best_f, m.x1, m.x2) < inlier_threshold_px) consensus.push_back(m);
    const Mat3 f = estimate_fundamental_8pt(consensus);

    TwoViewGeometry g;
    g.F = f;
    g.inliers.clear();
    std::vector<Correspondence> inlier_corrs;
    for (std::size_t i = 0; i < corrs.size(); ++i) {
        if (sampson_distance(f, corrs[i].x1, corrs[i].x2) < inlier_threshold_px) {
            g.inliers.push_back(i);
            inlier_corrs.push_back(corrs[i]);
        }
    }
    if (g.inliers.size() < 8) throw NoConsensusError();

    g.E = essential_from_fundamental(f, k);
    g.pose2 = recover_pose(g.E, inlier_corrs, k);
    g.pose2.translation.normalize();

    Eigen::JacobiSVD<Mat3> svd(f, Eigen::ComputeFullU);
    g.epipole2 = svd.matrixU().col(2);
    return g;
}

}  // namespace recon
