// Shared synthetic data factories for the unit tests. Everything here is
// forward-generated from known ground truth so the tests can check library
// output against independently constructed values.
#pragma once

#include <vector>

#include "recon/epipolar.hpp"
#include "recon/geometry.hpp"
#include "recon/prng.hpp"

namespace testutil {

using namespace recon;

inline Mat3 random_rotation(Rng& rng, double max_angle = 3.0) {
    Vec3 axis(rng.normal(), rng.normal(), rng.normal());
    const double n = axis.norm();
    if (n < 1e-12) return Mat3::Identity();
    return rotation_exp(axis / n * rng.uniform(0.0, max_angle));
}

struct TwoViewScene {
    CameraIntrinsics k;
    CameraPose pose1;  // identity
    CameraPose pose2;
    Mat3 f_true = Mat3::Zero();  // unit-norm, sign-fixed
    std::vector<Vec3> points;
    std::vector<Correspondence> corrs;
};

// Ground-truth fundamental for pose2 relative to pose1 = identity:
// E = [t]x R, F = K^-T E K^-1, then unit norm with positive leading entry.
inline Mat3 fundamental_from_pose(const CameraIntrinsics& k, const CameraPose& pose2) {
    const Mat3 e = skew(pose2.translation) * pose2.rotation;
    const Mat3 km = k.matrix();
    Mat3 f = km.transpose().inverse() * e * km.inverse();
    f /= f.norm();
    int r = 0, c = 0;
    f.cwiseAbs().maxCoeff(&r, &c);
    if (f(r, c) < 0.0) f = -f;
    return f;
}

// Random points visible in both views of a generic stereo pair.
inline TwoViewScene make_two_view_scene(std::uint64_t seed, int n_points,
                                        double rotation_scale = 0.2,
                                        double translation_norm = 0.5) {
    Rng rng(seed);
    TwoViewScene s;
    s.k = build_intrinsics(500);
    s.pose2.rotation = random_rotation(rng, rotation_scale);
    Vec3 t(rng.normal(), rng.normal(), rng.normal());
    while (t.norm() < 1e-6) t = Vec3(rng.normal(), rng.normal(), rng.normal());
    s.pose2.translation = t.normalized() * translation_norm;
    s.f_true = fundamental_from_pose(s.k, s.pose2);

    const ProjectionMatrix p1 = compose_camera_matrix(s.k, s.pose1);
    const ProjectionMatrix p2 = compose_camera_matrix(s.k, s.pose2);
    while (static_cast<int>(s.points.size()) < n_points) {
        const Vec3 x(rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(2.0, 8.0));
        const ProjectResult r1 = project(p1, x);
        const ProjectResult r2 = project(p2, x);
        if (r1.behind || r2.behind) continue;
        if (!(r1.pixel.x() >= 0 && r1.pixel.x() < 500 && r1.pixel.y() >= 0 && r1.pixel.y() < 500))
            continue;
        if (!(r2.pixel.x() >= 0 && r2.pixel.x() < 500 && r2.pixel.y() >= 0 && r2.pixel.y() < 500))
            continue;
        s.points.push_back(x);
        s.corrs.push_back({r1.pixel, r2.pixel});
    }
    return s;
}

}  // namespace testutil
