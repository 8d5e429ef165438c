// Homogeneous point algebra, camera intrinsics, poses and pinhole projection.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace recon {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Mat34 = Eigen::Matrix<double, 3, 4>;

// Homogeneous world point [X Y Z W] and image point [x y w].
using HomPoint3 = Vec4;
using HomPoint2 = Vec3;

// All recoverable pipeline failures derive from this.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class PointAtInfinityError : public Error {
public:
    PointAtInfinityError() : Error("dehomogenize: scale component is zero (point at infinity)") {}
};

inline constexpr double kHomogeneousEps = 1e-12;

inline Vec3 dehomogenize(const HomPoint3& p) {
    if (std::abs(p.w()) < kHomogeneousEps) throw PointAtInfinityError();
    return p.head<3>() / p.w();
}

inline Vec2 dehomogenize(const HomPoint2& p) {
    if (std::abs(p.z()) < kHomogeneousEps) throw PointAtInfinityError();
    return p.head<2>() / p.z();
}

// Pinhole intrinsics, zero skew. focal_px is the focal length already
// expressed in pixels (f*m); principal_px likewise.
struct CameraIntrinsics {
    double focal_px = 1.0;
    Vec2 principal_px = Vec2::Zero();

    Mat3 matrix() const {
        Mat3 k = Mat3::Identity();
        k(0, 0) = focal_px;
        k(1, 1) = focal_px;
        k(0, 2) = principal_px.x();
        k(1, 2) = principal_px.y();
        return k;
    }
};

// Square image of the given resolution, principal point at the image
// center, focal length = resolution/2.
inline CameraIntrinsics build_intrinsics(int resolution_px) {
    if (resolution_px <= 0) throw Error("build_intrinsics: resolution must be positive");
    CameraIntrinsics k;
    k.focal_px = resolution_px / 2.0;
    k.principal_px = Vec2(resolution_px / 2.0, resolution_px / 2.0);
    return k;
}

// World-to-camera rigid motion: x_cam = R*X + t.
struct CameraPose {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    static constexpr double kOrthoTol = 1e-9;

    bool valid() const {
        Mat3 rrt = rotation.transpose() * rotation;
        return (rrt - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-6 &&
               std::abs(rotation.determinant() - 1.0) < 1e-6;
    }

    Vec3 camera_center() const { return -rotation.transpose() * translation; }

    Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

    CameraPose inverse() const {
        CameraPose inv;
        inv.rotation = rotation.transpose();
        inv.translation = -(rotation.transpose() * translation);
        return inv;
    }

    // this ∘ other: first apply other, then this.
    CameraPose compose(const CameraPose& other) const {
        CameraPose out;
        out.rotation = rotation * other.rotation;
        out.translation = rotation * other.translation + translation;
        return out;
    }
};

using ProjectionMatrix = Mat34;

inline ProjectionMatrix compose_camera_matrix(const CameraIntrinsics& k, const CameraPose& pose) {
    if (!pose.valid()) throw Error("compose_camera_matrix: rotation is not a proper rotation");
    Mat34 rt;
    rt.leftCols<3>() = pose.rotation;
    rt.col(3) = pose.translation;
    return k.matrix() * rt;
}

struct ProjectResult {
    Vec2 pixel = Vec2::Zero();
    double depth = 0.0;    // third homogeneous component before division
    bool behind = false;   // depth <= 0
};

inline ProjectResult project(const ProjectionMatrix& p, const HomPoint3& x) {
    ProjectResult r;
    HomPoint2 h = p * x;
    double w = x.w() >= 0.0 ? h.z() : -h.z();  // sign-normalize so depth is geometric
    r.depth = w;
    r.behind = w <= 0.0;
    // The projective image point stays defined behind the camera (antipodal
    // pixel); callers use the behind flag for visibility decisions.
    if (h.z() != 0.0) r.pixel = h.head<2>() / h.z();
    return r;
}

// Convenience for inhomogeneous world points.
inline ProjectResult project(const ProjectionMatrix& p, const Vec3& x) {
    return project(p, HomPoint3(x.x(), x.y(), x.z(), 1.0));
}

inline ProjectResult project(const CameraIntrinsics& k, const CameraPose& pose, const Vec3& x) {
    ProjectResult r;
    Vec3 cam = pose.apply(x);
    r.depth = cam.z();
    r.behind = cam.z() <= 0.0;
    if (cam.z() != 0.0)
        r.pixel = Vec2(k.focal_px * cam.x() / cam.z() + k.principal_px.x(),
                       k.focal_px * cam.y() / cam.z() + k.principal_px.y());
    return r;
}

// Unit quaternion (w, x, y, z) from a rotation matrix. Shepperd's method.
inline Vec4 quaternion_from_rotation(const Mat3& r) {
    Vec4 q;
    double tr = r.trace();
    if (tr > 0.0) {
        double s = std::sqrt(tr + 1.0) * 2.0;
        q << 0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s;
    } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
        double s = std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2)) * 2.0;
        q << (r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s;
    } else if (r(1, 1) > r(2, 2)) {
        double s = std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2)) * 2.0;
        q << (r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s, (r(1, 2) + r(2, 1)) / s;
    } else {
        double s = std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1)) * 2.0;
        q << (r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, 0.25 * s;
    }
    if (q(0) < 0.0) q = -q;  // canonical sign
    return q.normalized();
}

inline Mat3 rotation_from_quaternion(const Vec4& q) {
    double w = q(0), x = q(1), y = q(2), z = q(3);
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

// Rodrigues exponential map, so(3) -> SO(3).
inline Mat3 rotation_exp(const Vec3& w) {
    double theta = w.norm();
    if (theta < 1e-12) {
        Mat3 wx;
        wx << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
        return Mat3::Identity() + wx;
    }
    Vec3 a = w / theta;
    Mat3 ax;
    ax << 0, -a.z(), a.y(), a.z(), 0, -a.x(), -a.y(), a.x(), 0;
    return Mat3::Identity() + std::sin(theta) * ax + (1.0 - std::cos(theta)) * (ax * ax);
}

// Logarithm map, SO(3) -> so(3). Inverse of rotation_exp.
inline Vec3 rotation_log(const Mat3& r) {
    double c = std::clamp(0.5 * (r.trace() - 1.0), -1.0, 1.0);
    double theta = std::acos(c);
    Vec3 w(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
    if (theta < 1e-9) return 0.5 * w;
    if (theta > std::numbers::pi - 1e-5) {
        // Near pi the skew part vanishes; recover the axis from the symmetric part.
        Mat3 s = 0.5 * (r + Mat3::Identity());
        Vec3 a(std::sqrt(std::max(0.0, s(0, 0))), std::sqrt(std::max(0.0, s(1, 1))),
               std::sqrt(std::max(0.0, s(2, 2))));
        int k = 0;
        if (a.y() > a.x()) k = 1;
        if (a.z() > a(k)) k = 2;
        for (int i = 0; i < 3; ++i)
            if (i != k && s(k, i) < 0.0) a(i) = -a(i);
        if (a.norm() < 1e-12) return Vec3::Zero();
        return theta * a.normalized();
    }
    return (theta / (2.0 * std::sin(theta))) * w;
}

inline Mat3 skew(const Vec3& v) {
    Mat3 m;
    m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    return m;
}

// Angle between two rotations, radians.
inline double rotation_angle_between(const Mat3& a, const Mat3& b) {
    double c = ((a.transpose() * b).trace() - 1.0) * 0.5;
    return std::acos(std::clamp(c, -1.0, 1.0));
}

inline double angle_between(const Vec3& a, const Vec3& b) {
    double c = a.dot(b) / (a.norm() * b.norm());
    return std::acos(std::clamp(c, -1.0, 1.0));
}

struct Aabb {
    Vec3 lo;
    Vec3 hi;
    Vec3 extent() const { return hi - lo; }
    Vec3 center() const { return 0.5 * (lo + hi); }
    double diagonal() const { return (hi - lo).norm(); }
};

inline Aabb bounding_box(const std::vector<Vec3>& points) {
    if (points.empty()) throw Error("bounding_box: empty point set");
    Aabb box{points.front(), points.front()};
    for (const auto& p : points) {
        box.lo = box.lo.cwiseMin(p);
        box.hi = box.hi.cwiseMax(p);
    }
    return box;
}

}  // namespace recon
