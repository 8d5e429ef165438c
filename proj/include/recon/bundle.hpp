// Levenberg-Marquardt bundle adjustment over camera poses and 3D points,
// with analytic Jacobians, rotation updates on the manifold (left-multiplied
// 3-parameter increments), and a Schur complement on the point blocks.
// A poses-only mode re-optimizes cameras against a frozen map.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "recon/geometry.hpp"

namespace recon {

struct BaObservation {
    int pose = 0;
    int point = 0;
    Vec2 pixel = Vec2::Zero();
};

struct BaProblem {
    std::vector<CameraPose> poses;
    std::vector<Vec3> points;
    std::vector<BaObservation> observations;
    CameraIntrinsics intrinsics;
};

struct BaReport {
    double initial_cost = 0.0;
    double final_cost = 0.0;
    int iterations = 0;
    bool converged = false;
};

enum class BaMode { full, poses_only };

struct BaOptions {
    BaMode mode = BaMode::full;
    int max_iters = 100;
    double tol = 1e-12;          // relative cost decrease for convergence
    bool huber = false;          // robust loss, off by default
    double huber_delta = 2.5;    // px
    int fixed_poses = 1;         // leading poses frozen (gauge); >= 1
    bool renormalize_scale = true;  // full mode: rescale so |t_1| = 1 at the end
};

constexpr double kBehindCameraPenalty = 1e6;  // px^2 per observation

// Sum of squared pixel reprojection errors; observations landing behind the
// camera contribute a fixed finite penalty.
inline double reprojection_cost(const BaProblem& problem) {
    double cost = 0.0;
    for (const auto& obs : problem.observations) {
        const ProjectResult pr =
            project(problem.intrinsics, problem.poses[obs.pose], problem.points[obs.point]);
        if (pr.behind) {
            cost += kBehindCameraPenalty;
        } else {
            cost += (pr.pixel - obs.pixel).squaredNorm();
        }
    }
    return cost;
}

struct ObsJacobian {
    Vec2 residual = Vec2::Zero();                          // observed - projected
    Eigen::Matrix<double, 2, 6> j_pose;                    // d residual / d (omega, dt)
    Eigen::Matrix<double, 2, 3> j_point;                   // d residual / d X
    bool behind = false;
};

// Residual and analytic Jacobians of one observation. Pose increments are
// left-multiplicative: R <- exp([omega]x) R, t <- t + dt.
inline ObsJacobian evaluate_observation(const CameraIntrinsics& k, const CameraPose& pose,
                                        const Vec3& point, const Vec2& pixel) {
    ObsJacobian out;
    const Vec3 y = pose.apply(point);
    if (y.z() <= 0.0) {
        out.behind = true;
        out.j_pose.setZero();
        out.j_point.setZero();
        return out;
    }
    const double f = k.focal_px;
    const double iz = 1.0 / y.z();
    const Vec2 projected(f * y.x() * iz + k.principal_px.x(), f * y.y() * iz + k.principal_px.y());
    out.residual = pixel - projected;

    Eigen::Matrix<double, 2, 3> dpi;  // d projection / d camera-frame point
    dpi << f * iz, 0.0, -f * y.x() * iz * iz, 0.0, f * iz, -f * y.y() * iz * iz;

    Eigen::Matrix<double, 3, 6> dy;  // d camera-frame point / d (omega, dt)
    dy.leftCols<3>() = -skew(y - pose.translation);
    dy.rightCols<3>() = Mat3::Identity();

    out.j_pose = -dpi * dy;
    out.j_point = -dpi * pose.rotation;
    return out;
}

namespace detail {

// Cost used by the optimizer: plain squared error, or Huber when enabled.
inline double ba_internal_cost(const BaProblem& p, const BaOptions& o) {
    if (!o.huber) return reprojection_cost(p);
    double cost = 0.0;
    for (const auto& obs : p.observations) {
        const ProjectResult pr = project(p.intrinsics, p.poses[obs.pose], p.points[obs.point]);
        if (pr.behind) {
            cost += kBehindCameraPenalty;
            continue;
        }
        const double e = (pr.pixel - obs.pixel).norm();
        cost += e <= o.huber_delta ? e * e : o.huber_delta * (2.0 * e - o.huber_delta);
    }
    return cost;
}

inline void apply_pose_step(CameraPose& pose, const Eigen::Matrix<double, 6, 1>& step) {
    pose.rotation = rotation_exp(step.head<3>()) * pose.rotation;
    pose.translation += step.tail<3>();
}

}  // namespace detail

// LM minimization of the reprojection functional. Pose 0 .. fixed_poses-1
// stay frozen (gauge); in full mode the point blocks are eliminated via the
// Schur complement, and the result is rescaled so pose 1's translation has
// unit norm (pure gauge motion, cost-invariant). poses_only leaves the point
// list untouched.
inline BaReport ba_optimize(BaProblem& problem, const BaOptions& opts = {}) {
    if (opts.fixed_poses < 1) throw Error("ba_optimize: at least one pose must stay fixed");
    for (const auto& obs : problem.observations) {
        if (obs.pose < 0 || obs.pose >= static_cast<int>(problem.poses.size()) ||
            obs.point < 0 || obs.point >= static_cast<int>(problem.points.size()))
            throw Error("ba_optimize: observation references invalid index");
    }
    if (opts.mode == BaMode::full) {
        std::vector<int> seen(problem.points.size(), 0);
        for (const auto& obs : problem.observations) ++seen[obs.point];
        for (std::size_t i = 0; i < seen.size(); ++i)
            if (seen[i] > 0 && seen[i] < 2)
                throw Error("ba_optimize: full mode requires every point observed at least twice");
    }

    const bool full = opts.mode == BaMode::full;
    const int n_poses = static_cast<int>(problem.poses.size());
    const int n_free = std::max(0, n_poses - opts.fixed_poses);
    const int n_points = static_cast<int>(problem.points.size());

    BaReport report;
    report.initial_cost = detail::ba_internal_cost(problem, opts);
    report.final_cost = report.initial_cost;
    if (n_free == 0 && !full) {
        report.converged = true;
        return report;
    }

    double lambda = -1.0;  // set from the first Hessian diagonal
    double cost = report.initial_cost;

    for (int iter = 0; iter < opts.max_iters; ++iter) {
        // Assemble the normal equations in pose/point block structure.
        std::vector<Eigen::Matrix<double, 6, 6>> u(
            n_free, Eigen::Matrix<double, 6, 6>::Zero());
        std::vector<Eigen::Matrix<double, 6, 1>> gp(
            n_free, Eigen::Matrix<double, 6, 1>::Zero());
        std::vector<Mat3> v(full ? n_points : 0, Mat3::Zero());
        std::vector<Vec3> gx(full ? n_points : 0, Vec3::Zero());
        std::map<std::pair<int, int>, Eigen::Matrix<double, 6, 3>> w;  // (free pose, point)

        double grad_inf = 0.0;
        for (const auto& obs : problem.observations) {
            ObsJacobian ej = evaluate_observation(problem.intrinsics, problem.poses[obs.pose],
                                                  problem.points[obs.point], obs.pixel);
            if (ej.behind) continue;
            if (opts.huber) {
                const double e = ej.residual.norm();
                if (e > opts.huber_delta) {
                    const double s = std::sqrt(opts.huber_delta / e);
                    ej.residual *= s;
                    ej.j_pose *= s;
                    ej.j_point *= s;
                }
            }
            const int fp = obs.pose - opts.fixed_poses;
            if (fp >= 0) {
                u[fp] += ej.j_pose.transpose() * ej.j_pose;
                const Eigen::Matrix<double, 6, 1> g = -ej.j_pose.transpose() * ej.residual;
                gp[fp] += g;
                grad_inf = std::max(grad_inf, g.cwiseAbs().maxCoeff());
            }
            if (full) {
                v[obs.point] += ej.j_point.transpose() * ej.j_point;
                const Vec3 g = -ej.j_point.transpose() * ej.residual;
                gx[obs.point] += g;
                grad_inf = std::max(grad_inf, g.cwiseAbs().maxCoeff());
                if (fp >= 0) {
                    auto [it, inserted] = w.try_emplace(std::make_pair(fp, obs.point),
                                                        Eigen::Matrix<double, 6, 3>::Zero());
                    it->second += ej.j_pose.transpose() * ej.j_point;
                }
            }
        }

        if (grad_inf < 1e-15) {
            report.converged = true;
            break;
        }

        if (lambda < 0.0) {
            double diag_sum = 0.0;
            int diag_n = 0;
            for (const auto& blk : u) {
                diag_sum += blk.trace();
                diag_n += 6;
            }
            for (const auto& blk : v) {
                diag_sum += blk.trace();
                diag_n += 3;
            }
            lambda = diag_n > 0 ? 1e-4 * diag_sum / diag_n : 1e-4;
            lambda = std::clamp(lambda, 1e-12, 1e12);
        }

        bool accepted = false;
        while (!accepted) {
            // Damped point blocks and their inverses.
            std::vector<Mat3> v_inv(full ? n_points : 0);
            if (full) {
                for (int i = 0; i < n_points; ++i) {
                    Mat3 vd = v[i] + lambda * Mat3::Identity();
                    v_inv[i] = vd.inverse();
                }
            }

            // Schur complement on points: reduced pose system.
            Eigen::MatrixXd s = Eigen::MatrixXd::Zero(6 * n_free, 6 * n_free);
            Eigen::VectorXd rhs = Eigen::VectorXd::Zero(6 * n_free);
            for (int j = 0; j < n_free; ++j) {
                s.block<6, 6>(6 * j, 6 * j) =
                    u[j] + lambda * Eigen::Matrix<double, 6, 6>::Identity();
                rhs.segment<6>(6 * j) = gp[j];
            }
            if (full) {
                // Group W blocks by point to form W V^-1 W^T and W V^-1 gx.
                std::map<int, std::vector<std::pair<int, const Eigen::Matrix<double, 6, 3>*>>>
                    by_point;
                for (const auto& [key, blk] : w) by_point[key.second].push_back({key.first, &blk});
                for (const auto& [pt, list] : by_point) {
                    for (const auto& [j1, b1] : list) {
                        const Eigen::Matrix<double, 6, 3> t = (*b1) * v_inv[pt];
                        rhs.segment<6>(6 * j1) -= t * gx[pt];
                        for (const auto& [j2, b2] : list)
                            s.block<6, 6>(6 * j1, 6 * j2) -= t * b2->transpose();
                    }
                }
            }

            Eigen::VectorXd dp;
            if (n_free > 0) {
                const Eigen::LDLT<Eigen::MatrixXd> ldlt(s);
                dp = ldlt.solve(rhs);
                if (!dp.allFinite()) dp.setZero();
            } else {
                dp.resize(0);
            }

            BaProblem trial = problem;
            for (int j = 0; j < n_free; ++j)
                detail::apply_pose_step(trial.poses[opts.fixed_poses + j], dp.segment<6>(6 * j));
            if (full) {
                std::vector<Vec3> back(n_points, Vec3::Zero());  // W^T dp per point
                for (const auto& [key, blk] : w)
                    back[key.second] += blk.transpose() * dp.segment<6>(6 * key.first);
                for (int i = 0; i < n_points; ++i)
                    trial.points[i] += v_inv[i] * (gx[i] - back[i]);
            }

            const double trial_cost = detail::ba_internal_cost(trial, opts);
            if (trial_cost < cost) {
                const double rel = (cost - trial_cost) / std::max(cost, 1e-300);
                problem = std::move(trial);
                cost = trial_cost;
                lambda = std::max(lambda / 3.0, 1e-12);
                accepted = true;
                if (rel < opts.tol) report.converged = true;
            } else {
                lambda *= 10.0;
                if (lambda > 1e12) {
                    report.converged = true;  // stalled at damping bound, no step improves
                    break;
                }
            }
        }

        ++report.iterations;
        if (report.converged) break;
    }

    report.final_cost = cost;

    if (full && opts.renormalize_scale && n_poses >= 2) {
        const double norm1 = problem.poses[1].translation.norm();
        if (norm1 > 0.0) {
            const double s = 1.0 / norm1;
            for (auto& pose : problem.poses) pose.translation *= s;
            for (auto& pt : problem.points) pt *= s;
        }
    }
    return report;
}

}  // namespace recon
