// Indicator-field surface reconstruction over an adaptive octree.
//
// Oriented samples are splatted into a vector field carried by quadratic
// B-spline bases on octree nodes. The weak-form Poisson system matching the
// field's divergence is solved depth by depth (coarse corrections feed the
// finer levels), the mean field value at the samples picks the iso level,
// and the level set is polygonized over the finest cells near data.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <unordered_map>
#include <utility>
#include <vector>

#include "recon/cloud.hpp"
#include "recon/geometry.hpp"
#include "recon/kdtree.hpp"
#include "recon/mesh.hpp"
#include "recon/octree.hpp"

namespace recon {

struct IndicatorField {
    std::vector<double> coefficients;  // one per octree node
    double iso_value = 0.0;
    // Solver residual trace per depth, starting at the initial residual.
    std::vector<std::vector<double>> solve_residuals;
};

namespace detail {

// Centered quadratic B-spline, support (-1.5, 1.5), unit integral.
inline double bspline(double t) {
    const double a = std::abs(t);
    if (a >= 1.5) return 0.0;
    if (a <= 0.5) return 0.75 - t * t;
    const double s = 1.5 - a;
    return 0.5 * s * s;
}

inline double bspline_deriv(double t) {
    const double a = std::abs(t);
    if (a >= 1.5) return 0.0;
    if (a <= 0.5) return -2.0 * t;
    return t > 0.0 ? a - 1.5 : 1.5 - a;
}

// Cache of one-dimensional basis product integrals. For two nodes on one
// axis with widths w_c = t*w_f (t = 2^shift >= 1), the dimensionless
//
//   J(dc, df, kappa) = integral of b^(dc)((u - kappa/2)/t) * b^(df)(u) du
//
// depends only on the integers (shift, dc, df, kappa), where
// kappa = 2*t*k_c + t - 2*k_f - 1 comes from the lattice coordinates.
// Physical integrals are J times a power of the node widths, so scaled
// inputs reuse the exact same table entries.
struct IntegralTable {
    std::map<std::array<std::int64_t, 4>, double> cache;

    double operator()(int shift, int dc, int df, std::int64_t kappa) {
        const std::array<std::int64_t, 4> key{shift, dc, df, kappa};
        const auto it = cache.find(key);
        if (it != cache.end()) return it->second;
        const double v = compute(shift, dc, df, kappa);
        cache.emplace(key, v);
        return v;
    }

private:
    static double compute(int shift, int dc, int df, std::int64_t kappa) {
        const double t = double(std::int64_t(1) << shift);
        const double off = 0.5 * double(kappa);
        const double lo = std::max(-1.5, off - 1.5 * t);
        const double hi = std::min(1.5, off + 1.5 * t);
        if (lo >= hi) return 0.0;
        // The integrand is a polynomial of degree <= 4 between breakpoints
        // of the two splines; 3-point Gauss-Legendre is exact per piece.
        std::array<double, 6> cuts{-0.5, 0.5,          off - 1.5 * t,
                                   off - 0.5 * t, off + 0.5 * t, off + 1.5 * t};
        std::sort(cuts.begin(), cuts.end());
        const double gx = 0.7745966692414834;  // sqrt(3/5)
        const auto f = [&](double u) {
            const double uc = (u - off) / t;
            return (dc ? bspline_deriv(uc) : bspline(uc)) * (df ? bspline_deriv(u) : bspline(u));
        };
        double sum = 0.0;
        double a = lo;
        const auto piece = [&](double a0, double b0) {
            const double mid = 0.5 * (a0 + b0);
            const double half = 0.5 * (b0 - a0);
            sum += half * ((5.0 / 9.0) * (f(mid - half * gx) + f(mid + half * gx)) +
                           (8.0 / 9.0) * f(mid));
        };
        for (double c : cuts) {
            const double b = std::clamp(c, lo, hi);
            if (b > a) {
                piece(a, b);
                a = b;
            }
        }
        if (hi > a) piece(a, hi);
        return sum;
    }
};

// Integral of grad F_c . grad F_f between a coarser (or equal) node c and a
// finer node f. Even integrals are looked up under |kappa| so that swapping
// the same-depth roles returns bitwise identical values: the assembled
// matrix is exactly symmetric.
inline double stiffness_entry(IntegralTable& tab, const Octree& tree, int coarse_depth,
                              const std::array<std::int64_t, 3>& kc, int fine_depth,
                              const std::array<std::int64_t, 3>& kf) {
    const int shift = fine_depth - coarse_depth;
    const std::int64_t t = std::int64_t(1) << shift;
    std::array<double, 3> j00, j11;
    for (int a = 0; a < 3; ++a) {
        const std::int64_t kap = std::abs(2 * t * kc[a] + t - 2 * kf[a] - 1);
        if (kap >= 3 * (t + 1)) return 0.0;  // supports do not overlap
        j00[a] = tab(shift, 0, 0, kap);
        j11[a] = tab(shift, 1, 1, kap);
    }
    const double wc = tree.width_at(coarse_depth);
    const double wf = tree.width_at(fine_depth);
    return (j11[0] * j00[1] * j00[2] + j00[0] * j11[1] * j00[2] + j00[0] * j00[1] * j11[2]) /
           (wc * wc * wc * wc * wf);
}

// Integral of grad F_row . (m * F_mass): one basis carries the splatted
// vector mass m, the other is the test function whose gradient applies.
inline double load_entry(IntegralTable& tab, const Octree& tree, int row_depth,
                         const std::array<std::int64_t, 3>& kr, int mass_depth,
                         const std::array<std::int64_t, 3>& km, const Vec3& m) {
    if (row_depth <= mass_depth) {  // row basis is the coarser one
        const int shift = mass_depth - row_depth;
        const std::int64_t t = std::int64_t(1) << shift;
        std::array<double, 3> j00, j10;
        for (int a = 0; a < 3; ++a) {
            const std::int64_t kap = 2 * t * kr[a] + t - 2 * km[a] - 1;
            if (std::abs(kap) >= 3 * (t + 1)) return 0.0;
            j00[a] = tab(shift, 0, 0, std::abs(kap));
            j10[a] = tab(shift, 1, 0, kap);
        }
        const double wr = tree.width_at(row_depth);
        return (m.x() * j10[0] * j00[1] * j00[2] + m.y() * j00[0] * j10[1] * j00[2] +
                m.z() * j00[0] * j00[1] * j10[2]) /
               (wr * wr * wr * wr);
    }
    const int shift = row_depth - mass_depth;  // row basis is the finer one
    const std::int64_t t = std::int64_t(1) << shift;
    std::array<double, 3> j00, j01;
    for (int a = 0; a < 3; ++a) {
        const std::int64_t kap = 2 * t * km[a] + t - 2 * kr[a] - 1;
        if (std::abs(kap) >= 3 * (t + 1)) return 0.0;
        j00[a] = tab(shift, 0, 0, std::abs(kap));
        j01[a] = tab(shift, 0, 1, kap);
    }
    const double wr = tree.width_at(row_depth);
    const double wm = tree.width_at(mass_depth);
    return (m.x() * j01[0] * j00[1] * j00[2] + m.y() * j00[0] * j01[1] * j00[2] +
            m.z() * j00[0] * j00[1] * j01[2]) /
           (wr * wm * wm * wm);
}

// Coarse-lattice indices whose basis can overlap a finer cell on one axis,
// prefiltered by the exact support test |kappa| < 3(t + 1). The fine center
// sits at (k + 0.5)/2^shift in coarse units, so +-3 around it covers every
// candidate.
struct AxisCandidates {
    std::array<std::int64_t, 7> k;
    int n = 0;
};

inline AxisCandidates axis_candidates(std::int64_t k_fine, int shift) {
    const std::int64_t t = std::int64_t(1) << shift;
    const auto base = std::int64_t(std::floor((double(k_fine) + 0.5) / double(t) - 0.5));
    AxisCandidates out;
    for (std::int64_t kc = base - 3; kc <= base + 3; ++kc) {
        const std::int64_t kap = 2 * t * kc + t - 2 * k_fine - 1;
        if (std::abs(kap) < 3 * (t + 1)) out.k[out.n++] = kc;
    }
    return out;
}

struct SparseMatrix {
    std::vector<std::size_t> row_begin{0};
    std::vector<std::uint32_t> col;
    std::vector<double> val;

    void apply(const std::vector<double>& x, std::vector<double>& y) const {
        const std::size_t n = row_begin.size() - 1;
        y.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t e = row_begin[i]; e < row_begin[i + 1]; ++e) s += val[e] * x[col[e]];
            y[i] = s;
        }
    }
};

inline double vec_dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double vec_norm(const std::vector<double>& a) { return std::sqrt(vec_dot(a, a)); }

// Conjugate residual iteration. Unlike the vanilla conjugate gradient
// update it minimizes ||r|| at every step, so on a symmetric system the
// recorded residuals never increase.
inline std::vector<double> conjugate_residual(const SparseMatrix& A, const std::vector<double>& b,
                                              double rel_tol, std::size_t iter_cap,
                                              std::vector<double>& history) {
    const std::size_t n = b.size();
    std::vector<double> x(n, 0.0);
    const double b_norm = vec_norm(b);
    history.clear();
    history.push_back(b_norm);
    if (b_norm == 0.0) return x;

    std::vector<double> r = b;
    std::vector<double> p = r;
    std::vector<double> ar(n), ap(n);
    A.apply(r, ar);
    ap = ar;
    double r_ar = vec_dot(r, ar);
    const double target = rel_tol * b_norm;
    double r_norm = b_norm;
    std::size_t iters = 0;
    while (r_norm > target) {
        if (iters++ >= iter_cap) throw Error("indicator solve: iteration cap exceeded");
        const double ap_ap = vec_dot(ap, ap);
        if (!(ap_ap > 0.0) || !(r_ar > 0.0)) break;  // numerically spent
        const double alpha = r_ar / ap_ap;
        for (std::size_t i = 0; i < n; ++i) {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        A.apply(r, ar);
        const double r_ar_next = vec_dot(r, ar);
        const double beta = r_ar_next / r_ar;
        r_ar = r_ar_next;
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = r[i] + beta * p[i];
            ap[i] = ar[i] + beta * ap[i];
        }
        r_norm = vec_norm(r);
        history.push_back(r_norm);
    }
    return x;
}

// Spreads area * normal of every sample trilinearly onto the eight node
// centers around it, at a depth matched to the local sampling density:
// well-sampled regions land on the finest level, sparse regions coarser,
// which is what smooths low-density areas instead of fragmenting them.
// Target cells are created on demand, so the tree may grow.
inline std::map<std::uint32_t, Vec3> splat_samples(Octree& tree, const OrientedPointCloud& cloud) {
    const int top = tree.max_depth;
    const double w_top = tree.width_at(top);
    const KdTree3 kd(cloud.points);
    std::map<std::uint32_t, Vec3> mass;
    for (std::size_t s = 0; s < cloud.points.size(); ++s) {
        // Local patch area: squared distance to the 8th nearest neighbor.
        double area = w_top * w_top;
        int depth = top;
        if (cloud.points.size() >= 9) {
            area = kd.knn(cloud.points[s], 9).back().first;
            const double r8 = std::sqrt(area);
            depth = int(std::floor(double(top) + std::log2(w_top / r8) + 0.5));
            depth = std::clamp(depth, std::min(2, top), top);
        }
        const double w = tree.width_at(depth);
        const std::int64_t cells = std::int64_t(1) << depth;
        const Vec3 amount = area * cloud.normals[s];
        std::array<std::int64_t, 3> k0;
        Vec3 frac;
        for (int a = 0; a < 3; ++a) {
            const double u = (cloud.points[s][a] - tree.root_lo[a]) / w - 0.5;
            // The 10% root margin keeps all eight targets inside the lattice
            // from depth 4 up; the clamp only ever binds at coarser depths.
            const std::int64_t k = std::clamp(std::int64_t(std::floor(u)), std::int64_t(0), cells - 2);
            k0[a] = k;
            frac[a] = std::clamp(u - double(k), 0.0, 1.0);
        }
        for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                    const double wgt = (dx ? frac.x() : 1.0 - frac.x()) *
                                       (dy ? frac.y() : 1.0 - frac.y()) *
                                       (dz ? frac.z() : 1.0 - frac.z());
                    const std::uint32_t id =
                        tree.ensure_node(depth, {k0[0] + dx, k0[1] + dy, k0[2] + dz});
                    mass.try_emplace(id, Vec3::Zero()).first->second += wgt * amount;
                }
    }
    return mass;
}

}  // namespace detail

inline double evaluate_indicator(const IndicatorField& field, const Octree& tree, const Vec3& p) {
    if (field.coefficients.size() != tree.nodes.size())
        throw Error("evaluate_indicator: field does not match tree");
    double sum = 0.0;
    for (int d = 0; d <= tree.max_depth; ++d) {
        const double w = tree.width_at(d);
        const double inv_vol = 1.0 / (w * w * w);
        std::array<double, 3> u;
        std::array<std::int64_t, 3> base;
        for (int a = 0; a < 3; ++a) {
            u[a] = (p[a] - tree.root_lo[a]) / w;
            base[a] = std::int64_t(std::floor(u[a]));
        }
        for (std::int64_t dx = -1; dx <= 1; ++dx)
            for (std::int64_t dy = -1; dy <= 1; ++dy)
                for (std::int64_t dz = -1; dz <= 1; ++dz) {
                    const std::array<std::int64_t, 3> c{base[0] + dx, base[1] + dy, base[2] + dz};
                    const std::int32_t id = tree.find_node(d, c);
                    if (id < 0) continue;
                    const double coef = field.coefficients[std::uint32_t(id)];
                    if (coef == 0.0) continue;
                    sum += coef * inv_vol * detail::bspline(u[0] - double(c[0]) - 0.5) *
                           detail::bspline(u[1] - double(c[1]) - 0.5) *
                           detail::bspline(u[2] - double(c[2]) - 0.5);
                }
    }
    return sum;
}

// Solves for the indicator-like field whose gradient matches the splatted
// normal field in the least-squares sense. Splatting may add nodes, so the
// tree is taken by mutable reference; the returned coefficients line up
// with the grown tree.
inline IndicatorField solve_indicator(Octree& tree, const OrientedPointCloud& cloud) {
    if (cloud.points.empty() || cloud.normals.size() != cloud.points.size())
        throw Error("solve_indicator: cloud lacks oriented normals");
    if (tree.points.size() != cloud.points.size())
        throw Error("solve_indicator: octree was built from a different cloud");

    const auto mass = detail::splat_samples(tree, cloud);
    const int top = tree.max_depth;
    detail::IntegralTable tab;

    // Load vector: every basis integrated against the splatted field. Rows
    // at or above each mass node are reached from the mass side; rows below
    // walk their own coarse windows, which stay small.
    std::vector<double> load(tree.nodes.size(), 0.0);
    for (const auto& [jid, mj] : mass) {
        const OctreeNode& nj = tree.nodes[jid];
        for (int d = 0; d <= nj.depth; ++d) {
            std::array<detail::AxisCandidates, 3> win;
            for (int a = 0; a < 3; ++a) win[a] = detail::axis_candidates(nj.coord[a], nj.depth - d);
            for (int x = 0; x < win[0].n; ++x)
                for (int y = 0; y < win[1].n; ++y)
                    for (int z = 0; z < win[2].n; ++z) {
                        const std::array<std::int64_t, 3> kr{win[0].k[x], win[1].k[y], win[2].k[z]};
                        const std::int32_t rid = tree.find_node(d, kr);
                        if (rid < 0) continue;
                        load[std::uint32_t(rid)] +=
                            detail::load_entry(tab, tree, d, kr, nj.depth, nj.coord, mj);
                    }
        }
    }
    for (int d = 1; d <= top; ++d) {
        for (const auto& [kr, rid] : tree.by_depth[d]) {
            for (int dm = 0; dm < d; ++dm) {
                std::array<detail::AxisCandidates, 3> win;
                for (int a = 0; a < 3; ++a) win[a] = detail::axis_candidates(kr[a], d - dm);
                for (int x = 0; x < win[0].n; ++x)
                    for (int y = 0; y < win[1].n; ++y)
                        for (int z = 0; z < win[2].n; ++z) {
                            const std::array<std::int64_t, 3> km{win[0].k[x], win[1].k[y],
                                                                 win[2].k[z]};
                            const std::int32_t mid = tree.find_node(dm, km);
                            if (mid < 0) continue;
                            const auto it = mass.find(std::uint32_t(mid));
                            if (it == mass.end()) continue;
                            load[rid] += detail::load_entry(tab, tree, d, kr, dm, km, it->second);
                        }
            }
        }
    }

    IndicatorField field;
    field.coefficients.assign(tree.nodes.size(), 0.0);
    field.solve_residuals.resize(top + 1);

    for (int d = 0; d <= top; ++d) {
        std::vector<std::uint32_t> ids;
        ids.reserve(tree.by_depth[d].size());
        std::unordered_map<std::uint32_t, std::uint32_t> local_of;
        for (const auto& [c, id] : tree.by_depth[d]) {
            local_of.emplace(id, std::uint32_t(ids.size()));
            ids.push_back(id);
        }
        const std::size_t n = ids.size();
        if (n == 0) continue;

        // Right-hand side minus the coupling to already-solved coarser depths.
        std::vector<double> rhs(n);
        for (std::size_t i = 0; i < n; ++i) {
            const OctreeNode& ni = tree.nodes[ids[i]];
            double v = load[ids[i]];
            for (int dc = 0; dc < d; ++dc) {
                std::array<detail::AxisCandidates, 3> win;
                for (int a = 0; a < 3; ++a) win[a] = detail::axis_candidates(ni.coord[a], d - dc);
                for (int x = 0; x < win[0].n; ++x)
                    for (int y = 0; y < win[1].n; ++y)
                        for (int z = 0; z < win[2].n; ++z) {
                            const std::array<std::int64_t, 3> kc{win[0].k[x], win[1].k[y],
                                                                 win[2].k[z]};
                            const std::int32_t cid = tree.find_node(dc, kc);
                            if (cid < 0) continue;
                            const double coef = field.coefficients[std::uint32_t(cid)];
                            if (coef == 0.0) continue;
                            v -= coef * detail::stiffness_entry(tab, tree, dc, kc, d, ni.coord);
                        }
            }
            rhs[i] = v;
        }

        // Same-depth block: neighbors within two cells share support.
        detail::SparseMatrix A;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& ki = tree.nodes[ids[i]].coord;
            for (std::int64_t dx = -2; dx <= 2; ++dx)
                for (std::int64_t dy = -2; dy <= 2; ++dy)
                    for (std::int64_t dz = -2; dz <= 2; ++dz) {
                        const std::array<std::int64_t, 3> kj{ki[0] + dx, ki[1] + dy, ki[2] + dz};
                        const auto it = tree.by_depth[d].find(kj);
                        if (it == tree.by_depth[d].end()) continue;
                        const double e = detail::stiffness_entry(tab, tree, d, kj, d, ki);
                        if (e == 0.0) continue;
                        A.col.push_back(local_of.at(it->second));
                        A.val.push_back(e);
                    }
            A.row_begin.push_back(A.col.size());
        }

        const auto x =
            detail::conjugate_residual(A, rhs, 1e-8, 10 * n, field.solve_residuals[d]);
        for (std::size_t i = 0; i < n; ++i) field.coefficients[ids[i]] = x[i];
    }

    double iso = 0.0;
    for (const auto& p : cloud.points) iso += evaluate_indicator(field, tree, p);
    field.iso_value = iso / double(cloud.points.size());
    return field;
}

// Polygonizes the iso level over the finest cells near data (occupied cells
// dilated by two). Each cell splits into the six tetrahedra sharing its
// main diagonal; since every cell uses the same diagonal, shared faces
// triangulate identically and the surface has no cracks between cells.
inline TriangleMesh extract_mesh(const IndicatorField& field, const Octree& tree) {
    if (field.coefficients.size() != tree.nodes.size())
        throw Error("extract_mesh: field does not match tree");
    const int top = tree.max_depth;
    const std::int64_t cells = std::int64_t(1) << top;
    const double w = tree.width_at(top);
    const double iso = field.iso_value;

    std::set<std::array<std::int64_t, 3>> region;
    for (const auto& [c, id] : tree.by_depth[top])
        for (std::int64_t dx = -2; dx <= 2; ++dx)
            for (std::int64_t dy = -2; dy <= 2; ++dy)
                for (std::int64_t dz = -2; dz <= 2; ++dz) {
                    const std::array<std::int64_t, 3> cc{c[0] + dx, c[1] + dy, c[2] + dz};
                    if (cc[0] >= 0 && cc[0] < cells && cc[1] >= 0 && cc[1] < cells && cc[2] >= 0 &&
                        cc[2] < cells)
                        region.insert(cc);
                }

    const std::int64_t stride = cells + 1;
    const auto corner_id = [stride](const std::array<std::int64_t, 3>& k) {
        return (k[0] * stride + k[1]) * stride + k[2];
    };
    const auto corner_pos = [&](const std::array<std::int64_t, 3>& k) {
        return Vec3(tree.root_lo + w * Vec3(double(k[0]), double(k[1]), double(k[2])));
    };
    std::unordered_map<std::int64_t, double> corner_cache;
    const auto corner_value = [&](const std::array<std::int64_t, 3>& k) {
        const std::int64_t cid = corner_id(k);
        const auto it = corner_cache.find(cid);
        if (it != corner_cache.end()) return it->second;
        const double v = evaluate_indicator(field, tree, corner_pos(k));
        corner_cache.emplace(cid, v);
        return v;
    };

    TriangleMesh mesh;
    std::map<std::pair<std::int64_t, std::int64_t>, std::uint32_t> edge_vertex;

    // Corner m of a cell offsets by bit 0 -> +x, bit 1 -> +y, bit 2 -> +z.
    static constexpr int kTets[6][4] = {{0, 1, 3, 7}, {0, 1, 5, 7}, {0, 2, 3, 7},
                                        {0, 2, 6, 7}, {0, 4, 5, 7}, {0, 4, 6, 7}};

    for (const auto& cell : region) {
        std::array<std::array<std::int64_t, 3>, 8> ck;
        std::array<double, 8> f;
        bool any_pos = false, any_neg = false;
        for (int m = 0; m < 8; ++m) {
            ck[m] = {cell[0] + (m & 1), cell[1] + ((m >> 1) & 1), cell[2] + ((m >> 2) & 1)};
            f[m] = corner_value(ck[m]);
            (f[m] > iso ? any_pos : any_neg) = true;
        }
        if (!any_pos || !any_neg) continue;

        // Vertex on the crossing edge between two cell corners, deduplicated
        // by the (ordered) global corner pair so shared edges reuse it.
        const auto edge_point = [&](int a, int b) {
            std::int64_t ia = corner_id(ck[a]), ib = corner_id(ck[b]);
            int lo = a, hi = b;
            if (ia > ib) {
                std::swap(ia, ib);
                std::swap(lo, hi);
            }
            const auto key = std::make_pair(ia, ib);
            const auto it = edge_vertex.find(key);
            if (it != edge_vertex.end()) return it->second;
            const double s = (iso - f[lo]) / (f[hi] - f[lo]);
            const Vec3 pa = corner_pos(ck[lo]);
            const Vec3 pb = corner_pos(ck[hi]);
            const auto id = std::uint32_t(mesh.vertices.size());
            mesh.vertices.push_back(pa + s * (pb - pa));
            edge_vertex.emplace(key, id);
            return id;
        };

        for (const auto& tet : kTets) {
            int pos[4], neg[4], np = 0, nn = 0;
            bool on_level = false;
            for (int k = 0; k < 4; ++k) {
                const double s = f[tet[k]] - iso;
                if (s > 0.0)
                    pos[np++] = tet[k];
                else if (s < 0.0)
                    neg[nn++] = tet[k];
                else
                    on_level = true;
            }
            if (on_level || np == 0 || nn == 0) continue;

            // Field gradient inside the tetrahedron orients the triangles:
            // the surface normal points toward increasing field values.
            Mat3 basis;
            Vec3 df;
            const Vec3 p0 = corner_pos(ck[tet[0]]);
            for (int k = 1; k < 4; ++k) {
                basis.row(k - 1) = (corner_pos(ck[tet[k]]) - p0).transpose();
                df[k - 1] = f[tet[k]] - f[tet[0]];
            }
            const Vec3 grad = basis.inverse() * df;

            const auto add_tri = [&](std::uint32_t a, std::uint32_t b, std::uint32_t c) {
                const Vec3 n = (mesh.vertices[b] - mesh.vertices[a])
                                   .cross(mesh.vertices[c] - mesh.vertices[a]);
                if (n.dot(grad) < 0.0) std::swap(b, c);
                mesh.triangles.push_back({a, b, c});
            };

            if (np == 1) {
                add_tri(edge_point(pos[0], neg[0]), edge_point(pos[0], neg[1]),
                        edge_point(pos[0], neg[2]));
            } else if (nn == 1) {
                add_tri(edge_point(pos[0], neg[0]), edge_point(pos[1], neg[0]),
                        edge_point(pos[2], neg[0]));
            } else {
                const std::uint32_t vac = edge_point(pos[0], neg[0]);
                const std::uint32_t vad = edge_point(pos[0], neg[1]);
                const std::uint32_t vbd = edge_point(pos[1], neg[1]);
                const std::uint32_t vbc = edge_point(pos[1], neg[0]);
                add_tri(vac, vad, vbd);
                add_tri(vac, vbd, vbc);
            }
        }
    }

    if (mesh.triangles.empty()) throw Error("extract_mesh: the iso level is never crossed");
    weld_vertices(mesh, 1e-9 * tree.root_width);
    remove_degenerate_triangles(mesh);
    if (mesh.triangles.empty()) throw Error("extract_mesh: the iso level is never crossed");

    // Per-vertex confidence from the sample count within 1.5 cell widths.
    const KdTree3 kd(tree.points);
    mesh.confidence.resize(mesh.vertices.size());
    for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
        const auto n_v = double(kd.count_within(mesh.vertices[i], 1.5 * w));
        mesh.confidence[i] = float(n_v / (n_v + 8.0));
    }
    return mesh;
}

}  // namespace recon
