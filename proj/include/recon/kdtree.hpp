// Exact 3D nearest-neighbor queries on a static point set.
//
// All distance math funnels through dist2() below. The brute-force
// reference used in tests calls the same function, so both routes produce
// bit-identical squared distances for the same query.
#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include "recon/geometry.hpp"

namespace recon {

inline double dist2(const Vec3& a, const Vec3& b) {
    const double dx = a.x() - b.x();
    const double dy = a.y() - b.y();
    const double dz = a.z() - b.z();
    return dx * dx + dy * dy + dz * dz;
}

class KdTree3 {
public:
    KdTree3() = default;

    explicit KdTree3(std::vector<Vec3> pts) : pts_(std::move(pts)) {
        order_.resize(pts_.size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        if (!pts_.empty()) {
            nodes_.reserve(pts_.size() / kLeafSize * 2 + 2);
            build(0, pts_.size());
        }
    }

    std::size_t size() const { return pts_.size(); }
    const std::vector<Vec3>& points() const { return pts_; }

    // Index of the closest point and its squared distance. Ties resolve to
    // the lowest index. Requires a non-empty tree.
    std::pair<std::size_t, double> nearest(const Vec3& q) const {
        std::size_t best_idx = order_[0];
        double best_d2 = std::numeric_limits<double>::infinity();
        nearest_rec(0, q, best_idx, best_d2);
        return {best_idx, best_d2};
    }

    // The k closest points as (squared distance, index), sorted ascending by
    // distance then index. Returns fewer when the tree holds fewer points.
    std::vector<std::pair<double, std::size_t>> knn(const Vec3& q, std::size_t k) const {
        std::vector<std::pair<double, std::size_t>> heap;  // max-heap on (d2, idx)
        if (k == 0 || pts_.empty()) return heap;
        heap.reserve(k + 1);
        knn_rec(0, q, k, heap);
        std::sort_heap(heap.begin(), heap.end());
        return heap;
    }

    // Number of points with dist2 <= r*r.
    std::size_t count_within(const Vec3& q, double r) const {
        if (pts_.empty() || r < 0.0) return 0;
        std::size_t n = 0;
        count_rec(0, q, r * r, n);
        return n;
    }

    // Indices of points with dist2 <= r*r, ascending.
    std::vector<std::size_t> indices_within(const Vec3& q, double r) const {
        std::vector<std::size_t> out;
        if (pts_.empty() || r < 0.0) return out;
        gather_rec(0, q, r * r, out);
        std::sort(out.begin(), out.end());
        return out;
    }

private:
    static constexpr std::size_t kLeafSize = 8;

    struct Node {
        double split = 0.0;
        int axis = -1;                     // -1 marks a leaf
        std::uint32_t left = 0, right = 0; // children for interior nodes
        std::uint32_t begin = 0, end = 0;  // order_ range for leaves
    };

    std::vector<Vec3> pts_;
    std::vector<std::size_t> order_;
    std::vector<Node> nodes_;

    std::uint32_t build(std::size_t begin, std::size_t end) {
        const std::uint32_t id = static_cast<std::uint32_t>(nodes_.size());
        nodes_.emplace_back();
        if (end - begin <= kLeafSize) {
            // Ascending index order inside the leaf keeps tie-breaks stable.
            std::sort(order_.begin() + begin, order_.begin() + end);
            nodes_[id].begin = static_cast<std::uint32_t>(begin);
            nodes_[id].end = static_cast<std::uint32_t>(end);
            return id;
        }
        Vec3 lo = pts_[order_[begin]], hi = lo;
        for (std::size_t i = begin + 1; i < end; ++i) {
            lo = lo.cwiseMin(pts_[order_[i]]);
            hi = hi.cwiseMax(pts_[order_[i]]);
        }
        int axis = 0;
        const Vec3 ext = hi - lo;
        if (ext.y() > ext.x()) axis = 1;
        if (ext.z() > ext[axis]) axis = 2;
        const std::size_t mid = (begin + end) / 2;
        std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                         [&](std::size_t a, std::size_t b) {
                             if (pts_[a][axis] != pts_[b][axis]) return pts_[a][axis] < pts_[b][axis];
                             return a < b;
                         });
        nodes_[id].axis = axis;
        nodes_[id].split = pts_[order_[mid]][axis];
        const std::uint32_t l = build(begin, mid);
        const std::uint32_t r = build(mid, end);
        nodes_[id].left = l;
        nodes_[id].right = r;
        return id;
    }

    void nearest_rec(std::uint32_t id, const Vec3& q, std::size_t& best_idx,
                     double& best_d2) const {
        const Node& n = nodes_[id];
        if (n.axis < 0) {
            for (std::uint32_t i = n.begin; i < n.end; ++i) {
                const std::size_t idx = order_[i];
                const double d2 = dist2(q, pts_[idx]);
                if (d2 < best_d2 || (d2 == best_d2 && idx < best_idx)) {
                    best_d2 = d2;
                    best_idx = idx;
                }
            }
            return;
        }
        const double delta = q[n.axis] - n.split;
        const std::uint32_t near_child = delta < 0.0 ? n.left : n.right;
        const std::uint32_t far_child = delta < 0.0 ? n.right : n.left;
        nearest_rec(near_child, q, best_idx, best_d2);
        if (delta * delta <= best_d2) nearest_rec(far_child, q, best_idx, best_d2);
    }

    void knn_rec(std::uint32_t id, const Vec3& q, std::size_t k,
                 std::vector<std::pair<double, std::size_t>>& heap) const {
        const Node& n = nodes_[id];
        if (n.axis < 0) {
            for (std::uint32_t i = n.begin; i < n.end; ++i) {
                const std::size_t idx = order_[i];
                const double d2 = dist2(q, pts_[idx]);
                if (heap.size() < k) {
                    heap.emplace_back(d2, idx);
                    std::push_heap(heap.begin(), heap.end());
                } else if (std::make_pair(d2, idx) < heap.front()) {
                    std::pop_heap(heap.begin(), heap.end());
                    heap.back() = {d2, idx};
                    std::push_heap(heap.begin(), heap.end());
                }
            }
            return;
        }
        const double delta = q[n.axis] - n.split;
        const std::uint32_t near_child = delta < 0.0 ? n.left : n.right;
        const std::uint32_t far_child = delta < 0.0 ? n.right : n.left;
        knn_rec(near_child, q, k, heap);
        if (heap.size() < k || delta * delta <= heap.front().first) knn_rec(far_child, q, k, heap);
    }

    void count_rec(std::uint32_t id, const Vec3& q, double r2, std::size_t& n_out) const {
        const Node& n = nodes_[id];
        if (n.axis < 0) {
            for (std::uint32_t i = n.begin; i < n.end; ++i)
                if (dist2(q, pts_[order_[i]]) <= r2) ++n_out;
            return;
        }
        const double delta = q[n.axis] - n.split;
        const std::uint32_t near_child = delta < 0.0 ? n.left : n.right;
        const std::uint32_t far_child = delta < 0.0 ? n.right : n.left;
        count_rec(near_child, q, r2, n_out);
        if (delta * delta <= r2) count_rec(far_child, q, r2, n_out);
    }

    void gather_rec(std::uint32_t id, const Vec3& q, double r2,
                    std::vector<std::size_t>& out) const {
        const Node& n = nodes_[id];
        if (n.axis < 0) {
            for (std::uint32_t i = n.begin; i < n.end; ++i)
                if (dist2(q, pts_[order_[i]]) <= r2) out.push_back(order_[i]);
            return;
        }
        const double delta = q[n.axis] - n.split;
        const std::uint32_t near_child = delta < 0.0 ? n.left : n.right;
        const std::uint32_t far_child = delta < 0.0 ? n.right : n.left;
        gather_rec(near_child, q, r2, out);
        if (delta * delta <= r2) gather_rec(far_child, q, r2, out);
    }
};

}  // namespace recon
