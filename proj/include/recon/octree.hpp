// Adaptive octree over a point cloud. Cells exist only along occupied paths;
// each sample lands in exactly one maximum-depth leaf. Nodes are addressed by
// (depth, integer lattice coordinate) so solvers can reason on dyadic grids.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <numeric>
#include <vector>

#include "recon/cloud.hpp"
#include "recon/geometry.hpp"

namespace recon {

struct OctreeNode {
    std::array<std::int64_t, 3> coord{};  // lattice cell at this depth
    std::int32_t depth = 0;
    std::int32_t parent = -1;
    std::array<std::int32_t, 8> children{-1, -1, -1, -1, -1, -1, -1, -1};
    std::uint32_t sample_begin = 0;  // into sample_of; meaningful for leaves
    std::uint32_t sample_end = 0;
};

struct Octree {
    Vec3 root_lo = Vec3::Zero();
    double root_width = 0.0;
    int max_depth = 0;
    std::vector<OctreeNode> nodes;  // node 0 is the root
    std::vector<std::uint32_t> sample_of;
    std::vector<Vec3> points;
    std::vector<std::map<std::array<std::int64_t, 3>, std::uint32_t>> by_depth;

    double width_at(int depth) const { return root_width / double(std::int64_t(1) << depth); }

    Vec3 center_of(std::uint32_t id) const {
        const OctreeNode& n = nodes[id];
        const double w = width_at(n.depth);
        return root_lo + w * Vec3(double(n.coord[0]) + 0.5, double(n.coord[1]) + 0.5,
                                  double(n.coord[2]) + 0.5);
    }

    std::int32_t find_node(int depth, const std::array<std::int64_t, 3>& coord) const {
        if (depth < 0 || depth > max_depth) return -1;
        const auto it = by_depth[depth].find(coord);
        return it == by_depth[depth].end() ? -1 : static_cast<std::int32_t>(it->second);
    }

    // Creates the node (and any missing ancestors); returns its id. The
    // coordinate must lie inside the root lattice.
    std::uint32_t ensure_node(int depth, const std::array<std::int64_t, 3>& coord) {
        const std::int64_t cells = std::int64_t(1) << depth;
        for (int a = 0; a < 3; ++a)
            if (coord[a] < 0 || coord[a] >= cells)
                throw Error("octree: coordinate outside the root cube");
        std::uint32_t cur = 0;  // root
        for (int d = 1; d <= depth; ++d) {
            const int shift = depth - d;
            const std::array<std::int64_t, 3> c{coord[0] >> shift, coord[1] >> shift,
                                                coord[2] >> shift};
            const int slot = int(c[0] & 1) | (int(c[1] & 1) << 1) | (int(c[2] & 1) << 2);
            std::int32_t next = nodes[cur].children[slot];
            if (next < 0) {
                next = static_cast<std::int32_t>(nodes.size());
                OctreeNode child;
                child.coord = c;
                child.depth = d;
                child.parent = static_cast<std::int32_t>(cur);
                nodes.push_back(child);
                nodes[cur].children[slot] = next;
                by_depth[d][c] = static_cast<std::uint32_t>(next);
            }
            cur = static_cast<std::uint32_t>(next);
        }
        return cur;
    }
};

inline Octree build_octree(const OrientedPointCloud& cloud, int depth) {
    if (cloud.points.empty()) throw Error("build_octree: empty cloud");
    if (depth < 1 || depth > 12) throw Error("build_octree: depth out of range");

    Octree tree;
    tree.max_depth = depth;
    tree.points = cloud.points;
    tree.by_depth.resize(depth + 1);

    const Aabb box = bounding_box(cloud.points);
    const double extent = std::max(box.extent().maxCoeff(), 0.0);
    tree.root_width = extent > 0.0 ? 1.1 * extent : 1.0;
    tree.root_lo = box.center() - 0.5 * tree.root_width * Vec3::Ones();

    OctreeNode root;
    tree.nodes.push_back(root);
    tree.by_depth[0][{0, 0, 0}] = 0;

    tree.sample_of.resize(cloud.points.size());
    std::iota(tree.sample_of.begin(), tree.sample_of.end(), 0u);

    // Recursive range partition; children visited in slot order so the
    // traversal (and node numbering) is deterministic.
    struct Frame {
        std::uint32_t node;
        std::uint32_t begin, end;
    };
    std::vector<Frame> stack{{0, 0, static_cast<std::uint32_t>(cloud.points.size())}};
    while (!stack.empty()) {
        const Frame f = stack.back();
        stack.pop_back();
        tree.nodes[f.node].sample_begin = f.begin;
        tree.nodes[f.node].sample_end = f.end;
        const std::array<std::int64_t, 3> ncoord = tree.nodes[f.node].coord;
        const int ndepth = tree.nodes[f.node].depth;
        if (ndepth == depth) continue;

        const Vec3 center = tree.center_of(f.node);
        const auto slot_of = [&](std::uint32_t sample) {
            const Vec3& p = tree.points[sample];
            return int(p.x() >= center.x()) | (int(p.y() >= center.y()) << 1) |
                   (int(p.z() >= center.z()) << 2);
        };
        std::stable_sort(tree.sample_of.begin() + f.begin, tree.sample_of.begin() + f.end,
                         [&](std::uint32_t a, std::uint32_t b) { return slot_of(a) < slot_of(b); });

        std::uint32_t start = f.begin;
        for (int slot = 0; slot < 8; ++slot) {
            std::uint32_t stop = start;
            while (stop < f.end && slot_of(tree.sample_of[stop]) == slot) ++stop;
            if (stop > start) {
                const std::array<std::int64_t, 3> c{
                    2 * ncoord[0] + (slot & 1), 2 * ncoord[1] + ((slot >> 1) & 1),
                    2 * ncoord[2] + ((slot >> 2) & 1)};
                OctreeNode child;
                child.coord = c;
                child.depth = ndepth + 1;
                child.parent = static_cast<std::int32_t>(f.node);
                const auto id = static_cast<std::uint32_t>(tree.nodes.size());
                tree.nodes.push_back(child);
                tree.nodes[f.node].children[slot] = static_cast<std::int32_t>(id);
                tree.by_depth[child.depth][c] = id;
                stack.push_back({id, start, stop});
            }
            start = stop;
        }
    }
    return tree;
}

}  // namespace recon
