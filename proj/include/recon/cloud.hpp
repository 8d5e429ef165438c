// Dense point cloud handling: voxel downsampling, statistical outlier
// removal, and oriented normal estimation for the surface solve.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <queue>
#include <sstream>
#include <string>
#include <vector>

#include "recon/geometry.hpp"
#include "recon/kdtree.hpp"

namespace recon {

struct OrientedPointCloud {
    std::vector<Vec3> points;
    std::vector<Vec3> normals;        // empty until estimated
    std::vector<Vec3> source_camera;  // observing camera center per point; may be empty
};

inline void validate_cloud(const OrientedPointCloud& c) {
    if (!c.normals.empty()) {
        if (c.normals.size() != c.points.size())
            throw Error("cloud: normals must be per-point");
        for (const auto& n : c.normals)
            if (std::abs(n.norm() - 1.0) > 1e-9) throw Error("cloud: non-unit normal");
    }
    if (!c.source_camera.empty() && c.source_camera.size() != c.points.size())
        throw Error("cloud: source cameras must be per-point");
}

// Voxel-grid downsampling (centroid per occupied cell, first-seen cell order)
// followed by k-NN statistical outlier removal: points whose mean neighbor
// distance exceeds mean + stddev_mult * stddev of that statistic are dropped.
inline OrientedPointCloud clean_cloud(const OrientedPointCloud& cloud, double grid_size,
                                      int knn_k = 16, double stddev_mult = 2.0) {
    if (grid_size <= 0.0) throw Error("clean_cloud: grid size must be > 0");
    validate_cloud(cloud);
    const bool has_normals = !cloud.normals.empty();
    const bool has_cameras = !cloud.source_camera.empty();

    struct Cell {
        Vec3 point_sum = Vec3::Zero();
        Vec3 normal_sum = Vec3::Zero();
        Vec3 camera_sum = Vec3::Zero();
        int count = 0;
    };
    std::map<std::array<std::int64_t, 3>, std::size_t> index_of;
    std::vector<Cell> cells;
    for (std::size_t i = 0; i < cloud.points.size(); ++i) {
        const Vec3& p = cloud.points[i];
        const std::array<std::int64_t, 3> key{
            static_cast<std::int64_t>(std::floor(p.x() / grid_size)),
            static_cast<std::int64_t>(std::floor(p.y() / grid_size)),
            static_cast<std::int64_t>(std::floor(p.z() / grid_size))};
        auto [it, inserted] = index_of.try_emplace(key, cells.size());
        if (inserted) cells.emplace_back();
        Cell& c = cells[it->second];
        c.point_sum += p;
        if (has_normals) c.normal_sum += cloud.normals[i];
        if (has_cameras) c.camera_sum += cloud.source_camera[i];
        ++c.count;
    }

    OrientedPointCloud down;
    for (const Cell& c : cells) {
        down.points.push_back(c.point_sum / double(c.count));
        if (has_normals) {
            Vec3 n = c.normal_sum;
            down.normals.push_back(n.norm() > 1e-12 ? Vec3(n.normalized()) : Vec3(0, 0, 1));
        }
        if (has_cameras) down.source_camera.push_back(c.camera_sum / double(c.count));
    }

    const std::size_t n = down.points.size();
    if (n < 2 || knn_k < 1) return down;
    const std::size_t k = std::min<std::size_t>(knn_k, n - 1);

    const KdTree3 tree(down.points);
    std::vector<double> mean_dist(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto nn = tree.knn(down.points[i], k + 1);  // includes the point itself
        double sum = 0.0;
        for (const auto& [d2, idx] : nn)
            if (idx != i) sum += std::sqrt(d2);
        mean_dist[i] = sum / double(k);
    }
    double mean = 0.0;
    for (double d : mean_dist) mean += d;
    mean /= double(n);
    double var = 0.0;
    for (double d : mean_dist) var += (d - mean) * (d - mean);
    const double limit = mean + stddev_mult * std::sqrt(var / double(n));

    OrientedPointCloud out;
    for (std::size_t i = 0; i < n; ++i) {
        if (mean_dist[i] > limit) continue;
        out.points.push_back(down.points[i]);
        if (has_normals) out.normals.push_back(down.normals[i]);
        if (has_cameras) out.source_camera.push_back(down.source_camera[i]);
    }
    return out;
}

// Per-point normal from the smallest-eigenvalue direction of the k-NN
// covariance. Signs face the observing camera when cameras are known;
// otherwise they are propagated along a minimum spanning tree of the k-NN
// graph, each component rooted at its topmost point facing +z.
inline OrientedPointCloud estimate_oriented_normals(const OrientedPointCloud& cloud, int k) {
    validate_cloud(cloud);
    const std::size_t n = cloud.points.size();
    if (k < 3) throw Error("estimate_oriented_normals: k must be >= 3");
    if (n < static_cast<std::size_t>(k)) throw Error("estimate_oriented_normals: too few points");

    const KdTree3 tree(cloud.points);
    OrientedPointCloud out = cloud;
    out.normals.resize(n);
    std::vector<std::vector<std::size_t>> neighbor_lists(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto nn = tree.knn(cloud.points[i], static_cast<std::size_t>(k));
        Vec3 centroid = Vec3::Zero();
        for (const auto& [d2, idx] : nn) centroid += cloud.points[idx];
        centroid /= double(nn.size());
        Mat3 cov = Mat3::Zero();
        for (const auto& [d2, idx] : nn) {
            const Vec3 d = cloud.points[idx] - centroid;
            cov += d * d.transpose();
            if (idx != i) neighbor_lists[i].push_back(idx);
        }
        Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
        out.normals[i] = eig.eigenvectors().col(0).normalized();
    }

    if (!cloud.source_camera.empty()) {
        for (std::size_t i = 0; i < n; ++i)
            if (out.normals[i].dot(cloud.source_camera[i] - cloud.points[i]) < 0.0)
                out.normals[i] = -out.normals[i];
        return out;
    }

    // Euclidean MST over the k-NN graph (Kruskal), then BFS sign propagation.
    struct Edge {
        double w;
        std::uint32_t a, b;
        bool operator<(const Edge& o) const {
            return w < o.w || (w == o.w && (a < o.a || (a == o.a && b < o.b)));
        }
    };
    std::vector<Edge> edges;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j : neighbor_lists[i]) {
            if (j < i) continue;
            edges.push_back({dist2(cloud.points[i], cloud.points[j]),
                             static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)});
        }
    std::sort(edges.begin(), edges.end());
    std::vector<std::uint32_t> parent(n);
    for (std::size_t i = 0; i < n; ++i) parent[i] = static_cast<std::uint32_t>(i);
    const auto find = [&parent](std::uint32_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    std::vector<std::vector<std::uint32_t>> mst(n);
    for (const Edge& e : edges) {
        const auto ra = find(e.a), rb = find(e.b);
        if (ra == rb) continue;
        parent[ra] = rb;
        mst[e.a].push_back(e.b);
        mst[e.b].push_back(e.a);
    }

    std::vector<char> visited(n, 0);
    for (std::size_t start = 0; start < n; ++start) {
        if (visited[start]) continue;
        // Component root: the topmost point, facing +z.
        std::uint32_t root = static_cast<std::uint32_t>(start);
        {
            std::queue<std::uint32_t> scan;
            std::vector<char> seen(n, 0);
            scan.push(root);
            seen[start] = 1;
            while (!scan.empty()) {
                const std::uint32_t u = scan.front();
                scan.pop();
                if (cloud.points[u].z() > cloud.points[root].z()) root = u;
                for (std::uint32_t v : mst[u])
                    if (!seen[v]) {
                        seen[v] = 1;
                        scan.push(v);
                    }
            }
        }
        if (out.normals[root].z() < 0.0) out.normals[root] = -out.normals[root];
        std::queue<std::uint32_t> bfs;
        bfs.push(root);
        visited[root] = 1;
        while (!bfs.empty()) {
            const std::uint32_t u = bfs.front();
            bfs.pop();
            for (std::uint32_t v : mst[u]) {
                if (visited[v]) continue;
                visited[v] = 1;
                if (out.normals[v].dot(out.normals[u]) < 0.0) out.normals[v] = -out.normals[v];
                bfs.push(v);
            }
        }
    }
    return out;
}

// Octree depth so that 8^depth is on the order of the sample count.
inline int choose_octree_depth(std::size_t n_points) {
    if (n_points < 1) throw Error("choose_octree_depth: need at least one point");
    const double d = std::log(double(n_points)) / std::log(8.0);
    return std::clamp(static_cast<int>(std::lround(d)), 3, 8);
}

enum class CloudPlyFormat { binary_le, ascii };

// PLY layout: x,y,z float64, plus nx,ny,nz float64 when normals are present.
inline void write_cloud_ply(const OrientedPointCloud& c, const std::string& path,
                            CloudPlyFormat format = CloudPlyFormat::binary_le) {
    validate_cloud(c);
    const bool normals = !c.normals.empty();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("write_cloud_ply: cannot open " + path);
    out << "ply\n"
        << (format == CloudPlyFormat::binary_le ? "format binary_little_endian 1.0\n"
                                                : "format ascii 1.0\n")
        << "element vertex " << c.points.size() << "\n"
        << "property double x\nproperty double y\nproperty double z\n";
    if (normals) out << "property double nx\nproperty double ny\nproperty double nz\n";
    out << "end_header\n";
    if (format == CloudPlyFormat::ascii) {
        char buf[256];
        for (std::size_t i = 0; i < c.points.size(); ++i) {
            const Vec3& p = c.points[i];
            if (normals) {
                const Vec3& n = c.normals[i];
                std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %.17g %.17g %.17g\n", p.x(),
                              p.y(), p.z(), n.x(), n.y(), n.z());
            } else {
                std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g\n", p.x(), p.y(), p.z());
            }
            out << buf;
        }
    } else {
        for (std::size_t i = 0; i < c.points.size(); ++i) {
            const Vec3& p = c.points[i];
            const double xyz[3] = {p.x(), p.y(), p.z()};
            out.write(reinterpret_cast<const char*>(xyz), sizeof xyz);
            if (normals) {
                const Vec3& n = c.normals[i];
                const double nrm[3] = {n.x(), n.y(), n.z()};
                out.write(reinterpret_cast<const char*>(nrm), sizeof nrm);
            }
        }
    }
    if (!out) throw Error("write_cloud_ply: write failed on " + path);
}

inline OrientedPointCloud read_cloud_ply(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("read_cloud_ply: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "ply") throw Error("read_cloud_ply: not a PLY file");
    bool binary = false, normals = false;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        if (line == "end_header") break;
        std::istringstream ss(line);
        std::string word;
        ss >> word;
        if (word == "format") {
            std::string fmt;
            ss >> fmt;
            if (fmt == "binary_little_endian") binary = true;
            else if (fmt != "ascii") throw Error("read_cloud_ply: unsupported format " + fmt);
        } else if (word == "element") {
            std::string element;
            ss >> element;
            if (element != "vertex") throw Error("read_cloud_ply: unsupported element " + element);
            ss >> n;
        } else if (word == "property") {
            std::string type, name;
            ss >> type >> name;
            if (name == "nx") normals = true;
        }
    }
    OrientedPointCloud c;
    c.points.resize(n);
    if (normals) c.normals.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double v[6] = {0, 0, 0, 0, 0, 0};
        const int fields = normals ? 6 : 3;
        if (binary) {
            in.read(reinterpret_cast<char*>(v), fields * sizeof(double));
        } else {
            for (int f = 0; f < fields; ++f) in >> v[f];
        }
        c.points[i] = Vec3(v[0], v[1], v[2]);
        if (normals) c.normals[i] = Vec3(v[3], v[4], v[5]);
    }
    if (!in) throw Error("read_cloud_ply: truncated file " + path);
    validate_cloud(c);
    return c;
}

}  // namespace recon
