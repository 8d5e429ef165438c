// Triangle meshes: topology checks, vertex welding, PLY and OBJ export.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "recon/geometry.hpp"
#include "recon/prng.hpp"

namespace recon {

struct TriangleMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<std::uint32_t, 3>> triangles;
    // Per-vertex local sample density proxy in [0,1]; empty when unknown.
    std::vector<float> confidence;
};

inline void validate_mesh(const TriangleMesh& m) {
    const std::uint32_t n = static_cast<std::uint32_t>(m.vertices.size());
    for (const auto& t : m.triangles)
        for (std::uint32_t idx : t)
            if (idx >= n) throw Error("mesh: triangle index out of range");
    if (!m.confidence.empty() && m.confidence.size() != m.vertices.size())
        throw Error("mesh: confidence must be per-vertex");
}

inline double triangle_area(const TriangleMesh& m, std::size_t t) {
    const auto& tri = m.triangles[t];
    const Vec3& a = m.vertices[tri[0]];
    const Vec3& b = m.vertices[tri[1]];
    const Vec3& c = m.vertices[tri[2]];
    return 0.5 * (b - a).cross(c - a).norm();
}

inline double mesh_area(const TriangleMesh& m) {
    double area = 0.0;
    for (std::size_t t = 0; t < m.triangles.size(); ++t) area += triangle_area(m, t);
    return area;
}

inline void remove_degenerate_triangles(TriangleMesh& m, double area_tol = 1e-12) {
    std::vector<std::array<std::uint32_t, 3>> keep;
    keep.reserve(m.triangles.size());
    for (std::size_t t = 0; t < m.triangles.size(); ++t) {
        const auto& tri = m.triangles[t];
        if (tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2]) continue;
        if (triangle_area(m, t) <= area_tol) continue;
        keep.push_back(tri);
    }
    m.triangles = std::move(keep);
}

// Merge vertices closer than eps (exact duplicates when eps <= 0). The
// representative is the earliest vertex; triangles that collapse are dropped.
inline void weld_vertices(TriangleMesh& m, double eps) {
    const std::size_t n = m.vertices.size();
    std::vector<std::uint32_t> remap(n);
    std::vector<Vec3> kept;
    std::vector<float> kept_conf;
    const bool has_conf = !m.confidence.empty();

    if (eps <= 0.0) {
        std::map<std::array<double, 3>, std::uint32_t> seen;
        for (std::size_t i = 0; i < n; ++i) {
            const Vec3& p = m.vertices[i];
            const std::array<double, 3> key{p.x(), p.y(), p.z()};
            auto [it, inserted] = seen.try_emplace(key, static_cast<std::uint32_t>(kept.size()));
            if (inserted) {
                kept.push_back(p);
                if (has_conf) kept_conf.push_back(m.confidence[i]);
            }
            remap[i] = it->second;
        }
    } else {
        // Hash grid of cell size eps; candidates live in the 27 surrounding cells.
        std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> grid;
        const auto cell_of = [eps](double v) {
            return static_cast<std::int64_t>(std::floor(v / eps));
        };
        for (std::size_t i = 0; i < n; ++i) {
            const Vec3& p = m.vertices[i];
            const std::int64_t cx = cell_of(p.x()), cy = cell_of(p.y()), cz = cell_of(p.z());
            std::uint32_t found = std::uint32_t(-1);
            for (int dx = -1; dx <= 1 && found == std::uint32_t(-1); ++dx)
                for (int dy = -1; dy <= 1 && found == std::uint32_t(-1); ++dy)
                    for (int dz = -1; dz <= 1 && found == std::uint32_t(-1); ++dz) {
                        const auto it = grid.find(hash_coords(cx + dx, cy + dy, cz + dz, 0));
                        if (it == grid.end()) continue;
                        for (std::uint32_t j : it->second) {
                            if ((kept[j] - p).norm() <= eps) {
                                found = j;
                                break;
                            }
                        }
                    }
            if (found == std::uint32_t(-1)) {
                found = static_cast<std::uint32_t>(kept.size());
                kept.push_back(p);
                if (has_conf) kept_conf.push_back(m.confidence[i]);
                grid[hash_coords(cx, cy, cz, 0)].push_back(found);
            }
            remap[i] = found;
        }
    }

    m.vertices = std::move(kept);
    m.confidence = std::move(kept_conf);
    std::vector<std::array<std::uint32_t, 3>> tris;
    tris.reserve(m.triangles.size());
    for (auto t : m.triangles) {
        for (auto& idx : t) idx = remap[idx];
        if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) continue;
        tris.push_back(t);
    }
    m.triangles = std::move(tris);
}

namespace detail {

inline std::vector<std::pair<std::uint32_t, std::uint32_t>> undirected_edges(
    const TriangleMesh& m) {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
    edges.reserve(m.triangles.size() * 3);
    for (const auto& t : m.triangles)
        for (int e = 0; e < 3; ++e) {
            std::uint32_t a = t[e], b = t[(e + 1) % 3];
            if (a > b) std::swap(a, b);
            edges.emplace_back(a, b);
        }
    std::sort(edges.begin(), edges.end());
    return edges;
}

}  // namespace detail

inline long euler_characteristic(const TriangleMesh& m) {
    auto edges = detail::undirected_edges(m);
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    return static_cast<long>(m.vertices.size()) - static_cast<long>(edges.size()) +
           static_cast<long>(m.triangles.size());
}

// Closed edge-manifold with consistent winding: every undirected edge borders
// exactly two triangles and every directed edge appears exactly once.
inline bool is_closed_manifold(const TriangleMesh& m) {
    if (m.triangles.empty()) return false;
    const auto edges = detail::undirected_edges(m);
    for (std::size_t i = 0; i < edges.size();) {
        std::size_t j = i;
        while (j < edges.size() && edges[j] == edges[i]) ++j;
        if (j - i != 2) return false;
        i = j;
    }
    std::vector<std::pair<std::uint32_t, std::uint32_t>> directed;
    directed.reserve(m.triangles.size() * 3);
    for (const auto& t : m.triangles)
        for (int e = 0; e < 3; ++e) directed.emplace_back(t[e], t[(e + 1) % 3]);
    std::sort(directed.begin(), directed.end());
    return std::adjacent_find(directed.begin(), directed.end()) == directed.end();
}

enum class PlyFormat { binary_le, ascii };

// PLY layout: vertex x,y,z float64 plus confidence float32; faces as
// uchar-counted uint32 index lists. Missing confidence is written as 1.
inline void write_mesh_ply(const TriangleMesh& m, const std::string& path,
                           PlyFormat format = PlyFormat::binary_le) {
    validate_mesh(m);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("write_mesh_ply: cannot open " + path);
    out << "ply\n"
        << (format == PlyFormat::binary_le ? "format binary_little_endian 1.0\n"
                                           : "format ascii 1.0\n")
        << "element vertex " << m.vertices.size() << "\n"
        << "property double x\nproperty double y\nproperty double z\n"
        << "property float confidence\n"
        << "element face " << m.triangles.size() << "\n"
        << "property list uchar uint vertex_indices\n"
        << "end_header\n";
    const bool has_conf = !m.confidence.empty();
    if (format == PlyFormat::ascii) {
        char buf[128];
        for (std::size_t i = 0; i < m.vertices.size(); ++i) {
            const Vec3& p = m.vertices[i];
            const float c = has_conf ? m.confidence[i] : 1.0f;
            std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %.9g\n", p.x(), p.y(), p.z(),
                          double(c));
            out << buf;
        }
        for (const auto& t : m.triangles)
            out << "3 " << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
    } else {
        for (std::size_t i = 0; i < m.vertices.size(); ++i) {
            const Vec3& p = m.vertices[i];
            const double xyz[3] = {p.x(), p.y(), p.z()};
            const float c = has_conf ? m.confidence[i] : 1.0f;
            out.write(reinterpret_cast<const char*>(xyz), sizeof xyz);
            out.write(reinterpret_cast<const char*>(&c), sizeof c);
        }
        for (const auto& t : m.triangles) {
            const unsigned char count = 3;
            out.write(reinterpret_cast<const char*>(&count), 1);
            out.write(reinterpret_cast<const char*>(t.data()), 3 * sizeof(std::uint32_t));
        }
    }
    if (!out) throw Error("write_mesh_ply: write failed on " + path);
}

inline TriangleMesh read_mesh_ply(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("read_mesh_ply: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "ply") throw Error("read_mesh_ply: not a PLY file");
    bool binary = false;
    std::size_t n_vertices = 0, n_faces = 0;
    bool has_conf = false;
    std::string element;
    while (std::getline(in, line)) {
        if (line == "end_header") break;
        std::istringstream ss(line);
        std::string word;
        ss >> word;
        if (word == "format") {
            std::string fmt;
            ss >> fmt;
            if (fmt == "binary_little_endian") binary = true;
            else if (fmt != "ascii") throw Error("read_mesh_ply: unsupported format " + fmt);
        } else if (word == "element") {
            ss >> element;
            if (element == "vertex") ss >> n_vertices;
            else if (element == "face") ss >> n_faces;
            else throw Error("read_mesh_ply: unsupported element " + element);
        } else if (word == "property" && element == "vertex") {
            std::string type, name;
            ss >> type >> name;
            if (name == "confidence") has_conf = true;
        }
    }
    TriangleMesh m;
    m.vertices.resize(n_vertices);
    if (has_conf) m.confidence.resize(n_vertices);
    m.triangles.resize(n_faces);
    if (binary) {
        for (std::size_t i = 0; i < n_vertices; ++i) {
            double xyz[3];
            in.read(reinterpret_cast<char*>(xyz), sizeof xyz);
            m.vertices[i] = Vec3(xyz[0], xyz[1], xyz[2]);
            if (has_conf) in.read(reinterpret_cast<char*>(&m.confidence[i]), sizeof(float));
        }
        for (std::size_t i = 0; i < n_faces; ++i) {
            unsigned char count = 0;
            in.read(reinterpret_cast<char*>(&count), 1);
            if (count != 3) throw Error("read_mesh_ply: non-triangle face");
            in.read(reinterpret_cast<char*>(m.triangles[i].data()), 3 * sizeof(std::uint32_t));
        }
    } else {
        for (std::size_t i = 0; i < n_vertices; ++i) {
            double x, y, z, c = 1.0;
            in >> x >> y >> z;
            if (has_conf) in >> c;
            m.vertices[i] = Vec3(x, y, z);
            if (has_conf) m.confidence[i] = static_cast<float>(c);
        }
        for (std::size_t i = 0; i < n_faces; ++i) {
            int count = 0;
            in >> count;
            if (count != 3) throw Error("read_mesh_ply: non-triangle face");
            in >> m.triangles[i][0] >> m.triangles[i][1] >> m.triangles[i][2];
        }
    }
    if (!in) throw Error("read_mesh_ply: truncated file " + path);
    validate_mesh(m);
    return m;
}

inline void write_mesh_obj(const TriangleMesh& m, const std::string& path) {
    validate_mesh(m);
    std::ofstream out(path);
    if (!out) throw Error("write_mesh_obj: cannot open " + path);
    char buf[128];
    for (const auto& p : m.vertices) {
        std::snprintf(buf, sizeof buf, "v %.17g %.17g %.17g\n", p.x(), p.y(), p.z());
        out << buf;
    }
    for (const auto& t : m.triangles)
        out << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
    if (!out) throw Error("write_mesh_obj: write failed on " + path);
}

}  // namespace recon
