#include <cmath>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "recon/cloud.hpp"
#include "recon/prng.hpp"

using namespace recon;

namespace {

std::vector<Vec3> sphere_points(Rng& rng, int n, double radius = 1.0) {
    std::vector<Vec3> pts;
    while (static_cast<int>(pts.size()) < n) {
        Vec3 d(rng.normal(), rng.normal(), rng.normal());
        if (d.norm() < 1e-6) continue;
        pts.push_back(radius * d.normalized());
    }
    return pts;
}

}  // namespace

TEST_CASE("identical points collapse to one voxel centroid", "[cloud]") {
    OrientedPointCloud c;
    c.points = {Vec3(0.2, 0.2, 0.2), Vec3(0.2, 0.2, 0.2)};
    const auto out = clean_cloud(c, 1.0, 0);
    REQUIRE(out.points.size() == 1);
    CHECK((out.points[0] - Vec3(0.2, 0.2, 0.2)).norm() < 1e-15);
}

TEST_CASE("voxel downsampling averages cell members", "[cloud]") {
    OrientedPointCloud c;
    c.points = {Vec3(0.1, 0.1, 0.1), Vec3(0.3, 0.1, 0.1), Vec3(0.2, 0.4, 0.1),
                Vec3(1.6, 0.1, 0.1)};
    const auto out = clean_cloud(c, 1.0, 0);
    REQUIRE(out.points.size() == 2);
    CHECK((out.points[0] - Vec3(0.2, 0.2, 0.1)).norm() < 1e-15);
    CHECK((out.points[1] - Vec3(1.6, 0.1, 0.1)).norm() < 1e-15);
}

TEST_CASE("empty cloud passes through and bad grid throws", "[cloud]") {
    OrientedPointCloud empty;
    CHECK(clean_cloud(empty, 0.5).points.empty());
    CHECK_THROWS_AS(clean_cloud(empty, 0.0), Error);
}

TEST_CASE("a far outlier on a line is removed", "[cloud]") {
    OrientedPointCloud c;
    for (int i = 0; i < 1000; ++i) c.points.push_back(Vec3(i * 0.001, 0, 0));
    c.points.push_back(Vec3(100.0, 0, 0));  // 100x the line extent

    // Oracle: with a fine grid nothing merges; the k-NN mean-distance statistic
    // flags exactly the far point at 2 standard deviations.
    const auto out = clean_cloud(c, 1e-6, 16, 2.0);
    CHECK(out.points.size() == 1000);
    for (const auto& p : out.points) CHECK(p.x() < 1.0);
}

TEST_CASE("normals and cameras survive cleaning", "[cloud]") {
    OrientedPointCloud c;
    Rng rng(9);
    for (int i = 0; i < 200; ++i) {
        c.points.push_back(Vec3(rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), 0.0));
        c.normals.push_back(Vec3(0, 0, 1));
        c.source_camera.push_back(Vec3(0, 0, 5));
    }
    const auto out = clean_cloud(c, 0.05, 8, 3.0);
    CHECK(out.points.size() == out.normals.size());
    CHECK(out.points.size() == out.source_camera.size());
    validate_cloud(out);
}

TEST_CASE("plane normals point toward the observing camera", "[cloud]") {
    OrientedPointCloud c;
    for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 20; ++x) {
            c.points.push_back(Vec3(x * 0.1, y * 0.1, 0.0));
            c.source_camera.push_back(Vec3(0, 0, 5));
        }
    const auto out = estimate_oriented_normals(c, 8);
    REQUIRE(out.normals.size() == c.points.size());
    for (const auto& n : out.normals) CHECK((n - Vec3(0, 0, 1)).norm() < 1e-6);
}

TEST_CASE("sphere normals seen from the center point inward", "[cloud]") {
    Rng rng(10);
    OrientedPointCloud c;
    c.points = sphere_points(rng, 2000);
    c.source_camera.assign(c.points.size(), Vec3::Zero());
    const auto out = estimate_oriented_normals(c, 12);
    for (std::size_t i = 0; i < c.points.size(); ++i)
        CHECK(out.normals[i].dot(c.points[i]) < 0.0);
}

TEST_CASE("spanning-tree propagation orients a camera-less plane consistently", "[cloud]") {
    OrientedPointCloud c;
    for (int y = 0; y < 15; ++y)
        for (int x = 0; x < 15; ++x) c.points.push_back(Vec3(x * 0.1, y * 0.1, 0.0));
    const auto out = estimate_oriented_normals(c, 8);
    for (const auto& n : out.normals) CHECK((n - Vec3(0, 0, 1)).norm() < 1e-6);
}

TEST_CASE("normal estimation preconditions", "[cloud]") {
    OrientedPointCloud c;
    c.points = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)};
    CHECK_THROWS_AS(estimate_oriented_normals(c, 2), Error);
    CHECK_THROWS_AS(estimate_oriented_normals(c, 5), Error);
    CHECK_NOTHROW(estimate_oriented_normals(c, 4));
}

TEST_CASE("octree depth follows the eighth-root rule with clamping", "[cloud]") {
    CHECK(choose_octree_depth(4096) == 4);
    CHECK(choose_octree_depth(500000) == 6);
    CHECK(choose_octree_depth(10) == 3);
    CHECK(choose_octree_depth(1) == 3);
    CHECK(choose_octree_depth(std::size_t(1) << 40) == 8);
    CHECK_THROWS_AS(choose_octree_depth(0), Error);
}

TEST_CASE("cloud PLY round-trips bit-exact in both formats", "[cloud]") {
    Rng rng(21);
    OrientedPointCloud c;
    for (int i = 0; i < 50; ++i) {
        c.points.push_back(Vec3(rng.normal() * 1e3, rng.normal() * 1e-7, rng.normal()));
        Vec3 n(rng.normal(), rng.normal(), rng.normal());
        c.normals.push_back(n.normalized());
    }
    c.points[7] = Vec3(3.0e200, -2.0e-17, 1.0 / 7.0);

    for (const auto fmt : {CloudPlyFormat::binary_le, CloudPlyFormat::ascii}) {
        const std::string path = "cloud_roundtrip.ply";
        write_cloud_ply(c, path, fmt);
        const auto back = read_cloud_ply(path);
        REQUIRE(back.points.size() == c.points.size());
        REQUIRE(back.normals.size() == c.normals.size());
        for (std::size_t i = 0; i < c.points.size(); ++i) {
            CHECK(back.points[i] == c.points[i]);
            CHECK(back.normals[i] == c.normals[i]);
        }
    }
    std::remove("cloud_roundtrip.ply");
}

TEST_CASE("cloud PLY without normals omits the normal properties", "[cloud]") {
    OrientedPointCloud c;
    c.points = {Vec3(0.5, -1.25, 2.0), Vec3(1e-9, 0.0, 3.0)};
    write_cloud_ply(c, "cloud_plain.ply", CloudPlyFormat::ascii);
    const auto back = read_cloud_ply("cloud_plain.ply");
    REQUIRE(back.points.size() == 2);
    CHECK(back.normals.empty());
    CHECK(back.points[0] == c.points[0]);
    CHECK(back.points[1] == c.points[1]);
    std::remove("cloud_plain.ply");

    CHECK_THROWS_AS(read_cloud_ply("no_such_cloud.ply"), Error);
}
