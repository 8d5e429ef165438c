#include <cstdlib>
#include <numeric>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "recon/parallel.hpp"
#include "recon/prng.hpp"

using namespace recon;

TEST_CASE("same seed reproduces the same stream", "[prng]") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }
    Rng c(42), d(43);
    bool differs = false;
    for (int i = 0; i < 16 && !differs; ++i) differs = c.next_u64() != d.next_u64();
    CHECK(differs);
}

TEST_CASE("uniform stays in range with a sane mean", "[prng]") {
    Rng rng(1);
    double sum = 0.0;
    for (int i = 0; i < 100000; ++i) {
        const double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        sum += u;
    }
    CHECK(sum / 100000.0 == Catch::Approx(0.5).margin(0.01));

    for (int i = 0; i < 1000; ++i) {
        const double v = rng.uniform(-3.0, 7.0);
        REQUIRE(v >= -3.0);
        REQUIRE(v < 7.0);
    }
}

TEST_CASE("normal has unit moments", "[prng]") {
    Rng rng(2);
    double sum = 0.0, sq = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sq += x * x;
    }
    const double mean = sum / n;
    CHECK(mean == Catch::Approx(0.0).margin(0.02));
    CHECK(sq / n - mean * mean == Catch::Approx(1.0).margin(0.03));
}

TEST_CASE("uniform_index covers the full range", "[prng]") {
    Rng rng(3);
    std::vector<int> hits(10, 0);
    for (int i = 0; i < 10000; ++i) {
        const std::size_t k = rng.uniform_index(10);
        REQUIRE(k < 10);
        ++hits[k];
    }
    for (int h : hits) CHECK(h > 0);
}

TEST_CASE("coordinate hash differs across lattice sites", "[prng]") {
    CHECK(hash_coords(1, 2, 3, 0) != hash_coords(1, 2, 4, 0));
    CHECK(hash_coords(1, 2, 3, 0) != hash_coords(1, 2, 3, 1));
    CHECK(hash_coords(0, 0, 0, 0) == hash_coords(0, 0, 0, 0));
}

TEST_CASE("parallel_for covers each index exactly once", "[prng][parallel]") {
    std::vector<int> hits(1000, 0);
    parallel_for(0, hits.size(), [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) ++hits[i];
    });
    CHECK(std::accumulate(hits.begin(), hits.end(), 0) == 1000);
    CHECK(*std::min_element(hits.begin(), hits.end()) == 1);
    CHECK(*std::max_element(hits.begin(), hits.end()) == 1);
}

TEST_CASE("parallel_for handles empty and tiny ranges", "[prng][parallel]") {
    int calls = 0;
    parallel_for(5, 5, [&](std::size_t, std::size_t) { ++calls; });
    CHECK(calls == 0);
    std::vector<int> hits(3, 0);
    parallel_for(0, 3, [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) ++hits[i];
    });
    CHECK(hits == std::vector<int>{1, 1, 1});
}
