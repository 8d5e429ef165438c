#include <cstdio>
#include <filesystem>
#include <string>

#include <catch2/catch_amalgamated.hpp>

#include "recon/image.hpp"
#include "recon/prng.hpp"

using namespace recon;

namespace {
std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

GrayImage random_gray(int w, int h, std::uint64_t seed) {
    GrayImage img(w, h);
    Rng rng(seed);
    for (auto& p : img.pixels) p = quantize8(rng.uniform()) / 255.0f;
    return img;
}
}  // namespace

TEST_CASE("quantize8 rounds and clamps", "[image]") {
    CHECK(quantize8(0.0) == 0);
    CHECK(quantize8(1.0) == 255);
    CHECK(quantize8(-0.5) == 0);
    CHECK(quantize8(2.0) == 255);
    CHECK(quantize8(0.5) == 128);  // round half up at 127.5
    CHECK(quantize8(1.0 / 255.0) == 1);
}

TEST_CASE("clamped access extends the border", "[image]") {
    GrayImage img(3, 2);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 3; ++x) img.at(x, y) = float(y * 3 + x);
    CHECK(img.at_clamped(-1, 0) == img.at(0, 0));
    CHECK(img.at_clamped(5, 1) == img.at(2, 1));
    CHECK(img.at_clamped(1, -3) == img.at(1, 0));
    CHECK(img.at_clamped(1, 9) == img.at(1, 1));
    CHECK(img.in_bounds(0.0, 0.0));
    CHECK_FALSE(img.in_bounds(3.0, 0.0));
    CHECK_FALSE(img.in_bounds(-0.1, 1.0));
}

TEST_CASE("luma conversion uses the standard weights", "[image]") {
    ColorImage c(2, 1);
    c.px(0, 0)[0] = 255;  // pure red
    c.px(0, 0)[1] = 0;
    c.px(0, 0)[2] = 0;
    c.px(1, 0)[0] = 10;
    c.px(1, 0)[1] = 20;
    c.px(1, 0)[2] = 30;
    const GrayImage g = to_gray(c);
    CHECK(g.at(0, 0) == Catch::Approx(0.299).margin(1e-6));
    CHECK(g.at(1, 0) ==
          Catch::Approx((0.299 * 10 + 0.587 * 20 + 0.114 * 30) / 255.0).margin(1e-6));
}

TEST_CASE("pgm round trip is bit exact", "[image]") {
    const GrayImage img = random_gray(37, 23, 99);
    const std::string path = tmp_path("roundtrip.pgm");
    write_pgm(img, path);
    const GrayImage back = read_pgm(path);
    REQUIRE(back.width == img.width);
    REQUIRE(back.height == img.height);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        REQUIRE(quantize8(back.pixels[i]) == quantize8(img.pixels[i]));
        REQUIRE(back.pixels[i] == img.pixels[i]);  // both are k/255 exactly
    }
    std::remove(path.c_str());
}

TEST_CASE("ppm round trip is bit exact", "[image]") {
    ColorImage img(19, 31);
    Rng rng(5);
    for (auto& b : img.rgb) b = static_cast<std::uint8_t>(rng.next_u64() & 0xff);
    const std::string path = tmp_path("roundtrip.ppm");
    write_ppm(img, path);
    const ColorImage back = read_ppm(path);
    REQUIRE(back.width == img.width);
    REQUIRE(back.height == img.height);
    REQUIRE(back.rgb == img.rgb);
    std::remove(path.c_str());
}

TEST_CASE("png gray round trip preserves 8-bit content", "[image]") {
    const GrayImage img = random_gray(41, 17, 123);
    const std::string path = tmp_path("roundtrip_g.png");
    write_png(img, path);
    const GrayImage back = read_png_gray(path);
    REQUIRE(back.width == img.width);
    REQUIRE(back.height == img.height);
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        REQUIRE(quantize8(back.pixels[i]) == quantize8(img.pixels[i]));
    std::remove(path.c_str());
}

TEST_CASE("png color round trip preserves 8-bit content", "[image]") {
    ColorImage img(13, 29);
    Rng rng(77);
    for (auto& b : img.rgb) b = static_cast<std::uint8_t>(rng.next_u64() & 0xff);
    const std::string path = tmp_path("roundtrip_c.png");
    write_png(img, path);
    const ColorImage back = read_png_color(path);
    REQUIRE(back.width == img.width);
    REQUIRE(back.height == img.height);
    REQUIRE(back.rgb == img.rgb);
    std::remove(path.c_str());
}

TEST_CASE("reading a missing file raises", "[image]") {
    CHECK_THROWS_AS(read_pgm("/nonexistent/nope.pgm"), Error);
    CHECK_THROWS_AS(read_png_gray("/nonexistent/nope.png"), Error);
}
