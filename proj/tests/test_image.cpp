#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "occ/image.hpp"
#include "occ/rng.hpp"

using namespace occ;
using namespace occ::img;

TEST_CASE("image validates range and size") {
    std::vector<double> bad(static_cast<size_t>(kSize) * kSize * 3, 0.5);
    bad[17] = 1.5;
    CHECK_THROWS_AS(Image{bad}, DomainError);
    CHECK_THROWS_AS(Image{std::vector<double>(10, 0.0)}, DimensionError);
    CHECK_NOTHROW(Image{std::vector<double>(static_cast<size_t>(kSize) * kSize * 3, 1.0)});
}

TEST_CASE("patch pooling averages each 16x16 block per channel") {
    Image im;
    // paint patch (2,3) pure red
    for (int y = 32; y < 48; ++y)
        for (int x = 48; x < 64; ++x) im.set(y, x, 1.0, 0.0, 0.0);
    auto pooled = patch_pool(im);
    REQUIRE(pooled.size() == static_cast<size_t>(kPatchFeatures));
    size_t base = (2 * kPatchGrid + 3) * 3;
    CHECK(pooled[base + 0] == doctest::Approx(1.0));
    CHECK(pooled[base + 1] == doctest::Approx(0.0));
    CHECK(pooled[0] == doctest::Approx(0.0));
}

TEST_CASE("histogram is normalized and localized") {
    Image im;  // all black -> bin 0
    auto h = rgb_histogram(im);
    CHECK(h[0] == doctest::Approx(1.0));
    double sum = 0;
    for (double v : h) sum += v;
    CHECK(sum == doctest::Approx(1.0));
}

TEST_CASE("png round trip within 8-bit quantization") {
    Rng rng(4);
    Image im;
    for (int y = 0; y < kSize; ++y)
        for (int x = 0; x < kSize; ++x) im.set(y, x, rng.uniform(), rng.uniform(), rng.uniform());
    std::string path = "/tmp/occ_img_test.png";
    write_png(im, path);
    Image back = read_png(path);
    double worst = 0;
    for (size_t i = 0; i < back.data().size(); ++i)
        worst = std::max(worst, std::fabs(back.data()[i] - im.data()[i]));
    CHECK(worst <= 0.5 / 255.0 + 1e-12);
}

TEST_CASE("png read errors") {
    CHECK_THROWS_AS(read_png("/tmp/does_not_exist_occ.png"), IoError);
    std::string path = "/tmp/occ_not_png.png";
    {
        FILE* f = fopen(path.c_str(), "wb");
        fputs("hello", f);
        fclose(f);
    }
    CHECK_THROWS_AS(read_png(path), FormatError);
}
