#include <doctest.h>

#include <cmath>

#include "emo/image_io.hpp"
#include "emo/raster.hpp"
#include "emo/rng.hpp"
#include "reference/reference.hpp"

using namespace emo;

namespace {

Raster random_rgb(int w, int h, std::uint64_t seed) {
    Rng rng(seed);
    Raster r(w, h, 3);
    for (auto& v : r.data) v = static_cast<std::uint8_t>(rng.next_u64() & 0xff);
    return r;
}

} // namespace

TEST_CASE("rgb_to_hsv primary and achromatic cases") {
    Raster img(2, 1, 3);
    img.at(0, 0, 0) = 255; // pure red
    img.at(1, 0, 0) = img.at(1, 0, 1) = img.at(1, 0, 2) = 128; // grey
    const Raster hsv = rgb_to_hsv(img);
    CHECK(hsv.at(0, 0, 0) == 0);
    CHECK(hsv.at(0, 0, 1) == 255);
    CHECK(hsv.at(0, 0, 2) == 255);
    CHECK(hsv.at(1, 0, 0) == 0); // hue unconstrained, emitted as 0
    CHECK(hsv.at(1, 0, 1) == 0);
    CHECK(hsv.at(1, 0, 2) == 128);
}

TEST_CASE("rgb_to_hsv matches the per-pixel scalar reference") {
    const Raster img = random_rgb(64, 64, 42);
    const Raster hsv = rgb_to_hsv(img);
    for (std::size_t i = 0; i < img.pixel_count(); ++i) {
        const auto ref = reference::rgb_px_to_hsv(img.data[i * 3], img.data[i * 3 + 1],
                                                  img.data[i * 3 + 2]);
        CHECK(hsv.data[i * 3 + 0] == ref[0]);
        CHECK(hsv.data[i * 3 + 1] == ref[1]);
        CHECK(hsv.data[i * 3 + 2] == ref[2]);
    }
}

TEST_CASE("hsv value channel equals max(R,G,B)") {
    const Raster img = random_rgb(128, 16, 7);
    const Raster hsv = rgb_to_hsv(img);
    for (std::size_t i = 0; i < img.pixel_count(); ++i) {
        const int mx = std::max({img.data[i * 3], img.data[i * 3 + 1], img.data[i * 3 + 2]});
        CHECK(hsv.data[i * 3 + 2] == mx);
    }
}

TEST_CASE("rgb_to_hsv rejects single-channel input") {
    Raster grey(4, 4, 1);
    CHECK_THROWS_AS(rgb_to_hsv(grey), InvalidInput);
}

TEST_CASE("lab white point and black") {
    Raster img(2, 1, 3);
    img.at(0, 0, 0) = img.at(0, 0, 1) = img.at(0, 0, 2) = 255;
    const Raster lab = rgb_to_lab(img);
    CHECK(lab.at(0, 0, 0) == 255);
    CHECK(std::abs(int(lab.at(0, 0, 1)) - 128) <= 1);
    CHECK(std::abs(int(lab.at(0, 0, 2)) - 128) <= 1);
    CHECK(lab.at(1, 0, 0) == 0); // black
}

TEST_CASE("lab round trip bounded by 2 per channel over random samples") {
    const Raster img = random_rgb(1000, 100, 99); // 1e5 pixels
    const Raster back = lab_to_rgb(rgb_to_lab(img));
    int maxdev = 0;
    for (std::size_t i = 0; i < img.data.size(); ++i)
        maxdev = std::max(maxdev, std::abs(int(back.data[i]) - int(img.data[i])));
    CHECK(maxdev <= 2);
}

TEST_CASE("od basics") {
    CHECK(channel_to_od(255, 255.0) == doctest::Approx(0.0));
    // clamped integer 26 at I0=255
    CHECK(channel_to_od(26, 255.0) == doctest::Approx(-std::log10(26.0 / 255.0)).epsilon(1e-12));
    CHECK(channel_to_od(26, 255.0) == doctest::Approx(0.9914).epsilon(1e-3));
    // zero intensity clamps to 1
    CHECK(channel_to_od(0, 255.0) == doctest::Approx(std::log10(255.0)).epsilon(1e-12));
    CHECK(channel_to_od(0, 255.0) == doctest::Approx(2.4065).epsilon(1e-3));
    CHECK_THROWS_AS(to_od(1, 2, 3, 0.5), InvalidInput);
}

TEST_CASE("od strictly decreasing in I and round trips") {
    for (int i = 1; i < 255; ++i)
        CHECK(channel_to_od(static_cast<std::uint8_t>(i + 1)) <
              channel_to_od(static_cast<std::uint8_t>(i)));
    // from_od(to_od(x)) within +-1 (x=0 clamps to 1)
    for (int i = 0; i < 256; ++i) {
        const std::uint8_t back = channel_from_od(channel_to_od(static_cast<std::uint8_t>(i)));
        CHECK(std::abs(int(back) - i) <= 1);
    }
    // to_od(from_od(od)) within the od width of one intensity quantisation step
    for (double od = 0.0; od < 1.8; od += 0.07) {
        const double back = channel_to_od(channel_from_od(od));
        const double istar = std::round(255.0 * std::pow(10.0, -od));
        const double bin = std::log10((istar + 0.5) / std::max(istar - 0.5, 0.5));
        CHECK(std::abs(back - od) <= bin);
    }
}

TEST_CASE("resample constant and identity") {
    Raster grey(1196, 1196, 1, 100);
    const Raster half = resample(grey, 2.0, ResampleMethod::lanczos);
    CHECK(half.width == 598);
    CHECK(half.height == 598);
    for (auto v : half.data) CHECK(v == 100);

    const Raster img = random_rgb(37, 23, 5);
    CHECK(resample(img, 1.0, ResampleMethod::lanczos) == img);
    CHECK(resample(img, 1.0, ResampleMethod::nearest) == img);
}

TEST_CASE("resample nearest keeps block top-left at factor 2") {
    Raster checker(4, 4, 1);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) checker.at(x, y) = ((x / 2 + y / 2) % 2) ? 255 : 0;
    // distinct markers at each block's top-left
    for (int by = 0; by < 2; ++by)
        for (int bx = 0; bx < 2; ++bx)
            checker.at(bx * 2, by * 2) = static_cast<std::uint8_t>(10 + bx + 2 * by);
    const Raster small = resample(checker, 2.0, ResampleMethod::nearest);
    CHECK(small.width == 2);
    CHECK(small.height == 2);
    for (int by = 0; by < 2; ++by)
        for (int bx = 0; bx < 2; ++bx) CHECK(small.at(bx, by) == 10 + bx + 2 * by);
}

TEST_CASE("resample linear gradient stays within 1 of the analytic ramp") {
    Raster g(1196, 1196, 1);
    for (int y = 0; y < 1196; ++y)
        for (int x = 0; x < 1196; ++x)
            g.at(x, y) = static_cast<std::uint8_t>(std::lround(255.0 * x / 1195.0));
    const Raster half = resample(g, 2.0, ResampleMethod::lanczos);
    REQUIRE(half.width == 598);
    double maxdev = 0.0;
    for (int y = 0; y < half.height; ++y)
        for (int x = 0; x < half.width; ++x) {
            const double sx = (x + 0.5) * 2.0 - 0.5;
            maxdev = std::max(maxdev, std::abs(half.at(x, y) - 255.0 * sx / 1195.0));
        }
    CHECK(maxdev <= 1.0);
}

TEST_CASE("resample matches the direct 2-D reference kernel") {
    const Raster img = random_rgb(97, 61, 21);
    const Raster a = resample(img, 1.7, ResampleMethod::lanczos);
    const Raster b = reference::resample_lanczos(img, 1.7);
    REQUIRE(a.width == b.width);
    REQUIRE(a.height == b.height);
    int maxdev = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        maxdev = std::max(maxdev, std::abs(int(a.data[i]) - int(b.data[i])));
    // separable float vs direct double evaluation differ only by rounding
    CHECK(maxdev <= 1);
}

TEST_CASE("resample rejects degenerate outputs") {
    Raster img(4, 4, 1);
    CHECK_THROWS_AS(resample(img, 0.0, ResampleMethod::lanczos), InvalidInput);
    CHECK_THROWS_AS(resample(img, 100.0, ResampleMethod::lanczos), InvalidInput);
}

TEST_CASE("slide meta validation and nearest level") {
    SlideMeta meta;
    meta.slide_id = "s";
    meta.mpp = 0.226;
    meta.levels = {{1.0, 1000, 800}, {4.0, 250, 200}, {32.0, 31, 25}};
    meta.validate();
    CHECK(meta.nearest_level(32.0) == 2);
    CHECK(meta.nearest_level(1.0) == 0);
    CHECK(meta.nearest_level(6.0) == 1);

    SlideMeta bad = meta;
    bad.mpp = 0.0;
    CHECK_THROWS_AS(bad.validate(), InvalidInput);
    bad = meta;
    bad.levels[1].factor = 0.5;
    CHECK_THROWS_AS(bad.validate(), InvalidInput);
}

TEST_CASE("png and jpeg round trips") {
    const auto dir = std::filesystem::temp_directory_path() / "emo_test_io";
    std::filesystem::create_directories(dir);
    const Raster img = random_rgb(63, 41, 3);

    write_png(dir / "t.png", img);
    CHECK(read_png(dir / "t.png") == img);

    Raster mask(17, 9, 1);
    mask.at(3, 4) = 255;
    write_png(dir / "m.png", mask);
    CHECK(read_png(dir / "m.png") == mask);

    // JPEG is lossy but in-memory and on-disk bytes must agree exactly
    const auto bytes = encode_jpeg(img, 80);
    write_jpeg(dir / "t.jpg", img, 80);
    const Raster from_disk = read_jpeg(dir / "t.jpg");
    CHECK(from_disk == decode_jpeg(bytes));
    CHECK(from_disk.width == img.width);
    std::filesystem::remove_all(dir);
}

TEST_CASE("slide pyramid write and read back") {
    const auto dir = std::filesystem::temp_directory_path() / "emo_test_pyr";
    std::filesystem::remove_all(dir);
    const Raster level0 = random_rgb(128, 96, 8);
    const Raster level1 = resample(level0, 4.0, ResampleMethod::lanczos);
    SlideMeta meta;
    meta.slide_id = "sl1";
    meta.mpp = 0.226;
    meta.levels = {{1.0, 128, 96}, {4.0, 32, 24}};
    write_slide_pyramid(dir / "sl1", meta, {level0, level1});

    const Slide s = open_slide(dir / "sl1");
    CHECK(s.meta.slide_id == "sl1");
    CHECK(s.read_level(0) == level0);
    CHECK(s.read_level(1) == level1);
    CHECK_THROWS_AS(s.read_level(2), InvalidInput);
    std::filesystem::remove_all(dir);
}
