#include <doctest.h>

#include <cmath>
#include <set>

#include "emo/rng.hpp"
#include "emo/synth.hpp"
#include "emo/tiler.hpp"
#include "reference/reference.hpp"

using namespace emo;

namespace {

SlideMeta make_meta(int w, int h, double mpp) {
    SlideMeta meta;
    meta.slide_id = "s";
    meta.mpp = mpp;
    meta.levels = {{1.0, w, h}};
    return meta;
}

} // namespace

TEST_CASE("tile spec derives src and stride with round-half-up") {
    TileSpec spec;
    CHECK(spec.src_px(0.226) == 1199); // 271/0.226 = 1199.1
    CHECK(spec.stride_px(0.226) == 600); // round(1199*0.5 = 599.5)
    CHECK(spec.src_px(0.452) == 600);  // 271/0.452 = 599.6
    spec.src_px_exact = 1196;
    CHECK(spec.src_px(0.226) == 1196);
    CHECK(spec.stride_px(0.226) == 598);
}

TEST_CASE("plan_grid: single tile when the slide barely fits one") {
    const TileSpec spec;
    // src 1199, stride 600; 600+1199 > 1794 so one column, height exactly src
    const auto plan = plan_grid(make_meta(1794, 1199, 0.226), spec);
    REQUIRE(plan.size() == 1);
    CHECK(plan[0] == std::pair<long, long>(0, 0));
}

TEST_CASE("plan_grid: slide exactly src wide gives a single column") {
    const TileSpec spec;
    const auto plan = plan_grid(make_meta(1199, 3000, 0.226), spec);
    std::set<long> xs;
    for (const auto& [x, y] : plan) xs.insert(x);
    CHECK(xs == std::set<long>{0});
    CHECK(plan.size() >= 3);
}

TEST_CASE("plan_grid: 3x-src width with 50% overlap gives five columns") {
    TileSpec spec;
    spec.src_px_exact = 1196; // even, so stride is exactly half
    const auto plan = plan_grid(make_meta(3 * 1196, 1196, 0.226), spec);
    std::set<long> xs, ys;
    for (const auto& [x, y] : plan) {
        xs.insert(x);
        ys.insert(y);
    }
    CHECK(xs == std::set<long>{0, 598, 1196, 1794, 2392});
    CHECK(ys == std::set<long>{0});
    // enumeration oracle: every multiple of stride with x+src <= width
    for (long x = 0; x + 1196 <= 3 * 1196; x += 598) CHECK(xs.count(x) == 1);
}

TEST_CASE("plan_grid: smaller than a tile yields an empty plan") {
    const TileSpec spec;
    CHECK(plan_grid(make_meta(500, 500, 0.226), spec).empty());
}

TEST_CASE("plan_grid origins are unique, row-major, fully inside") {
    TileSpec spec;
    spec.src_px_exact = 100;
    const auto plan = plan_grid(make_meta(431, 287, 1.0), spec);
    std::set<std::pair<long, long>> seen;
    for (const auto& p : plan) CHECK(seen.insert(p).second);
    for (const auto& [x, y] : plan) {
        CHECK(x + 100 <= 431);
        CHECK(y + 100 <= 287);
    }
    for (std::size_t i = 1; i < plan.size(); ++i) {
        const bool later = plan[i].second > plan[i - 1].second ||
                           (plan[i].second == plan[i - 1].second &&
                            plan[i].first > plan[i - 1].first);
        CHECK(later);
    }
}

TEST_CASE("extract_tile: constant region stays constant, output dims respected") {
    const SlideMeta meta = make_meta(1400, 1400, 0.226);
    Raster level0(1400, 1400, 3, 137);
    TileSpec spec;
    const TileRecord rec = extract_tile(level0, meta, spec, 0, 0);
    CHECK(rec.src_px == 1199);
    CHECK(rec.pixels.width == 598);
    CHECK(rec.pixels.height == 598);
    for (auto v : rec.pixels.data) CHECK(v == 137);
    CHECK_THROWS_AS(extract_tile(level0, meta, spec, 300, 0), InvalidInput);
}

TEST_CASE("extract_tile at mpp 0.452 reads 600 and resamples near-identity") {
    const SlideMeta meta = make_meta(700, 700, 0.452);
    Rng rng(3);
    Raster level0(700, 700, 3);
    for (auto& v : level0.data) v = static_cast<std::uint8_t>(rng.next_u64() & 0xff);
    TileSpec spec;
    const TileRecord rec = extract_tile(level0, meta, spec, 0, 0);
    CHECK(rec.src_px == 600);
    CHECK(rec.pixels.width == 598);
}

TEST_CASE("tissue_fraction: full, empty, half masks") {
    SlideMeta meta = make_meta(1000, 1000, 1.0);
    meta.levels.push_back({4.0, 250, 250});
    BinaryMask full(250, 250, 1);
    std::fill(full.bits.begin(), full.bits.end(), std::uint8_t{1});
    BinaryMask empty(250, 250, 1);
    CHECK(tissue_fraction(100, 100, 400, full, meta) == doctest::Approx(1.0));
    CHECK(tissue_fraction(100, 100, 400, empty, meta) == doctest::Approx(0.0));

    // left half of the mask set; tile centred on the boundary
    BinaryMask half(250, 250, 1);
    for (int y = 0; y < 250; ++y)
        for (int x = 0; x < 125; ++x) half.set(x, y, 1);
    const double f = tissue_fraction(300, 300, 400, half, meta);
    CHECK(std::abs(f - 0.5) <= 0.01); // one mask row of quantisation
}

TEST_CASE("tissue_fraction equals the brute-force pixel-centre count") {
    SlideMeta meta = make_meta(800, 600, 1.0);
    meta.levels.push_back({3.0, 267, 200});
    Rng rng(8);
    BinaryMask m(267, 200, 1);
    for (auto& b : m.bits) b = rng.u01() < 0.4 ? 1 : 0;
    for (int trial = 0; trial < 10; ++trial) {
        const long x0 = static_cast<long>(rng.below(500));
        const long y0 = static_cast<long>(rng.below(300));
        const int src = 200;
        // oracle: scan all mask pixels, test centre membership
        std::int64_t pos = 0, tot = 0;
        for (int my = 0; my < 200; ++my)
            for (int mx = 0; mx < 267; ++mx) {
                const double cx = (mx + 0.5) * 3.0, cy = (my + 0.5) * 3.0;
                if (cx >= x0 && cx < x0 + src && cy >= y0 && cy < y0 + src) {
                    ++tot;
                    pos += m.at(mx, my);
                }
            }
        const double expect = tot ? double(pos) / double(tot) : 0.0;
        CHECK(tissue_fraction(x0, y0, src, m, meta) == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("blur_variance: constant image is 0") {
    Raster tile(64, 64, 3, 170);
    CHECK(blur_variance(tile) == doctest::Approx(0.0));
}

TEST_CASE("blur_variance: single bright pixel matches hand convolution") {
    Raster tile(21, 21, 1, 0);
    tile.at(10, 10) = 255;
    // responses: centre -4*255, four neighbours +255, rest 0
    const double n = 21.0 * 21.0;
    const double sum = -4.0 * 255 + 4 * 255;
    const double sum2 = (4.0 * 255) * (4.0 * 255) + 4 * 255.0 * 255.0;
    const double expect = sum2 / n - (sum / n) * (sum / n);
    CHECK(blur_variance(tile) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(blur_variance(tile) == doctest::Approx(reference::laplacian_variance(tile)).epsilon(1e-12));
}

TEST_CASE("blur_variance equals reference and drops under smoothing") {
    Rng rng(4);
    Raster tile(80, 80, 3);
    for (auto& v : tile.data) v = static_cast<std::uint8_t>(rng.next_u64() & 0xff);
    CHECK(blur_variance(tile) ==
          doctest::Approx(reference::laplacian_variance(tile)).epsilon(1e-9));

    // 3x3 box blur as a crude smoother
    Raster blurred = tile;
    for (int y = 1; y < 79; ++y)
        for (int x = 1; x < 79; ++x)
            for (int c = 0; c < 3; ++c) {
                int acc = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) acc += tile.at(x + dx, y + dy, c);
                blurred.at(x, y, c) = static_cast<std::uint8_t>(acc / 9);
            }
    CHECK(blur_variance(blurred) < blur_variance(tile));
}

TEST_CASE("blur_variance invariant under constant shift") {
    Rng rng(12);
    Raster tile(40, 40, 1);
    for (auto& v : tile.data) v = static_cast<std::uint8_t>(40 + rng.below(150));
    Raster shifted = tile;
    for (auto& v : shifted.data) v = static_cast<std::uint8_t>(v + 30);
    CHECK(blur_variance(shifted) == doctest::Approx(blur_variance(tile)).epsilon(1e-12));
}

TEST_CASE("accept thresholds are strict / non-strict per rule") {
    TileSpec spec; // tissue > 0.5, blur >= 500
    TileRecord rec;
    rec.tissue_fraction = 0.51;
    rec.blur_variance = 800;
    CHECK(accept(rec, spec));
    rec.tissue_fraction = 0.50;
    CHECK_FALSE(accept(rec, spec));
    rec.tissue_fraction = 0.51;
    rec.blur_variance = 499.9;
    CHECK_FALSE(accept(rec, spec));
    rec.blur_variance = 500.0;
    CHECK(accept(rec, spec));
}

TEST_CASE("tile filename and manifest round trip, sorted order") {
    const auto dir = std::filesystem::temp_directory_path() / "emo_test_manifest";
    std::filesystem::create_directories(dir);
    CHECK(tile_filename("S01", 1196, 598) == "S01__x1196_y598.jpg");

    std::vector<TileManifestRow> rows;
    rows.push_back({"S02", 0, 0, 100, 0.9, 700.0, true, "tiles/S02__x0_y0.jpg"});
    rows.push_back({"S01", 598, 0, 100, 0.25, 900.0, false, ""});
    rows.push_back({"S01", 0, 0, 100, 0.75, 650.5, true, "tiles/S01__x0_y0.jpg"});
    write_tile_manifest(dir / "m.tsv", rows);
    const auto back = read_tile_manifest(dir / "m.tsv");
    REQUIRE(back.size() == 3);
    CHECK(back[0].slide_id == "S01");
    CHECK(back[0].x0 == 0);
    CHECK(back[1].slide_id == "S01");
    CHECK(back[1].x0 == 598);
    CHECK(back[1].path.empty());
    CHECK_FALSE(back[1].accepted);
    CHECK(back[2].slide_id == "S02");
    CHECK(back[0].blur_variance == 650.5);
    std::filesystem::remove_all(dir);
}

TEST_CASE("physical invariance: same scene at 0.226 and 0.452 correlates > 0.99") {
    SynthParams p;
    p.seed = 21;
    p.n_train = 1;
    p.n_val = 1;
    p.slide_w_um = 400.0;
    p.slide_h_um = 320.0;
    const SynthTruth truth = synth_truth(p);

    SynthParams fine = p, coarse = p;
    fine.mpp = 0.226;
    coarse.mpp = 0.452;
    const Raster r_fine = render_synth_slide(fine, truth.slides[0]);
    const Raster r_coarse = render_synth_slide(coarse, truth.slides[0]);

    SlideMeta meta_f;
    meta_f.slide_id = "f";
    meta_f.mpp = 0.226;
    meta_f.levels = {{1.0, r_fine.width, r_fine.height}};
    SlideMeta meta_c = meta_f;
    meta_c.slide_id = "c";
    meta_c.mpp = 0.452;
    meta_c.levels = {{1.0, r_coarse.width, r_coarse.height}};

    TileSpec spec;
    spec.physical_size_um = 67.8; // 300 px at 0.226 -> 150 px at 0.452
    spec.output_px = 150;
    // same physical window inside the tissue block (664*0.226 == 332*0.452)
    const TileRecord a = extract_tile(r_fine, meta_f, spec, 664, 442);
    const TileRecord b = extract_tile(r_coarse, meta_c, spec, 332, 221);
    REQUIRE(a.pixels.width == b.pixels.width);

    double ma = 0, mb = 0;
    const std::size_t n = a.pixels.data.size();
    for (std::size_t i = 0; i < n; ++i) {
        ma += a.pixels.data[i];
        mb += b.pixels.data[i];
    }
    ma /= double(n);
    mb /= double(n);
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = a.pixels.data[i] - ma, db = b.pixels.data[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    CHECK(sab / std::sqrt(saa * sbb) > 0.99);
}
