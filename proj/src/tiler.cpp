#include "emo/tiler.hpp"

#include <algorithm>
#include <cmath>

#include "emo/image_io.hpp"
#include "emo/tsv.hpp"

namespace emo {

namespace {
inline long round_half_up(double x) { return static_cast<long>(std::floor(x + 0.5)); }
} // namespace

void TileSpec::validate() const {
    if (physical_size_um <= 0.0) throw InvalidInput("tile physical_size must be positive");
    if (output_px < 1) throw InvalidInput("tile output_px must be >= 1");
    if (overlap_fraction < 0.0 || overlap_fraction >= 1.0)
        throw InvalidInput("overlap_fraction must be in [0,1)");
    if (tissue_min_fraction < 0.0 || tissue_min_fraction > 1.0)
        throw InvalidInput("tissue_min_fraction must be in [0,1]");
    if (jpeg_quality < 1 || jpeg_quality > 100) throw InvalidInput("jpeg_quality must be 1..100");
    if (src_px_exact < 0) throw InvalidInput("src_px_exact must be >= 0");
}

int TileSpec::src_px(double mpp) const {
    if (src_px_exact > 0) return src_px_exact;
    if (mpp <= 0.0) throw InvalidInput("mpp must be positive");
    return static_cast<int>(round_half_up(physical_size_um / mpp));
}

int TileSpec::stride_px(double mpp) const {
    const long stride = round_half_up(src_px(mpp) * (1.0 - overlap_fraction));
    if (stride < 1) throw InvalidInput("tile stride degenerates to zero");
    return static_cast<int>(stride);
}

std::vector<std::pair<long, long>> plan_grid(const SlideMeta& meta, const TileSpec& spec) {
    meta.validate();
    spec.validate();
    const int src = spec.src_px(meta.mpp);
    const int stride = spec.stride_px(meta.mpp);
    const long w = meta.levels[0].width;
    const long h = meta.levels[0].height;
    std::vector<std::pair<long, long>> out;
    for (long y0 = 0; y0 + src <= h; y0 += stride)
        for (long x0 = 0; x0 + src <= w; x0 += stride) out.emplace_back(x0, y0);
    return out;
}

TileRecord extract_tile(const Raster& level0, const SlideMeta& meta, const TileSpec& spec,
                        long x0, long y0) {
    spec.validate();
    const int src = spec.src_px(meta.mpp);
    if (x0 < 0 || y0 < 0 || x0 + src > level0.width || y0 + src > level0.height)
        throw InvalidInput("tile read out of bounds at (" + std::to_string(x0) + "," +
                           std::to_string(y0) + ")");
    if (level0.channels != 3) throw InvalidInput("slides must be RGB");

    Raster region(src, src, 3);
    for (int y = 0; y < src; ++y)
        std::copy_n(&level0.data[level0.index(static_cast<int>(x0), static_cast<int>(y0) + y)],
                    static_cast<std::size_t>(src) * 3, &region.data[region.index(0, y)]);

    TileRecord rec;
    rec.slide_id = meta.slide_id;
    rec.x0 = x0;
    rec.y0 = y0;
    rec.src_px = src;
    rec.pixels = src == spec.output_px
                     ? std::move(region)
                     : resample(region, static_cast<double>(src) / spec.output_px,
                                ResampleMethod::lanczos);
    return rec;
}

double tissue_fraction(long x0, long y0, int src_px, const BinaryMask& mask,
                       const SlideMeta& meta) {
    meta.validate();
    if (mask.level < 0 || mask.level >= static_cast<int>(meta.levels.size()))
        throw InvalidInput("tissue_fraction: mask level not present in slide meta");
    const double f = meta.levels[mask.level].factor;

    // mask pixels whose centre (mx+0.5)*f lies in [x0, x0+src)
    const auto lo = [&](long v) { return std::max<long>(0, static_cast<long>(std::ceil(v / f - 0.5))); };
    const auto hi = [&](long v, int dim) {
        // first index whose centre is >= v  (exclusive bound)
        return std::min<long>(dim, static_cast<long>(std::ceil(v / f - 0.5)));
    };
    const long mx0 = lo(x0), mx1 = hi(x0 + src_px, mask.width);
    const long my0 = lo(y0), my1 = hi(y0 + src_px, mask.height);
    if (mx1 <= mx0 || my1 <= my0) return 0.0;

    std::int64_t pos = 0, total = 0;
    for (long my = my0; my < my1; ++my)
        for (long mx = mx0; mx < mx1; ++mx) {
            ++total;
            pos += mask.at(static_cast<int>(mx), static_cast<int>(my));
        }
    return total ? static_cast<double>(pos) / static_cast<double>(total) : 0.0;
}

double blur_variance(const Raster& tile) {
    const Raster grey = to_grey(tile);
    const int w = grey.width, h = grey.height;
    if (w == 0 || h == 0) return 0.0;

    double sum = 0.0, sum2 = 0.0;
    for (int y = 0; y < h; ++y) {
        const int yu = std::max(y - 1, 0), yd = std::min(y + 1, h - 1);
        for (int x = 0; x < w; ++x) {
            const int xl = std::max(x - 1, 0), xr = std::min(x + 1, w - 1);
            const double r = static_cast<double>(grey.at(xl, y)) + grey.at(xr, y) +
                             grey.at(x, yu) + grey.at(x, yd) - 4.0 * grey.at(x, y);
            sum += r;
            sum2 += r * r;
        }
    }
    const double n = static_cast<double>(w) * h;
    const double mean = sum / n;
    return sum2 / n - mean * mean;
}

bool accept(const TileRecord& tile, const TileSpec& spec) {
    return tile.tissue_fraction > spec.tissue_min_fraction &&
           tile.blur_variance >= spec.blur_variance_min;
}

std::string tile_filename(const std::string& slide_id, long x0, long y0) {
    return slide_id + "__x" + std::to_string(x0) + "_y" + std::to_string(y0) + ".jpg";
}

std::filesystem::path write_tile(const TileRecord& tile, const TileSpec& spec,
                                 const std::filesystem::path& out_dir) {
    const auto path = out_dir / tile_filename(tile.slide_id, tile.x0, tile.y0);
    write_jpeg(path, tile.pixels, spec.jpeg_quality);
    return path;
}

void write_tile_manifest(const std::filesystem::path& path, std::vector<TileManifestRow> rows) {
    std::sort(rows.begin(), rows.end(), [](const TileManifestRow& a, const TileManifestRow& b) {
        if (a.slide_id != b.slide_id) return a.slide_id < b.slide_id;
        if (a.y0 != b.y0) return a.y0 < b.y0;
        return a.x0 < b.x0;
    });
    TsvWriter w(path, {"slide_id", "x0", "y0", "src_px", "tissue_fraction", "blur_variance",
                       "accepted", "path"});
    for (const auto& r : rows)
        w.write_row({r.slide_id, std::to_string(r.x0), std::to_string(r.y0),
                     std::to_string(r.src_px), fmt_double(r.tissue_fraction),
                     fmt_double(r.blur_variance), r.accepted ? "1" : "0",
                     r.path.empty() ? "NA" : r.path});
}

std::vector<TileManifestRow> read_tile_manifest(const std::filesystem::path& path) {
    const TsvTable t = read_tsv(path);
    const int c_slide = t.col("slide_id"), c_x = t.col("x0"), c_y = t.col("y0");
    const int c_src = t.col("src_px"), c_tf = t.col("tissue_fraction");
    const int c_bv = t.col("blur_variance"), c_acc = t.col("accepted"), c_path = t.col("path");
    std::vector<TileManifestRow> rows;
    rows.reserve(t.rows.size());
    for (const auto& r : t.rows) {
        TileManifestRow row;
        row.slide_id = r[c_slide];
        row.x0 = parse_long(r[c_x]);
        row.y0 = parse_long(r[c_y]);
        row.src_px = static_cast<int>(parse_long(r[c_src]));
        row.tissue_fraction = parse_double(r[c_tf]);
        row.blur_variance = parse_double(r[c_bv]);
        row.accepted = r[c_acc] == "1";
        row.path = r[c_path] == "NA" ? "" : r[c_path];
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace emo
