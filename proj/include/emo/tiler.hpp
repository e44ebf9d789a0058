#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "emo/raster.hpp"
#include "emo/segmentation.hpp"

namespace emo {

struct TileSpec {
    double physical_size_um = 271.0;
    int output_px = 598;
    double overlap_fraction = 0.5;   // [0,1)
    double tissue_min_fraction = 0.5; // accepted iff strictly above
    double blur_variance_min = 500.0; // accepted iff >=
    int jpeg_quality = 80;
    int src_px_exact = 0; // 0 = derive from mpp; 1196 reproduces the 40x reference setup

    void validate() const;
    // full-resolution read size: round-half-up of physical_size/mpp unless pinned
    int src_px(double mpp) const;
    int stride_px(double mpp) const;
};

struct TileRecord {
    std::string slide_id;
    long x0 = 0, y0 = 0; // level-0 origin
    int src_px = 0;
    Raster pixels; // output_px x output_px x 3
    double tissue_fraction = 0.0;
    double blur_variance = 0.0;
    bool accepted = false;
};

// Row-major grid of level-0 origins at stride multiples; tiles fully inside
// the slide. A slide smaller than one tile yields an empty plan.
std::vector<std::pair<long, long>> plan_grid(const SlideMeta& meta, const TileSpec& spec);

// Reads src_px^2 at level 0 and Lanczos-resamples to output_px^2. QC metrics
// are not filled in here.
TileRecord extract_tile(const Raster& level0, const SlideMeta& meta, const TileSpec& spec,
                        long x0, long y0);

// Fraction of positive mask pixels among mask pixels whose centre falls in the
// tile's level-0 footprint.
double tissue_fraction(long x0, long y0, int src_px, const BinaryMask& mask,
                       const SlideMeta& meta);

// Variance of the 3x3 Laplacian response over the ITU-R 601 grey image,
// borders edge-replicated ("kernel size 1" operator).
double blur_variance(const Raster& tile);

bool accept(const TileRecord& tile, const TileSpec& spec);

std::string tile_filename(const std::string& slide_id, long x0, long y0);
std::filesystem::path write_tile(const TileRecord& tile, const TileSpec& spec,
                                 const std::filesystem::path& out_dir);

// Tile manifest TSV: slide_id, x0, y0, src_px, tissue_fraction, blur_variance,
// accepted, path. Rejected tiles keep their metrics and carry path=NA.
struct TileManifestRow {
    std::string slide_id;
    long x0 = 0, y0 = 0;
    int src_px = 0;
    double tissue_fraction = 0.0;
    double blur_variance = 0.0;
    bool accepted = false;
    std::string path; // "NA" when not written
};

void write_tile_manifest(const std::filesystem::path& path, std::vector<TileManifestRow> rows);
std::vector<TileManifestRow> read_tile_manifest(const std::filesystem::path& path);

} // namespace emo
