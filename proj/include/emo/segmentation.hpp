#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "emo/raster.hpp"

namespace emo {

// One byte per pixel, 0 or 1, aligned to a pyramid level of its slide.
struct BinaryMask {
    int width = 0;
    int height = 0;
    int level = 0;
    std::vector<std::uint8_t> bits;

    BinaryMask() = default;
    BinaryMask(int w, int h, int lv)
        : width(w), height(h), level(lv), bits(static_cast<std::size_t>(w) * h, 0) {}

    std::uint8_t at(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x]; }
    void set(int x, int y, std::uint8_t v) { bits[static_cast<std::size_t>(y) * width + x] = v; }
    std::size_t popcount() const;

    bool operator==(const BinaryMask& o) const = default;
};

struct AnnotationPolygon {
    std::string slide_id;
    std::string label; // "invasive" | "other"
    std::vector<std::array<double, 2>> vertices; // level-0 pixel coordinates
};

struct TissueMaskParams {
    double hue_threshold = 0.75; // on hue normalised to [0,1]
    bool hue_keep_below = true;  // tissue side of the threshold
    int disk_radius = 10;        // structuring element for close-then-open
};

// Otsu on a 256-bin histogram: returns the class boundary t (bins <= t are
// background) maximising between-class variance, smallest index on ties.
// A single occupied bin returns that bin's index.
int otsu_threshold(const std::array<std::uint64_t, 256>& histogram);

// Saturation-Otsu AND hue rule, then morphological closing followed by opening
// with a discrete disk. Foreground is saturation strictly above the Otsu
// boundary, so a blank slide yields an empty mask.
BinaryMask tissue_mask(const Raster& level_raster, int level_index,
                       const TissueMaskParams& params = {});

// Even-odd rasterisation of level-0 polygons onto a pyramid level.
BinaryMask rasterise_annotations(const std::vector<AnnotationPolygon>& polygons,
                                 const SlideMeta& meta, int target_level);

BinaryMask intersect(const BinaryMask& a, const BinaryMask& b);

// Threshold at `cutoff`, fill enclosed holes (4-connected background flood
// from the border), then drop 8-connected components smaller than min_area.
BinaryMask postprocess_probability_mask(const Raster& prob, std::uint8_t cutoff,
                                        int min_area = 405);

// Morphology with a discrete disk {(dx,dy): dx^2+dy^2 <= r^2}. Implemented on
// a zero-padded domain so border behaviour matches the full-plane operators.
BinaryMask binary_dilate(const BinaryMask& m, int radius);
BinaryMask binary_erode(const BinaryMask& m, int radius);
BinaryMask binary_close(const BinaryMask& m, int radius);
BinaryMask binary_open(const BinaryMask& m, int radius);

std::vector<std::pair<int, int>> disk_offsets(int radius);

// Mask <-> PNG (0/255) and annotation JSON.
BinaryMask mask_from_raster(const Raster& r, int level);
Raster mask_to_raster(const BinaryMask& m);
std::vector<AnnotationPolygon> read_annotations_json(const std::filesystem::path& path);
void write_annotations_json(const std::filesystem::path& path,
                            const std::vector<AnnotationPolygon>& polygons);

} // namespace emo
