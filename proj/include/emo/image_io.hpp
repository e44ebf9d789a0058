#pragma once

#include <filesystem>

#include "emo/raster.hpp"

namespace emo {

// PNG: lossless, used for masks, heatmaps and pyramid levels (1 or 3 channels).
Raster read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Raster& raster);

// JPEG: used for tiles. Quality 1..100.
Raster read_jpeg(const std::filesystem::path& path);
void write_jpeg(const std::filesystem::path& path, const Raster& raster, int quality);

// In-memory JPEG round trip; the in-process pipeline uses this so it sees the
// same lossy tiles the staged pipeline reads back from disk.
std::vector<std::uint8_t> encode_jpeg(const Raster& raster, int quality);
Raster decode_jpeg(const std::vector<std::uint8_t>& bytes);
Raster read_image(const std::filesystem::path& path); // dispatch on extension

// A slide on disk is either
//   <name>.png + <name>.json          (single level-0 image with a JSON sidecar)
// or a directory
//   <dir>/meta.json, <dir>/level_<k>/image.png
struct Slide {
    SlideMeta meta;
    std::filesystem::path root; // image file or pyramid directory
    bool is_pyramid_dir = false;

    // Reads a declared level; synthesises it from level 0 when the PNG for a
    // non-zero level was not materialised.
    Raster read_level(int level_index) const;
};

Slide open_slide(const std::filesystem::path& path);
SlideMeta read_slide_meta_json(const std::filesystem::path& json_path);
void write_slide_meta_json(const std::filesystem::path& json_path, const SlideMeta& meta);

// Writes meta + level images into a pyramid directory.
void write_slide_pyramid(const std::filesystem::path& dir, const SlideMeta& meta,
                         const std::vector<Raster>& level_images);

} // namespace emo
