#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "emo/raster.hpp"

namespace emo {

// 3x2 optical-density stain matrix; column 0 = H, column 1 = E, unit-norm,
// non-negative. H is the column with the larger blue-channel absorbance.
using StainMatrix = std::array<std::array<double, 2>, 3>;

struct LuminosityRef {
    double i_ref95 = 255.0; // 95th percentile of the 8-bit L channel
};

struct StainProfile {
    StainMatrix stain_matrix{};
    std::array<double, 2> sat_ref99{}; // per-stain saturation pseudo-maxima
    std::uint64_t seed = 0;
    int n_tiles = 0;
};

struct SamplePlan {
    std::uint64_t seed = 0;
    int tiles_per_slide = 100;
    int global_tiles = 3000;
};

struct MacenkoParams {
    double alpha = 1.0;  // angular percentile for the extreme stain vectors
    double beta = 0.15;  // OD floor: drop pixels with max-channel OD below this
    // pooled samples are decimated to at most this many pixels (deterministic
    // stride) to bound memory on large tile pools
    std::size_t max_pixels = 2'000'000;
};

// nearest-rank percentile: sorted[ceil(p/100 * n) - 1]
double percentile_nearest_rank(std::vector<double> values, double p);

// 95th percentile of L over the pooled sample of tiles.
LuminosityRef luminosity_ref(std::span<const Raster> tiles);

// L > ref -> 255; otherwise L scaled linearly so that ref maps to 255.
Raster correct_luminosity(const Raster& tile, const LuminosityRef& ref);

// Macenko estimation from luminosity-corrected tiles.
StainMatrix estimate_stain_matrix(std::span<const Raster> tiles, const MacenkoParams& mp = {});

// Per-pixel least squares OD ~= M s, clamped at 0. Outputs one value per pixel per stain.
void saturation_coefficients(const Raster& tile, const StainMatrix& m,
                             std::vector<double>& s_h, std::vector<double>& s_e);

// Matrix + 99th-percentile saturations over the pooled tiles.
StainProfile stain_profile(std::span<const Raster> tiles, std::uint64_t seed,
                           const MacenkoParams& mp = {});

// Saturations w.r.t. the slide matrix, rescaled per stain by
// global.sat_ref99 / slide_sat99, re-composed with the global matrix.
Raster normalise_tile(const Raster& tile, const StainMatrix& slide_matrix,
                      const std::array<double, 2>& slide_sat99, const StainProfile& global);

void write_stain_profile_json(const std::filesystem::path& path, const StainProfile& p);
StainProfile read_stain_profile_json(const std::filesystem::path& path);

} // namespace emo
