#pragma once

// Serial reference implementations: direct, unoptimised versions of the
// kernels, written from the definitions. Tests use them as independent
// oracles against the OpenMP kernels in emo_core; the bench tool times the
// two against each other. Nothing here may call the production algorithms.

#include <array>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "emo/raster.hpp"
#include "emo/segmentation.hpp"

namespace emo::reference {

// scalar HSV of one pixel, channels scaled to [0,255]
std::array<std::uint8_t, 3> rgb_px_to_hsv(std::uint8_t r, std::uint8_t g, std::uint8_t b);

// direct (non-separable) Lanczos-3 resize evaluating the 2-D kernel per output pixel
Raster resample_lanczos(const Raster& src, double factor);

// gather-based morphology with out-of-bounds treated as background
BinaryMask dilate(const BinaryMask& m, std::span<const std::pair<int, int>> element);
BinaryMask erode(const BinaryMask& m, std::span<const std::pair<int, int>> element);

// exhaustive scan of all 255 cut points for the between-class variance maximum
int otsu_threshold(const std::array<std::uint64_t, 256>& histogram);

// even-odd crossing test for one point against one polygon
bool point_in_polygon(double px, double py,
                      const std::vector<std::array<double, 2>>& vertices);

// BFS connected-component labelling; returns label per pixel (-1 = background)
// and per-label areas. eight_connected=false uses 4-connectivity.
struct Components {
    std::vector<std::int32_t> label;
    std::vector<std::int64_t> area;
};
Components label_components(const BinaryMask& m, bool eight_connected);

// background components not touching the border (holes); count of such regions
int count_interior_holes(const BinaryMask& m);

// direct 3x3 convolution with edge replication; ITU-R 601 grey first
double laplacian_variance(const Raster& tile);

// O(n^2) fractional ranks, then textbook Pearson
double spearman_rho(std::span<const double> x, std::span<const double> y);

// definitional Benjamini-Hochberg: per element, min over all p_j >= p_i of
// m*p_j/rank(p_j) with max-ranks for ties, capped at 1
std::vector<double> bh_adjust(std::span<const double> p);
std::vector<double> bonferroni_adjust(std::span<const double> p);

// one-liner definition of predictive R^2
double r2_pred(std::span<const double> observed, std::span<const double> predicted);

// Kahan-compensated mean
double compensated_mean(std::span<const double> values);

// ordinary least squares slope/intercept
struct Ols {
    double intercept = 0.0, slope = 0.0;
};
Ols ols(std::span<const double> x, std::span<const double> y);

// Kolmogorov-Smirnov distance of a sample against Uniform(0,1)
double ks_uniform(std::vector<double> sample);

// Student-t upper tail by Simpson quadrature of the density
double student_t_sf_quadrature(double t, int df);

// nearest-rank percentile straight from its definition
double percentile_nearest_rank(std::vector<double> values, double p);

} // namespace emo::reference
