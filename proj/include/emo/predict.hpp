#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emo/raster.hpp"
#include "emo/tiler.hpp"

namespace emo {

struct TilePrediction {
    std::string slide_id;
    long x0 = 0, y0 = 0;
    std::string gene_id;
    double value = 0.0;
};

struct Roi {
    std::string roi_id;
    std::string slide_id;
    long x0 = 0, y0 = 0; // level-0 origin
    double size_um = 600.0;
};

// Per-channel mean and standard deviation of the tile, scaled to [0,1].
constexpr int kBaselineFeatureCount = 6;
std::array<double, kBaselineFeatureCount> baseline_features(const Raster& tile);

struct BaselineModel {
    std::string gene_id;
    std::array<double, kBaselineFeatureCount> weights{};
    double bias = 0.0;
};

// Ridge least squares of slide-level expression on tile features; the
// intercept is not penalised, so lambda -> inf collapses to the label mean.
BaselineModel fit_baseline(const std::string& gene_id,
                           std::span<const std::array<double, kBaselineFeatureCount>> features,
                           std::span<const double> labels, double lambda = 1e-3);
double predict_baseline(const BaselineModel& model,
                        const std::array<double, kBaselineFeatureCount>& features);

void write_baseline_models_json(const std::filesystem::path& path,
                                std::span<const BaselineModel> models, double lambda);
std::vector<BaselineModel> read_baseline_models_json(const std::filesystem::path& path);

// External predictor protocol: the child receives one TSV line per tile
// (slide_id, x0, y0, path) on stdin and must emit
// (slide_id, x0, y0, gene_id, value) lines on stdout, exit status 0.
// More than 1% malformed lines or a nonzero exit aborts the run.
std::vector<TilePrediction> run_external_predictor(std::span<const TileManifestRow> tiles,
                                                   const std::string& command);

// mean over tiles; nullopt when the slide contributed no accepted tiles
std::optional<double> aggregate_slide(std::span<const double> tile_values);

// mean over predictions whose tile centre lies inside the ROI footprint
std::optional<double> aggregate_roi(std::span<const TilePrediction> predictions, const Roi& roi,
                                    const SlideMeta& meta, int src_px);

// per-tile sum across member genes, emitted under `probe_name`
std::vector<TilePrediction> composite_probe(std::span<const TilePrediction> predictions,
                                            const std::string& probe_name,
                                            std::span<const std::string> members);

struct Heatmap {
    Raster image; // 1-channel
    double min = 0.0, max = 0.0;
    bool degenerate_range = false;
};

// Tiles paint their footprint at `level`; overlaps average; min-max scaled to
// 0..255 (an all-equal map renders at 255 with the degenerate flag set).
Heatmap heatmap(std::span<const TilePrediction> predictions, const SlideMeta& meta, int level,
                int src_px);
void write_heatmap(const std::filesystem::path& png_path, const std::filesystem::path& json_path,
                   const Heatmap& hm);

// Prediction tables. Missing values are the literal token NA.
void write_predictions_tsv(const std::filesystem::path& path,
                           std::vector<TilePrediction> predictions);
std::vector<TilePrediction> read_predictions_tsv(const std::filesystem::path& path);

struct SlideLevelRow {
    std::string slide_id;
    std::string gene_id;
    std::optional<double> value;
};
void write_slide_level_tsv(const std::filesystem::path& path, std::span<const SlideLevelRow> rows);
std::vector<SlideLevelRow> read_slide_level_tsv(const std::filesystem::path& path);

struct RoiLevelRow {
    std::string roi_id;
    std::string slide_id;
    std::string gene_id;
    std::optional<double> value;
};
void write_roi_level_tsv(const std::filesystem::path& path, std::span<const RoiLevelRow> rows);
std::vector<RoiLevelRow> read_roi_level_tsv(const std::filesystem::path& path);

std::vector<Roi> read_rois_tsv(const std::filesystem::path& path);
void write_rois_tsv(const std::filesystem::path& path, std::span<const Roi> rois);

} // namespace emo
