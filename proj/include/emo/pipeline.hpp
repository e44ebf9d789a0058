#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "emo/expression.hpp"
#include "emo/predict.hpp"
#include "emo/segmentation.hpp"
#include "emo/stain.hpp"
#include "emo/stats.hpp"
#include "emo/tiler.hpp"

namespace emo {

struct SegmentationConfig {
    double target_downsample = 32.0;
    TissueMaskParams mask;
};

struct StatsConfig {
    std::string split = "validation";
    double r2_min = 0.2;
    double padj_max = 0.001;
    double alpha = 0.05;
    bool exact_p_small_n = false; // exact permutation p when n <= 9
};

struct LmeConfig {
    double alpha = 0.05;
    double st_var_min = 0.001;
};

struct PredictorConfig {
    std::string mode = "baseline"; // baseline | external
    std::string command;           // external mode
    double lambda = 1e-3;
};

struct PipelineConfig {
    std::uint64_t seed = 1;
    int threads = 0; // 0 = default
    std::filesystem::path slides_dir;
    std::filesystem::path out_dir;
    std::filesystem::path annotations; // empty = tissue mask only
    std::filesystem::path expression;
    std::filesystem::path samples;
    TileSpec tile;
    SamplePlan sample_plan;
    SegmentationConfig segmentation;
    StatsConfig stats;
    LmeConfig lme;
    PredictorConfig predictor;

    // derived artifact locations under out_dir
    std::filesystem::path masks_dir() const { return out_dir / "masks"; }
    std::filesystem::path tiles_dir() const { return out_dir / "tiles"; }
    std::filesystem::path norm_tiles_dir() const { return out_dir / "tiles_norm"; }
    std::filesystem::path profiles_dir() const { return out_dir / "profiles"; }
    std::filesystem::path manifest_path() const { return out_dir / "tiles_manifest.tsv"; }
    std::filesystem::path predictions_path() const { return out_dir / "predictions.tsv"; }
    std::filesystem::path slide_level_path() const { return out_dir / "slide_level.tsv"; }
    std::filesystem::path roi_level_path() const { return out_dir / "roi_level.tsv"; }
    std::filesystem::path gene_stats_path() const { return out_dir / "gene_stats.tsv"; }
};

PipelineConfig load_config(const std::filesystem::path& json_path); // unknown keys rejected
void save_config(const std::filesystem::path& json_path, const PipelineConfig& cfg);

// Per-slide stain state: luminosity reference plus the slide's matrix and
// saturation pseudo-maxima.
struct SlideStainProfile {
    double i_ref95 = 255.0;
    StainProfile profile;
};
void write_slide_stain_json(const std::filesystem::path& path, const SlideStainProfile& p);
SlideStainProfile read_slide_stain_json(const std::filesystem::path& path);

std::vector<std::filesystem::path> list_slide_dirs(const std::filesystem::path& slides_dir);

// Stages. Each reads/writes only the documented TSV/PNG/JSON artifacts and is
// deterministic given identical inputs and seed.
void stage_segment(const PipelineConfig& cfg);
void stage_tile(const PipelineConfig& cfg);
void stage_stain_estimate(const PipelineConfig& cfg);
void stage_stain_apply(const PipelineConfig& cfg);
// composites: "probe_name:gene1,gene2,..." entries appended as per-tile sums
void stage_predict(const PipelineConfig& cfg,
                   const std::vector<std::string>& composites = {});
void stage_aggregate(const PipelineConfig& cfg, const std::filesystem::path& rois_tsv = {});
void stage_stats(const PipelineConfig& cfg);
void stage_select(const PipelineConfig& cfg);
void stage_lme(const PipelineConfig& cfg, const std::filesystem::path& st_tsv,
               const std::filesystem::path& neg_tsv, const std::filesystem::path& rois_tsv);
void stage_heatmap(const PipelineConfig& cfg, const std::string& slide_id,
                   const std::string& gene_id, int level);

// Full pipeline without touching the filesystem between stages; tiles still go
// through an in-memory JPEG round trip so the numbers match the staged run
// bit for bit. Returns the final gene statistics.
std::vector<GeneStat> run_pipeline_inprocess(const PipelineConfig& cfg);

} // namespace emo
