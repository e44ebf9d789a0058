#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "emo/raster.hpp"

namespace emo {

// Synthetic H&E-like fixture. Slides are rendered from a resolution-free
// scene in physical coordinates (stain saturations composed through the OD
// model), so the same slide parameters rendered at different mpp depict the
// same specimen. A known subset of genes is a deterministic function of the
// per-slide nuclear density plus noise; the rest are pure noise.
struct SynthParams {
    std::uint64_t seed = 1;
    int n_train = 10;
    int n_val = 5;
    int n_genes = 20;
    int n_linked = 5;
    double mpp = 0.226;
    double slide_w_um = 551.44; // 2440 px at 0.226
    double slide_h_um = 413.58; // 1830 px at 0.226
    bool with_st = true;        // also emit ROI definitions + ST-style counts
    int rois_per_slide = 12;
};

struct SynthSlideTruth {
    std::string slide_id;
    std::string split; // train | validation
    double z = 0.0;    // density driver in [0,1]
    double density = 0.0;
    double stain_gain = 1.0;
};

struct SynthGeneTruth {
    std::string gene_id;
    bool linked = false;
    double base = 0.0;
    double slope = 0.0;
};

struct SynthTruth {
    std::vector<SynthSlideTruth> slides;
    std::vector<SynthGeneTruth> genes;
};

// Renders one slide's level-0 raster for arbitrary mpp/dimensions.
Raster render_synth_slide(const SynthParams& p, const SynthSlideTruth& slide);

// Slide/gene parameters for a seed (rendering-independent).
SynthTruth synth_truth(const SynthParams& p);

// Writes slides/ (pyramid dirs), annotations.json, expression.tsv,
// samples.tsv, truth.json and, when enabled, rois.tsv, st_counts.tsv,
// neg_controls.tsv.
SynthTruth synth_fixture(const std::filesystem::path& out_dir, const SynthParams& p);

} // namespace emo
