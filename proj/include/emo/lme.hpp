#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "emo/error.hpp"

namespace emo {

struct StMeasurement {
    std::string slide_id;
    std::string roi_id;
    std::string gene_id;
    double raw_count = 0.0;
    double neg_ctrl_mean = 0.0;
    double value = 0.0; // log2(raw_count / neg_ctrl_mean)
};

struct LmeFit {
    std::string gene_id;
    double beta0 = 0.0;
    double beta1 = 0.0;
    double sigma_u2 = 0.0; // between-slide variance (>= 0, may sit at the boundary)
    double sigma_e2 = 0.0; // residual variance (> 0)
    double loglik_full = 0.0;
    double loglik_null = 0.0;
    double lrt_stat = 0.0;
    double p = 1.0;
    double p_adj = 1.0;
    double ci_lo = 0.0, ci_hi = 0.0; // Wald 95% for beta1
    bool boundary_sigma_u = false;   // sigma_u^2 pinned at 0
    bool significant = false;
    bool ok = true;
    std::string error;
};

struct LmeDesign {
    std::string gene_id;
    std::vector<double> y;            // ST values
    std::vector<double> x;            // EMO-spatial ROI predictions
    std::vector<std::string> groups;  // slide ids
};

struct StRawCount {
    std::string slide_id, roi_id, gene_id;
    double raw_count = 0.0;
};

struct NegControlRow {
    std::string slide_id, roi_id, probe;
    double raw_count = 0.0;
};

// value = log2(raw / mean of the ROI's negative controls); genes whose
// ROI-level variance falls below var_min are dropped (their ids returned).
struct StNormalised {
    std::vector<StMeasurement> measurements;
    std::vector<std::string> dropped_low_variance;
};
StNormalised normalise_st(const std::vector<StRawCount>& counts,
                          const std::vector<NegControlRow>& neg_controls,
                          double var_min = 0.001);

// Random-intercept model y_ij = b0 + b1 x_ij + u_j + e_ij fitted by ML via the
// profiled likelihood over theta = sigma_u^2/sigma_e^2 (log-scale golden
// section on [-12,12] plus the theta=0 boundary). The null model drops the
// fixed slope; LRT p-value from chi-square(1).
LmeFit fit_lme(const LmeDesign& design);

// Per-gene fits in parallel, BH over the LRT p-values of the successful fits,
// significance flag at `alpha`.
std::vector<LmeFit> lme_batch(std::span<const LmeDesign> designs, double alpha = 0.05);

struct SlideRho {
    std::string slide_id;
    std::string gene_id;
    int n = 0;
    double rho = 0.0;
    bool small_n = false; // fewer than 4 ROIs
    bool ok = true;       // false when within-slide values are constant
};
std::vector<SlideRho> per_slide_spearman(std::span<const LmeDesign> designs);

struct RhoSummary {
    std::string gene_id;
    int n_slides = 0;
    double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
};
std::vector<RhoSummary> summarise_slide_rho(std::span<const SlideRho> rhos);

// I/O for the LME stage
std::vector<StRawCount> read_st_counts_tsv(const std::filesystem::path& path);
std::vector<NegControlRow> read_neg_controls_tsv(const std::filesystem::path& path);
void write_lme_results_tsv(const std::filesystem::path& path, std::span<const LmeFit> fits);
void write_slide_rho_tsv(const std::filesystem::path& path, std::span<const SlideRho> rhos);
void write_rho_summary_tsv(const std::filesystem::path& path, std::span<const RhoSummary> rows);

} // namespace emo
