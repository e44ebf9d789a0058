#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "emo/error.hpp"

namespace emo {

struct GeneStat {
    std::string gene_id;
    int n = 0;
    double rho = 0.0;
    double p = 1.0;
    double p_adj_bh = 1.0;
    double p_adj_bonf = 1.0;
    double r2_pred = 0.0;
    bool selected = false;
};

struct SpearmanResult {
    double rho = 0.0;
    double p = 1.0;
};

// Mid-rank ties, rho = Pearson of ranks. Two-sided p from the t approximation
// t = rho*sqrt((n-2)/(1-rho^2)) with n-2 df; |rho| = 1 gives p = 0.
// Requires n >= 4 and non-constant inputs.
SpearmanResult spearman(std::span<const double> x, std::span<const double> y);

// rho only, usable from n >= 2 (the per-slide ST summaries need small n).
double spearman_rho(std::span<const double> x, std::span<const double> y);

// Exact permutation p-value (two-sided) for small n; n <= 9 keeps the
// enumeration cheap.
double spearman_exact_p(std::span<const double> x, std::span<const double> y);

std::vector<double> bh_adjust(std::span<const double> p);
std::vector<double> bonferroni_adjust(std::span<const double> p);

// 1 - SS_res/SS_tot; negative when predictions underperform the mean.
double r2_pred(std::span<const double> observed, std::span<const double> predicted);

// Strict thresholds: r2_pred > r2_min AND p_adj < padj_max; result ordered by gene_id.
std::vector<GeneStat> select_genes(std::span<const GeneStat> stats, double r2_min = 0.2,
                                   double padj_max = 0.001);

struct SignificanceCount {
    std::size_t count = 0;
    double fraction = 0.0;
};
SignificanceCount significance_count(std::span<const GeneStat> stats, double alpha = 0.05);

// Student-t and chi-square(1) survival functions used by the tests above.
double student_t_sf(double t, double df);      // P(T > t), one-sided
double chi2_1_sf(double x);                    // P(X > x) for 1 df

void write_gene_stats_tsv(const std::filesystem::path& path, std::span<const GeneStat> stats);
std::vector<GeneStat> read_gene_stats_tsv(const std::filesystem::path& path);

// Histogram counts for the rho / p / r2 panels; r2 histogram reports how many
// genes fall below its lower edge instead of binning them.
void write_stats_summary_json(const std::filesystem::path& path, std::span<const GeneStat> stats);

} // namespace emo
