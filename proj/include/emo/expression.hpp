#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "emo/error.hpp"

namespace emo {

// genes x samples matrix of log-scale normalised expression, row-major.
struct ExpressionMatrix {
    std::vector<std::string> genes;
    std::vector<std::string> samples;
    std::vector<double> values;

    double at(std::size_t g, std::size_t s) const { return values[g * samples.size() + s]; }
    double& at(std::size_t g, std::size_t s) { return values[g * samples.size() + s]; }
    int gene_index(const std::string& id) const;  // -1 when absent
    int sample_index(const std::string& id) const;
    void validate() const; // unique ids, finite values
};

struct SampleInfo {
    std::string sample_id;
    std::string cohort;
    std::string split; // train | tune | validation | test
};

ExpressionMatrix read_expression_tsv(const std::filesystem::path& path);
void write_expression_tsv(const std::filesystem::path& path, const ExpressionMatrix& m);
std::vector<SampleInfo> read_sample_manifest(const std::filesystem::path& path);
void write_sample_manifest(const std::filesystem::path& path,
                           const std::vector<SampleInfo>& samples);

// Keeps genes whose unbiased (n-1) variance over `subset_samples` is strictly
// above min_var. Gene order preserved.
ExpressionMatrix variance_filter(const ExpressionMatrix& m, double min_var,
                                 const std::vector<std::string>& subset_samples);

// median over an even count = mean of the two central values
double median(std::vector<double> v);

// offset_g = median_ref(g) - median_src(g), both over fit_samples only.
std::vector<double> median_offsets(const ExpressionMatrix& m, const std::string& source_cohort,
                                   const std::string& reference_cohort,
                                   const std::vector<SampleInfo>& fit_samples);

// Adds offsets to the listed target samples; everything else untouched.
ExpressionMatrix apply_offsets(const ExpressionMatrix& m, const std::vector<double>& offsets,
                               const std::vector<std::string>& target_samples);

// Shifts every (cohort, non-fit) sample group onto the reference medians
// frozen from `reference_fit_samples`; test samples never contribute to them.
ExpressionMatrix test_phase_normalise(const ExpressionMatrix& m,
                                      const std::vector<SampleInfo>& all_samples,
                                      const std::vector<std::string>& reference_fit_samples);

void write_offsets_tsv(const std::filesystem::path& path, const std::vector<std::string>& genes,
                       const std::vector<double>& offsets);

} // namespace emo
