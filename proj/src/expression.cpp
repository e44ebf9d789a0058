#include "emo/expression.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "emo/tsv.hpp"

namespace emo {

int ExpressionMatrix::gene_index(const std::string& id) const {
    for (std::size_t i = 0; i < genes.size(); ++i)
        if (genes[i] == id) return static_cast<int>(i);
    return -1;
}

int ExpressionMatrix::sample_index(const std::string& id) const {
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (samples[i] == id) return static_cast<int>(i);
    return -1;
}

void ExpressionMatrix::validate() const {
    std::unordered_set<std::string> seen;
    for (const auto& g : genes)
        if (!seen.insert(g).second) throw InvalidInput("duplicate gene id '" + g + "'");
    seen.clear();
    for (const auto& s : samples)
        if (!seen.insert(s).second) throw InvalidInput("duplicate sample id '" + s + "'");
    if (values.size() != genes.size() * samples.size())
        throw InvalidInput("expression matrix shape mismatch");
    for (double v : values)
        if (!std::isfinite(v)) throw InvalidInput("non-finite expression value");
}

ExpressionMatrix read_expression_tsv(const std::filesystem::path& path) {
    const TsvTable t = read_tsv(path);
    if (t.header.empty() || t.header[0] != "gene_id")
        throw InvalidInput(path.string() + ": first column must be gene_id");
    ExpressionMatrix m;
    m.samples.assign(t.header.begin() + 1, t.header.end());
    m.genes.reserve(t.rows.size());
    m.values.reserve(t.rows.size() * m.samples.size());
    for (const auto& row : t.rows) {
        m.genes.push_back(row[0]);
        for (std::size_t i = 1; i < row.size(); ++i) m.values.push_back(parse_double(row[i]));
    }
    m.validate();
    return m;
}

void write_expression_tsv(const std::filesystem::path& path, const ExpressionMatrix& m) {
    std::vector<std::string> header{"gene_id"};
    header.insert(header.end(), m.samples.begin(), m.samples.end());
    TsvWriter w(path, header);
    std::vector<std::string> row;
    for (std::size_t g = 0; g < m.genes.size(); ++g) {
        row.clear();
        row.push_back(m.genes[g]);
        for (std::size_t s = 0; s < m.samples.size(); ++s) row.push_back(fmt_double(m.at(g, s)));
        w.write_row(row);
    }
}

std::vector<SampleInfo> read_sample_manifest(const std::filesystem::path& path) {
    const TsvTable t = read_tsv(path);
    const int c_id = t.col("sample_id"), c_cohort = t.col("cohort"), c_split = t.col("split");
    std::vector<SampleInfo> out;
    for (const auto& r : t.rows) out.push_back({r[c_id], r[c_cohort], r[c_split]});
    return out;
}

void write_sample_manifest(const std::filesystem::path& path,
                           const std::vector<SampleInfo>& samples) {
    TsvWriter w(path, {"sample_id", "cohort", "split"});
    for (const auto& s : samples) w.write_row({s.sample_id, s.cohort, s.split});
}

namespace {

std::vector<std::size_t> resolve_samples(const ExpressionMatrix& m,
                                         const std::vector<std::string>& ids) {
    std::vector<std::size_t> idx;
    idx.reserve(ids.size());
    for (const auto& id : ids) {
        const int i = m.sample_index(id);
        if (i < 0) throw InvalidInput("sample '" + id + "' not in expression matrix");
        idx.push_back(static_cast<std::size_t>(i));
    }
    return idx;
}

} // namespace

ExpressionMatrix variance_filter(const ExpressionMatrix& m, double min_var,
                                 const std::vector<std::string>& subset_samples) {
    const auto idx = resolve_samples(m, subset_samples);
    if (idx.empty()) throw InvalidInput("variance_filter: empty sample subset");

    ExpressionMatrix out;
    out.samples = m.samples;
    for (std::size_t g = 0; g < m.genes.size(); ++g) {
        double mean = 0.0;
        for (std::size_t s : idx) mean += m.at(g, s);
        mean /= static_cast<double>(idx.size());
        double ss = 0.0;
        for (std::size_t s : idx) {
            const double d = m.at(g, s) - mean;
            ss += d * d;
        }
        const double var = idx.size() > 1 ? ss / static_cast<double>(idx.size() - 1) : 0.0;
        if (var > min_var) {
            out.genes.push_back(m.genes[g]);
            for (std::size_t s = 0; s < m.samples.size(); ++s) out.values.push_back(m.at(g, s));
        }
    }
    return out;
}

double median(std::vector<double> v) {
    if (v.empty()) throw InvalidInput("median of empty vector");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> median_offsets(const ExpressionMatrix& m, const std::string& source_cohort,
                                   const std::string& reference_cohort,
                                   const std::vector<SampleInfo>& fit_samples) {
    std::vector<std::size_t> src_idx, ref_idx;
    for (const auto& s : fit_samples) {
        const int i = m.sample_index(s.sample_id);
        if (i < 0) continue;
        if (s.cohort == source_cohort) src_idx.push_back(static_cast<std::size_t>(i));
        if (s.cohort == reference_cohort) ref_idx.push_back(static_cast<std::size_t>(i));
    }
    if (src_idx.empty())
        throw InvalidInput("cohort '" + source_cohort + "' absent from the fit samples");
    if (ref_idx.empty())
        throw InvalidInput("cohort '" + reference_cohort + "' absent from the fit samples");

    std::vector<double> offsets(m.genes.size());
    std::vector<double> buf;
    for (std::size_t g = 0; g < m.genes.size(); ++g) {
        buf.clear();
        for (std::size_t s : ref_idx) buf.push_back(m.at(g, s));
        const double ref_med = median(buf);
        buf.clear();
        for (std::size_t s : src_idx) buf.push_back(m.at(g, s));
        offsets[g] = ref_med - median(buf);
    }
    return offsets;
}

ExpressionMatrix apply_offsets(const ExpressionMatrix& m, const std::vector<double>& offsets,
                               const std::vector<std::string>& target_samples) {
    if (offsets.size() != m.genes.size())
        throw InvalidInput("offset count does not match gene count");
    const auto idx = resolve_samples(m, target_samples);
    ExpressionMatrix out = m;
    for (std::size_t g = 0; g < m.genes.size(); ++g)
        for (std::size_t s : idx) out.at(g, s) += offsets[g];
    return out;
}

ExpressionMatrix test_phase_normalise(const ExpressionMatrix& m,
                                      const std::vector<SampleInfo>& all_samples,
                                      const std::vector<std::string>& reference_fit_samples) {
    const auto ref_idx = resolve_samples(m, reference_fit_samples);
    if (ref_idx.empty()) throw InvalidInput("empty reference fit set");

    // frozen reference medians
    std::vector<double> ref_medians(m.genes.size());
    std::vector<double> buf;
    for (std::size_t g = 0; g < m.genes.size(); ++g) {
        buf.clear();
        for (std::size_t s : ref_idx) buf.push_back(m.at(g, s));
        ref_medians[g] = median(buf);
    }

    std::unordered_set<std::string> fit_set(reference_fit_samples.begin(),
                                            reference_fit_samples.end());
    // group non-fit samples by cohort
    std::unordered_map<std::string, std::vector<std::size_t>> groups;
    for (const auto& s : all_samples) {
        if (fit_set.count(s.sample_id)) continue;
        const int i = m.sample_index(s.sample_id);
        if (i < 0) continue;
        groups[s.cohort].push_back(static_cast<std::size_t>(i));
    }

    ExpressionMatrix out = m;
    std::vector<std::string> cohorts;
    for (const auto& [cohort, idx] : groups) cohorts.push_back(cohort);
    std::sort(cohorts.begin(), cohorts.end());
    for (const auto& cohort : cohorts) {
        const auto& idx = groups[cohort];
        for (std::size_t g = 0; g < m.genes.size(); ++g) {
            buf.clear();
            for (std::size_t s : idx) buf.push_back(m.at(g, s));
            const double offset = ref_medians[g] - median(buf);
            for (std::size_t s : idx) out.at(g, s) += offset;
        }
    }
    return out;
}

void write_offsets_tsv(const std::filesystem::path& path, const std::vector<std::string>& genes,
                       const std::vector<double>& offsets) {
    if (genes.size() != offsets.size()) throw InvalidInput("offsets/genes length mismatch");
    TsvWriter w(path, {"gene_id", "offset"});
    for (std::size_t g = 0; g < genes.size(); ++g)
        w.write_row({genes[g], fmt_double(offsets[g])});
}

} // namespace emo
