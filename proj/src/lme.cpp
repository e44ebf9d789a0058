#include "emo/lme.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "emo/stats.hpp"
#include "emo/tsv.hpp"

namespace emo {

StNormalised normalise_st(const std::vector<StRawCount>& counts,
                          const std::vector<NegControlRow>& neg_controls, double var_min) {
    // mean negative-control signal per (slide, roi)
    std::map<std::pair<std::string, std::string>, std::pair<double, int>> neg;
    for (const auto& row : neg_controls) {
        if (row.raw_count <= 0.0)
            throw InvalidInput("negative control count must be positive in ROI '" + row.roi_id +
                               "' of slide '" + row.slide_id + "'");
        auto& acc = neg[{row.slide_id, row.roi_id}];
        acc.first += row.raw_count;
        acc.second += 1;
    }

    StNormalised out;
    for (const auto& c : counts) {
        if (c.raw_count <= 0.0)
            throw InvalidInput("non-positive count for gene '" + c.gene_id + "' in ROI '" +
                               c.roi_id + "' of slide '" + c.slide_id + "'");
        const auto it = neg.find({c.slide_id, c.roi_id});
        if (it == neg.end() || it->second.second == 0)
            throw InvalidInput("no negative controls for ROI '" + c.roi_id + "' of slide '" +
                               c.slide_id + "'");
        StMeasurement m;
        m.slide_id = c.slide_id;
        m.roi_id = c.roi_id;
        m.gene_id = c.gene_id;
        m.raw_count = c.raw_count;
        m.neg_ctrl_mean = it->second.first / it->second.second;
        m.value = std::log2(c.raw_count / m.neg_ctrl_mean);
        out.measurements.push_back(std::move(m));
    }

    // low-variance gene exclusion over ROI values
    std::map<std::string, std::vector<double>> per_gene;
    for (const auto& m : out.measurements) per_gene[m.gene_id].push_back(m.value);
    std::vector<std::string> dropped;
    for (const auto& [gene, vals] : per_gene) {
        if (vals.size() < 2) continue;
        double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / vals.size();
        double ss = 0.0;
        for (double v : vals) ss += (v - mean) * (v - mean);
        if (ss / (vals.size() - 1) < var_min) dropped.push_back(gene);
    }
    if (!dropped.empty()) {
        std::erase_if(out.measurements, [&](const StMeasurement& m) {
            return std::find(dropped.begin(), dropped.end(), m.gene_id) != dropped.end();
        });
    }
    out.dropped_low_variance = std::move(dropped);
    return out;
}

// ---------------------------------------------------------------------------
// Profiled ML for the random-intercept model.
//
// With theta = sigma_u^2/sigma_e^2 the marginal covariance per slide j is
// sigma_e^2 (I + theta 11'); its inverse is (I - theta/(1+theta n_j) 11')
// /sigma_e^2, so GLS sums reduce to per-group totals and everything is O(n)
// per likelihood evaluation.

namespace {

struct Grouped {
    std::vector<std::vector<double>> y, x; // per group
    std::size_t n_total = 0;
};

struct ProfileResult {
    double loglik = -std::numeric_limits<double>::infinity();
    double beta0 = 0.0, beta1 = 0.0;
    double sigma_e2 = 0.0;
    double se_beta1 = 0.0;
};

// GLS at fixed theta. with_slope=false fits the intercept-only null model.
ProfileResult profile_at(const Grouped& g, double theta, bool with_slope) {
    // accumulate X' W^-1 X and X' W^-1 y with X = [1, x]
    double a00 = 0, a01 = 0, a11 = 0, b0 = 0, b1 = 0;
    double logdet = 0.0;
    for (std::size_t j = 0; j < g.y.size(); ++j) {
        const auto& yj = g.y[j];
        const auto& xj = g.x[j];
        const double nj = static_cast<double>(yj.size());
        const double c = theta / (1.0 + theta * nj);
        logdet += std::log(1.0 + theta * nj);
        double sy = 0, sx = 0, sxx = 0, sxy = 0, syy = 0;
        for (std::size_t i = 0; i < yj.size(); ++i) {
            sy += yj[i];
            sx += xj[i];
            sxx += xj[i] * xj[i];
            sxy += xj[i] * yj[i];
            syy += yj[i] * yj[i];
        }
        a00 += nj - c * nj * nj;
        a01 += sx - c * nj * sx;
        a11 += sxx - c * sx * sx;
        b0 += sy - c * nj * sy;
        b1 += sxy - c * sx * sy;
        (void)syy;
    }

    ProfileResult r;
    double rss = 0.0;
    if (with_slope) {
        const double det = a00 * a11 - a01 * a01;
        if (std::abs(det) < 1e-300) return r; // leave -inf; degenerate design
        r.beta0 = (a11 * b0 - a01 * b1) / det;
        r.beta1 = (a00 * b1 - a01 * b0) / det;
    } else {
        if (a00 <= 0.0) return r;
        r.beta0 = b0 / a00;
        r.beta1 = 0.0;
    }
    for (std::size_t j = 0; j < g.y.size(); ++j) {
        const auto& yj = g.y[j];
        const auto& xj = g.x[j];
        const double nj = static_cast<double>(yj.size());
        const double c = theta / (1.0 + theta * nj);
        double sr = 0.0, srr = 0.0;
        for (std::size_t i = 0; i < yj.size(); ++i) {
            const double res = yj[i] - r.beta0 - r.beta1 * xj[i];
            sr += res;
            srr += res * res;
        }
        rss += srr - c * sr * sr;
    }
    const double n = static_cast<double>(g.n_total);
    if (rss <= 0.0) return r;
    r.sigma_e2 = rss / n;
    r.loglik = -0.5 * n * (std::log(2.0 * M_PI * r.sigma_e2) + 1.0) - 0.5 * logdet;
    if (with_slope) {
        const double det = a00 * a11 - a01 * a01;
        r.se_beta1 = std::sqrt(r.sigma_e2 * a00 / det);
    }
    return r;
}

struct OptResult {
    double theta = 0.0;
    ProfileResult prof;
};

// coarse log-grid scan, golden-section refinement, theta=0 compared last
OptResult optimise_theta(const Grouped& g, bool with_slope) {
    constexpr double kLogLo = -12.0, kLogHi = 12.0;
    constexpr int kGrid = 49;
    auto eval = [&](double lt) { return profile_at(g, std::exp(lt), with_slope).loglik; };

    double best_lt = kLogLo;
    double best_ll = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < kGrid; ++i) {
        const double lt = kLogLo + (kLogHi - kLogLo) * i / (kGrid - 1);
        const double ll = eval(lt);
        if (ll > best_ll) {
            best_ll = ll;
            best_lt = lt;
        }
    }
    if (!std::isfinite(best_ll)) throw RuntimeFailure("LME profile likelihood is degenerate");

    const double step = (kLogHi - kLogLo) / (kGrid - 1);
    double lo = std::max(kLogLo, best_lt - step);
    double hi = std::min(kLogHi, best_lt + step);
    const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
    double c = hi - gr * (hi - lo), d = lo + gr * (hi - lo);
    double fc = eval(c), fd = eval(d);
    for (int it = 0; it < 200 && hi - lo > 1e-10; ++it) {
        if (fc > fd) {
            hi = d;
            d = c;
            fd = fc;
            c = hi - gr * (hi - lo);
            fc = eval(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + gr * (hi - lo);
            fd = eval(d);
        }
        if (std::abs(fc - fd) < 1e-8 && hi - lo < 1e-6) break;
    }
    const double lt_star = fc > fd ? c : d;

    OptResult out;
    out.theta = std::exp(lt_star);
    out.prof = profile_at(g, out.theta, with_slope);
    // boundary candidate: no between-slide variance at all
    const ProfileResult at_zero = profile_at(g, 0.0, with_slope);
    if (at_zero.loglik >= out.prof.loglik) {
        out.theta = 0.0;
        out.prof = at_zero;
    }
    return out;
}

Grouped group_design(const LmeDesign& d) {
    if (d.y.size() != d.x.size() || d.y.size() != d.groups.size())
        throw InvalidInput("LME design arrays must have equal length");
    std::map<std::string, std::size_t> ids;
    Grouped g;
    for (std::size_t i = 0; i < d.y.size(); ++i) {
        auto [it, inserted] = ids.try_emplace(d.groups[i], g.y.size());
        if (inserted) {
            g.y.emplace_back();
            g.x.emplace_back();
        }
        g.y[it->second].push_back(d.y[i]);
        g.x[it->second].push_back(d.x[i]);
    }
    g.n_total = d.y.size();
    return g;
}

} // namespace

LmeFit fit_lme(const LmeDesign& design) {
    LmeFit fit;
    fit.gene_id = design.gene_id;

    const Grouped g = group_design(design);
    if (g.y.size() < 2) throw InvalidInput("LME needs at least 2 slides (gene '" +
                                           design.gene_id + "')");
    bool all_singletons = true;
    for (const auto& yj : g.y)
        if (yj.size() > 1) all_singletons = false;
    if (all_singletons)
        throw InvalidInput("one observation per slide: variance components are unidentifiable "
                           "(gene '" + design.gene_id + "')");
    const double x0 = design.x.front();
    bool x_constant = true;
    for (double v : design.x)
        if (v != x0) x_constant = false;
    if (x_constant) throw InvalidInput("constant predictor (gene '" + design.gene_id + "')");

    const OptResult full = optimise_theta(g, true);
    const OptResult null = optimise_theta(g, false);

    fit.beta0 = full.prof.beta0;
    fit.beta1 = full.prof.beta1;
    fit.sigma_e2 = full.prof.sigma_e2;
    fit.sigma_u2 = full.theta * full.prof.sigma_e2;
    fit.boundary_sigma_u = full.theta == 0.0;
    // evaluating the full model at the null's variance ratio keeps the pair
    // nested numerically, so the statistic cannot go negative
    double ll_full = full.prof.loglik;
    const ProfileResult cross = profile_at(g, null.theta, true);
    ll_full = std::max(ll_full, cross.loglik);
    fit.loglik_full = ll_full;
    fit.loglik_null = null.prof.loglik;
    fit.lrt_stat = std::max(0.0, 2.0 * (fit.loglik_full - fit.loglik_null));
    fit.p = chi2_1_sf(fit.lrt_stat);
    const double z = 1.959963984540054;
    fit.ci_lo = fit.beta1 - z * full.prof.se_beta1;
    fit.ci_hi = fit.beta1 + z * full.prof.se_beta1;
    return fit;
}

std::vector<LmeFit> lme_batch(std::span<const LmeDesign> designs, double alpha) {
    std::vector<LmeFit> fits(designs.size());
    const std::int64_t n = static_cast<std::int64_t>(designs.size());
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t i = 0; i < n; ++i) {
        try {
            fits[i] = fit_lme(designs[i]);
        } catch (const std::exception& e) {
            fits[i].gene_id = designs[i].gene_id;
            fits[i].ok = false;
            fits[i].error = e.what();
        }
    }

    std::vector<double> ps;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < fits.size(); ++i)
        if (fits[i].ok) {
            ps.push_back(fits[i].p);
            idx.push_back(i);
        }
    const auto adj = bh_adjust(ps);
    for (std::size_t k = 0; k < idx.size(); ++k) {
        fits[idx[k]].p_adj = adj[k];
        fits[idx[k]].significant = adj[k] < alpha;
    }
    return fits;
}

std::vector<SlideRho> per_slide_spearman(std::span<const LmeDesign> designs) {
    std::vector<SlideRho> out;
    for (const auto& d : designs) {
        std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
        for (std::size_t i = 0; i < d.y.size(); ++i) {
            groups[d.groups[i]].first.push_back(d.x[i]);
            groups[d.groups[i]].second.push_back(d.y[i]);
        }
        for (const auto& [slide, xy] : groups) {
            SlideRho r;
            r.slide_id = slide;
            r.gene_id = d.gene_id;
            r.n = static_cast<int>(xy.first.size());
            r.small_n = r.n < 4;
            try {
                r.rho = spearman_rho(xy.first, xy.second);
            } catch (const InvalidInput&) {
                r.ok = false; // constant within-slide vector -> NA
            }
            out.push_back(std::move(r));
        }
    }
    return out;
}

std::vector<RhoSummary> summarise_slide_rho(std::span<const SlideRho> rhos) {
    std::map<std::string, std::vector<double>> per_gene;
    for (const auto& r : rhos)
        if (r.ok) per_gene[r.gene_id].push_back(r.rho);
    std::vector<RhoSummary> out;
    for (auto& [gene, vals] : per_gene) {
        std::sort(vals.begin(), vals.end());
        auto quantile = [&](double q) {
            const double pos = q * (vals.size() - 1);
            const std::size_t i = static_cast<std::size_t>(pos);
            const double frac = pos - i;
            return i + 1 < vals.size() ? vals[i] * (1 - frac) + vals[i + 1] * frac : vals[i];
        };
        RhoSummary s;
        s.gene_id = gene;
        s.n_slides = static_cast<int>(vals.size());
        s.min = vals.front();
        s.q1 = quantile(0.25);
        s.median = quantile(0.5);
        s.q3 = quantile(0.75);
        s.max = vals.back();
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<StRawCount> read_st_counts_tsv(const std::filesystem::path& path) {
    const TsvTable t = read_tsv(path);
    const int c_s = t.col("slide_id"), c_r = t.col("roi_id"), c_g = t.col("gene_id");
    const int c_c = t.col("raw_count");
    std::vector<StRawCount> out;
    for (const auto& r : t.rows) out.push_back({r[c_s], r[c_r], r[c_g], parse_double(r[c_c])});
    return out;
}

std::vector<NegControlRow> read_neg_controls_tsv(const std::filesystem::path& path) {
    const TsvTable t = read_tsv(path);
    const int c_s = t.col("slide_id"), c_r = t.col("roi_id"), c_p = t.col("probe");
    const int c_c = t.col("raw_count");
    std::vector<NegControlRow> out;
    for (const auto& r : t.rows) out.push_back({r[c_s], r[c_r], r[c_p], parse_double(r[c_c])});
    return out;
}

void write_lme_results_tsv(const std::filesystem::path& path, std::span<const LmeFit> fits) {
    TsvWriter w(path, {"gene_id", "beta0", "beta1", "ci_lo", "ci_hi", "sigma_u2", "sigma_e2",
                       "lrt", "p", "p_adj", "significant"});
    for (const auto& f : fits) {
        if (!f.ok) {
            w.write_row({f.gene_id, "NA", "NA", "NA", "NA", "NA", "NA", "NA", "NA", "NA", "NA"});
            continue;
        }
        w.write_row({f.gene_id, fmt_double(f.beta0), fmt_double(f.beta1), fmt_double(f.ci_lo),
                     fmt_double(f.ci_hi), fmt_double(f.sigma_u2), fmt_double(f.sigma_e2),
                     fmt_double(f.lrt_stat), fmt_double(f.p), fmt_double(f.p_adj),
                     f.significant ? "1" : "0"});
    }
}

void write_slide_rho_tsv(const std::filesystem::path& path, std::span<const SlideRho> rhos) {
    TsvWriter w(path, {"slide_id", "gene_id", "n", "rho", "small_n"});
    for (const auto& r : rhos)
        w.write_row({r.slide_id, r.gene_id, std::to_string(r.n), r.ok ? fmt_double(r.rho) : "NA",
                     r.small_n ? "1" : "0"});
}

void write_rho_summary_tsv(const std::filesystem::path& path, std::span<const RhoSummary> rows) {
    TsvWriter w(path, {"gene_id", "n_slides", "min", "q1", "median", "q3", "max"});
    for (const auto& r : rows)
        w.write_row({r.gene_id, std::to_string(r.n_slides), fmt_double(r.min), fmt_double(r.q1),
                     fmt_double(r.median), fmt_double(r.q3), fmt_double(r.max)});
}

} // namespace emo
