#include "emo/stats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "emo/tsv.hpp"

namespace emo {

namespace {

// ranks with mid-rank ties
std::vector<double> midranks(std::span<const double> v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

double pearson(std::span<const double> x, std::span<const double> y) {
    const std::size_t n = x.size();
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0)
        throw InvalidInput("undefined correlation: constant input vector");
    return sxy / std::sqrt(sxx * syy);
}

// regularised incomplete beta via Lentz continued fraction
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16, kFpMin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::abs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

double ibeta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                      b * std::log(1.0 - x);
    const double front = std::exp(ln);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

} // namespace

double student_t_sf(double t, double df) {
    const double x = df / (df + t * t);
    const double tail = 0.5 * ibeta(0.5 * df, 0.5, x);
    return t >= 0.0 ? tail : 1.0 - tail;
}

double chi2_1_sf(double x) {
    if (x <= 0.0) return 1.0;
    return std::erfc(std::sqrt(0.5 * x));
}

double spearman_rho(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw InvalidInput("spearman: length mismatch");
    if (x.size() < 2) throw InvalidInput("spearman: need at least 2 observations");
    return pearson(midranks(x), midranks(y));
}

SpearmanResult spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw InvalidInput("spearman: length mismatch");
    if (x.size() < 4) throw InvalidInput("spearman: need at least 4 observations");
    const double rho = spearman_rho(x, y);
    const double n = static_cast<double>(x.size());
    if (std::abs(rho) >= 1.0) return {rho < 0 ? -1.0 : 1.0, 0.0};
    const double t = rho * std::sqrt((n - 2.0) / (1.0 - rho * rho));
    return {rho, 2.0 * student_t_sf(std::abs(t), n - 2.0)};
}

double spearman_exact_p(std::span<const double> x, std::span<const double> y) {
    const std::size_t n = x.size();
    if (n < 2 || n > 9) throw InvalidInput("exact permutation p only supported for n in 2..9");
    const double observed = std::abs(spearman_rho(x, y));

    std::vector<double> yperm(y.begin(), y.end());
    std::sort(yperm.begin(), yperm.end());
    std::size_t total = 0, at_least = 0;
    do {
        ++total;
        if (std::abs(spearman_rho(x, yperm)) >= observed - 1e-12) ++at_least;
    } while (std::next_permutation(yperm.begin(), yperm.end()));
    return static_cast<double>(at_least) / static_cast<double>(total);
}

std::vector<double> bh_adjust(std::span<const double> p) {
    const std::size_t m = p.size();
    for (double v : p)
        if (v < 0.0 || v > 1.0 || !std::isfinite(v))
            throw InvalidInput("p-values must lie in [0,1]");
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    std::vector<double> adj(m);
    double running = 1.0;
    for (std::size_t k = m; k-- > 0;) {
        const double v = static_cast<double>(m) * p[order[k]] / static_cast<double>(k + 1);
        running = std::min(running, v);
        adj[order[k]] = running;
    }
    return adj;
}

std::vector<double> bonferroni_adjust(std::span<const double> p) {
    const std::size_t m = p.size();
    std::vector<double> adj(m);
    for (std::size_t i = 0; i < m; ++i) {
        if (p[i] < 0.0 || p[i] > 1.0 || !std::isfinite(p[i]))
            throw InvalidInput("p-values must lie in [0,1]");
        adj[i] = std::min(1.0, static_cast<double>(m) * p[i]);
    }
    return adj;
}

double r2_pred(std::span<const double> observed, std::span<const double> predicted) {
    if (observed.size() != predicted.size()) throw InvalidInput("r2_pred: length mismatch");
    if (observed.size() < 2) throw InvalidInput("r2_pred: need at least 2 observations");
    double mean = 0.0;
    for (double v : observed) mean += v;
    mean /= static_cast<double>(observed.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < observed.size(); ++i) {
        ss_res += (observed[i] - predicted[i]) * (observed[i] - predicted[i]);
        ss_tot += (observed[i] - mean) * (observed[i] - mean);
    }
    if (ss_tot <= 0.0) throw InvalidInput("r2_pred: observed values are constant");
    return 1.0 - ss_res / ss_tot;
}

std::vector<GeneStat> select_genes(std::span<const GeneStat> stats, double r2_min,
                                   double padj_max) {
    std::vector<GeneStat> out;
    for (const auto& s : stats)
        if (s.r2_pred > r2_min && s.p_adj_bh < padj_max) out.push_back(s);
    std::sort(out.begin(), out.end(),
              [](const GeneStat& a, const GeneStat& b) { return a.gene_id < b.gene_id; });
    return out;
}

SignificanceCount significance_count(std::span<const GeneStat> stats, double alpha) {
    SignificanceCount c;
    for (const auto& s : stats)
        if (s.p_adj_bh < alpha) ++c.count;
    c.fraction = stats.empty() ? 0.0 : static_cast<double>(c.count) / stats.size();
    return c;
}

void write_gene_stats_tsv(const std::filesystem::path& path, std::span<const GeneStat> stats) {
    TsvWriter w(path, {"gene_id", "n", "rho", "p", "p_adj_bh", "p_adj_bonf", "r2_pred",
                       "selected"});
    for (const auto& s : stats)
        w.write_row({s.gene_id, std::to_string(s.n), fmt_double(s.rho), fmt_double(s.p),
                     fmt_double(s.p_adj_bh), fmt_double(s.p_adj_bonf), fmt_double(s.r2_pred),
                     s.selected ? "1" : "0"});
}

std::vector<GeneStat> read_gene_stats_tsv(const std::filesystem::path& path) {
    const TsvTable t = read_tsv(path);
    const int c_g = t.col("gene_id"), c_n = t.col("n"), c_rho = t.col("rho"), c_p = t.col("p");
    const int c_bh = t.col("p_adj_bh"), c_bonf = t.col("p_adj_bonf"), c_r2 = t.col("r2_pred");
    const int c_sel = t.col("selected");
    std::vector<GeneStat> out;
    for (const auto& r : t.rows) {
        GeneStat s;
        s.gene_id = r[c_g];
        s.n = static_cast<int>(parse_long(r[c_n]));
        s.rho = parse_double(r[c_rho]);
        s.p = parse_double(r[c_p]);
        s.p_adj_bh = parse_double(r[c_bh]);
        s.p_adj_bonf = parse_double(r[c_bonf]);
        s.r2_pred = parse_double(r[c_r2]);
        s.selected = r[c_sel] == "1";
        out.push_back(std::move(s));
    }
    return out;
}

void write_stats_summary_json(const std::filesystem::path& path, std::span<const GeneStat> stats) {
    auto histogram = [](std::span<const GeneStat> st, auto get, double lo, double hi, int bins) {
        std::vector<int> counts(bins, 0);
        int below = 0, above = 0;
        for (const auto& s : st) {
            const double v = get(s);
            if (v < lo) {
                ++below;
                continue;
            }
            if (v > hi) {
                ++above;
                continue;
            }
            int b = static_cast<int>((v - lo) / (hi - lo) * bins);
            b = std::clamp(b, 0, bins - 1);
            ++counts[b];
        }
        nlohmann::json j;
        j["lo"] = lo;
        j["hi"] = hi;
        j["counts"] = counts;
        j["n_below"] = below;
        j["n_above"] = above;
        return j;
    };
    nlohmann::json j;
    j["n_genes"] = stats.size();
    j["rho"] = histogram(stats, [](const GeneStat& s) { return s.rho; }, -1.0, 1.0, 40);
    j["p"] = histogram(stats, [](const GeneStat& s) { return s.p; }, 0.0, 1.0, 20);
    j["r2_pred"] = histogram(stats, [](const GeneStat& s) { return s.r2_pred; }, -0.1, 1.0, 44);
    const auto sig = significance_count(stats);
    j["significant_bh_0_05"] = sig.count;
    j["significant_fraction"] = sig.fraction;
    j["selected"] = select_genes(stats).size();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

} // namespace emo
