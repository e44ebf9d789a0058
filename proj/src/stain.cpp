#include "emo/stain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace emo {

double percentile_nearest_rank(std::vector<double> values, double p) {
    if (values.empty()) throw InvalidInput("percentile of empty sample");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    std::size_t rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n));
    rank = std::clamp<std::size_t>(rank, 1, n);
    return values[rank - 1];
}

LuminosityRef luminosity_ref(std::span<const Raster> tiles) {
    if (tiles.empty()) throw InvalidInput("luminosity_ref: empty tile sample");
    // 8-bit L values: nearest-rank percentile via histogram walk
    std::array<std::uint64_t, 256> hist{};
    std::uint64_t n = 0;
    for (const auto& t : tiles) {
        const Raster lab = rgb_to_lab(t);
        for (std::size_t i = 0; i < lab.pixel_count(); ++i) ++hist[lab.data[i * 3 + 0]];
        n += lab.pixel_count();
    }
    const std::uint64_t rank = std::max<std::uint64_t>(
        1, static_cast<std::uint64_t>(std::ceil(0.95 * static_cast<double>(n))));
    std::uint64_t seen = 0;
    for (int v = 0; v < 256; ++v) {
        seen += hist[v];
        if (seen >= rank) return {static_cast<double>(v)};
    }
    return {255.0};
}

Raster correct_luminosity(const Raster& tile, const LuminosityRef& ref) {
    if (ref.i_ref95 <= 0.0) throw InvalidInput("degenerate luminosity reference (0)");
    Raster lab = rgb_to_lab(tile);
    const std::int64_t n = static_cast<std::int64_t>(lab.pixel_count());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        const double l = lab.data[i * 3 + 0];
        lab.data[i * 3 + 0] =
            l > ref.i_ref95
                ? 255
                : static_cast<std::uint8_t>(std::lround(255.0 * l / ref.i_ref95));
    }
    return lab_to_rgb(lab);
}

namespace {

// Jacobi eigensolver for symmetric 3x3; eigenvalues descending, rows of `vec`
// are the eigenvectors.
void eig_sym3(const double a[3][3], double val[3], double vec[3][3]) {
    double m[3][3];
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) m[i][j] = a[i][j];
    double v[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};

    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = std::abs(m[0][1]) + std::abs(m[0][2]) + std::abs(m[1][2]);
        if (off < 1e-15) break;
        for (int p = 0; p < 2; ++p)
            for (int q = p + 1; q < 3; ++q) {
                if (std::abs(m[p][q]) < 1e-18) continue;
                const double theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < 3; ++k) {
                    const double mkp = m[k][p], mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for (int k = 0; k < 3; ++k) {
                    const double mpk = m[p][k], mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for (int k = 0; k < 3; ++k) {
                    const double vkp = v[k][p], vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
    }
    int order[3] = {0, 1, 2};
    double d[3] = {m[0][0], m[1][1], m[2][2]};
    std::sort(order, order + 3, [&](int i, int j) { return d[i] > d[j]; });
    for (int i = 0; i < 3; ++i) {
        val[i] = d[order[i]];
        for (int k = 0; k < 3; ++k) vec[i][k] = v[k][order[i]];
    }
}

std::size_t decimation_stride(std::span<const Raster> tiles, std::size_t max_pixels) {
    std::size_t total = 0;
    for (const auto& t : tiles) total += t.pixel_count();
    return max_pixels ? std::max<std::size_t>(1, total / max_pixels) : 1;
}

std::vector<OdPixel> collect_od(std::span<const Raster> tiles, const MacenkoParams& mp) {
    const std::size_t stride = decimation_stride(tiles, mp.max_pixels);
    std::vector<OdPixel> od;
    for (const auto& t : tiles) {
        if (t.channels != 3) throw InvalidInput("stain estimation requires RGB tiles");
        for (std::size_t i = 0; i < t.pixel_count(); i += stride) {
            const OdPixel p = to_od(t.data[i * 3], t.data[i * 3 + 1], t.data[i * 3 + 2]);
            if (std::max({p.r, p.g, p.b}) >= mp.beta) od.push_back(p);
        }
    }
    return od;
}

} // namespace

StainMatrix estimate_stain_matrix(std::span<const Raster> tiles, const MacenkoParams& mp) {
    const std::vector<OdPixel> od = collect_od(tiles, mp);
    if (od.size() < 2)
        throw InvalidInput("insufficient chromatic pixels for stain estimation (" +
                           std::to_string(od.size()) + " above the OD floor)");

    double mean[3] = {0, 0, 0};
    for (const auto& p : od) {
        mean[0] += p.r;
        mean[1] += p.g;
        mean[2] += p.b;
    }
    for (double& m : mean) m /= static_cast<double>(od.size());

    double cov[3][3] = {};
    for (const auto& p : od) {
        const double d[3] = {p.r - mean[0], p.g - mean[1], p.b - mean[2]};
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) cov[i][j] += d[i] * d[j];
    }
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) cov[i][j] /= static_cast<double>(od.size());

    double val[3], vec[3][3];
    eig_sym3(cov, val, vec);
    // quantisation noise puts lambda2/lambda1 around 1e-4 for single-stain
    // images; genuine two-stain data sits orders of magnitude higher
    if (val[1] <= 1e-12 || val[1] <= 1e-3 * val[0])
        throw InvalidInput("insufficient chromatic pixels: OD sample is effectively rank-1");

    // orient the plane basis towards the data so angles do not straddle +-pi
    double e1[3] = {vec[0][0], vec[0][1], vec[0][2]};
    double e2[3] = {vec[1][0], vec[1][1], vec[1][2]};
    if (e1[0] * mean[0] + e1[1] * mean[1] + e1[2] * mean[2] < 0)
        for (double& c : e1) c = -c;
    if (e2[0] + e2[1] + e2[2] < 0)
        for (double& c : e2) c = -c;

    std::vector<double> phi(od.size());
    const std::int64_t n = static_cast<std::int64_t>(od.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        const double p[3] = {od[i].r, od[i].g, od[i].b};
        const double a = p[0] * e1[0] + p[1] * e1[1] + p[2] * e1[2];
        const double b = p[0] * e2[0] + p[1] * e2[1] + p[2] * e2[2];
        phi[i] = std::atan2(b, a);
    }
    const double phi_lo = percentile_nearest_rank(phi, mp.alpha);
    const double phi_hi = percentile_nearest_rank(std::move(phi), 100.0 - mp.alpha);

    auto back_project = [&](double angle) {
        std::array<double, 3> v{};
        for (int k = 0; k < 3; ++k)
            v[k] = std::cos(angle) * e1[k] + std::sin(angle) * e2[k];
        double s = v[0] + v[1] + v[2];
        if (s < 0)
            for (double& c : v) c = -c;
        for (double& c : v) c = std::max(c, 0.0);
        const double norm = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        if (norm <= 0.0) throw InvalidInput("degenerate stain vector");
        for (double& c : v) c /= norm;
        return v;
    };
    const auto v_lo = back_project(phi_lo);
    const auto v_hi = back_project(phi_hi);

    // hematoxylin is the blue-dominant column
    const bool lo_is_h = v_lo[2] >= v_hi[2];
    const auto& h = lo_is_h ? v_lo : v_hi;
    const auto& e = lo_is_h ? v_hi : v_lo;
    StainMatrix m;
    for (int k = 0; k < 3; ++k) {
        m[k][0] = h[k];
        m[k][1] = e[k];
    }
    return m;
}

void saturation_coefficients(const Raster& tile, const StainMatrix& m, std::vector<double>& s_h,
                             std::vector<double>& s_e) {
    if (tile.channels != 3) throw InvalidInput("saturation_coefficients requires RGB");
    // normal equations (M^T M) s = M^T od
    const double a00 = m[0][0] * m[0][0] + m[1][0] * m[1][0] + m[2][0] * m[2][0];
    const double a01 = m[0][0] * m[0][1] + m[1][0] * m[1][1] + m[2][0] * m[2][1];
    const double a11 = m[0][1] * m[0][1] + m[1][1] * m[1][1] + m[2][1] * m[2][1];
    const double det = a00 * a11 - a01 * a01;
    if (std::abs(det) < 1e-12)
        throw InvalidInput("stain matrix is singular: H and E columns are collinear");

    const std::size_t n = tile.pixel_count();
    s_h.resize(n);
    s_e.resize(n);
    const std::int64_t ni = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < ni; ++i) {
        const OdPixel od = to_od(tile.data[i * 3], tile.data[i * 3 + 1], tile.data[i * 3 + 2]);
        const double b0 = m[0][0] * od.r + m[1][0] * od.g + m[2][0] * od.b;
        const double b1 = m[0][1] * od.r + m[1][1] * od.g + m[2][1] * od.b;
        s_h[i] = std::max((a11 * b0 - a01 * b1) / det, 0.0);
        s_e[i] = std::max((a00 * b1 - a01 * b0) / det, 0.0);
    }
}

StainProfile stain_profile(std::span<const Raster> tiles, std::uint64_t seed,
                           const MacenkoParams& mp) {
    StainProfile p;
    p.stain_matrix = estimate_stain_matrix(tiles, mp);
    p.seed = seed;
    p.n_tiles = static_cast<int>(tiles.size());

    const std::size_t stride = decimation_stride(tiles, mp.max_pixels);
    std::vector<double> all_h, all_e;
    std::vector<double> s_h, s_e;
    for (const auto& t : tiles) {
        saturation_coefficients(t, p.stain_matrix, s_h, s_e);
        for (std::size_t i = 0; i < s_h.size(); i += stride) {
            all_h.push_back(s_h[i]);
            all_e.push_back(s_e[i]);
        }
    }
    p.sat_ref99[0] = percentile_nearest_rank(std::move(all_h), 99.0);
    p.sat_ref99[1] = percentile_nearest_rank(std::move(all_e), 99.0);
    if (p.sat_ref99[0] <= 0.0 || p.sat_ref99[1] <= 0.0)
        throw InvalidInput("saturation pseudo-maximum is zero; slide appears unstained");
    return p;
}

Raster normalise_tile(const Raster& tile, const StainMatrix& slide_matrix,
                      const std::array<double, 2>& slide_sat99, const StainProfile& global) {
    if (slide_sat99[0] <= 0.0 || slide_sat99[1] <= 0.0)
        throw InvalidInput("slide saturation pseudo-maximum is zero");
    std::vector<double> s_h, s_e;
    saturation_coefficients(tile, slide_matrix, s_h, s_e);
    const double scale_h = global.sat_ref99[0] / slide_sat99[0];
    const double scale_e = global.sat_ref99[1] / slide_sat99[1];

    Raster out(tile.width, tile.height, 3);
    const auto& g = global.stain_matrix;
    const std::int64_t n = static_cast<std::int64_t>(tile.pixel_count());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        const double sh = s_h[i] * scale_h;
        const double se = s_e[i] * scale_e;
        const OdPixel od{g[0][0] * sh + g[0][1] * se, g[1][0] * sh + g[1][1] * se,
                         g[2][0] * sh + g[2][1] * se};
        from_od(od, out.data[i * 3], out.data[i * 3 + 1], out.data[i * 3 + 2]);
    }
    return out;
}

void write_stain_profile_json(const std::filesystem::path& path, const StainProfile& p) {
    nlohmann::json j;
    j["stain_matrix"] = {{p.stain_matrix[0][0], p.stain_matrix[0][1]},
                         {p.stain_matrix[1][0], p.stain_matrix[1][1]},
                         {p.stain_matrix[2][0], p.stain_matrix[2][1]}};
    j["sat_ref99"] = {p.sat_ref99[0], p.sat_ref99[1]};
    j["seed"] = p.seed;
    j["n_tiles"] = p.n_tiles;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

StainProfile read_stain_profile_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open " + path.string());
    nlohmann::json j;
    in >> j;
    StainProfile p;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 2; ++c) p.stain_matrix[r][c] = j.at("stain_matrix").at(r).at(c);
    p.sat_ref99[0] = j.at("sat_ref99").at(0);
    p.sat_ref99[1] = j.at("sat_ref99").at(1);
    p.seed = j.at("seed").get<std::uint64_t>();
    p.n_tiles = j.at("n_tiles").get<int>();
    return p;
}

} // namespace emo
