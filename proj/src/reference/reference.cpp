#include "reference.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

namespace emo::reference {

std::array<std::uint8_t, 3> rgb_px_to_hsv(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    const double rf = r, gf = g, bf = b;
    const double mx = std::max({rf, gf, bf});
    const double mn = std::min({rf, gf, bf});
    const double d = mx - mn;
    double h = 0.0;
    if (d > 0.0) {
        if (mx == rf)
            h = std::fmod((gf - bf) / d, 6.0);
        else if (mx == gf)
            h = (bf - rf) / d + 2.0;
        else
            h = (rf - gf) / d + 4.0;
        h *= 60.0;
        if (h < 0.0) h += 360.0;
    }
    const double s = mx <= 0.0 ? 0.0 : 255.0 * d / mx;
    return {static_cast<std::uint8_t>(std::lround(h * 255.0 / 360.0)),
            static_cast<std::uint8_t>(std::lround(s)),
            static_cast<std::uint8_t>(std::lround(mx))};
}

namespace {
double lanczos3(double x) {
    x = std::abs(x);
    if (x < 1e-9) return 1.0;
    if (x >= 3.0) return 0.0;
    const double px = 3.14159265358979323846 * x;
    return 3.0 * std::sin(px) * std::sin(px / 3.0) / (px * px);
}
} // namespace

Raster resample_lanczos(const Raster& src, double factor) {
    const int dst_w = static_cast<int>(std::llround(src.width / factor));
    const int dst_h = static_cast<int>(std::llround(src.height / factor));
    const double sx = static_cast<double>(src.width) / dst_w;
    const double sy = static_cast<double>(src.height) / dst_h;
    const double fx = std::max(sx, 1.0), fy = std::max(sy, 1.0);
    Raster dst(dst_w, dst_h, src.channels);
    for (int oy = 0; oy < dst_h; ++oy) {
        const double cy = (oy + 0.5) * sy - 0.5;
        const int y_lo = static_cast<int>(std::ceil(cy - 3.0 * fy));
        const int y_hi = static_cast<int>(std::floor(cy + 3.0 * fy));
        for (int ox = 0; ox < dst_w; ++ox) {
            const double cx = (ox + 0.5) * sx - 0.5;
            const int x_lo = static_cast<int>(std::ceil(cx - 3.0 * fx));
            const int x_hi = static_cast<int>(std::floor(cx + 3.0 * fx));
            for (int c = 0; c < src.channels; ++c) {
                double acc = 0.0, wsum = 0.0;
                for (int iy = y_lo; iy <= y_hi; ++iy) {
                    const double wy = lanczos3((iy - cy) / fy);
                    const int ciy = std::clamp(iy, 0, src.height - 1);
                    for (int ix = x_lo; ix <= x_hi; ++ix) {
                        const double w = wy * lanczos3((ix - cx) / fx);
                        const int cix = std::clamp(ix, 0, src.width - 1);
                        acc += w * src.at(cix, ciy, c);
                        wsum += w;
                    }
                }
                const double v = acc / wsum;
                dst.at(ox, oy, c) =
                    static_cast<std::uint8_t>(std::clamp<long>(std::lround(v), 0, 255));
            }
        }
    }
    return dst;
}

BinaryMask dilate(const BinaryMask& m, std::span<const std::pair<int, int>> element) {
    BinaryMask out(m.width, m.height, m.level);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
            std::uint8_t v = 0;
            for (const auto& [dx, dy] : element) {
                const int sx = x + dx, sy = y + dy;
                if (sx >= 0 && sy >= 0 && sx < m.width && sy < m.height && m.at(sx, sy)) {
                    v = 1;
                    break;
                }
            }
            out.set(x, y, v);
        }
    return out;
}

BinaryMask erode(const BinaryMask& m, std::span<const std::pair<int, int>> element) {
    BinaryMask out(m.width, m.height, m.level);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
            std::uint8_t v = 1;
            for (const auto& [dx, dy] : element) {
                const int sx = x + dx, sy = y + dy;
                if (sx < 0 || sy < 0 || sx >= m.width || sy >= m.height || !m.at(sx, sy)) {
                    v = 0;
                    break;
                }
            }
            out.set(x, y, v);
        }
    return out;
}

int otsu_threshold(const std::array<std::uint64_t, 256>& histogram) {
    const double total = std::accumulate(histogram.begin(), histogram.end(), 0.0);
    int best_t = 0;
    double best = -1.0;
    for (int t = 0; t < 255; ++t) {
        double w0 = 0, w1 = 0, m0 = 0, m1 = 0;
        for (int i = 0; i <= t; ++i) {
            w0 += histogram[i];
            m0 += static_cast<double>(i) * histogram[i];
        }
        for (int i = t + 1; i < 256; ++i) {
            w1 += histogram[i];
            m1 += static_cast<double>(i) * histogram[i];
        }
        if (w0 == 0 || w1 == 0) continue;
        m0 /= w0;
        m1 /= w1;
        const double var = (w0 / total) * (w1 / total) * (m0 - m1) * (m0 - m1);
        if (var > best) {
            best = var;
            best_t = t;
        }
    }
    if (best < 0.0) {
        // all mass in one bin
        for (int i = 0; i < 256; ++i)
            if (histogram[i]) return i;
    }
    return best_t;
}

bool point_in_polygon(double px, double py,
                      const std::vector<std::array<double, 2>>& vertices) {
    bool inside = false;
    const std::size_t n = vertices.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const double xi = vertices[i][0], yi = vertices[i][1];
        const double xj = vertices[j][0], yj = vertices[j][1];
        if ((yi > py) != (yj > py) && px < xj + (py - yj) * (xi - xj) / (yi - yj))
            inside = !inside;
    }
    return inside;
}

Components label_components(const BinaryMask& m, bool eight_connected) {
    Components out;
    out.label.assign(m.bits.size(), -1);
    const int w = m.width, h = m.height;
    std::deque<std::pair<int, int>> queue;
    for (int y0 = 0; y0 < h; ++y0)
        for (int x0 = 0; x0 < w; ++x0) {
            const std::size_t i0 = static_cast<std::size_t>(y0) * w + x0;
            if (!m.bits[i0] || out.label[i0] >= 0) continue;
            const std::int32_t lbl = static_cast<std::int32_t>(out.area.size());
            out.area.push_back(0);
            out.label[i0] = lbl;
            queue.push_back({x0, y0});
            while (!queue.empty()) {
                const auto [x, y] = queue.front();
                queue.pop_front();
                ++out.area[lbl];
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (!dx && !dy) continue;
                        if (!eight_connected && dx != 0 && dy != 0) continue;
                        const int nx = x + dx, ny = y + dy;
                        if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
                        const std::size_t ni = static_cast<std::size_t>(ny) * w + nx;
                        if (!m.bits[ni] || out.label[ni] >= 0) continue;
                        out.label[ni] = lbl;
                        queue.push_back({nx, ny});
                    }
            }
        }
    return out;
}

int count_interior_holes(const BinaryMask& m) {
    BinaryMask inv(m.width, m.height, m.level);
    for (std::size_t i = 0; i < m.bits.size(); ++i) inv.bits[i] = m.bits[i] ? 0 : 1;
    const Components comp = label_components(inv, false);
    std::vector<bool> touches_border(comp.area.size(), false);
    for (int x = 0; x < m.width; ++x) {
        for (int y : {0, m.height - 1}) {
            const auto l = comp.label[static_cast<std::size_t>(y) * m.width + x];
            if (l >= 0) touches_border[l] = true;
        }
    }
    for (int y = 0; y < m.height; ++y) {
        for (int x : {0, m.width - 1}) {
            const auto l = comp.label[static_cast<std::size_t>(y) * m.width + x];
            if (l >= 0) touches_border[l] = true;
        }
    }
    int holes = 0;
    for (std::size_t l = 0; l < comp.area.size(); ++l)
        if (!touches_border[l]) ++holes;
    return holes;
}

double laplacian_variance(const Raster& tile) {
    const int w = tile.width, h = tile.height;
    std::vector<double> grey(static_cast<std::size_t>(w) * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (tile.channels == 3)
                grey[static_cast<std::size_t>(y) * w + x] =
                    std::lround(0.299 * tile.at(x, y, 0) + 0.587 * tile.at(x, y, 1) +
                                0.114 * tile.at(x, y, 2));
            else
                grey[static_cast<std::size_t>(y) * w + x] = tile.at(x, y, 0);
        }
    auto g = [&](int x, int y) {
        x = std::clamp(x, 0, w - 1);
        y = std::clamp(y, 0, h - 1);
        return grey[static_cast<std::size_t>(y) * w + x];
    };
    std::vector<double> resp;
    resp.reserve(grey.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            resp.push_back(g(x - 1, y) + g(x + 1, y) + g(x, y - 1) + g(x, y + 1) - 4.0 * g(x, y));
    double mean = 0.0;
    for (double v : resp) mean += v;
    mean /= static_cast<double>(resp.size());
    double var = 0.0;
    for (double v : resp) var += (v - mean) * (v - mean);
    return var / static_cast<double>(resp.size());
}

namespace {
std::vector<double> fractional_ranks(std::span<const double> v) {
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::size_t less = 0, equal = 0;
        for (std::size_t j = 0; j < v.size(); ++j) {
            if (v[j] < v[i]) ++less;
            if (v[j] == v[i]) ++equal;
        }
        out[i] = static_cast<double>(less) + 0.5 * static_cast<double>(equal + 1);
    }
    return out;
}
} // namespace

double spearman_rho(std::span<const double> x, std::span<const double> y) {
    const auto rx = fractional_ranks(x);
    const auto ry = fractional_ranks(y);
    const std::size_t n = rx.size();
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

std::vector<double> bh_adjust(std::span<const double> p) {
    const std::size_t m = p.size();
    std::vector<double> adj(m);
    for (std::size_t i = 0; i < m; ++i) {
        double best = 1.0;
        for (std::size_t j = 0; j < m; ++j) {
            if (p[j] < p[i]) continue;
            std::size_t rank = 0;
            for (std::size_t k = 0; k < m; ++k)
                if (p[k] <= p[j]) ++rank;
            const double v = static_cast<double>(m) * p[j] / static_cast<double>(rank);
            best = std::min(best, v);
        }
        adj[i] = best;
    }
    return adj;
}

std::vector<double> bonferroni_adjust(std::span<const double> p) {
    std::vector<double> adj(p.size());
    for (std::size_t i = 0; i < p.size(); ++i)
        adj[i] = std::min(1.0, static_cast<double>(p.size()) * p[i]);
    return adj;
}

double r2_pred(std::span<const double> observed, std::span<const double> predicted) {
    double mean = 0.0;
    for (double v : observed) mean += v;
    mean /= static_cast<double>(observed.size());
    double res = 0.0, tot = 0.0;
    for (std::size_t i = 0; i < observed.size(); ++i) {
        res += (observed[i] - predicted[i]) * (observed[i] - predicted[i]);
        tot += (observed[i] - mean) * (observed[i] - mean);
    }
    return 1.0 - res / tot;
}

double compensated_mean(std::span<const double> values) {
    double sum = 0.0, c = 0.0;
    for (double v : values) {
        const double y = v - c;
        const double t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    return sum / static_cast<double>(values.size());
}

Ols ols(std::span<const double> x, std::span<const double> y) {
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    return {(sy - slope * sx) / n, slope};
}

double ks_uniform(std::vector<double> sample) {
    std::sort(sample.begin(), sample.end());
    const double n = static_cast<double>(sample.size());
    double d = 0.0;
    for (std::size_t i = 0; i < sample.size(); ++i) {
        const double f = sample[i];
        d = std::max(d, std::abs(f - static_cast<double>(i) / n));
        d = std::max(d, std::abs(static_cast<double>(i + 1) / n - f));
    }
    return d;
}

double student_t_sf_quadrature(double t, int df) {
    // integrate the density from t to a far cutoff with Simpson's rule
    const double v = df;
    const double norm = std::exp(std::lgamma(0.5 * (v + 1.0)) - std::lgamma(0.5 * v)) /
                        std::sqrt(v * 3.14159265358979323846);
    auto pdf = [&](double u) { return norm * std::pow(1.0 + u * u / v, -0.5 * (v + 1.0)); };
    const double hi = std::max(60.0, t + 60.0);
    const int steps = 200000;
    const double hstep = (hi - t) / steps;
    double acc = pdf(t) + pdf(hi);
    for (int i = 1; i < steps; ++i) acc += pdf(t + i * hstep) * (i % 2 ? 4.0 : 2.0);
    double tail = acc * hstep / 3.0;
    // remaining tail beyond `hi` via asymptotic power bound
    tail += norm * std::pow(hi * hi / v, -0.5 * (v + 1.0)) * hi / v;
    return tail;
}

double percentile_nearest_rank(std::vector<double> values, double p) {
    std::sort(values.begin(), values.end());
    const double n = static_cast<double>(values.size());
    std::size_t rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n));
    if (rank < 1) rank = 1;
    if (rank > values.size()) rank = values.size();
    return values[rank - 1];
}

} // namespace emo::reference
