#include "emo/raster.hpp"

#include <algorithm>
#include <cmath>

namespace emo {

void SlideMeta::validate() const {
    if (mpp <= 0.0) throw InvalidInput("slide '" + slide_id + "': mpp must be positive");
    if (levels.empty()) throw InvalidInput("slide '" + slide_id + "': no pyramid levels");
    if (levels[0].factor != 1.0)
        throw InvalidInput("slide '" + slide_id + "': level 0 must have factor 1");
    for (std::size_t i = 1; i < levels.size(); ++i)
        if (levels[i].factor <= levels[i - 1].factor)
            throw InvalidInput("slide '" + slide_id + "': level factors must be strictly increasing");
}

int SlideMeta::nearest_level(double target) const {
    int best = 0;
    double best_d = std::abs(std::log(levels[0].factor) - std::log(target));
    for (std::size_t i = 1; i < levels.size(); ++i) {
        const double d = std::abs(std::log(levels[i].factor) - std::log(target));
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(i);
        }
    }
    return best;
}

static void require_rgb(const Raster& r, const char* op) {
    if (r.channels != 3)
        throw InvalidInput(std::string(op) + " requires a 3-channel raster");
}

Raster rgb_to_hsv(const Raster& rgb) {
    require_rgb(rgb, "rgb_to_hsv");
    Raster out(rgb.width, rgb.height, 3);
    const std::int64_t n = static_cast<std::int64_t>(rgb.pixel_count());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        const int r = rgb.data[i * 3 + 0];
        const int g = rgb.data[i * 3 + 1];
        const int b = rgb.data[i * 3 + 2];
        const int mx = std::max({r, g, b});
        const int mn = std::min({r, g, b});
        const int d = mx - mn;
        double h = 0.0;
        if (d > 0) {
            if (mx == r)
                h = (static_cast<double>(g - b) / d) * 60.0;
            else if (mx == g)
                h = (static_cast<double>(b - r) / d + 2.0) * 60.0;
            else
                h = (static_cast<double>(r - g) / d + 4.0) * 60.0;
            if (h < 0.0) h += 360.0;
        }
        const int s = mx == 0 ? 0 : static_cast<int>(std::lround(255.0 * d / mx));
        out.data[i * 3 + 0] = static_cast<std::uint8_t>(std::lround(h * 255.0 / 360.0));
        out.data[i * 3 + 1] = static_cast<std::uint8_t>(s);
        out.data[i * 3 + 2] = static_cast<std::uint8_t>(mx);
    }
    return out;
}

// ---------------------------------------------------------------------------
// CIELAB, linear-RGB variant (the convention of OpenCV-based H&E toolchains):
// XYZ is taken directly from the 8-bit RGB values without an sRGB gamma step.
// D65 white point.

namespace {

constexpr double kXn = 0.950456;
constexpr double kZn = 1.088754;

inline double lab_f(double t) {
    return t > 0.008856 ? std::cbrt(t) : 7.787 * t + 16.0 / 116.0;
}
inline double lab_f_inv(double ft) {
    constexpr double d = 6.0 / 29.0;
    return ft > d ? ft * ft * ft : (ft - 16.0 / 116.0) / 7.787;
}

struct Xyz {
    double x, y, z;
};

inline Xyz rgb_to_xyz(double r, double g, double b) {
    return {(0.412453 * r + 0.357580 * g + 0.180423 * b) / kXn,
            0.212671 * r + 0.715160 * g + 0.072169 * b,
            (0.019334 * r + 0.119193 * g + 0.950227 * b) / kZn};
}

// continuous RGB in [0,255] decoded from an 8-bit LAB triple
inline void lab8_decode(int l8, int a8, int b8, double& r, double& g, double& b) {
    const double l = l8 * 100.0 / 255.0;
    const double y = l > 8.0 ? std::pow((l + 16.0) / 116.0, 3.0) : l / 903.3;
    const double fy = l > 8.0 ? (l + 16.0) / 116.0 : 7.787 * y + 16.0 / 116.0;
    const double fx = fy + (a8 - 128.0) / 500.0;
    const double fz = fy - (b8 - 128.0) / 200.0;
    const double x = lab_f_inv(fx) * kXn;
    const double z = lab_f_inv(fz) * kZn;
    r = (3.240479 * x - 1.537150 * y - 0.498535 * z) * 255.0;
    g = (-0.969256 * x + 1.875992 * y + 0.041556 * z) * 255.0;
    b = (0.055648 * x - 0.204043 * y + 1.057311 * z) * 255.0;
}

inline std::uint8_t clamp_u8(double v) {
    return static_cast<std::uint8_t>(std::clamp<long>(std::lround(v), 0, 255));
}

} // namespace

Raster rgb_to_lab(const Raster& rgb) {
    require_rgb(rgb, "rgb_to_lab");
    Raster out(rgb.width, rgb.height, 3);
    const std::int64_t n = static_cast<std::int64_t>(rgb.pixel_count());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        const int r = rgb.data[i * 3 + 0];
        const int g = rgb.data[i * 3 + 1];
        const int b = rgb.data[i * 3 + 2];
        const Xyz xyz = rgb_to_xyz(r / 255.0, g / 255.0, b / 255.0);
        const double l = xyz.y > 0.008856 ? 116.0 * std::cbrt(xyz.y) - 16.0 : 903.3 * xyz.y;
        const double fx = lab_f(xyz.x);
        const double fy = lab_f(xyz.y);
        const double fz = lab_f(xyz.z);
        int l8 = std::clamp<int>(static_cast<int>(std::lround(l * 255.0 / 100.0)), 0, 255);
        int a8 = std::clamp<int>(static_cast<int>(std::lround(500.0 * (fx - fy) + 128.0)), 0, 255);
        int b8 = std::clamp<int>(static_cast<int>(std::lround(200.0 * (fy - fz) + 128.0)), 0, 255);

        // Plain rounding overshoots 2/255 near the gamut boundary; when it
        // does, search the neighbouring quantised triples for the one whose
        // decode lands closest to the source pixel.
        double dr, dg, db;
        lab8_decode(l8, a8, b8, dr, dg, db);
        double err = std::max({std::abs(dr - r), std::abs(dg - g), std::abs(db - b)});
        if (err > 1.75) {
            int best_l = l8, best_a = a8, best_b = b8;
            const int l_lo = std::clamp(static_cast<int>(std::floor(l * 255.0 / 100.0)), 0, 255);
            for (int lc = l_lo; lc <= std::min(l_lo + 1, 255); ++lc)
                for (int da = -2; da <= 2; ++da)
                    for (int dbq = -2; dbq <= 2; ++dbq) {
                        const int ac = std::clamp(a8 + da, 0, 255);
                        const int bc = std::clamp(b8 + dbq, 0, 255);
                        lab8_decode(lc, ac, bc, dr, dg, db);
                        const double e =
                            std::max({std::abs(dr - r), std::abs(dg - g), std::abs(db - b)});
                        if (e < err) {
                            err = e;
                            best_l = lc;
                            best_a = ac;
                            best_b = bc;
                        }
                    }
            l8 = best_l;
            a8 = best_a;
            b8 = best_b;
        }
        out.data[i * 3 + 0] = static_cast<std::uint8_t>(l8);
        out.data[i * 3 + 1] = static_cast<std::uint8_t>(a8);
        out.data[i * 3 + 2] = static_cast<std::uint8_t>(b8);
    }
    return out;
}

Raster lab_to_rgb(const Raster& lab) {
    require_rgb(lab, "lab_to_rgb");
    Raster out(lab.width, lab.height, 3);
    const std::int64_t n = static_cast<std::int64_t>(lab.pixel_count());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        double r, g, b;
        lab8_decode(lab.data[i * 3 + 0], lab.data[i * 3 + 1], lab.data[i * 3 + 2], r, g, b);
        out.data[i * 3 + 0] = clamp_u8(r);
        out.data[i * 3 + 1] = clamp_u8(g);
        out.data[i * 3 + 2] = clamp_u8(b);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optical density

double channel_to_od(std::uint8_t v, double i0) {
    const double i = std::max<double>(v, 1.0); // zero intensity clamped to 1
    return -std::log10(i / i0);
}

std::uint8_t channel_from_od(double od, double i0) {
    return clamp_u8(i0 * std::pow(10.0, -od));
}

OdPixel to_od(std::uint8_t r, std::uint8_t g, std::uint8_t b, double i0) {
    if (i0 < 1.0 || i0 > 255.0) throw InvalidInput("OD background I0 must be in [1,255]");
    return {channel_to_od(r, i0), channel_to_od(g, i0), channel_to_od(b, i0)};
}

void from_od(const OdPixel& od, std::uint8_t& r, std::uint8_t& g, std::uint8_t& b, double i0) {
    r = channel_from_od(od.r, i0);
    g = channel_from_od(od.g, i0);
    b = channel_from_od(od.b, i0);
}

// ---------------------------------------------------------------------------
// Resampling

namespace {

struct KernelRow {
    int start = 0;
    std::vector<float> w;
};

inline double lanczos3(double x) {
    x = std::abs(x);
    if (x < 1e-9) return 1.0;
    if (x >= 3.0) return 0.0;
    const double px = 3.14159265358979323846 * x;
    return 3.0 * std::sin(px) * std::sin(px / 3.0) / (px * px);
}

// One table per output coordinate; the same weights apply to every row/column.
std::vector<KernelRow> lanczos_table(int src_n, int dst_n) {
    const double scale = static_cast<double>(src_n) / dst_n;
    const double filt = std::max(scale, 1.0); // widen when minifying
    const double support = 3.0 * filt;
    std::vector<KernelRow> table(dst_n);
    for (int o = 0; o < dst_n; ++o) {
        const double center = (o + 0.5) * scale - 0.5;
        const int lo = static_cast<int>(std::ceil(center - support));
        const int hi = static_cast<int>(std::floor(center + support));
        KernelRow row;
        row.start = lo;
        row.w.resize(hi - lo + 1);
        double sum = 0.0;
        for (int i = lo; i <= hi; ++i) {
            const double w = lanczos3((i - center) / filt);
            row.w[i - lo] = static_cast<float>(w);
            sum += w;
        }
        const float inv = static_cast<float>(1.0 / sum);
        for (auto& w : row.w) w *= inv;
        table[o] = std::move(row);
    }
    return table;
}

Raster resample_lanczos(const Raster& src, int dst_w, int dst_h) {
    const auto tx = lanczos_table(src.width, dst_w);
    const auto ty = lanczos_table(src.height, dst_h);
    const int ch = src.channels;

    // horizontal pass: src.height rows of dst_w
    std::vector<float> tmp(static_cast<std::size_t>(dst_w) * src.height * ch);
#pragma omp parallel for schedule(static)
    for (int y = 0; y < src.height; ++y) {
        const std::uint8_t* in = &src.data[src.index(0, y)];
        float* outrow = &tmp[(static_cast<std::size_t>(y) * dst_w) * ch];
        for (int x = 0; x < dst_w; ++x) {
            const auto& k = tx[x];
            for (int c = 0; c < ch; ++c) {
                float acc = 0.0f;
                for (std::size_t t = 0; t < k.w.size(); ++t) {
                    const int sx = std::clamp<int>(k.start + static_cast<int>(t), 0, src.width - 1);
                    acc += k.w[t] * in[sx * ch + c];
                }
                outrow[x * ch + c] = acc;
            }
        }
    }

    Raster dst(dst_w, dst_h, ch);
#pragma omp parallel for schedule(static)
    for (int y = 0; y < dst_h; ++y) {
        const auto& k = ty[y];
        for (int x = 0; x < dst_w; ++x) {
            for (int c = 0; c < ch; ++c) {
                float acc = 0.0f;
                for (std::size_t t = 0; t < k.w.size(); ++t) {
                    const int sy = std::clamp<int>(k.start + static_cast<int>(t), 0, src.height - 1);
                    acc += k.w[t] * tmp[(static_cast<std::size_t>(sy) * dst_w + x) * ch + c];
                }
                dst.data[dst.index(x, y, c)] = clamp_u8(acc);
            }
        }
    }
    return dst;
}

Raster resample_nearest(const Raster& src, int dst_w, int dst_h) {
    const double sx = static_cast<double>(src.width) / dst_w;
    const double sy = static_cast<double>(src.height) / dst_h;
    Raster dst(dst_w, dst_h, src.channels);
#pragma omp parallel for schedule(static)
    for (int y = 0; y < dst_h; ++y) {
        const int srcy = std::min(src.height - 1, static_cast<int>(std::floor(y * sy)));
        for (int x = 0; x < dst_w; ++x) {
            const int srcx = std::min(src.width - 1, static_cast<int>(std::floor(x * sx)));
            for (int c = 0; c < src.channels; ++c)
                dst.data[dst.index(x, y, c)] = src.at(srcx, srcy, c);
        }
    }
    return dst;
}

} // namespace

Raster resample(const Raster& src, double factor, ResampleMethod method) {
    if (factor <= 0.0) throw InvalidInput("resample factor must be positive");
    if (src.empty()) throw InvalidInput("resample of empty raster");
    const int dst_w = static_cast<int>(std::llround(src.width / factor));
    const int dst_h = static_cast<int>(std::llround(src.height / factor));
    if (dst_w < 1 || dst_h < 1)
        throw InvalidInput("resample factor " + std::to_string(factor) + " degenerates " +
                           std::to_string(src.width) + "x" + std::to_string(src.height));
    if (dst_w == src.width && dst_h == src.height && method == ResampleMethod::nearest)
        return src;
    return method == ResampleMethod::lanczos ? resample_lanczos(src, dst_w, dst_h)
                                             : resample_nearest(src, dst_w, dst_h);
}

Raster to_grey(const Raster& rgb) {
    if (rgb.channels == 1) return rgb;
    require_rgb(rgb, "to_grey");
    Raster out(rgb.width, rgb.height, 1);
    const std::int64_t n = static_cast<std::int64_t>(rgb.pixel_count());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        const double y = 0.299 * rgb.data[i * 3 + 0] + 0.587 * rgb.data[i * 3 + 1] +
                         0.114 * rgb.data[i * 3 + 2];
        out.data[i] = static_cast<std::uint8_t>(std::lround(y));
    }
    return out;
}

} // namespace emo
