#include "emo/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "emo/image_io.hpp"

namespace emo {

std::size_t BinaryMask::popcount() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

int otsu_threshold(const std::array<std::uint64_t, 256>& histogram) {
    const std::uint64_t total = std::accumulate(histogram.begin(), histogram.end(), std::uint64_t{0});
    if (total == 0) throw InvalidInput("otsu_threshold: empty histogram");

    double sum_all = 0.0;
    for (int i = 0; i < 256; ++i) sum_all += static_cast<double>(i) * histogram[i];

    int best_t = 0;
    double best_var = -1.0;
    std::uint64_t w0 = 0;
    double sum0 = 0.0;
    for (int t = 0; t < 256; ++t) {
        w0 += histogram[t];
        sum0 += static_cast<double>(t) * histogram[t];
        const std::uint64_t w1 = total - w0;
        if (w0 == 0) continue;
        if (w1 == 0) {
            // degenerate: all mass at or below t; keep the first such t if
            // nothing scored yet (single-bin histogram -> that bin)
            if (best_var < 0.0) best_t = t;
            break;
        }
        const double m0 = sum0 / w0;
        const double m1 = (sum_all - sum0) / w1;
        const double var = static_cast<double>(w0) * static_cast<double>(w1) * (m0 - m1) * (m0 - m1);
        if (var > best_var) {
            best_var = var;
            best_t = t;
        }
    }
    return best_t;
}

std::vector<std::pair<int, int>> disk_offsets(int radius) {
    std::vector<std::pair<int, int>> out;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
            if (dx * dx + dy * dy <= radius * radius) out.emplace_back(dx, dy);
    return out;
}

namespace {

// Pad so dilation never leaks past the working domain; full-plane semantics.
BinaryMask pad(const BinaryMask& m, int margin) {
    BinaryMask out(m.width + 2 * margin, m.height + 2 * margin, m.level);
    for (int y = 0; y < m.height; ++y)
        std::copy_n(&m.bits[static_cast<std::size_t>(y) * m.width], m.width,
                    &out.bits[(static_cast<std::size_t>(y + margin)) * out.width + margin]);
    return out;
}

BinaryMask crop(const BinaryMask& m, int margin, int w, int h) {
    BinaryMask out(w, h, m.level);
    for (int y = 0; y < h; ++y)
        std::copy_n(&m.bits[(static_cast<std::size_t>(y + margin)) * m.width + margin], w,
                    &out.bits[static_cast<std::size_t>(y) * out.width]);
    return out;
}

BinaryMask morph(const BinaryMask& m, int radius, bool dilate) {
    const auto offs = disk_offsets(radius);
    BinaryMask out(m.width, m.height, m.level);
#pragma omp parallel for schedule(static)
    for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
            std::uint8_t v = dilate ? 0 : 1;
            for (const auto& [dx, dy] : offs) {
                const int sx = x + dx, sy = y + dy;
                const std::uint8_t s = (sx < 0 || sy < 0 || sx >= m.width || sy >= m.height)
                                           ? 0
                                           : m.at(sx, sy);
                if (dilate) {
                    if (s) { v = 1; break; }
                } else {
                    if (!s) { v = 0; break; }
                }
            }
            out.set(x, y, v);
        }
    }
    return out;
}

} // namespace

BinaryMask binary_dilate(const BinaryMask& m, int radius) { return morph(m, radius, true); }
BinaryMask binary_erode(const BinaryMask& m, int radius) { return morph(m, radius, false); }

BinaryMask binary_close(const BinaryMask& m, int radius) {
    const int margin = radius + 1;
    const BinaryMask padded = pad(m, margin);
    return crop(binary_erode(binary_dilate(padded, radius), radius), margin, m.width, m.height);
}

BinaryMask binary_open(const BinaryMask& m, int radius) {
    // erosion shrinks, no padding needed; dilation after cannot exceed the original support
    return binary_dilate(binary_erode(m, radius), radius);
}

BinaryMask tissue_mask(const Raster& level_raster, int level_index, const TissueMaskParams& p) {
    if (level_raster.channels != 3) throw InvalidInput("tissue_mask requires an RGB raster");
    BinaryMask mask(level_raster.width, level_raster.height, level_index);
    if (level_raster.empty()) return mask;

    const Raster hsv = rgb_to_hsv(level_raster);

    std::array<std::uint64_t, 256> hist{};
    for (std::size_t i = 0; i < hsv.pixel_count(); ++i) ++hist[hsv.data[i * 3 + 1]];
    const int sat_t = otsu_threshold(hist);

    const std::int64_t n = static_cast<std::int64_t>(hsv.pixel_count());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        const double hue = hsv.data[i * 3 + 0] / 255.0;
        const bool sat_ok = hsv.data[i * 3 + 1] > sat_t;
        const bool hue_ok = p.hue_keep_below ? hue <= p.hue_threshold : hue >= p.hue_threshold;
        mask.bits[i] = (sat_ok && hue_ok) ? 1 : 0;
    }
    return binary_open(binary_close(mask, p.disk_radius), p.disk_radius);
}

BinaryMask rasterise_annotations(const std::vector<AnnotationPolygon>& polygons,
                                 const SlideMeta& meta, int target_level) {
    meta.validate();
    if (target_level < 0 || target_level >= static_cast<int>(meta.levels.size()))
        throw InvalidInput("rasterise_annotations: no such level");
    const auto& lv = meta.levels[target_level];
    const double factor = lv.factor;
    BinaryMask mask(lv.width, lv.height, target_level);

    for (std::size_t pi = 0; pi < polygons.size(); ++pi) {
        const auto& poly = polygons[pi];
        if (poly.vertices.size() < 3)
            throw InvalidInput("polygon " + std::to_string(pi) + " (slide '" + poly.slide_id +
                               "') has fewer than 3 vertices");
    }

    // scanline even-odd fill per polygon, polygons OR-ed together;
    // vertices divided by the level factor, pixel membership by centre
#pragma omp parallel for schedule(static)
    for (int y = 0; y < mask.height; ++y) {
        const double py = y + 0.5;
        std::vector<double> xs;
        for (const auto& poly : polygons) {
            xs.clear();
            const std::size_t nv = poly.vertices.size();
            for (std::size_t i = 0; i < nv; ++i) {
                const auto& v1 = poly.vertices[i];
                const auto& v2 = poly.vertices[(i + 1) % nv];
                const double y1 = v1[1] / factor, y2 = v2[1] / factor;
                if ((y1 > py) == (y2 > py)) continue;
                const double x1 = v1[0] / factor, x2 = v2[0] / factor;
                xs.push_back(x1 + (py - y1) * (x2 - x1) / (y2 - y1));
            }
            std::sort(xs.begin(), xs.end());
            for (std::size_t i = 0; i + 1 < xs.size(); i += 2) {
                int x_start = static_cast<int>(std::ceil(xs[i] - 0.5));
                int x_end = static_cast<int>(std::ceil(xs[i + 1] - 0.5)); // exclusive
                x_start = std::max(x_start, 0);
                x_end = std::min(x_end, mask.width);
                for (int x = x_start; x < x_end; ++x) mask.set(x, y, 1);
            }
        }
    }
    return mask;
}

BinaryMask intersect(const BinaryMask& a, const BinaryMask& b) {
    if (a.width != b.width || a.height != b.height || a.level != b.level)
        throw InvalidInput("intersect: mask dimensions/levels differ");
    BinaryMask out(a.width, a.height, a.level);
    for (std::size_t i = 0; i < a.bits.size(); ++i) out.bits[i] = a.bits[i] & b.bits[i];
    return out;
}

namespace {

// 4-connected flood from the border over background; unreached background = holes.
void flood_background_from_border(const BinaryMask& fg, std::vector<std::uint8_t>& reached) {
    reached.assign(fg.bits.size(), 0);
    std::vector<std::pair<int, int>> stack;
    auto push = [&](int x, int y) {
        const std::size_t i = static_cast<std::size_t>(y) * fg.width + x;
        if (!fg.bits[i] && !reached[i]) {
            reached[i] = 1;
            stack.emplace_back(x, y);
        }
    };
    for (int x = 0; x < fg.width; ++x) {
        push(x, 0);
        push(x, fg.height - 1);
    }
    for (int y = 0; y < fg.height; ++y) {
        push(0, y);
        push(fg.width - 1, y);
    }
    while (!stack.empty()) {
        const auto [x, y] = stack.back();
        stack.pop_back();
        if (x > 0) push(x - 1, y);
        if (x + 1 < fg.width) push(x + 1, y);
        if (y > 0) push(x, y - 1);
        if (y + 1 < fg.height) push(x, y + 1);
    }
}

} // namespace

BinaryMask postprocess_probability_mask(const Raster& prob, std::uint8_t cutoff, int min_area) {
    if (prob.channels != 1)
        throw InvalidInput("postprocess_probability_mask requires a 1-channel raster");
    BinaryMask fg(prob.width, prob.height, 0);
    for (std::size_t i = 0; i < prob.data.size(); ++i) fg.bits[i] = prob.data[i] >= cutoff ? 1 : 0;
    if (fg.bits.empty()) return fg;

    // fill holes
    std::vector<std::uint8_t> border_bg;
    flood_background_from_border(fg, border_bg);
    for (std::size_t i = 0; i < fg.bits.size(); ++i)
        if (!fg.bits[i] && !border_bg[i]) fg.bits[i] = 1;

    // remove 8-connected components below min_area (union-find two-pass)
    const int w = fg.width, h = fg.height;
    std::vector<std::int32_t> label(fg.bits.size(), -1);
    std::vector<std::int32_t> parent;
    auto find = [&](std::int32_t a) {
        while (parent[a] != a) {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        return a;
    };
    auto unite = [&](std::int32_t a, std::int32_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    };
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            if (!fg.bits[i]) continue;
            std::int32_t lbl = -1;
            const int nx[4] = {x - 1, x, x + 1, x - 1};
            const int ny[4] = {y - 1, y - 1, y - 1, y};
            for (int k = 0; k < 4; ++k) {
                if (nx[k] < 0 || ny[k] < 0 || nx[k] >= w) continue;
                const std::size_t j = static_cast<std::size_t>(ny[k]) * w + nx[k];
                if (label[j] < 0) continue;
                if (lbl < 0)
                    lbl = find(label[j]);
                else
                    unite(lbl, label[j]);
            }
            if (lbl < 0) {
                lbl = static_cast<std::int32_t>(parent.size());
                parent.push_back(lbl);
            }
            label[i] = lbl;
        }
    }
    std::vector<std::int64_t> area(parent.size(), 0);
    for (std::size_t i = 0; i < fg.bits.size(); ++i)
        if (fg.bits[i]) ++area[find(label[i])];
    for (std::size_t i = 0; i < fg.bits.size(); ++i)
        if (fg.bits[i] && area[find(label[i])] < min_area) fg.bits[i] = 0;
    return fg;
}

BinaryMask mask_from_raster(const Raster& r, int level) {
    if (r.channels != 1) throw InvalidInput("mask rasters must be 1-channel");
    BinaryMask m(r.width, r.height, level);
    for (std::size_t i = 0; i < r.data.size(); ++i) m.bits[i] = r.data[i] ? 1 : 0;
    return m;
}

Raster mask_to_raster(const BinaryMask& m) {
    Raster r(m.width, m.height, 1);
    for (std::size_t i = 0; i < m.bits.size(); ++i) r.data[i] = m.bits[i] ? 255 : 0;
    return r;
}

std::vector<AnnotationPolygon> read_annotations_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open " + path.string());
    nlohmann::json j;
    in >> j;
    std::vector<AnnotationPolygon> out;
    for (const auto& item : j) {
        AnnotationPolygon p;
        p.slide_id = item.at("slide_id").get<std::string>();
        p.label = item.at("label").get<std::string>();
        for (const auto& v : item.at("vertices"))
            p.vertices.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
        out.push_back(std::move(p));
    }
    return out;
}

void write_annotations_json(const std::filesystem::path& path,
                            const std::vector<AnnotationPolygon>& polygons) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& p : polygons) {
        nlohmann::json v = nlohmann::json::array();
        for (const auto& xy : p.vertices) v.push_back({xy[0], xy[1]});
        j.push_back({{"slide_id", p.slide_id}, {"label", p.label}, {"vertices", v}});
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

} // namespace emo
