#include "emo/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "emo/expression.hpp"
#include "emo/image_io.hpp"
#include "emo/lme.hpp"
#include "emo/predict.hpp"
#include "emo/rng.hpp"
#include "emo/segmentation.hpp"
#include "emo/tsv.hpp"

namespace emo {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

// fixture stain absorbances (unit columns, blue-dominant hematoxylin).
// The counterstain carries more red absorbance than real eosin so every
// tissue mix keeps its hue below the 0.75 segmentation threshold.
constexpr double kH[3] = {0.6511, 0.7012, 0.2905};
constexpr double kE[3] = {0.4219, 0.9040, 0.0703};

constexpr double kCellUm = 13.0;      // nucleus placement grid
constexpr double kNucSigmaUm = 3.1;   // gaussian bump width
constexpr double kTexUm = 2.712;      // fine texture wavelength
// tissue occupies [kTissueU0,kTissueU1] x [kTissueV0,kTissueV1] of the slide
constexpr double kTissueU0 = 0.27, kTissueU1 = 0.97;
constexpr double kTissueV0 = 0.06, kTissueV1 = 0.94;
// texture-free (blurry) corner
constexpr double kSmoothU = 0.58, kSmoothV = 0.42;

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a * 0x9e3779b97f4a7c15ULL + b;
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline double unit(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

// slow density modulation so expression signal also varies within a slide
inline double density_mod(double x_um, double y_um) {
    return 0.5 + 0.5 * std::sin(kTwoPi * x_um / 230.0) * std::cos(kTwoPi * y_um / 210.0);
}

struct Nucleus {
    double cx, cy, amp;
};

struct SceneCache {
    std::uint64_t slide_hash = 0;
    double density = 0.0;
    double stain_gain = 1.0;
    double w_um = 0.0, h_um = 0.0;
    int cells_x = 0, cells_y = 0;
    std::vector<std::vector<Nucleus>> cells; // cells_x * cells_y
};

SceneCache build_scene(const SynthParams& p, const SynthSlideTruth& slide) {
    SceneCache sc;
    sc.slide_hash = mix(p.seed, hash64(slide.slide_id));
    sc.density = slide.density;
    sc.stain_gain = slide.stain_gain;
    sc.w_um = p.slide_w_um;
    sc.h_um = p.slide_h_um;
    sc.cells_x = static_cast<int>(sc.w_um / kCellUm) + 1;
    sc.cells_y = static_cast<int>(sc.h_um / kCellUm) + 1;
    sc.cells.resize(static_cast<std::size_t>(sc.cells_x) * sc.cells_y);
    for (int cy = 0; cy < sc.cells_y; ++cy)
        for (int cx = 0; cx < sc.cells_x; ++cx) {
            const std::uint64_t h = mix(sc.slide_hash, (static_cast<std::uint64_t>(cy) << 32) |
                                                           static_cast<std::uint64_t>(cx));
            const double centre_x = (cx + 0.5) * kCellUm;
            const double centre_y = (cy + 0.5) * kCellUm;
            const double local_d =
                std::clamp(sc.density * (0.4 + 0.8 * density_mod(centre_x, centre_y)), 0.0, 1.0);
            if (unit(h) >= local_d) continue;
            Nucleus n;
            n.cx = centre_x + (unit(mix(h, 1)) - 0.5) * 8.0;
            n.cy = centre_y + (unit(mix(h, 2)) - 0.5) * 8.0;
            n.amp = 1.15 + 0.25 * unit(mix(h, 3));
            sc.cells[static_cast<std::size_t>(cy) * sc.cells_x + cx].push_back(n);
        }
    return sc;
}

// stain saturations of the scene at a physical point
inline void scene_saturations(const SceneCache& sc, double x, double y, double& s_h,
                              double& s_e) {
    const double u = x / sc.w_um, v = y / sc.h_um;
    if (u < kTissueU0 || u > kTissueU1 || v < kTissueV0 || v > kTissueV1) {
        s_h = s_e = 0.0; // background stays white
        return;
    }
    const bool smooth = u > kSmoothU && v > kSmoothV;

    s_e = 0.38 + 0.10 * std::sin(kTwoPi * x / 47.0) * std::cos(kTwoPi * y / 53.0);
    double nuclei = 0.0;
    if (smooth) {
        nuclei = 0.35 * sc.density;
    } else {
        s_e += 0.20 * std::sin(kTwoPi * x / kTexUm) * std::sin(kTwoPi * y / kTexUm);
        const int cx = static_cast<int>(x / kCellUm);
        const int cy = static_cast<int>(y / kCellUm);
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const int nx = cx + dx, ny = cy + dy;
                if (nx < 0 || ny < 0 || nx >= sc.cells_x || ny >= sc.cells_y) continue;
                for (const auto& n : sc.cells[static_cast<std::size_t>(ny) * sc.cells_x + nx]) {
                    const double rx = x - n.cx, ry = y - n.cy;
                    if (std::abs(rx) > 10.0 || std::abs(ry) > 10.0) continue;
                    nuclei += n.amp * std::exp(-(rx * rx + ry * ry) /
                                               (2.0 * kNucSigmaUm * kNucSigmaUm));
                }
            }
    }
    // overlapping bumps saturate, so every slide's saturation pseudo-maximum
    // sits at the same cap and normalisation keeps the coverage signal;
    // nuclei displace stroma, which pins both angular extremes of the stain
    // cone (bare stroma, nucleus core) on every slide regardless of density
    const double core = std::min(nuclei, 1.1);
    s_h = (0.10 + core) * sc.stain_gain;
    s_e = std::max(0.0, s_e) * (1.0 - 0.72 * std::min(core, 1.0)) * sc.stain_gain;
}

} // namespace

Raster render_synth_slide(const SynthParams& p, const SynthSlideTruth& slide) {
    const SceneCache sc = build_scene(p, slide);
    const int w = static_cast<int>(std::lround(p.slide_w_um / p.mpp));
    const int h = static_cast<int>(std::lround(p.slide_h_um / p.mpp));
    Raster out(w, h, 3);
#pragma omp parallel for schedule(dynamic, 16)
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double s_h, s_e;
            scene_saturations(sc, (x + 0.5) * p.mpp, (y + 0.5) * p.mpp, s_h, s_e);
            const OdPixel od{kH[0] * s_h + kE[0] * s_e, kH[1] * s_h + kE[1] * s_e,
                             kH[2] * s_h + kE[2] * s_e};
            from_od(od, out.data[out.index(x, y, 0)], out.data[out.index(x, y, 1)],
                    out.data[out.index(x, y, 2)]);
        }
    }
    return out;
}

SynthTruth synth_truth(const SynthParams& p) {
    if (p.n_train < 1 || p.n_val < 1 || p.n_genes < 1 || p.n_linked < 0 ||
        p.n_linked > p.n_genes)
        throw InvalidInput("synth fixture counts out of range");

    SynthTruth t;
    const int n_slides = p.n_train + p.n_val;
    int val_left = p.n_val;
    for (int i = 0; i < n_slides; ++i) {
        SynthSlideTruth s;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "S%03d", i);
        s.slide_id = buf;
        s.z = n_slides > 1 ? static_cast<double>(i) / (n_slides - 1) : 0.5;
        s.density = 0.30 + 0.60 * s.z;
        s.stain_gain = 0.85 + 0.4 * unit(mix(p.seed, 0x511de ^ static_cast<std::uint64_t>(i)));
        // round-robin so both splits span the density range
        const bool take_val = val_left > 0 && i % 3 == 1;
        s.split = take_val ? "validation" : "train";
        if (take_val) --val_left;
        t.slides.push_back(std::move(s));
    }
    // leftover validation quota lands on the tail
    for (int i = n_slides - 1; val_left > 0 && i >= 0; --i)
        if (t.slides[i].split == "train") {
            t.slides[i].split = "validation";
            --val_left;
        }

    Rng grng(mix(p.seed, 0x9e8e5));
    for (int g = 0; g < p.n_genes; ++g) {
        SynthGeneTruth gt;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "G%03d", g);
        gt.gene_id = buf;
        gt.linked = g < p.n_linked;
        gt.base = 7.0 + 2.0 * grng.u01();
        gt.slope = gt.linked ? (2.0 + grng.u01()) * (g % 2 ? -1.0 : 1.0) : 0.0;
        t.genes.push_back(std::move(gt));
    }
    return t;
}

SynthTruth synth_fixture(const std::filesystem::path& out_dir, const SynthParams& p) {
    const SynthTruth truth = synth_truth(p);
    std::filesystem::create_directories(out_dir / "slides");

    // pyramid factor keyed to physical size: the downsampled level keeps a
    // fixed ~3.6 um/px resolution, so masks agree across renderings at
    // different mpp and stay large enough for the radius-10 morphology
    double factor = 2.0;
    while (factor < 32.0 &&
           std::min(p.slide_w_um, p.slide_h_um) / (p.mpp * factor * 2.0) >= 90.0)
        factor *= 2.0;

    std::vector<AnnotationPolygon> annotations;
    for (const auto& s : truth.slides) {
        const Raster level0 = render_synth_slide(p, s);
        SlideMeta meta;
        meta.slide_id = s.slide_id;
        meta.mpp = p.mpp;
        const Raster level1 = resample(level0, factor, ResampleMethod::lanczos);
        meta.levels = {{1.0, level0.width, level0.height},
                       {factor, level1.width, level1.height}};
        write_slide_pyramid(out_dir / "slides" / s.slide_id, meta, {level0, level1});

        // invasive annotation: the tissue block in level-0 pixel coordinates
        AnnotationPolygon poly;
        poly.slide_id = s.slide_id;
        poly.label = "invasive";
        const double x0 = kTissueU0 * p.slide_w_um / p.mpp, x1 = kTissueU1 * p.slide_w_um / p.mpp;
        const double y0 = kTissueV0 * p.slide_h_um / p.mpp, y1 = kTissueV1 * p.slide_h_um / p.mpp;
        poly.vertices = {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}};
        annotations.push_back(std::move(poly));
    }
    write_annotations_json(out_dir / "annotations.json", annotations);

    // expression + sample manifest
    ExpressionMatrix expr;
    for (const auto& s : truth.slides) expr.samples.push_back(s.slide_id);
    Rng noise(mix(p.seed, 0xe4b));
    for (const auto& g : truth.genes) {
        expr.genes.push_back(g.gene_id);
        for (const auto& s : truth.slides) {
            double v = g.base;
            v += g.linked ? g.slope * (s.z - 0.5) + 0.05 * noise.normal() : noise.normal();
            expr.values.push_back(v);
        }
    }
    write_expression_tsv(out_dir / "expression.tsv", expr);

    std::vector<SampleInfo> samples;
    for (const auto& s : truth.slides) samples.push_back({s.slide_id, "SYNTH", s.split});
    write_sample_manifest(out_dir / "samples.tsv", samples);

    if (p.with_st) {
        // ROI grid inside the tissue block; counts follow the local density field
        std::vector<Roi> rois;
        std::vector<StRawCount> counts;
        std::vector<NegControlRow> negs;
        Rng strng(mix(p.seed, 0x57c));
        const int grid_x = 4;
        const int grid_y = std::max(1, p.rois_per_slide / grid_x);
        // ROIs stay in the textured band and exceed the tile stride, so every
        // ROI captures at least one accepted tile centre
        const double roi_um = 160.0;
        const double u_lo = kTissueU0 + 0.02, u_hi = kSmoothU - 0.02;
        const double v_lo = kTissueV0 + 0.03, v_hi = kTissueV1 - 0.03;
        for (const auto& s : truth.slides) {
            const SceneCache sc = build_scene(p, s);
            int made = 0;
            for (int gy = 0; gy < grid_y && made < p.rois_per_slide; ++gy)
                for (int gx = 0; gx < grid_x && made < p.rois_per_slide; ++gx, ++made) {
                    const double fx = u_lo + (u_hi - u_lo) * (gx + 0.5) / grid_x;
                    const double fy = v_lo + (v_hi - v_lo) * (gy + 0.5) / grid_y;
                    Roi roi;
                    roi.roi_id = s.slide_id + "_R" + std::to_string(made);
                    roi.slide_id = s.slide_id;
                    roi.size_um = roi_um;
                    roi.x0 = static_cast<long>((fx * p.slide_w_um - roi_um / 2) / p.mpp);
                    roi.y0 = static_cast<long>((fy * p.slide_h_um - roi_um / 2) / p.mpp);
                    rois.push_back(roi);

                    // ROI-mean nuclear drive sampled on a coarse grid
                    double eta = 0.0;
                    for (int sy = 0; sy < 5; ++sy)
                        for (int sx = 0; sx < 5; ++sx) {
                            const double px = roi.x0 * p.mpp + (sx + 0.5) * roi_um / 5;
                            const double py = roi.y0 * p.mpp + (sy + 0.5) * roi_um / 5;
                            eta += sc.density * (0.4 + 0.8 * density_mod(px, py));
                        }
                    eta /= 25.0;

                    const double neg_mean = 40.0 + 5.0 * strng.u01();
                    for (int k = 0; k < 6; ++k)
                        negs.push_back({s.slide_id, roi.roi_id, "NEG" + std::to_string(k),
                                        neg_mean * (0.9 + 0.2 * strng.u01())});
                    for (const auto& g : truth.genes) {
                        const double v = g.linked
                                             ? 1.0 + 3.0 * eta + 0.15 * strng.normal()
                                             : 1.0 + strng.normal();
                        counts.push_back(
                            {s.slide_id, roi.roi_id, g.gene_id, neg_mean * std::pow(2.0, v)});
                    }
                }
        }
        write_rois_tsv(out_dir / "rois.tsv", rois);
        TsvWriter stw(out_dir / "st_counts.tsv", {"slide_id", "roi_id", "gene_id", "raw_count"});
        for (const auto& c : counts)
            stw.write_row({c.slide_id, c.roi_id, c.gene_id, fmt_double(c.raw_count)});
        TsvWriter negw(out_dir / "neg_controls.tsv", {"slide_id", "roi_id", "probe", "raw_count"});
        for (const auto& n : negs)
            negw.write_row({n.slide_id, n.roi_id, n.probe, fmt_double(n.raw_count)});
    }

    nlohmann::json j;
    j["slides"] = nlohmann::json::array();
    for (const auto& s : truth.slides)
        j["slides"].push_back({{"slide_id", s.slide_id},
                               {"split", s.split},
                               {"z", s.z},
                               {"density", s.density},
                               {"stain_gain", s.stain_gain}});
    j["genes"] = nlohmann::json::array();
    for (const auto& g : truth.genes)
        j["genes"].push_back({{"gene_id", g.gene_id},
                              {"linked", g.linked},
                              {"base", g.base},
                              {"slope", g.slope}});
    std::ofstream out(out_dir / "truth.json", std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write truth.json");
    out << j.dump(2) << "\n";
    return truth;
}

} // namespace emo
