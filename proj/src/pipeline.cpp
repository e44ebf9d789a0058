#include "emo/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>

#include <json.hpp>

#include "emo/image_io.hpp"
#include "emo/lme.hpp"
#include "emo/parallel.hpp"
#include "emo/rng.hpp"
#include "emo/tsv.hpp"

namespace emo {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

namespace {

void reject_unknown_keys(const json& j, const std::vector<std::string>& known,
                         const std::string& where) {
    for (const auto& [key, value] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw InvalidInput("unknown config key '" + where + key + "'");
}

} // namespace

PipelineConfig load_config(const std::filesystem::path& json_path) {
    std::ifstream in(json_path);
    if (!in) throw InvalidInput("cannot open config " + json_path.string());
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw InvalidInput("config parse error: " + std::string(e.what()));
    }

    reject_unknown_keys(j, {"seed", "threads", "slides_dir", "out_dir", "annotations",
                            "expression", "samples", "tile", "sample_plan", "segmentation",
                            "stats", "lme", "predictor"},
                        "");
    PipelineConfig cfg;
    cfg.seed = j.value("seed", std::uint64_t{1});
    cfg.threads = j.value("threads", 0);
    cfg.slides_dir = j.value("slides_dir", std::string{});
    cfg.out_dir = j.value("out_dir", std::string{});
    cfg.annotations = j.value("annotations", std::string{});
    cfg.expression = j.value("expression", std::string{});
    cfg.samples = j.value("samples", std::string{});

    if (j.contains("tile")) {
        const auto& t = j["tile"];
        reject_unknown_keys(t, {"physical_size_um", "output_px", "overlap_fraction",
                                "tissue_min_fraction", "blur_variance_min", "jpeg_quality",
                                "src_px_exact"},
                            "tile.");
        cfg.tile.physical_size_um = t.value("physical_size_um", cfg.tile.physical_size_um);
        cfg.tile.output_px = t.value("output_px", cfg.tile.output_px);
        cfg.tile.overlap_fraction = t.value("overlap_fraction", cfg.tile.overlap_fraction);
        cfg.tile.tissue_min_fraction = t.value("tissue_min_fraction", cfg.tile.tissue_min_fraction);
        cfg.tile.blur_variance_min = t.value("blur_variance_min", cfg.tile.blur_variance_min);
        cfg.tile.jpeg_quality = t.value("jpeg_quality", cfg.tile.jpeg_quality);
        cfg.tile.src_px_exact = t.value("src_px_exact", cfg.tile.src_px_exact);
    }
    if (j.contains("sample_plan")) {
        const auto& s = j["sample_plan"];
        reject_unknown_keys(s, {"tiles_per_slide", "global_tiles"}, "sample_plan.");
        cfg.sample_plan.tiles_per_slide = s.value("tiles_per_slide", 100);
        cfg.sample_plan.global_tiles = s.value("global_tiles", 3000);
        if (cfg.sample_plan.tiles_per_slide < 1 || cfg.sample_plan.global_tiles < 1)
            throw InvalidInput("sample_plan counts must be >= 1");
    }
    if (j.contains("segmentation")) {
        const auto& s = j["segmentation"];
        reject_unknown_keys(s, {"target_downsample", "hue_threshold", "hue_keep", "disk_radius"},
                            "segmentation.");
        cfg.segmentation.target_downsample = s.value("target_downsample", 32.0);
        cfg.segmentation.mask.hue_threshold = s.value("hue_threshold", 0.75);
        const std::string keep = s.value("hue_keep", std::string("below"));
        if (keep != "below" && keep != "above")
            throw InvalidInput("segmentation.hue_keep must be 'below' or 'above'");
        cfg.segmentation.mask.hue_keep_below = keep == "below";
        cfg.segmentation.mask.disk_radius = s.value("disk_radius", 10);
    }
    if (j.contains("stats")) {
        const auto& s = j["stats"];
        reject_unknown_keys(s, {"split", "r2_min", "padj_max", "alpha", "exact_p_small_n"}, "stats.");
        cfg.stats.split = s.value("split", std::string("validation"));
        cfg.stats.r2_min = s.value("r2_min", 0.2);
        cfg.stats.padj_max = s.value("padj_max", 0.001);
        cfg.stats.alpha = s.value("alpha", 0.05);
        cfg.stats.exact_p_small_n = s.value("exact_p_small_n", false);
    }
    if (j.contains("lme")) {
        const auto& s = j["lme"];
        reject_unknown_keys(s, {"alpha", "st_var_min"}, "lme.");
        cfg.lme.alpha = s.value("alpha", 0.05);
        cfg.lme.st_var_min = s.value("st_var_min", 0.001);
    }
    if (j.contains("predictor")) {
        const auto& s = j["predictor"];
        reject_unknown_keys(s, {"mode", "command", "lambda"}, "predictor.");
        cfg.predictor.mode = s.value("mode", std::string("baseline"));
        cfg.predictor.command = s.value("command", std::string{});
        cfg.predictor.lambda = s.value("lambda", 1e-3);
        if (cfg.predictor.mode != "baseline" && cfg.predictor.mode != "external")
            throw InvalidInput("predictor.mode must be 'baseline' or 'external'");
    }
    cfg.tile.validate();
    return cfg;
}

void save_config(const std::filesystem::path& json_path, const PipelineConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["threads"] = cfg.threads;
    j["slides_dir"] = cfg.slides_dir.string();
    j["out_dir"] = cfg.out_dir.string();
    j["annotations"] = cfg.annotations.string();
    j["expression"] = cfg.expression.string();
    j["samples"] = cfg.samples.string();
    j["tile"] = {{"physical_size_um", cfg.tile.physical_size_um},
                 {"output_px", cfg.tile.output_px},
                 {"overlap_fraction", cfg.tile.overlap_fraction},
                 {"tissue_min_fraction", cfg.tile.tissue_min_fraction},
                 {"blur_variance_min", cfg.tile.blur_variance_min},
                 {"jpeg_quality", cfg.tile.jpeg_quality},
                 {"src_px_exact", cfg.tile.src_px_exact}};
    j["sample_plan"] = {{"tiles_per_slide", cfg.sample_plan.tiles_per_slide},
                        {"global_tiles", cfg.sample_plan.global_tiles}};
    j["segmentation"] = {{"target_downsample", cfg.segmentation.target_downsample},
                         {"hue_threshold", cfg.segmentation.mask.hue_threshold},
                         {"hue_keep", cfg.segmentation.mask.hue_keep_below ? "below" : "above"},
                         {"disk_radius", cfg.segmentation.mask.disk_radius}};
    j["stats"] = {{"split", cfg.stats.split},
                  {"r2_min", cfg.stats.r2_min},
                  {"padj_max", cfg.stats.padj_max},
                  {"alpha", cfg.stats.alpha},
                  {"exact_p_small_n", cfg.stats.exact_p_small_n}};
    j["lme"] = {{"alpha", cfg.lme.alpha}, {"st_var_min", cfg.lme.st_var_min}};
    j["predictor"] = {{"mode", cfg.predictor.mode},
                      {"command", cfg.predictor.command},
                      {"lambda", cfg.predictor.lambda}};
    std::ofstream out(json_path, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write " + json_path.string());
    out << j.dump(2) << "\n";
}

void write_slide_stain_json(const std::filesystem::path& path, const SlideStainProfile& p) {
    json j;
    j["i_ref95"] = p.i_ref95;
    j["stain_matrix"] = {{p.profile.stain_matrix[0][0], p.profile.stain_matrix[0][1]},
                         {p.profile.stain_matrix[1][0], p.profile.stain_matrix[1][1]},
                         {p.profile.stain_matrix[2][0], p.profile.stain_matrix[2][1]}};
    j["sat_ref99"] = {p.profile.sat_ref99[0], p.profile.sat_ref99[1]};
    j["seed"] = p.profile.seed;
    j["n_tiles"] = p.profile.n_tiles;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

SlideStainProfile read_slide_stain_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open " + path.string());
    json j;
    in >> j;
    SlideStainProfile p;
    p.i_ref95 = j.at("i_ref95").get<double>();
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 2; ++c) p.profile.stain_matrix[r][c] = j.at("stain_matrix").at(r).at(c);
    p.profile.sat_ref99[0] = j.at("sat_ref99").at(0);
    p.profile.sat_ref99[1] = j.at("sat_ref99").at(1);
    p.profile.seed = j.at("seed").get<std::uint64_t>();
    p.profile.n_tiles = j.at("n_tiles").get<int>();
    return p;
}

std::vector<std::filesystem::path> list_slide_dirs(const std::filesystem::path& slides_dir) {
    if (!std::filesystem::is_directory(slides_dir))
        throw InvalidInput("slides directory not found: " + slides_dir.string());
    std::vector<std::filesystem::path> out;
    for (const auto& e : std::filesystem::directory_iterator(slides_dir))
        if (e.is_directory() && std::filesystem::exists(e.path() / "meta.json"))
            out.push_back(e.path());
    std::sort(out.begin(), out.end());
    if (out.empty()) throw InvalidInput("no slides under " + slides_dir.string());
    return out;
}

// ---------------------------------------------------------------------------
// Shared stage internals. The staged entry points persist artifacts between
// these calls; the in-process runner chains them directly. Tile pixels always
// pass through a JPEG encode so both paths see identical bytes.

namespace {

using TileReader = std::function<Raster(const TileManifestRow&)>;

struct SlideMasks {
    std::map<std::string, BinaryMask> by_slide;
};

BinaryMask segment_one_slide(const PipelineConfig& cfg, const Slide& slide,
                             const std::vector<AnnotationPolygon>& annotations) {
    const int level = slide.meta.nearest_level(cfg.segmentation.target_downsample);
    const Raster raster = slide.read_level(level);
    BinaryMask mask = tissue_mask(raster, level, cfg.segmentation.mask);
    std::vector<AnnotationPolygon> mine;
    for (const auto& a : annotations)
        if (a.slide_id == slide.meta.slide_id && a.label == "invasive") mine.push_back(a);
    if (!mine.empty())
        mask = intersect(mask, rasterise_annotations(mine, slide.meta, level));
    return mask;
}

struct TiledSlide {
    std::vector<TileManifestRow> rows;
    std::map<std::string, std::vector<std::uint8_t>> jpeg_by_name; // accepted tiles only
};

TiledSlide tile_one_slide(const PipelineConfig& cfg, const Slide& slide, const BinaryMask& mask,
                          const std::string& path_prefix) {
    const Raster level0 = slide.read_level(0);
    const auto grid = plan_grid(slide.meta, cfg.tile);
    if (grid.empty())
        std::cerr << "warning: slide " << slide.meta.slide_id << " smaller than one tile\n";

    TiledSlide out;
    out.rows.resize(grid.size());
    std::vector<std::vector<std::uint8_t>> jpegs(grid.size());
    const std::int64_t n = static_cast<std::int64_t>(grid.size());
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t i = 0; i < n; ++i) {
        const auto [x0, y0] = grid[i];
        TileRecord rec = extract_tile(level0, slide.meta, cfg.tile, x0, y0);
        rec.tissue_fraction = tissue_fraction(x0, y0, rec.src_px, mask, slide.meta);
        rec.blur_variance = blur_variance(rec.pixels);
        rec.accepted = accept(rec, cfg.tile);
        TileManifestRow row;
        row.slide_id = rec.slide_id;
        row.x0 = rec.x0;
        row.y0 = rec.y0;
        row.src_px = rec.src_px;
        row.tissue_fraction = rec.tissue_fraction;
        row.blur_variance = rec.blur_variance;
        row.accepted = rec.accepted;
        if (rec.accepted) {
            row.path = path_prefix + tile_filename(rec.slide_id, rec.x0, rec.y0);
            jpegs[i] = encode_jpeg(rec.pixels, cfg.tile.jpeg_quality);
        }
        out.rows[i] = std::move(row);
    }
    for (std::size_t i = 0; i < grid.size(); ++i)
        if (out.rows[i].accepted)
            out.jpeg_by_name[tile_filename(out.rows[i].slide_id, out.rows[i].x0,
                                           out.rows[i].y0)] = std::move(jpegs[i]);
    return out;
}

std::vector<std::size_t> accepted_indices_for_slide(const std::vector<TileManifestRow>& rows,
                                                    const std::string& slide_id) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < rows.size(); ++i)
        if (rows[i].accepted && rows[i].slide_id == slide_id) idx.push_back(i);
    return idx;
}

// seeded subsample of k indices, returned sorted for stable iteration order
std::vector<std::size_t> sample_indices(std::vector<std::size_t> idx, int k, std::uint64_t seed) {
    Rng rng(seed);
    rng.shuffle(idx);
    if (static_cast<int>(idx.size()) > k) idx.resize(static_cast<std::size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

struct StainState {
    std::map<std::string, SlideStainProfile> per_slide;
    StainProfile global;
};

StainState estimate_stain_state(const PipelineConfig& cfg,
                                const std::vector<TileManifestRow>& rows,
                                const TileReader& read_tile) {
    std::set<std::string> slide_ids;
    for (const auto& r : rows)
        if (r.accepted) slide_ids.insert(r.slide_id);
    if (slide_ids.empty()) throw InvalidInput("no accepted tiles; cannot estimate stain state");

    StainState state;
    // per-slide luminosity reference + stain profile from a seeded tile sample
    for (const auto& slide_id : slide_ids) {
        const auto idx = sample_indices(accepted_indices_for_slide(rows, slide_id),
                                        cfg.sample_plan.tiles_per_slide,
                                        cfg.seed ^ hash64(slide_id));
        std::vector<Raster> tiles;
        tiles.reserve(idx.size());
        for (auto i : idx) tiles.push_back(read_tile(rows[i]));

        SlideStainProfile sp;
        sp.i_ref95 = luminosity_ref(tiles).i_ref95;
        for (auto& t : tiles) t = correct_luminosity(t, {sp.i_ref95});
        sp.profile = stain_profile(tiles, cfg.seed);
        state.per_slide[slide_id] = sp;
    }

    // global reference from a pooled sample of luminosity-corrected tiles
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < rows.size(); ++i)
        if (rows[i].accepted) pool.push_back(i);
    const auto global_idx =
        sample_indices(std::move(pool), cfg.sample_plan.global_tiles, cfg.seed * 0x9e3779b9ULL + 1);
    std::vector<Raster> tiles;
    tiles.reserve(global_idx.size());
    for (auto i : global_idx) {
        const auto& slide_profile = state.per_slide.at(rows[i].slide_id);
        tiles.push_back(correct_luminosity(read_tile(rows[i]), {slide_profile.i_ref95}));
    }
    state.global = stain_profile(tiles, cfg.seed);
    return state;
}

Raster normalise_one_tile(const Raster& raw, const SlideStainProfile& sp,
                          const StainProfile& global) {
    const Raster corrected = correct_luminosity(raw, {sp.i_ref95});
    return normalise_tile(corrected, sp.profile.stain_matrix, sp.profile.sat_ref99, global);
}

std::vector<TilePrediction> predict_baseline_all(const PipelineConfig& cfg,
                                                 const std::vector<TileManifestRow>& rows,
                                                 const TileReader& read_norm_tile) {
    const ExpressionMatrix expr = read_expression_tsv(cfg.expression);
    const auto samples = read_sample_manifest(cfg.samples);

    std::vector<std::size_t> accepted;
    for (std::size_t i = 0; i < rows.size(); ++i)
        if (rows[i].accepted) accepted.push_back(i);
    if (accepted.empty()) throw InvalidInput("no accepted tiles to predict on");

    // one feature vector per accepted tile
    std::vector<std::array<double, kBaselineFeatureCount>> feats(accepted.size());
    const std::int64_t na = static_cast<std::int64_t>(accepted.size());
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t k = 0; k < na; ++k)
        feats[k] = baseline_features(read_norm_tile(rows[accepted[k]]));

    std::set<std::string> train_slides;
    for (const auto& s : samples)
        if (s.split == "train") train_slides.insert(s.sample_id);

    std::vector<std::size_t> train_rows; // indices into `accepted`
    for (std::size_t k = 0; k < accepted.size(); ++k)
        if (train_slides.count(rows[accepted[k]].slide_id)) train_rows.push_back(k);
    if (train_rows.empty()) throw InvalidInput("no accepted tiles belong to train slides");

    std::vector<TilePrediction> preds(expr.genes.size() * accepted.size());
    const std::int64_t ng = static_cast<std::int64_t>(expr.genes.size());
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t g = 0; g < ng; ++g) {
        std::vector<std::array<double, kBaselineFeatureCount>> fit_f;
        std::vector<double> fit_y;
        for (auto k : train_rows) {
            const int s = expr.sample_index(rows[accepted[k]].slide_id);
            if (s < 0) continue;
            fit_f.push_back(feats[k]);
            fit_y.push_back(expr.at(static_cast<std::size_t>(g), static_cast<std::size_t>(s)));
        }
        const BaselineModel model =
            fit_baseline(expr.genes[static_cast<std::size_t>(g)], fit_f, fit_y,
                         cfg.predictor.lambda);
        for (std::size_t k = 0; k < accepted.size(); ++k) {
            const auto& row = rows[accepted[k]];
            preds[static_cast<std::size_t>(g) * accepted.size() + k] = {
                row.slide_id, row.x0, row.y0, model.gene_id,
                predict_baseline(model, feats[k])};
        }
    }
    return preds;
}

std::vector<SlideLevelRow> aggregate_predictions(const std::vector<TilePrediction>& preds,
                                                 const std::vector<TileManifestRow>& rows) {
    std::set<std::string> slides;
    for (const auto& r : rows) slides.insert(r.slide_id);
    std::set<std::string> genes;
    for (const auto& p : preds) genes.insert(p.gene_id);

    std::map<std::pair<std::string, std::string>, std::vector<double>> values;
    for (const auto& p : preds) values[{p.slide_id, p.gene_id}].push_back(p.value);

    std::vector<SlideLevelRow> out;
    for (const auto& slide : slides)
        for (const auto& gene : genes) {
            SlideLevelRow row{slide, gene, std::nullopt};
            const auto it = values.find({slide, gene});
            if (it != values.end()) row.value = aggregate_slide(it->second);
            out.push_back(std::move(row));
        }
    return out;
}

std::vector<GeneStat> compute_gene_stats(const PipelineConfig& cfg,
                                         const std::vector<SlideLevelRow>& slide_level) {
    const ExpressionMatrix expr = read_expression_tsv(cfg.expression);
    const auto samples = read_sample_manifest(cfg.samples);

    std::vector<std::string> split_samples;
    for (const auto& s : samples)
        if (s.split == cfg.stats.split) split_samples.push_back(s.sample_id);
    if (split_samples.size() < 4)
        throw InvalidInput("split '" + cfg.stats.split + "' has fewer than 4 samples");

    std::map<std::pair<std::string, std::string>, std::optional<double>> pred;
    std::set<std::string> pred_genes;
    for (const auto& r : slide_level) {
        pred[{r.slide_id, r.gene_id}] = r.value;
        pred_genes.insert(r.gene_id);
    }

    std::vector<GeneStat> stats;
    std::size_t dropped_na = 0;
    for (std::size_t g = 0; g < expr.genes.size(); ++g) {
        if (!pred_genes.count(expr.genes[g])) continue;
        std::vector<double> obs, hat;
        for (const auto& sample : split_samples) {
            const int s = expr.sample_index(sample);
            if (s < 0) continue;
            const auto it = pred.find({sample, expr.genes[g]});
            if (it == pred.end() || !it->second) {
                ++dropped_na;
                continue; // NA predictions drop pairwise
            }
            obs.push_back(expr.at(g, static_cast<std::size_t>(s)));
            hat.push_back(*it->second);
        }
        GeneStat st;
        st.gene_id = expr.genes[g];
        st.n = static_cast<int>(obs.size());
        const auto sp = spearman(obs, hat);
        st.rho = sp.rho;
        st.p = cfg.stats.exact_p_small_n && obs.size() <= 9 ? spearman_exact_p(obs, hat) : sp.p;
        st.r2_pred = r2_pred(obs, hat);
        stats.push_back(std::move(st));
    }
    if (dropped_na)
        std::cerr << "note: dropped " << dropped_na << " NA prediction pairs\n";
    if (stats.empty()) throw InvalidInput("no genes with predictions in split");

    std::vector<double> ps;
    for (const auto& s : stats) ps.push_back(s.p);
    const auto bh = bh_adjust(ps);
    const auto bonf = bonferroni_adjust(ps);
    for (std::size_t i = 0; i < stats.size(); ++i) {
        stats[i].p_adj_bh = bh[i];
        stats[i].p_adj_bonf = bonf[i];
        stats[i].selected = stats[i].r2_pred > cfg.stats.r2_min &&
                            stats[i].p_adj_bh < cfg.stats.padj_max;
    }
    return stats;
}

TileReader disk_reader(const std::filesystem::path& dir) {
    return [dir](const TileManifestRow& row) {
        return read_jpeg(dir / std::filesystem::path(row.path).filename());
    };
}

} // namespace

// ---------------------------------------------------------------------------
// Staged entry points

void stage_segment(const PipelineConfig& cfg) {
    std::filesystem::create_directories(cfg.masks_dir());
    std::vector<AnnotationPolygon> annotations;
    if (!cfg.annotations.empty()) annotations = read_annotations_json(cfg.annotations);

    for (const auto& dir : list_slide_dirs(cfg.slides_dir)) {
        const Slide slide = open_slide(dir);
        const BinaryMask mask = segment_one_slide(cfg, slide, annotations);
        write_png(cfg.masks_dir() / (slide.meta.slide_id + ".png"), mask_to_raster(mask));
        json j;
        j["slide_id"] = slide.meta.slide_id;
        j["level"] = mask.level;
        j["factor"] = slide.meta.levels[mask.level].factor;
        std::ofstream out(cfg.masks_dir() / (slide.meta.slide_id + ".json"), std::ios::binary);
        out << j.dump(2) << "\n";
    }
}

namespace {

BinaryMask load_mask(const PipelineConfig& cfg, const std::string& slide_id) {
    const auto png = cfg.masks_dir() / (slide_id + ".png");
    const auto meta = cfg.masks_dir() / (slide_id + ".json");
    std::ifstream in(meta);
    if (!in) throw InvalidInput("missing mask sidecar " + meta.string() + "; run segment first");
    json j;
    in >> j;
    return mask_from_raster(read_png(png), j.at("level").get<int>());
}

} // namespace

void stage_tile(const PipelineConfig& cfg) {
    std::filesystem::create_directories(cfg.tiles_dir());
    std::vector<TileManifestRow> all_rows;
    for (const auto& dir : list_slide_dirs(cfg.slides_dir)) {
        const Slide slide = open_slide(dir);
        const BinaryMask mask = load_mask(cfg, slide.meta.slide_id);
        TiledSlide tiled = tile_one_slide(cfg, slide, mask, "tiles/");
        for (auto& [name, bytes] : tiled.jpeg_by_name) {
            std::ofstream out(cfg.tiles_dir() / name, std::ios::binary);
            if (!out) throw RuntimeFailure("cannot write tile " + name);
            out.write(reinterpret_cast<const char*>(bytes.data()),
                      static_cast<std::streamsize>(bytes.size()));
        }
        all_rows.insert(all_rows.end(), tiled.rows.begin(), tiled.rows.end());
    }
    write_tile_manifest(cfg.manifest_path(), std::move(all_rows));
}

void stage_stain_estimate(const PipelineConfig& cfg) {
    if (!std::filesystem::exists(cfg.manifest_path()))
        throw InvalidInput("missing " + cfg.manifest_path().string() + "; run tile first");
    std::filesystem::create_directories(cfg.profiles_dir());
    const auto rows = read_tile_manifest(cfg.manifest_path());
    const StainState state = estimate_stain_state(cfg, rows, disk_reader(cfg.tiles_dir()));
    for (const auto& [slide_id, sp] : state.per_slide)
        write_slide_stain_json(cfg.profiles_dir() / (slide_id + ".json"), sp);
    write_stain_profile_json(cfg.profiles_dir() / "global.json", state.global);
}

void stage_stain_apply(const PipelineConfig& cfg) {
    const auto global_path = cfg.profiles_dir() / "global.json";
    if (!std::filesystem::exists(global_path))
        throw InvalidInput("missing " + global_path.string() + "; run stain-estimate first");
    const StainProfile global = read_stain_profile_json(global_path);
    const auto rows = read_tile_manifest(cfg.manifest_path());
    std::filesystem::create_directories(cfg.norm_tiles_dir());

    std::map<std::string, SlideStainProfile> per_slide;
    std::vector<std::size_t> accepted;
    for (std::size_t i = 0; i < rows.size(); ++i)
        if (rows[i].accepted) {
            accepted.push_back(i);
            if (!per_slide.count(rows[i].slide_id))
                per_slide[rows[i].slide_id] = read_slide_stain_json(
                    cfg.profiles_dir() / (rows[i].slide_id + ".json"));
        }

    const auto reader = disk_reader(cfg.tiles_dir());
    const std::int64_t n = static_cast<std::int64_t>(accepted.size());
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t k = 0; k < n; ++k) {
        const auto& row = rows[accepted[k]];
        const Raster norm = normalise_one_tile(reader(row), per_slide.at(row.slide_id), global);
        write_jpeg(cfg.norm_tiles_dir() / tile_filename(row.slide_id, row.x0, row.y0), norm,
                   cfg.tile.jpeg_quality);
    }
}

void stage_predict(const PipelineConfig& cfg, const std::vector<std::string>& composites) {
    const auto rows = read_tile_manifest(cfg.manifest_path());
    std::vector<TilePrediction> preds;
    if (cfg.predictor.mode == "external") {
        if (cfg.predictor.command.empty())
            throw InvalidInput("external predictor mode requires a command");
        // hand the child paths under tiles_norm
        std::vector<TileManifestRow> routed = rows;
        for (auto& r : routed)
            if (r.accepted)
                r.path = (cfg.norm_tiles_dir() /
                          std::filesystem::path(r.path).filename()).string();
        preds = run_external_predictor(routed, cfg.predictor.command);
    } else {
        preds = predict_baseline_all(cfg, rows, disk_reader(cfg.norm_tiles_dir()));
    }
    for (const auto& spec_str : composites) {
        const auto colon = spec_str.find(':');
        if (colon == std::string::npos)
            throw InvalidInput("composite must look like name:gene1,gene2 (got '" + spec_str +
                               "')");
        const std::string name = spec_str.substr(0, colon);
        const std::string rest = spec_str.substr(colon + 1);
        std::vector<std::string> members;
        std::size_t start = 0;
        while (true) {
            const auto comma = rest.find(',', start);
            members.push_back(rest.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        const auto probe = composite_probe(preds, name, members);
        preds.insert(preds.end(), probe.begin(), probe.end());
    }
    write_predictions_tsv(cfg.predictions_path(), std::move(preds));
}

void stage_aggregate(const PipelineConfig& cfg, const std::filesystem::path& rois_tsv) {
    const auto preds = read_predictions_tsv(cfg.predictions_path());
    const auto rows = read_tile_manifest(cfg.manifest_path());
    write_slide_level_tsv(cfg.slide_level_path(), aggregate_predictions(preds, rows));

    if (!rois_tsv.empty()) {
        const auto rois = read_rois_tsv(rois_tsv);
        std::map<std::string, int> src_px_by_slide;
        for (const auto& r : rows) src_px_by_slide[r.slide_id] = r.src_px;
        std::set<std::string> genes;
        for (const auto& p : preds) genes.insert(p.gene_id);

        std::vector<RoiLevelRow> out;
        for (const auto& roi : rois) {
            const auto slide_dir = cfg.slides_dir / roi.slide_id;
            const SlideMeta meta = read_slide_meta_json(slide_dir / "meta.json");
            const auto it = src_px_by_slide.find(roi.slide_id);
            if (it == src_px_by_slide.end())
                throw InvalidInput("ROI '" + roi.roi_id + "' references unknown slide '" +
                                   roi.slide_id + "'");
            for (const auto& gene : genes) {
                std::vector<TilePrediction> gp;
                for (const auto& p : preds)
                    if (p.gene_id == gene && p.slide_id == roi.slide_id) gp.push_back(p);
                out.push_back({roi.roi_id, roi.slide_id, gene,
                               aggregate_roi(gp, roi, meta, it->second)});
            }
        }
        write_roi_level_tsv(cfg.roi_level_path(), out);
    }
}

void stage_stats(const PipelineConfig& cfg) {
    const auto slide_level = read_slide_level_tsv(cfg.slide_level_path());
    const auto stats = compute_gene_stats(cfg, slide_level);
    write_gene_stats_tsv(cfg.gene_stats_path(), stats);
    write_stats_summary_json(cfg.out_dir / "stats_summary.json", stats);
}

void stage_select(const PipelineConfig& cfg) {
    const auto stats = read_gene_stats_tsv(cfg.gene_stats_path());
    const auto chosen = select_genes(stats, cfg.stats.r2_min, cfg.stats.padj_max);
    write_gene_stats_tsv(cfg.out_dir / "selected.tsv", chosen);
}

void stage_lme(const PipelineConfig& cfg, const std::filesystem::path& st_tsv,
               const std::filesystem::path& neg_tsv, const std::filesystem::path& rois_tsv) {
    const auto counts = read_st_counts_tsv(st_tsv);
    const auto negs = read_neg_controls_tsv(neg_tsv);
    const auto st = normalise_st(counts, negs, cfg.lme.st_var_min);
    for (const auto& gene : st.dropped_low_variance)
        std::cerr << "note: ST gene '" << gene << "' dropped (variance below "
                  << cfg.lme.st_var_min << ")\n";

    const auto roi_preds = read_roi_level_tsv(cfg.roi_level_path());
    std::map<std::pair<std::string, std::string>, double> pred_by_roi_gene; // (roi,gene)
    for (const auto& r : roi_preds)
        if (r.value) pred_by_roi_gene[{r.roi_id, r.gene_id}] = *r.value;

    if (!rois_tsv.empty()) {
        // cross-check: every measured ROI must be a defined ROI
        std::set<std::string> known;
        for (const auto& roi : read_rois_tsv(rois_tsv)) known.insert(roi.roi_id);
        for (const auto& m : st.measurements)
            if (!known.count(m.roi_id))
                throw InvalidInput("ST measurement references undefined ROI '" + m.roi_id + "'");
    }

    std::map<std::string, LmeDesign> designs;
    for (const auto& m : st.measurements) {
        const auto it = pred_by_roi_gene.find({m.roi_id, m.gene_id});
        if (it == pred_by_roi_gene.end()) continue;
        auto& d = designs[m.gene_id];
        d.gene_id = m.gene_id;
        d.y.push_back(m.value);
        d.x.push_back(it->second);
        d.groups.push_back(m.slide_id);
    }
    if (designs.empty()) throw InvalidInput("no overlap between ST measurements and predictions");

    std::vector<LmeDesign> design_vec;
    for (auto& [gene, d] : designs) design_vec.push_back(std::move(d));

    const auto fits = lme_batch(design_vec, cfg.lme.alpha);
    for (const auto& f : fits)
        if (!f.ok) std::cerr << "warning: LME failed for gene '" << f.gene_id << "': " << f.error
                             << "\n";
    write_lme_results_tsv(cfg.out_dir / "lme.tsv", fits);

    const auto rhos = per_slide_spearman(design_vec);
    write_slide_rho_tsv(cfg.out_dir / "slide_rho.tsv", rhos);
    const auto summary = summarise_slide_rho(rhos);
    write_rho_summary_tsv(cfg.out_dir / "slide_rho_summary.tsv", summary);
}

void stage_heatmap(const PipelineConfig& cfg, const std::string& slide_id,
                   const std::string& gene_id, int level) {
    const auto preds = read_predictions_tsv(cfg.predictions_path());
    std::vector<TilePrediction> mine;
    for (const auto& p : preds)
        if (p.slide_id == slide_id && p.gene_id == gene_id) mine.push_back(p);
    if (mine.empty())
        throw InvalidInput("no predictions for slide '" + slide_id + "' gene '" + gene_id + "'");
    const auto rows = read_tile_manifest(cfg.manifest_path());
    int src_px = 0;
    for (const auto& r : rows)
        if (r.slide_id == slide_id) src_px = r.src_px;
    if (!src_px) throw InvalidInput("slide '" + slide_id + "' not in tile manifest");

    const SlideMeta meta = read_slide_meta_json(cfg.slides_dir / slide_id / "meta.json");
    const Heatmap hm = heatmap(mine, meta, level, src_px);
    write_heatmap(cfg.out_dir / ("heatmap_" + slide_id + "_" + gene_id + ".png"),
                  cfg.out_dir / ("heatmap_" + slide_id + "_" + gene_id + ".json"), hm);
}

// ---------------------------------------------------------------------------
// In-process pipeline

std::vector<GeneStat> run_pipeline_inprocess(const PipelineConfig& cfg) {
    if (cfg.predictor.mode != "baseline")
        throw InvalidInput("in-process pipeline supports the baseline predictor only");
    std::vector<AnnotationPolygon> annotations;
    if (!cfg.annotations.empty()) annotations = read_annotations_json(cfg.annotations);

    // segment + tile
    std::vector<TileManifestRow> rows;
    std::map<std::string, std::vector<std::uint8_t>> raw_jpeg;
    for (const auto& dir : list_slide_dirs(cfg.slides_dir)) {
        const Slide slide = open_slide(dir);
        const BinaryMask mask = segment_one_slide(cfg, slide, annotations);
        TiledSlide tiled = tile_one_slide(cfg, slide, mask, "tiles/");
        rows.insert(rows.end(), tiled.rows.begin(), tiled.rows.end());
        for (auto& [name, bytes] : tiled.jpeg_by_name) raw_jpeg[name] = std::move(bytes);
    }
    std::sort(rows.begin(), rows.end(), [](const TileManifestRow& a, const TileManifestRow& b) {
        if (a.slide_id != b.slide_id) return a.slide_id < b.slide_id;
        if (a.y0 != b.y0) return a.y0 < b.y0;
        return a.x0 < b.x0;
    });

    const TileReader raw_reader = [&](const TileManifestRow& row) {
        return decode_jpeg(raw_jpeg.at(tile_filename(row.slide_id, row.x0, row.y0)));
    };

    // stain estimate + apply (normalised tiles go through the same JPEG round trip)
    const StainState state = estimate_stain_state(cfg, rows, raw_reader);
    std::map<std::string, std::vector<std::uint8_t>> norm_jpeg;
    std::vector<std::size_t> accepted;
    for (std::size_t i = 0; i < rows.size(); ++i)
        if (rows[i].accepted) accepted.push_back(i);
    std::vector<std::vector<std::uint8_t>> norm_bytes(accepted.size());
    const std::int64_t n = static_cast<std::int64_t>(accepted.size());
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t k = 0; k < n; ++k) {
        const auto& row = rows[accepted[k]];
        const Raster norm =
            normalise_one_tile(raw_reader(row), state.per_slide.at(row.slide_id), state.global);
        norm_bytes[k] = encode_jpeg(norm, cfg.tile.jpeg_quality);
    }
    for (std::size_t k = 0; k < accepted.size(); ++k) {
        const auto& row = rows[accepted[k]];
        norm_jpeg[tile_filename(row.slide_id, row.x0, row.y0)] = std::move(norm_bytes[k]);
    }
    const TileReader norm_reader = [&](const TileManifestRow& row) {
        return decode_jpeg(norm_jpeg.at(tile_filename(row.slide_id, row.x0, row.y0)));
    };

    // predict + aggregate + stats
    const auto preds = predict_baseline_all(cfg, rows, norm_reader);
    const auto slide_level = aggregate_predictions(preds, rows);
    return compute_gene_stats(cfg, slide_level);
}

} // namespace emo
