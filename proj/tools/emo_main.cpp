#include <iostream>
#include <set>
#include <string>

#include <CLI11.hpp>

#include "emo/image_io.hpp"
#include "emo/parallel.hpp"
#include "emo/pipeline.hpp"
#include "emo/predict.hpp"
#include "emo/synth.hpp"
#include "emo/tsv.hpp"

using namespace emo;

namespace {

// Config file first, then explicit flags on top.
struct CommonOpts {
    std::string config;
    std::string slides_dir, out_dir, annotations, expression, samples;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int threads = 0;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--config", config, "pipeline config JSON");
        cmd->add_option("--slides", slides_dir, "slides directory (pyramid dirs)");
        cmd->add_option("--out", out_dir, "output directory");
        cmd->add_option("--annotations", annotations, "annotation polygons JSON");
        cmd->add_option("--expression", expression, "expression TSV");
        cmd->add_option("--samples", samples, "sample manifest TSV");
        cmd->add_option("--seed", seed, "base seed")->each([this](const std::string&) {
            seed_set = true;
        });
        cmd->add_option("--threads", threads, "worker threads (0 = default, env EMO_THREADS)");
    }

    PipelineConfig resolve() const {
        PipelineConfig cfg;
        if (!config.empty()) cfg = load_config(config);
        if (!slides_dir.empty()) cfg.slides_dir = slides_dir;
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (!annotations.empty()) cfg.annotations = annotations;
        if (!expression.empty()) cfg.expression = expression;
        if (!samples.empty()) cfg.samples = samples;
        if (seed_set) cfg.seed = seed;
        if (threads > 0) cfg.threads = threads;
        if (cfg.out_dir.empty()) throw InvalidInput("--out (or config out_dir) is required");
        std::filesystem::create_directories(cfg.out_dir);
        init_threads_from_env();
        if (cfg.threads > 0) set_threads(cfg.threads);
        return cfg;
    }
};

void add_tile_flags(CLI::App* cmd, TileSpec& tile, bool& tile_touched) {
    auto touch = [&tile_touched](const std::string&) { tile_touched = true; };
    cmd->add_option("--tile-um", tile.physical_size_um, "tile physical size in um")->each(touch);
    cmd->add_option("--tile-px", tile.output_px, "tile output size in pixels")->each(touch);
    cmd->add_option("--overlap", tile.overlap_fraction, "tile overlap fraction")->each(touch);
    cmd->add_option("--tissue-min", tile.tissue_min_fraction, "minimum tissue fraction (strict)")
        ->each(touch);
    cmd->add_option("--blur-min", tile.blur_variance_min, "minimum Laplacian variance")
        ->each(touch);
    cmd->add_option("--jpeg-quality", tile.jpeg_quality, "tile JPEG quality")->each(touch);
    cmd->add_option("--src-px-exact", tile.src_px_exact,
                    "pin the level-0 read size in pixels (0 = derive from mpp)")
        ->each(touch);
}

int run_baseline_serve(const std::string& models_path) {
    const auto models = read_baseline_models_json(models_path);
    std::string line;
    while (std::getline(std::cin, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_tsv_line(line);
        if (fields.size() != 4) throw InvalidInput("expected 4 fields, got: " + line);
        const Raster tile = read_jpeg(fields[3]);
        const auto feats = baseline_features(tile);
        for (const auto& m : models)
            std::cout << fields[0] << '\t' << fields[1] << '\t' << fields[2] << '\t' << m.gene_id
                      << '\t' << fmt_double(predict_baseline(m, feats)) << '\n';
    }
    std::cout.flush();
    return 0;
}

// fit baseline models on the train split and persist them
void fit_and_save_models(const PipelineConfig& cfg, const std::string& path) {
    const auto rows = read_tile_manifest(cfg.manifest_path());
    const auto expr = read_expression_tsv(cfg.expression);
    const auto samples = read_sample_manifest(cfg.samples);
    std::set<std::string> train;
    for (const auto& s : samples)
        if (s.split == "train") train.insert(s.sample_id);

    std::vector<std::array<double, kBaselineFeatureCount>> feats;
    std::vector<std::string> feat_slides;
    for (const auto& r : rows) {
        if (!r.accepted || !train.count(r.slide_id)) continue;
        const Raster t =
            read_jpeg(cfg.norm_tiles_dir() / std::filesystem::path(r.path).filename());
        feats.push_back(baseline_features(t));
        feat_slides.push_back(r.slide_id);
    }
    std::vector<BaselineModel> models;
    for (std::size_t g = 0; g < expr.genes.size(); ++g) {
        std::vector<std::array<double, kBaselineFeatureCount>> ff;
        std::vector<double> yy;
        for (std::size_t k = 0; k < feats.size(); ++k) {
            const int s = expr.sample_index(feat_slides[k]);
            if (s < 0) continue;
            ff.push_back(feats[k]);
            yy.push_back(expr.at(g, static_cast<std::size_t>(s)));
        }
        models.push_back(fit_baseline(expr.genes[g], ff, yy, cfg.predictor.lambda));
    }
    write_baseline_models_json(path, models, cfg.predictor.lambda);
}

// predict with previously saved models
void predict_from_models(const PipelineConfig& cfg, const std::string& models_path) {
    const auto rows = read_tile_manifest(cfg.manifest_path());
    const auto models = read_baseline_models_json(models_path);
    std::vector<TilePrediction> preds;
    for (const auto& r : rows) {
        if (!r.accepted) continue;
        const Raster t =
            read_jpeg(cfg.norm_tiles_dir() / std::filesystem::path(r.path).filename());
        const auto f = baseline_features(t);
        for (const auto& m : models)
            preds.push_back({r.slide_id, r.x0, r.y0, m.gene_id, predict_baseline(m, f)});
    }
    write_predictions_tsv(cfg.predictions_path(), std::move(preds));
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"expression-morphology batch pipeline"};
    app.require_subcommand(1);

    CommonOpts common;
    TileSpec tile_flags;
    bool tile_touched = false;

    auto* synth = app.add_subcommand("synth-fixture", "generate the synthetic dataset");
    SynthParams sp;
    std::string synth_out;
    synth->add_option("--out", synth_out, "fixture directory")->required();
    synth->add_option("--seed", sp.seed, "generator seed");
    synth->add_option("--slides-train", sp.n_train, "training slides");
    synth->add_option("--slides-val", sp.n_val, "validation slides");
    synth->add_option("--genes", sp.n_genes, "total genes");
    synth->add_option("--linked", sp.n_linked, "colour-linked genes");
    synth->add_option("--mpp", sp.mpp, "rendered um per pixel");
    synth->add_option("--slide-w-um", sp.slide_w_um, "slide width in um");
    synth->add_option("--slide-h-um", sp.slide_h_um, "slide height in um");
    bool no_st = false;
    synth->add_flag("--no-st", no_st, "skip ROI/ST-style outputs");

    auto* segment = app.add_subcommand("segment", "tissue + annotation masks per slide");
    common.add_to(segment);

    auto* tile = app.add_subcommand("tile", "grid, extraction, QC, tile JPEGs + manifest");
    common.add_to(tile);
    add_tile_flags(tile, tile_flags, tile_touched);

    auto* stain_est = app.add_subcommand("stain-estimate", "slide + global stain references");
    common.add_to(stain_est);
    int tiles_per_slide = 0, global_tiles = 0;
    stain_est->add_option("--tiles-per-slide", tiles_per_slide, "sampled tiles per slide");
    stain_est->add_option("--global-tiles", global_tiles, "pooled tiles for the global profile");

    auto* stain_apply = app.add_subcommand("stain-apply", "normalise accepted tiles");
    common.add_to(stain_apply);

    auto* predict = app.add_subcommand("predict", "per-gene tile predictions");
    common.add_to(predict);
    std::string predictor_mode, predictor_cmd, save_models, load_models;
    double lambda = -1.0;
    predict->add_option("--mode", predictor_mode, "baseline | external");
    predict->add_option("--cmd", predictor_cmd, "external predictor command");
    predict->add_option("--lambda", lambda, "baseline ridge penalty");
    predict->add_option("--save-models", save_models, "fit and persist baseline models JSON");
    predict->add_option("--models", load_models, "predict with saved baseline models JSON");
    std::vector<std::string> composites;
    predict->add_option("--composite", composites,
                        "synthetic probe as name:gene1,gene2,... (per-tile sum); repeatable");

    auto* aggregate = app.add_subcommand("aggregate", "slide-level (and ROI-level) means");
    common.add_to(aggregate);
    std::string rois_tsv;
    aggregate->add_option("--rois", rois_tsv, "ROI definition TSV");

    auto* stats = app.add_subcommand("stats", "per-gene correlation statistics");
    common.add_to(stats);
    std::string split;
    stats->add_option("--split", split, "sample split to evaluate (default validation)");
    bool exact_p = false;
    stats->add_flag("--exact-p", exact_p, "exact permutation p-values when n <= 9");

    auto* select = app.add_subcommand("select", "threshold-based gene selection");
    common.add_to(select);

    auto* lme = app.add_subcommand("lme", "mixed-model validation of spatial predictions");
    common.add_to(lme);
    std::string st_tsv, neg_tsv, lme_rois;
    lme->add_option("--st", st_tsv, "ST counts TSV")->required();
    lme->add_option("--neg", neg_tsv, "negative controls TSV")->required();
    lme->add_option("--rois", lme_rois, "ROI definition TSV");

    auto* heatmap = app.add_subcommand("heatmap", "per-slide per-gene prediction heatmap");
    common.add_to(heatmap);
    std::string hm_slide, hm_gene;
    int hm_level = 1;
    heatmap->add_option("--slide", hm_slide, "slide id")->required();
    heatmap->add_option("--gene", hm_gene, "gene id")->required();
    heatmap->add_option("--level", hm_level, "pyramid level to paint");

    auto* pipeline = app.add_subcommand("pipeline", "all stages in sequence");
    common.add_to(pipeline);
    add_tile_flags(pipeline, tile_flags, tile_touched);
    std::string pipe_rois;
    pipeline->add_option("--rois", pipe_rois, "ROI definition TSV");

    auto* serve =
        app.add_subcommand("baseline-serve", "external-predictor protocol over saved models");
    std::string serve_models;
    serve->add_option("--models", serve_models, "baseline models JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1; // bad flags are validation errors
    }

    try {
        if (synth->parsed()) {
            sp.with_st = !no_st;
            synth_fixture(synth_out, sp);
            return 0;
        }
        if (serve->parsed()) return run_baseline_serve(serve_models);

        PipelineConfig cfg = common.resolve();
        if (tile_touched) cfg.tile = tile_flags;

        if (segment->parsed()) {
            stage_segment(cfg);
        } else if (tile->parsed()) {
            stage_tile(cfg);
        } else if (stain_est->parsed()) {
            if (tiles_per_slide > 0) cfg.sample_plan.tiles_per_slide = tiles_per_slide;
            if (global_tiles > 0) cfg.sample_plan.global_tiles = global_tiles;
            stage_stain_estimate(cfg);
        } else if (stain_apply->parsed()) {
            stage_stain_apply(cfg);
        } else if (predict->parsed()) {
            if (!predictor_mode.empty()) cfg.predictor.mode = predictor_mode;
            if (!predictor_cmd.empty()) {
                cfg.predictor.command = predictor_cmd;
                if (predictor_mode.empty()) cfg.predictor.mode = "external";
            }
            if (lambda >= 0.0) cfg.predictor.lambda = lambda;
            if (!load_models.empty()) {
                predict_from_models(cfg, load_models);
            } else if (!save_models.empty()) {
                fit_and_save_models(cfg, save_models);
                predict_from_models(cfg, save_models);
            } else {
                stage_predict(cfg, composites);
            }
        } else if (aggregate->parsed()) {
            stage_aggregate(cfg, rois_tsv);
        } else if (stats->parsed()) {
            if (!split.empty()) cfg.stats.split = split;
            if (exact_p) cfg.stats.exact_p_small_n = true;
            stage_stats(cfg);
        } else if (select->parsed()) {
            stage_select(cfg);
        } else if (lme->parsed()) {
            stage_lme(cfg, st_tsv, neg_tsv, lme_rois);
        } else if (heatmap->parsed()) {
            stage_heatmap(cfg, hm_slide, hm_gene, hm_level);
        } else if (pipeline->parsed()) {
            stage_segment(cfg);
            stage_tile(cfg);
            stage_stain_estimate(cfg);
            stage_stain_apply(cfg);
            stage_predict(cfg);
            stage_aggregate(cfg, pipe_rois);
            stage_stats(cfg);
            stage_select(cfg);
        }
        return 0;
    } catch (const InvalidInput& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
