#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <string>

#include <sys/wait.h>

#include "emo/image_io.hpp"
#include "emo/pipeline.hpp"
#include "emo/predict.hpp"
#include "emo/stats.hpp"
#include "emo/synth.hpp"
#include "emo/tiler.hpp"
#include "emo/tsv.hpp"

using namespace emo;

namespace {

const std::filesystem::path kRoot = std::filesystem::temp_directory_path() / "emo_cli_tests";

int run_cli(const std::string& args) {
    const std::string cmd = std::string(EMO_CLI_PATH) + " " + args + " >> " +
                            (kRoot / "cli.log").string() + " 2>&1";
    return std::system(cmd.c_str());
}

int exit_code(int system_status) { return WEXITSTATUS(system_status); }

std::string common_flags(const std::filesystem::path& fx, const std::filesystem::path& out) {
    return "--slides " + (fx / "slides").string() + " --out " + out.string() +
           " --annotations " + (fx / "annotations.json").string() + " --expression " +
           (fx / "expression.tsv").string() + " --samples " + (fx / "samples.tsv").string() +
           " --seed 7";
}

const std::string kTileFlags = " --tile-um 271 --tile-px 300";

std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// one shared fixture for the whole binary
const std::filesystem::path& fixture() {
    static std::filesystem::path fx = [] {
        std::filesystem::remove_all(kRoot);
        std::filesystem::create_directories(kRoot);
        SynthParams p;
        p.seed = 11;
        p.n_train = 8;
        p.n_val = 4;
        p.n_genes = 6;
        p.n_linked = 2;
        p.mpp = 0.904;
        synth_fixture(kRoot / "fx", p);
        return kRoot / "fx";
    }();
    return fx;
}

PipelineConfig fixture_config(const std::filesystem::path& out) {
    PipelineConfig cfg;
    cfg.seed = 7;
    cfg.slides_dir = fixture() / "slides";
    cfg.out_dir = out;
    cfg.annotations = fixture() / "annotations.json";
    cfg.expression = fixture() / "expression.tsv";
    cfg.samples = fixture() / "samples.tsv";
    cfg.tile.output_px = 300;
    cfg.sample_plan.tiles_per_slide = 6;
    cfg.sample_plan.global_tiles = 40;
    return cfg;
}

} // namespace

TEST_CASE("tile stage: deterministic row count from the fixture grid") {
    const auto out = kRoot / "tile_count";
    REQUIRE(exit_code(run_cli("segment " + common_flags(fixture(), out))) == 0);
    REQUIRE(exit_code(run_cli("tile " + common_flags(fixture(), out) + kTileFlags)) == 0);
    const auto rows = read_tile_manifest(out / "tiles_manifest.tsv");
    // 610x457 px at 0.904 um/px: src 300, stride 150 -> 3 x 2 origins per slide
    CHECK(rows.size() == 12 * 6);
    std::size_t accepted = 0;
    for (const auto& r : rows) accepted += r.accepted;
    CHECK(accepted > 0);
    CHECK(accepted < rows.size());
}

TEST_CASE("running a stage twice is byte-identical") {
    const auto out = kRoot / "idempotent";
    REQUIRE(exit_code(run_cli("segment " + common_flags(fixture(), out))) == 0);
    REQUIRE(exit_code(run_cli("tile " + common_flags(fixture(), out) + kTileFlags)) == 0);
    const std::string first = file_bytes(out / "tiles_manifest.tsv");
    REQUIRE(exit_code(run_cli("tile " + common_flags(fixture(), out) + kTileFlags)) == 0);
    CHECK(file_bytes(out / "tiles_manifest.tsv") == first);
}

TEST_CASE("missing upstream artifact exits 1 and names the path") {
    const auto out = kRoot / "missing_upstream";
    std::filesystem::create_directories(out);
    // stain-estimate without a tile manifest
    CHECK(exit_code(run_cli("stain-estimate " + common_flags(fixture(), out))) == 1);
    // tile without masks
    CHECK(exit_code(run_cli("tile " + common_flags(fixture(), out) + kTileFlags)) == 1);
}

TEST_CASE("config file drives the pipeline; unknown keys rejected") {
    const auto out = kRoot / "config_run";
    std::filesystem::create_directories(out);
    PipelineConfig cfg = fixture_config(out);
    save_config(out / "config.json", cfg);
    CHECK(exit_code(run_cli("segment --config " + (out / "config.json").string())) == 0);
    CHECK(std::filesystem::exists(out / "masks"));

    std::ofstream bad(out / "bad.json");
    bad << R"({"seed": 1, "not_a_key": true})";
    bad.close();
    CHECK(exit_code(run_cli("segment --config " + (out / "bad.json").string())) == 1);

    // loading back what save_config wrote round-trips the fields
    const PipelineConfig loaded = load_config(out / "config.json");
    CHECK(loaded.seed == cfg.seed);
    CHECK(loaded.tile.output_px == cfg.tile.output_px);
    CHECK(loaded.sample_plan.global_tiles == cfg.sample_plan.global_tiles);
}

TEST_CASE("stats on predictions equal to the expression table gives rho 1") {
    const auto out = kRoot / "stats_identity";
    std::filesystem::create_directories(out);
    const ExpressionMatrix expr = read_expression_tsv(fixture() / "expression.tsv");
    std::vector<SlideLevelRow> rows;
    for (std::size_t g = 0; g < expr.genes.size(); ++g)
        for (std::size_t s = 0; s < expr.samples.size(); ++s)
            rows.push_back({expr.samples[s], expr.genes[g], expr.at(g, s)});
    write_slide_level_tsv(out / "slide_level.tsv", rows);
    REQUIRE(exit_code(run_cli("stats " + common_flags(fixture(), out))) == 0);
    for (const auto& st : read_gene_stats_tsv(out / "gene_stats.tsv")) {
        CHECK(st.rho == 1.0);
        CHECK(st.p == 0.0);
        CHECK(st.r2_pred == 1.0);
    }
}

TEST_CASE("staged pipeline equals the in-process run on the final gene stats") {
    const auto out = kRoot / "composition";
    const std::string flags = common_flags(fixture(), out) +
                              " --tiles-per-slide 6 --global-tiles 40";
    REQUIRE(exit_code(run_cli("segment " + common_flags(fixture(), out))) == 0);
    REQUIRE(exit_code(run_cli("tile " + common_flags(fixture(), out) + kTileFlags)) == 0);
    REQUIRE(exit_code(run_cli("stain-estimate " + flags)) == 0);
    REQUIRE(exit_code(run_cli("stain-apply " + common_flags(fixture(), out))) == 0);
    REQUIRE(exit_code(run_cli("predict " + common_flags(fixture(), out))) == 0);
    REQUIRE(exit_code(run_cli("aggregate " + common_flags(fixture(), out))) == 0);
    REQUIRE(exit_code(run_cli("stats " + common_flags(fixture(), out))) == 0);
    const auto staged = read_gene_stats_tsv(out / "gene_stats.tsv");

    const auto inproc = run_pipeline_inprocess(fixture_config(kRoot / "composition_mem"));
    REQUIRE(staged.size() == inproc.size());
    for (std::size_t i = 0; i < staged.size(); ++i) {
        CHECK(staged[i].gene_id == inproc[i].gene_id);
        CHECK(staged[i].n == inproc[i].n);
        CHECK(staged[i].rho == inproc[i].rho);
        CHECK(staged[i].p == inproc[i].p);
        CHECK(staged[i].p_adj_bh == inproc[i].p_adj_bh);
        CHECK(staged[i].p_adj_bonf == inproc[i].p_adj_bonf);
        CHECK(staged[i].r2_pred == inproc[i].r2_pred);
        CHECK(staged[i].selected == inproc[i].selected);
    }
}

TEST_CASE("baseline exported as an external command gives byte-identical predictions") {
    const auto out = kRoot / "composition"; // reuse the staged artifacts
    REQUIRE(std::filesystem::exists(out / "tiles_manifest.tsv"));
    REQUIRE(exit_code(run_cli("predict " + common_flags(fixture(), out) + " --save-models " +
                              (out / "models.json").string())) == 0);
    const std::string in_process = file_bytes(out / "predictions.tsv");

    const std::string serve_cmd = std::string("'") + EMO_CLI_PATH + " baseline-serve --models " +
                                  (out / "models.json").string() + "'";
    REQUIRE(exit_code(run_cli("predict " + common_flags(fixture(), out) + " --cmd " +
                              serve_cmd)) == 0);
    CHECK(file_bytes(out / "predictions.tsv") == in_process);
}

TEST_CASE("lme and heatmap stages run on the fixture outputs") {
    const auto out = kRoot / "composition";
    REQUIRE(exit_code(run_cli("aggregate " + common_flags(fixture(), out) + " --rois " +
                              (fixture() / "rois.tsv").string())) == 0);
    REQUIRE(exit_code(run_cli("lme " + common_flags(fixture(), out) + " --st " +
                              (fixture() / "st_counts.tsv").string() + " --neg " +
                              (fixture() / "neg_controls.tsv").string() + " --rois " +
                              (fixture() / "rois.tsv").string())) == 0);
    CHECK(std::filesystem::exists(out / "lme.tsv"));
    CHECK(std::filesystem::exists(out / "slide_rho.tsv"));
    CHECK(std::filesystem::exists(out / "slide_rho_summary.tsv"));

    REQUIRE(exit_code(run_cli("heatmap " + common_flags(fixture(), out) +
                              " --slide S000 --gene G000 --level 1")) == 0);
    CHECK(std::filesystem::exists(out / "heatmap_S000_G000.png"));
    const Raster hm = read_png(out / "heatmap_S000_G000.png");
    CHECK(hm.channels == 1);

    REQUIRE(exit_code(run_cli("select " + common_flags(fixture(), out))) == 0);
    CHECK(std::filesystem::exists(out / "selected.tsv"));
}

TEST_CASE("fixture truth: colour-linked gene recovered, noise gene not selected") {
    // on the shared fixture run, linked genes should dominate the stats table
    const auto stats = read_gene_stats_tsv(kRoot / "composition" / "gene_stats.tsv");
    REQUIRE(stats.size() == 6);
    int linked_sig = 0;
    for (const auto& s : stats)
        if ((s.gene_id == "G000" || s.gene_id == "G001") && s.p_adj_bh < 0.05) ++linked_sig;
    CHECK(linked_sig == 2);
    for (const auto& s : stats)
        if (s.gene_id == "G000" || s.gene_id == "G001") CHECK(s.rho >= 0.9);
}
