#include "emo/predict.hpp"

#include <algorithm>
#include <cmath>
#include <csignal>
#include <cstring>
#include <fstream>
#include <map>
#include <thread>

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "emo/image_io.hpp"
#include "emo/tsv.hpp"

namespace emo {

std::array<double, kBaselineFeatureCount> baseline_features(const Raster& tile) {
    if (tile.channels != 3) throw InvalidInput("baseline features require RGB tiles");
    const std::size_t n = tile.pixel_count();
    if (n == 0) throw InvalidInput("baseline features of empty tile");
    std::array<double, 3> sum{}, sum2{};
    for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) {
            const double v = tile.data[i * 3 + c] / 255.0;
            sum[c] += v;
            sum2[c] += v * v;
        }
    std::array<double, kBaselineFeatureCount> f{};
    for (int c = 0; c < 3; ++c) {
        const double mean = sum[c] / static_cast<double>(n);
        const double var = std::max(0.0, sum2[c] / static_cast<double>(n) - mean * mean);
        f[c] = mean;
        f[3 + c] = std::sqrt(var);
    }
    return f;
}

namespace {

// Gaussian elimination with partial pivoting; A is k x k row-major.
void solve_linear(std::vector<double>& a, std::vector<double>& b, int k) {
    for (int col = 0; col < k; ++col) {
        int pivot = col;
        for (int r = col + 1; r < k; ++r)
            if (std::abs(a[r * k + col]) > std::abs(a[pivot * k + col])) pivot = r;
        if (std::abs(a[pivot * k + col]) < 1e-12)
            throw InvalidInput("degenerate design matrix in baseline fit");
        if (pivot != col) {
            for (int c = 0; c < k; ++c) std::swap(a[col * k + c], a[pivot * k + c]);
            std::swap(b[col], b[pivot]);
        }
        for (int r = col + 1; r < k; ++r) {
            const double f = a[r * k + col] / a[col * k + col];
            for (int c = col; c < k; ++c) a[r * k + c] -= f * a[col * k + c];
            b[r] -= f * b[col];
        }
    }
    for (int r = k - 1; r >= 0; --r) {
        for (int c = r + 1; c < k; ++c) b[r] -= a[r * k + c] * b[c];
        b[r] /= a[r * k + r];
    }
}

} // namespace

BaselineModel fit_baseline(const std::string& gene_id,
                           std::span<const std::array<double, kBaselineFeatureCount>> features,
                           std::span<const double> labels, double lambda) {
    if (features.size() != labels.size()) throw InvalidInput("fit_baseline: length mismatch");
    const std::size_t n = features.size();
    if (n < 2) throw InvalidInput("fit_baseline: need at least 2 tiles");
    constexpr int k = kBaselineFeatureCount;

    // centre features and labels; ridge on the centred system leaves the
    // intercept unpenalised
    std::array<double, k> fmean{};
    double ymean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (int j = 0; j < k; ++j) fmean[j] += features[i][j];
        ymean += labels[i];
    }
    for (double& v : fmean) v /= static_cast<double>(n);
    ymean /= static_cast<double>(n);

    std::vector<double> ata(k * k, 0.0), aty(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        std::array<double, k> d;
        for (int j = 0; j < k; ++j) d[j] = features[i][j] - fmean[j];
        const double dy = labels[i] - ymean;
        for (int r = 0; r < k; ++r) {
            for (int c = 0; c < k; ++c) ata[r * k + c] += d[r] * d[c];
            aty[r] += d[r] * dy;
        }
    }
    for (int j = 0; j < k; ++j) ata[j * k + j] += lambda;
    solve_linear(ata, aty, k);

    BaselineModel m;
    m.gene_id = gene_id;
    double dot = 0.0;
    for (int j = 0; j < k; ++j) {
        m.weights[j] = aty[j];
        dot += aty[j] * fmean[j];
    }
    m.bias = ymean - dot;
    return m;
}

double predict_baseline(const BaselineModel& model,
                        const std::array<double, kBaselineFeatureCount>& features) {
    double v = model.bias;
    for (int j = 0; j < kBaselineFeatureCount; ++j) v += model.weights[j] * features[j];
    return v;
}

void write_baseline_models_json(const std::filesystem::path& path,
                                std::span<const BaselineModel> models, double lambda) {
    nlohmann::json j;
    j["lambda"] = lambda;
    j["features"] = {"mean_r", "mean_g", "mean_b", "sd_r", "sd_g", "sd_b"};
    j["models"] = nlohmann::json::array();
    for (const auto& m : models) {
        nlohmann::json mj;
        mj["gene_id"] = m.gene_id;
        mj["weights"] = m.weights;
        mj["bias"] = m.bias;
        j["models"].push_back(std::move(mj));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

std::vector<BaselineModel> read_baseline_models_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open " + path.string());
    nlohmann::json j;
    in >> j;
    std::vector<BaselineModel> out;
    for (const auto& mj : j.at("models")) {
        BaselineModel m;
        m.gene_id = mj.at("gene_id").get<std::string>();
        for (int i = 0; i < kBaselineFeatureCount; ++i) m.weights[i] = mj.at("weights").at(i);
        m.bias = mj.at("bias").get<double>();
        out.push_back(std::move(m));
    }
    return out;
}

// ---------------------------------------------------------------------------
// External predictor protocol

std::vector<TilePrediction> run_external_predictor(std::span<const TileManifestRow> tiles,
                                                   const std::string& command) {
    std::signal(SIGPIPE, SIG_IGN); // a dying child surfaces as its exit status instead
    int to_child[2], from_child[2];
    if (pipe(to_child) != 0 || pipe(from_child) != 0)
        throw RuntimeFailure("cannot create pipes for external predictor");

    const pid_t pid = fork();
    if (pid < 0) throw RuntimeFailure("fork failed for external predictor");
    if (pid == 0) {
        dup2(to_child[0], STDIN_FILENO);
        dup2(from_child[1], STDOUT_FILENO);
        close(to_child[0]);
        close(to_child[1]);
        close(from_child[0]);
        close(from_child[1]);
        execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        _exit(127);
    }
    close(to_child[0]);
    close(from_child[1]);

    // writer thread feeds the manifest while the parent drains stdout, so a
    // chatty child cannot deadlock on full pipes
    std::thread writer([&tiles, fd = to_child[1]] {
        std::string buf;
        for (const auto& t : tiles) {
            if (!t.accepted) continue;
            buf = t.slide_id + "\t" + std::to_string(t.x0) + "\t" + std::to_string(t.y0) + "\t" +
                  t.path + "\n";
            std::size_t off = 0;
            while (off < buf.size()) {
                const ssize_t k = write(fd, buf.data() + off, buf.size() - off);
                if (k <= 0) return; // child went away; exit status reported below
                off += static_cast<std::size_t>(k);
            }
        }
        close(fd);
    });

    std::string out;
    char chunk[65536];
    while (true) {
        const ssize_t k = read(from_child[0], chunk, sizeof(chunk));
        if (k <= 0) break;
        out.append(chunk, static_cast<std::size_t>(k));
    }
    close(from_child[0]);
    writer.join();

    int status = 0;
    waitpid(pid, &status, 0);

    std::vector<TilePrediction> preds;
    std::size_t malformed = 0, total = 0;
    std::string last_good = "<none>";
    std::size_t pos = 0;
    while (pos < out.size()) {
        std::size_t nl = out.find('\n', pos);
        if (nl == std::string::npos) nl = out.size();
        const std::string line = out.substr(pos, nl - pos);
        pos = nl + 1;
        if (line.empty()) continue;
        ++total;
        const auto fields = split_tsv_line(line);
        bool ok = fields.size() == 5;
        if (ok) {
            try {
                TilePrediction p;
                p.slide_id = fields[0];
                p.x0 = parse_long(fields[1]);
                p.y0 = parse_long(fields[2]);
                p.gene_id = fields[3];
                p.value = parse_double(fields[4]);
                preds.push_back(std::move(p));
                last_good = line;
            } catch (const InvalidInput&) {
                ok = false;
            }
        }
        if (!ok) ++malformed;
    }

    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
        throw RuntimeFailure("external predictor exited with status " +
                             std::to_string(WIFEXITED(status) ? WEXITSTATUS(status) : -1) +
                             "; last good line: " + last_good);
    if (total > 0 && static_cast<double>(malformed) > 0.01 * static_cast<double>(total))
        throw RuntimeFailure("external predictor emitted " + std::to_string(malformed) + "/" +
                             std::to_string(total) + " malformed lines");
    return preds;
}

// ---------------------------------------------------------------------------
// Aggregation

std::optional<double> aggregate_slide(std::span<const double> tile_values) {
    if (tile_values.empty()) return std::nullopt;
    double sum = 0.0;
    for (double v : tile_values) sum += v;
    return sum / static_cast<double>(tile_values.size());
}

std::optional<double> aggregate_roi(std::span<const TilePrediction> predictions, const Roi& roi,
                                    const SlideMeta& meta, int src_px) {
    if (roi.size_um <= 0.0) throw InvalidInput("ROI size must be positive");
    const double size_px = roi.size_um / meta.mpp;
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& p : predictions) {
        if (p.slide_id != roi.slide_id) continue;
        const double cx = static_cast<double>(p.x0) + 0.5 * src_px;
        const double cy = static_cast<double>(p.y0) + 0.5 * src_px;
        if (cx >= roi.x0 && cx < roi.x0 + size_px && cy >= roi.y0 && cy < roi.y0 + size_px) {
            sum += p.value;
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

std::vector<TilePrediction> composite_probe(std::span<const TilePrediction> predictions,
                                            const std::string& probe_name,
                                            std::span<const std::string> members) {
    if (members.empty()) throw InvalidInput("composite probe needs at least one member");

    struct Key {
        std::string slide_id;
        long x0, y0;
        auto operator<=>(const Key&) const = default;
    };
    std::map<Key, std::pair<double, std::size_t>> acc; // sum, member hits
    std::map<std::string, bool> member_seen;
    for (const auto& m : members) member_seen[m] = false;

    for (const auto& p : predictions) {
        const auto it = member_seen.find(p.gene_id);
        if (it == member_seen.end()) continue;
        it->second = true;
        auto& a = acc[{p.slide_id, p.x0, p.y0}];
        a.first += p.value;
        a.second += 1;
    }
    std::string missing;
    for (const auto& [gene, seen] : member_seen)
        if (!seen) missing += missing.empty() ? gene : ", " + gene;
    if (!missing.empty())
        throw InvalidInput("composite probe '" + probe_name + "' missing members: " + missing);

    std::vector<TilePrediction> out;
    for (const auto& [key, a] : acc) {
        if (a.second != members.size()) continue; // incomplete tile
        out.push_back({key.slide_id, key.x0, key.y0, probe_name, a.first});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Heatmaps

Heatmap heatmap(std::span<const TilePrediction> predictions, const SlideMeta& meta, int level,
                int src_px) {
    if (predictions.empty()) throw InvalidInput("heatmap needs at least one prediction");
    meta.validate();
    if (level < 0 || level >= static_cast<int>(meta.levels.size()))
        throw InvalidInput("heatmap: no such level");
    const auto& lv = meta.levels[level];
    const double f = lv.factor;

    std::vector<double> sum(static_cast<std::size_t>(lv.width) * lv.height, 0.0);
    std::vector<std::uint32_t> cnt(sum.size(), 0);
    double vmin = predictions[0].value, vmax = predictions[0].value;
    for (const auto& p : predictions) {
        vmin = std::min(vmin, p.value);
        vmax = std::max(vmax, p.value);
        const int x0 = std::max(0, static_cast<int>(std::floor(p.x0 / f)));
        const int y0 = std::max(0, static_cast<int>(std::floor(p.y0 / f)));
        const int x1 = std::min(lv.width, static_cast<int>(std::ceil((p.x0 + src_px) / f)));
        const int y1 = std::min(lv.height, static_cast<int>(std::ceil((p.y0 + src_px) / f)));
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * lv.width + x;
                sum[i] += p.value;
                ++cnt[i];
            }
    }

    Heatmap hm;
    hm.min = vmin;
    hm.max = vmax;
    hm.degenerate_range = vmax <= vmin;
    hm.image = Raster(lv.width, lv.height, 1);
    const double scale = hm.degenerate_range ? 0.0 : 255.0 / (vmax - vmin);
    for (std::size_t i = 0; i < sum.size(); ++i) {
        if (!cnt[i]) continue;
        const double v = sum[i] / cnt[i];
        hm.image.data[i] = hm.degenerate_range
                               ? 255
                               : static_cast<std::uint8_t>(std::lround((v - vmin) * scale));
    }
    return hm;
}

void write_heatmap(const std::filesystem::path& png_path, const std::filesystem::path& json_path,
                   const Heatmap& hm) {
    write_png(png_path, hm.image);
    nlohmann::json j;
    j["min"] = hm.min;
    j["max"] = hm.max;
    j["degenerate_range"] = hm.degenerate_range;
    std::ofstream out(json_path, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write " + json_path.string());
    out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Tables

void write_predictions_tsv(const std::filesystem::path& path,
                           std::vector<TilePrediction> predictions) {
    std::sort(predictions.begin(), predictions.end(),
              [](const TilePrediction& a, const TilePrediction& b) {
                  if (a.slide_id != b.slide_id) return a.slide_id < b.slide_id;
                  if (a.y0 != b.y0) return a.y0 < b.y0;
                  if (a.x0 != b.x0) return a.x0 < b.x0;
                  return a.gene_id < b.gene_id;
              });
    TsvWriter w(path, {"slide_id", "x0", "y0", "gene_id", "value"});
    for (const auto& p : predictions)
        w.write_row({p.slide_id, std::to_string(p.x0), std::to_string(p.y0), p.gene_id,
                     fmt_double(p.value)});
}

std::vector<TilePrediction> read_predictions_tsv(const std::filesystem::path& path) {
    const TsvTable t = read_tsv(path);
    const int c_s = t.col("slide_id"), c_x = t.col("x0"), c_y = t.col("y0");
    const int c_g = t.col("gene_id"), c_v = t.col("value");
    std::vector<TilePrediction> out;
    out.reserve(t.rows.size());
    for (const auto& r : t.rows)
        out.push_back({r[c_s], parse_long(r[c_x]), parse_long(r[c_y]), r[c_g],
                       parse_double(r[c_v])});
    return out;
}

void write_slide_level_tsv(const std::filesystem::path& path,
                           std::span<const SlideLevelRow> rows) {
    TsvWriter w(path, {"slide_id", "gene_id", "value"});
    for (const auto& r : rows)
        w.write_row({r.slide_id, r.gene_id, r.value ? fmt_double(*r.value) : "NA"});
}

std::vector<SlideLevelRow> read_slide_level_tsv(const std::filesystem::path& path) {
    const TsvTable t = read_tsv(path);
    const int c_s = t.col("slide_id"), c_g = t.col("gene_id"), c_v = t.col("value");
    std::vector<SlideLevelRow> out;
    for (const auto& r : t.rows) {
        SlideLevelRow row{r[c_s], r[c_g], std::nullopt};
        if (r[c_v] != "NA") row.value = parse_double(r[c_v]);
        out.push_back(std::move(row));
    }
    return out;
}

void write_roi_level_tsv(const std::filesystem::path& path, std::span<const RoiLevelRow> rows) {
    TsvWriter w(path, {"roi_id", "slide_id", "gene_id", "value"});
    for (const auto& r : rows)
        w.write_row({r.roi_id, r.slide_id, r.gene_id, r.value ? fmt_double(*r.value) : "NA"});
}

std::vector<RoiLevelRow> read_roi_level_tsv(const std::filesystem::path& path) {
    const TsvTable t = read_tsv(path);
    const int c_r = t.col("roi_id"), c_s = t.col("slide_id"), c_g = t.col("gene_id");
    const int c_v = t.col("value");
    std::vector<RoiLevelRow> out;
    for (const auto& r : t.rows) {
        RoiLevelRow row{r[c_r], r[c_s], r[c_g], std::nullopt};
        if (r[c_v] != "NA") row.value = parse_double(r[c_v]);
        out.push_back(std::move(row));
    }
    return out;
}

std::vector<Roi> read_rois_tsv(const std::filesystem::path& path) {
    const TsvTable t = read_tsv(path);
    const int c_r = t.col("roi_id"), c_s = t.col("slide_id"), c_x = t.col("x0");
    const int c_y = t.col("y0"), c_sz = t.col("size_um");
    std::vector<Roi> out;
    for (const auto& r : t.rows)
        out.push_back({r[c_r], r[c_s], parse_long(r[c_x]), parse_long(r[c_y]),
                       parse_double(r[c_sz])});
    return out;
}

void write_rois_tsv(const std::filesystem::path& path, std::span<const Roi> rois) {
    TsvWriter w(path, {"roi_id", "slide_id", "x0", "y0", "size_um"});
    for (const auto& r : rois)
        w.write_row({r.roi_id, r.slide_id, std::to_string(r.x0), std::to_string(r.y0),
                     fmt_double(r.size_um)});
}

} // namespace emo
