#include "protopart/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "protopart/errors.hpp"
#include "protopart/hash.hpp"

namespace fs = std::filesystem;

namespace protopart {

// --- metrics ------------------------------------------------------------------

EvalReport report_from_confusion(std::vector<std::vector<long>> confusion) {
    const std::size_t k = confusion.size();
    EvalReport r;
    std::vector<std::string> empty;
    for (std::size_t t = 0; t < k; ++t) {
        if (confusion[t].size() != k) throw ValidationError("confusion matrix must be square");
        const long n = std::accumulate(confusion[t].begin(), confusion[t].end(), 0L);
        r.n_per_class.push_back(n);
        if (n == 0) {
            empty.push_back("class " + class_name(static_cast<int>(t)) + " has no samples");
            r.recall.push_back(0.0);
        } else {
            r.recall.push_back(100.0 * static_cast<double>(confusion[t][t]) / static_cast<double>(n));
        }
    }
    if (!empty.empty()) throw ValidationError("balanced accuracy is undefined", empty);
    r.ba = std::accumulate(r.recall.begin(), r.recall.end(), 0.0) / static_cast<double>(k);
    r.confusion = std::move(confusion);
    return r;
}

EvalReport compute_report(std::span<const int> labels, std::span<const int> predicted, int num_classes) {
    if (labels.size() != predicted.size()) throw std::invalid_argument("labels and predictions differ in length");
    std::vector<std::vector<long>> confusion(num_classes, std::vector<long>(num_classes, 0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes || predicted[i] < 0 || predicted[i] >= num_classes) {
            throw ValidationError("class index out of range at sample " + std::to_string(i));
        }
        ++confusion[labels[i]][predicted[i]];
    }
    return report_from_confusion(std::move(confusion));
}

void to_json(nlohmann::json& j, const EvalReport& r) {
    j = nlohmann::json::object();
    j["ba"] = r.ba;
    nlohmann::json recall = nlohmann::json::object();
    nlohmann::json counts = nlohmann::json::object();
    for (std::size_t k = 0; k < r.recall.size(); ++k) {
        recall[class_name(static_cast<int>(k))] = r.recall[k];
        counts[class_name(static_cast<int>(k))] = r.n_per_class[k];
    }
    j["recall"] = recall;
    j["n_per_class"] = counts;
    j["confusion"] = r.confusion;
    j["checkpoint_id"] = r.checkpoint_id;
    j["dataset"] = r.dataset;
}

std::string format_report(const EvalReport& r) {
    std::ostringstream out;
    char line[160];
    std::snprintf(line, sizeof(line), "%-8s %8s %10s\n", "class", "n", "recall %");
    out << line;
    for (std::size_t k = 0; k < r.recall.size(); ++k) {
        std::snprintf(line, sizeof(line), "%-8s %8ld %10.2f\n", class_name(static_cast<int>(k)).c_str(),
                      r.n_per_class[k], r.recall[k]);
        out << line;
    }
    std::snprintf(line, sizeof(line), "%-8s %8s %10.2f\n", "BA", "", r.ba);
    out << line;
    out << "confusion (rows = true, cols = predicted):\n";
    for (const auto& row : r.confusion) {
        for (long v : row) {
            std::snprintf(line, sizeof(line), "%8ld", v);
            out << line;
        }
        out << "\n";
    }
    return out.str();
}

// --- embedding cache ------------------------------------------------------------

FeatureMap cached_embed(const ModelState& model, const InputImage& image, const std::string& checkpoint_id,
                        const std::string& image_path) {
    const char* dir = std::getenv("PROTOPART_CACHE");
    if (dir == nullptr || *dir == '\0' || checkpoint_id.empty() || image_path.empty()) return embed(model, image);

    std::error_code ec;
    const auto size = fs::file_size(image_path, ec);
    const auto mtime = fs::last_write_time(image_path, ec).time_since_epoch().count();
    const std::string key = checkpoint_id + "|" + fs::absolute(image_path).string() + "|" + std::to_string(size) +
                            "|" + std::to_string(mtime);
    const fs::path file = fs::path(dir) / (to_hex(fnv1a(key)) + ".fmap");

    if (std::ifstream in(file, std::ios::binary); in) {
        int shape[3] = {0, 0, 0};
        in.read(reinterpret_cast<char*>(shape), sizeof(shape));
        if (in && shape[0] > 0 && shape[1] > 0 && shape[2] > 0) {
            FeatureMap z(shape[0], shape[1], shape[2]);
            in.read(reinterpret_cast<char*>(z.values.data()), static_cast<std::streamsize>(z.values.size() * sizeof(double)));
            if (in) return z;
        }
    }
    FeatureMap z = embed(model, image);
    fs::create_directories(dir, ec);
    const fs::path tmp = file.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        const int shape[3] = {z.height, z.width, z.channels};
        out.write(reinterpret_cast<const char*>(shape), sizeof(shape));
        out.write(reinterpret_cast<const char*>(z.values.data()), static_cast<std::streamsize>(z.values.size() * sizeof(double)));
    }
    fs::rename(tmp, file, ec);  // a failed cache write only costs a recomputation
    return z;
}

Evaluation evaluate(const ModelState& model, const Manifest& manifest, const std::string& checkpoint_id) {
    Evaluation ev;
    std::vector<int> labels, preds;
    for (const auto& row : manifest.rows) {
        const InputImage img = load_image(row.image_path, row.image_id);
        const ForwardResult fr = forward_features(model, cached_embed(model, img, checkpoint_id, row.image_path));
        Prediction p{row.image_id, row.label, predicted_class(fr.logits.scores), fr.logits.scores};
        labels.push_back(p.label);
        preds.push_back(p.predicted);
        ev.predictions.push_back(std::move(p));
    }
    ev.report = compute_report(labels, preds, model.config.num_classes);
    ev.report.checkpoint_id = checkpoint_id;
    ev.report.dataset = manifest.source;
    return ev;
}

// --- explanations -------------------------------------------------------------

Explanation explain(const ModelState& model, const InputImage& image, int top_n) {
    const int m = model.prototypes.count();
    if (top_n < 1 || top_n > m) {
        throw ConfigError("--top must be in [1, " + std::to_string(m) + "], got " + std::to_string(top_n));
    }
    const ForwardResult fr = forward(model, image);
    Explanation e;
    e.image_id = image.id;
    e.scores = fr.logits.scores;
    e.predicted = predicted_class(e.scores);
    const auto& sims = fr.logits.similarity_vector;
    for (int j : top_k_indices(sims, top_n)) {
        ExplanationEntry x;
        x.prototype = j;
        x.class_id = model.prototypes.classes[j];
        x.score = sims[j];
        x.weight = model.head.at(e.predicted, j);
        x.points = x.score * x.weight;
        const int arg = top_k_indices(fr.activation_maps[j].values, 1)[0];
        x.overlay = cell_box(model.config, arg / fr.features.width, arg % fr.features.width);
        x.source = model.prototypes.sources[j];
        if (x.source) x.source_box = cell_box(model.config, x.source->row, x.source->col);
        e.entries.push_back(std::move(x));
    }
    return e;
}

namespace {

nlohmann::json box_json(const PixelBox& b) { return {b.x, b.y, b.w, b.h}; }

}  // namespace

void to_json(nlohmann::json& j, const Explanation& e) {
    j = {{"image", e.image_id}, {"predicted", e.predicted}, {"predicted_name", class_name(e.predicted)},
         {"scores", e.scores}};
    auto& arr = j["prototypes"] = nlohmann::json::array();
    for (const auto& x : e.entries) {
        nlohmann::json item = {{"prototype", x.prototype}, {"class", x.class_id}, {"score", x.score},
                               {"weight", x.weight},       {"points", x.points},  {"overlay_bbox", box_json(x.overlay)}};
        if (x.source) {
            item["source"] = {{"image", x.source->image_id}, {"row", x.source->row}, {"col", x.source->col},
                              {"bbox", box_json(*x.source_box)}};
        } else {
            item["source"] = nullptr;
        }
        arr.push_back(std::move(item));
    }
}

namespace {

// 3x5 glyphs for the points column, one row per string, '#' = ink.
const char* glyph(char ch) {
    switch (ch) {
        case '0': return "####.##.##.####";
        case '1': return ".#.##..#..#.###";
        case '2': return "###..#####..###";
        case '3': return "###..####..####";
        case '4': return "#.##.####..#..#";
        case '5': return "####..###..####";
        case '6': return "####..####.####";
        case '7': return "###..#..#..#..#";
        case '8': return "####.#####.####";
        case '9': return "####.####..####";
        case '-': return "......###......";
        case '.': return ".............#.";
        default: return "...............";
    }
}

void put_pixel(Raster& r, int x, int y, std::uint8_t cr, std::uint8_t cg, std::uint8_t cb) {
    if (x < 0 || y < 0 || x >= r.width || y >= r.height) return;
    auto* p = r.at(x, y);
    p[0] = cr;
    p[1] = cg;
    p[2] = cb;
}

void draw_text(Raster& r, int x, int y, const std::string& text, int scale) {
    for (char ch : text) {
        const char* g = glyph(ch);
        for (int gy = 0; gy < 5; ++gy) {
            for (int gx = 0; gx < 3; ++gx) {
                if (g[gy * 3 + gx] != '#') continue;
                for (int sy = 0; sy < scale; ++sy) {
                    for (int sx = 0; sx < scale; ++sx) put_pixel(r, x + gx * scale + sx, y + gy * scale + sy, 0, 0, 0);
                }
            }
        }
        x += 4 * scale;
    }
}

void draw_box(Raster& r, int x0, int y0, int w, int h, int thickness) {
    for (int t = 0; t < thickness; ++t) {
        for (int x = x0; x < x0 + w; ++x) {
            put_pixel(r, x, y0 + t, 255, 220, 0);
            put_pixel(r, x, y0 + h - 1 - t, 255, 220, 0);
        }
        for (int y = y0; y < y0 + h; ++y) {
            put_pixel(r, x0 + t, y, 255, 220, 0);
            put_pixel(r, x0 + w - 1 - t, y, 255, 220, 0);
        }
    }
}

// Nearest-neighbor copy of src region [sx, sy, sw, sh] into dst at (dx, dy) with side `side`.
void blit(Raster& dst, int dx, int dy, int side, const Raster& src, int sx, int sy, int sw, int sh) {
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            const auto* p = src.at(sx + x * sw / side, sy + y * sh / side);
            put_pixel(dst, dx + x, dy + y, p[0], p[1], p[2]);
        }
    }
}

}  // namespace

Raster render_explanation(const ModelState& model, const InputImage& image, const Explanation& e) {
    constexpr int side = 112;
    constexpr int gap = 8;
    const int rows = static_cast<int>(e.entries.size());
    Raster panel(4 * side + 5 * gap, rows * (side + gap) + gap, 3, 255);
    const Raster test = image_to_raster(image.pixels);
    const int n = image.pixels.height;
    const double scale = static_cast<double>(side) / n;

    const ForwardResult fr = forward(model, image);
    double max_points = 1e-12;
    for (const auto& x : e.entries) max_points = std::max(max_points, std::abs(x.points));

    for (int i = 0; i < rows; ++i) {
        const auto& x = e.entries[i];
        const int y0 = gap + i * (side + gap);
        int x0 = gap;

        blit(panel, x0, y0, side, test, 0, 0, test.width, test.height);
        draw_box(panel, x0 + static_cast<int>(x.overlay.x * scale), y0 + static_cast<int>(x.overlay.y * scale),
                 std::max(2, static_cast<int>(x.overlay.w * scale)), std::max(2, static_cast<int>(x.overlay.h * scale)), 2);
        x0 += side + gap;

        const Grid pam = scale_up(fr.activation_maps[x.prototype], n, n);
        const auto [lo, hi] = std::minmax_element(pam.values.begin(), pam.values.end());
        const double range = *hi - *lo > 0.0 ? *hi - *lo : 1.0;
        for (int y = 0; y < side; ++y) {
            for (int xx = 0; xx < side; ++xx) {
                const int sx = xx * n / side, sy = y * n / side;
                const double a = (pam.at(sy, sx) - *lo) / range;
                const auto* p = test.at(sx, sy);
                put_pixel(panel, x0 + xx, y0 + y, static_cast<std::uint8_t>(0.5 * p[0] + 127.0 * a),
                          static_cast<std::uint8_t>(0.5 * p[1]), static_cast<std::uint8_t>(0.5 * p[2] + 127.0 * (1 - a)));
            }
        }
        x0 += side + gap;

        bool drawn = false;
        if (x.source && x.source_box && !x.source->image_path.empty() && fs::exists(x.source->image_path)) {
            try {
                const Raster src = to_rgb(read_png(x.source->image_path));
                const auto& b = *x.source_box;
                if (b.x + b.w <= src.width && b.y + b.h <= src.height) {
                    blit(panel, x0, y0, side, src, b.x, b.y, b.w, b.h);
                    drawn = true;
                }
            } catch (const IoError&) {
            }
        }
        if (!drawn) {
            for (int y = 0; y < side; ++y) {
                for (int xx = 0; xx < side; ++xx) put_pixel(panel, x0 + xx, y0 + y, 200, 200, 200);
            }
        }
        x0 += side + gap;

        const int bar = static_cast<int>(std::abs(x.points) / max_points * (side - 4));
        for (int y = y0 + side / 2; y < y0 + side / 2 + 12; ++y) {
            for (int xx = 0; xx < bar; ++xx) {
                put_pixel(panel, x0 + xx, y, x.points >= 0 ? 40 : 200, x.points >= 0 ? 160 : 40, 40);
            }
        }
        char text[32];
        std::snprintf(text, sizeof(text), "%.3f", x.points);
        draw_text(panel, x0, y0 + 8, text, 3);
        std::snprintf(text, sizeof(text), "%d", x.prototype);
        draw_text(panel, x0, y0 + side - 20, text, 2);
    }
    return panel;
}

// --- prototype audit ----------------------------------------------------------

bool inside_or_boundary(const LesionMask& mask, int x, int y, int boundary_px) {
    x = std::clamp(x, 0, mask.cols - 1);
    y = std::clamp(y, 0, mask.rows - 1);
    if (mask.at(y, x) == 0) return true;
    const int b = std::max(0, boundary_px);
    for (int dy = -b; dy <= b; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= mask.rows) continue;
        for (int dx = -b; dx <= b; ++dx) {
            const int xx = x + dx;
            if (xx < 0 || xx >= mask.cols || dx * dx + dy * dy > b * b) continue;
            if (mask.at(yy, xx) == 0) return true;
        }
    }
    return false;
}

PrototypeAudit audit_prototypes(const ModelState& model,
                                const std::function<const LesionMask*(const std::string&)>& mask_for,
                                int boundary_px) {
    if (!std::any_of(model.prototypes.sources.begin(), model.prototypes.sources.end(),
                     [](const auto& s) { return s.has_value(); })) {
        throw ValidationError("checkpoint has no prototype source table (was it saved before projection?)");
    }
    PrototypeAudit audit;
    audit.boundary_px = boundary_px;
    const int k = model.config.num_classes;
    std::vector<int> inside(k, 0), auditable(k, 0);
    std::map<std::string, FeatureMap> maps;

    for (int j = 0; j < model.prototypes.count(); ++j) {
        AuditEntry a;
        a.prototype = j;
        a.class_id = model.prototypes.classes[j];
        const auto& src = model.prototypes.sources[j];
        if (!src) {
            a.status = "unauditable";
            audit.entries.push_back(a);
            continue;
        }
        a.image_id = src->image_id;
        const LesionMask* mask = mask_for(src->image_id);
        if (mask == nullptr || src->image_path.empty() || !fs::exists(src->image_path)) {
            a.status = "unauditable";
            audit.entries.push_back(a);
            continue;
        }
        auto it = maps.find(src->image_path);
        if (it == maps.end()) it = maps.emplace(src->image_path, embed(model, load_image(src->image_path))).first;
        const FeatureMap& z = it->second;
        const ActivationMap act = similarity_map(z, model.prototypes.view(j), model.config.epsilon);
        const int arg = top_k_indices(act.values, 1)[0];
        a.row = arg / z.width;
        a.col = arg % z.width;
        const PixelBox box = cell_box(model.config, a.row, a.col);
        a.center_x = box.x + box.w / 2;
        a.center_y = box.y + box.h / 2;
        // mask may have been loaded at a different resolution than the model input
        const int mx = a.center_x * mask->cols / model.config.input_size;
        const int my = a.center_y * mask->rows / model.config.input_size;
        const bool in = inside_or_boundary(*mask, mx, my, boundary_px);
        a.status = in ? "inside" : "outside";
        ++auditable[a.class_id];
        if (in) ++inside[a.class_id];
        audit.entries.push_back(a);
    }
    int total_in = 0, total_aud = 0;
    for (int c = 0; c < k; ++c) {
        audit.fraction_inside_per_class.push_back(auditable[c] > 0 ? static_cast<double>(inside[c]) / auditable[c] : -1.0);
        total_in += inside[c];
        total_aud += auditable[c];
    }
    audit.fraction_inside = total_aud > 0 ? static_cast<double>(total_in) / total_aud : -1.0;
    return audit;
}

void to_json(nlohmann::json& j, const PrototypeAudit& a) {
    j = nlohmann::json::object();
    j["boundary_px"] = a.boundary_px;
    j["fraction_inside"] = a.fraction_inside;
    nlohmann::json per = nlohmann::json::object();
    for (std::size_t c = 0; c < a.fraction_inside_per_class.size(); ++c) {
        per[class_name(static_cast<int>(c))] = a.fraction_inside_per_class[c];
    }
    j["fraction_inside_per_class"] = per;
    auto& arr = j["prototypes"] = nlohmann::json::array();
    for (const auto& e : a.entries) {
        arr.push_back({{"prototype", e.prototype},
                       {"class", e.class_id},
                       {"image", e.image_id},
                       {"row", e.row},
                       {"col", e.col},
                       {"center", {e.center_x, e.center_y}},
                       {"status", e.status}});
    }
}

}  // namespace protopart
