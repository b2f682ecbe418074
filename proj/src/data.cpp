#include "protopart/data.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "protopart/errors.hpp"

namespace fs = std::filesystem;

namespace protopart {

std::string class_name(int k) {
    if (k == kClassNv) return "NV";
    if (k == kClassMel) return "MEL";
    return "class" + std::to_string(k);
}

// --- manifests ----------------------------------------------------------------

Manifest Manifest::select_split(const std::string& split) const {
    Manifest out;
    out.source = source;
    for (const auto& r : rows) {
        if (r.split == split) out.rows.push_back(r);
    }
    return out;
}

bool Manifest::has_split(const std::string& split) const {
    return std::any_of(rows.begin(), rows.end(), [&](const auto& r) { return r.split == split; });
}

std::vector<int> Manifest::labels() const {
    std::vector<int> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(r.label);
    return out;
}

std::map<int, int> Manifest::class_counts() const {
    std::map<int, int> out;
    for (const auto& r : rows) ++out[r.label];
    return out;
}

const ManifestRow* Manifest::find(const std::string& image_id) const {
    for (const auto& r : rows) {
        if (r.image_id == image_id) return &r;
    }
    return nullptr;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (ch == '"') {
                quoted = false;
            } else {
                cur += ch;
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    fields.push_back(cur);
    for (auto& f : fields) {
        const auto b = f.find_first_not_of(" \t");
        const auto e = f.find_last_not_of(" \t");
        f = b == std::string::npos ? std::string{} : f.substr(b, e - b + 1);
    }
    return fields;
}

std::optional<int> parse_label(const std::string& text, int num_classes) {
    if (num_classes == 2) {
        if (text == "NV" || text == "nv") return kClassNv;
        if (text == "MEL" || text == "mel") return kClassMel;
    }
    try {
        std::size_t used = 0;
        const int v = std::stoi(text, &used);
        if (used != text.size() || v < 0 || v >= num_classes) return std::nullopt;
        return v;
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

std::string resolve(const fs::path& base, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path.string() : (base / path).lexically_normal().string();
}

}  // namespace

Manifest load_manifest(const std::string& path, int num_classes, bool check_files) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open manifest '" + path + "'", {"missing file: " + path});
    const fs::path base = fs::path(path).parent_path();
    Manifest m;
    m.source = path;

    std::string line;
    if (!std::getline(in, line)) {
        m.warnings.push_back("manifest '" + path + "' is empty");
        return m;
    }
    const auto header = split_csv_line(line);
    auto column = [&](const std::string& name) -> int {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (header[i] == name) return static_cast<int>(i);
        }
        return -1;
    };
    const int c_image = column("image");
    const int c_label = column("label");
    const int c_mask = column("mask");
    const int c_split = column("split");
    if (c_image < 0 || c_label < 0) {
        throw ValidationError("manifest '" + path + "' header must contain image,label[,mask[,split]]",
                              {"bad header: " + line});
    }

    std::vector<std::string> problems;
    std::map<std::string, std::string> split_of;
    int row_no = 1;
    while (std::getline(in, line)) {
        ++row_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto f = split_csv_line(line);
        const std::string where = "row " + std::to_string(row_no);
        auto field = [&](int c) { return c >= 0 && c < static_cast<int>(f.size()) ? f[c] : std::string{}; };

        ManifestRow r;
        const std::string image = field(c_image);
        if (image.empty()) {
            problems.push_back(where + ": empty image path");
            continue;
        }
        r.image_path = resolve(base, image);
        r.image_id = fs::path(image).stem().string();
        const auto label = parse_label(field(c_label), num_classes);
        if (!label) {
            problems.push_back(where + ": bad label '" + field(c_label) + "' (expected 0.." +
                               std::to_string(num_classes - 1) + ")");
        } else {
            r.label = *label;
        }
        if (const auto mask = field(c_mask); !mask.empty()) r.mask_path = resolve(base, mask);
        r.split = field(c_split);

        if (check_files && !fs::exists(r.image_path)) problems.push_back(where + ": missing image " + r.image_path);
        if (check_files && r.mask_path && !fs::exists(*r.mask_path)) {
            problems.push_back(where + ": dangling mask path " + *r.mask_path);
        }
        if (auto it = split_of.find(r.image_id); it != split_of.end()) {
            if (it->second != r.split) {
                problems.push_back(where + ": image id '" + r.image_id + "' appears in splits '" + it->second +
                                   "' and '" + r.split + "'");
            } else {
                problems.push_back(where + ": duplicate image id '" + r.image_id + "'");
            }
            continue;
        }
        split_of[r.image_id] = r.split;
        if (label) m.rows.push_back(std::move(r));
    }
    if (!problems.empty()) throw ValidationError("manifest '" + path + "' failed validation", problems);
    if (m.rows.empty()) m.warnings.push_back("manifest '" + path + "' has no rows");
    return m;
}

void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows, bool with_split) {
    const fs::path base = fs::absolute(fs::path(path)).parent_path();
    auto rel = [&](const std::string& p) {
        const auto r = fs::absolute(p).lexically_relative(base);
        return r.empty() ? p : r.string();
    };
    std::ostringstream out;
    out << "image,label,mask" << (with_split ? ",split" : "") << "\n";
    for (const auto& r : rows) {
        out << rel(r.image_path) << "," << r.label << "," << (r.mask_path ? rel(*r.mask_path) : "");
        if (with_split) out << "," << r.split;
        out << "\n";
    }
    atomic_write(path, out.str());
}

// --- images and masks ---------------------------------------------------------

InputImage raster_to_image(const Raster& raster, const std::string& id) {
    const Raster rgb = to_rgb(raster);
    InputImage img;
    img.id = id;
    img.pixels = Tensor3(rgb.height, rgb.width, 3);
    for (std::size_t i = 0; i < rgb.pixels.size(); ++i) img.pixels.values[i] = rgb.pixels[i] / 255.0;
    return img;
}

Raster image_to_raster(const Tensor3& pixels) {
    Raster r(pixels.width, pixels.height, 3);
    for (std::size_t i = 0; i < r.pixels.size(); ++i) {
        const double v = std::clamp(pixels.values[i], 0.0, 1.0);
        r.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return r;
}

InputImage load_image(const std::string& path, const std::string& id) {
    return raster_to_image(read_png(path), id.empty() ? fs::path(path).stem().string() : id);
}

LesionMask mask_from_raster(const Raster& raster, int height, int width, MaskPolarity polarity,
                            std::vector<std::string>* warnings) {
    const Raster gray = to_gray(raster);
    LesionMask mask(height, width);
    bool any_lesion = false;
    for (int r = 0; r < height; ++r) {
        const int sr = static_cast<int>(static_cast<long long>(r) * gray.height / height);
        for (int c = 0; c < width; ++c) {
            const int sc = static_cast<int>(static_cast<long long>(c) * gray.width / width);
            const bool white = gray.at(sc, sr)[0] >= 128;
            const bool lesion = polarity == MaskPolarity::lesion_white ? white : !white;
            mask.at(r, c) = lesion ? 0 : 1;
            any_lesion = any_lesion || lesion;
        }
    }
    if (!any_lesion && warnings != nullptr) warnings->push_back("mask has no lesion pixels");
    return mask;
}

LesionMask load_mask(const std::string& path, int height, int width, MaskPolarity polarity,
                     std::vector<std::string>* warnings) {
    std::vector<std::string> local;
    LesionMask m = mask_from_raster(read_png(path), height, width, polarity, &local);
    if (warnings != nullptr) {
        for (const auto& w : local) warnings->push_back(path + ": " + w);
    }
    return m;
}

std::pair<std::array<double, 3>, std::array<double, 3>> channel_statistics(std::span<const InputImage> images) {
    std::array<double, 3> sum{}, sq{};
    double count = 0.0;
    for (const auto& img : images) {
        const auto& v = img.pixels.values;
        for (std::size_t i = 0; i < v.size(); i += 3) {
            for (int c = 0; c < 3; ++c) {
                sum[c] += v[i + c];
                sq[c] += v[i + c] * v[i + c];
            }
        }
        count += static_cast<double>(img.pixels.cells());
    }
    std::array<double, 3> mean{0.0, 0.0, 0.0}, stdev{1.0, 1.0, 1.0};
    if (count > 0.0) {
        for (int c = 0; c < 3; ++c) {
            mean[c] = sum[c] / count;
            const double var = sq[c] / count - mean[c] * mean[c];
            stdev[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
        }
    }
    return {mean, stdev};
}

// --- synthetic data -----------------------------------------------------------

namespace {

// Bilinear interpolation of a coarse random lattice: smooth texture in [-1,1].
struct SmoothNoise {
    int cells;
    std::vector<double> lattice;

    SmoothNoise(int cells_, std::mt19937_64& rng) : cells(cells_), lattice((cells_ + 1) * (cells_ + 1)) {
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        for (auto& v : lattice) v = u(rng);
    }

    double operator()(double x, double y) const {  // x, y in [0,1]
        const double fx = x * cells, fy = y * cells;
        const int ix = std::min(static_cast<int>(fx), cells - 1);
        const int iy = std::min(static_cast<int>(fy), cells - 1);
        const double tx = fx - ix, ty = fy - iy;
        auto at = [&](int a, int b) { return lattice[b * (cells + 1) + a]; };
        return (1 - ty) * ((1 - tx) * at(ix, iy) + tx * at(ix + 1, iy)) +
               ty * ((1 - tx) * at(ix, iy + 1) + tx * at(ix + 1, iy + 1));
    }
};

SyntheticSample render_sample(const SynthConfig& cfg, int index, int label) {
    std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + static_cast<unsigned long long>(index) * 7919ULL + 1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    const int n = cfg.size;
    const double scale = n / 224.0;

    SyntheticSample s;
    s.label = label;
    s.image = Raster(n, n, 3);
    s.mask = LesionMask(n, n, 1);
    s.mask.provenance = LesionMask::Provenance::synthetic;

    const double skin[3] = {0.86 + 0.04 * (u(rng) - 0.5), 0.70 + 0.04 * (u(rng) - 0.5), 0.60 + 0.04 * (u(rng) - 0.5)};
    SmoothNoise skin_tex(4, rng);

    const double cx = n / 2.0 + (u(rng) - 0.5) * 28.0 * scale;
    const double cy = n / 2.0 + (u(rng) - 0.5) * 28.0 * scale;
    const double ax = (50.0 + 28.0 * u(rng)) * scale;
    const double ay = (50.0 + 28.0 * u(rng)) * scale;
    const double theta = u(rng) * std::numbers::pi;
    const double ct = std::cos(theta), st = std::sin(theta);

    const bool mel = label == kClassMel;
    const double brightness = mel ? 0.9 + 0.2 * u(rng) : 0.95 + 0.15 * u(rng);
    const double base[3] = {mel ? 0.33 : 0.58, mel ? 0.20 : 0.40, mel ? 0.14 : 0.28};
    SmoothNoise lesion_tex(mel ? 10 : 3, rng);
    const double tex_amp = mel ? 0.10 : 0.04;
    const double grain = mel ? 0.06 : 0.015;

    s.confound = mel && u(rng) < cfg.confound_fraction;
    const int corner = static_cast<int>(u(rng) * 4.0) % 4;
    const double corner_r = (55.0 + 20.0 * u(rng)) * scale;
    const double kx = (corner & 1) ? n - 0.5 : -0.5;
    const double ky = (corner & 2) ? n - 0.5 : -0.5;

    double interior_sum = 0.0;
    long interior_count = 0;
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            const double dx = px - cx, dy = py - cy;
            const double ex = (dx * ct + dy * st) / ax;
            const double ey = (-dx * st + dy * ct) / ay;
            const bool inside = ex * ex + ey * ey <= 1.0;
            double rgb[3];
            if (inside) {
                const double t = tex_amp * lesion_tex(px / n, py / n);
                for (int c = 0; c < 3; ++c) rgb[c] = base[c] * brightness + t + grain * noise(rng);
                s.mask.at(y, x) = 0;
            } else if (s.confound && std::hypot(px - kx, py - ky) <= corner_r) {
                for (int c = 0; c < 3; ++c) rgb[c] = 0.03 + 0.01 * noise(rng);
            } else {
                const double t = 0.03 * skin_tex(px / n, py / n);
                for (int c = 0; c < 3; ++c) rgb[c] = skin[c] + t + 0.015 * noise(rng);
            }
            std::uint8_t* out = s.image.at(x, y);
            double mean = 0.0;
            for (int c = 0; c < 3; ++c) {
                out[c] = static_cast<std::uint8_t>(std::lround(std::clamp(rgb[c], 0.0, 1.0) * 255.0));
                mean += out[c] / 255.0;
            }
            if (inside) {
                interior_sum += mean / 3.0;
                ++interior_count;
            }
        }
    }
    s.interior_mean = interior_count > 0 ? interior_sum / interior_count : 0.0;
    return s;
}

}  // namespace

std::vector<SyntheticSample> generate_synthetic(const SynthConfig& config) {
    if (config.n_per_class < 1) throw ConfigError("synthetic n_per_class must be >= 1");
    if (config.size < 8) throw ConfigError("synthetic image size must be >= 8");
    if (config.confound_fraction < 0.0 || config.confound_fraction > 1.0) {
        throw ConfigError("confound_fraction must be in [0, 1]");
    }
    if (config.train_fraction < 0.0 || config.val_fraction < 0.0 || config.train_fraction + config.val_fraction > 1.0) {
        throw ConfigError("split fractions must be non-negative and sum to at most 1");
    }
    const int n_train = static_cast<int>(std::lround(config.n_per_class * config.train_fraction));
    const int n_val = static_cast<int>(std::lround(config.n_per_class * config.val_fraction));
    std::vector<SyntheticSample> out;
    out.reserve(2 * config.n_per_class);
    int index = 0;
    for (int i = 0; i < config.n_per_class; ++i) {
        for (int label : {kClassNv, kClassMel}) {
            SyntheticSample s = render_sample(config, index, label);
            char id[32];
            std::snprintf(id, sizeof(id), "syn_%05d", index);
            s.id = id;
            s.split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
            out.push_back(std::move(s));
            ++index;
        }
    }
    return out;
}

Manifest write_synthetic(const std::vector<SyntheticSample>& samples, const std::string& out_dir) {
    const fs::path root(out_dir);
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    Manifest m;
    m.source = (root / "manifest.csv").string();
    for (const auto& s : samples) {
        ManifestRow r;
        r.image_id = s.id;
        r.image_path = (root / "images" / (s.id + ".png")).string();
        r.mask_path = (root / "masks" / (s.id + ".png")).string();
        r.label = s.label;
        r.split = s.split;
        write_png(r.image_path, s.image);
        Raster mask_file(s.mask.cols, s.mask.rows, 1);
        for (std::size_t i = 0; i < mask_file.pixels.size(); ++i) mask_file.pixels[i] = s.mask.values[i] ? 0 : 255;
        write_png(*r.mask_path, mask_file);
        m.rows.push_back(std::move(r));
    }
    write_manifest((root / "manifest.csv").string(), m.rows, true);
    for (const std::string split : {"train", "val", "test"}) {
        write_manifest((root / (split + ".csv")).string(), m.select_split(split).rows, false);
    }
    return m;
}

// --- valid prototype set -------------------------------------------------------

std::map<int, int> ValidPrototypeSet::per_class_counts() const {
    std::map<int, int> out;
    for (const auto& e : entries) ++out[e.class_id];
    return out;
}

nlohmann::json valid_set_to_json(const ValidPrototypeSet& set) {
    nlohmann::json j;
    j["version"] = 1;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : set.entries) {
        nlohmann::json item = {{"class", e.class_id},
                               {"image", e.image_id},
                               {"bbox", {e.bbox.x, e.bbox.y, e.bbox.w, e.bbox.h}},
                               {"note", e.note}};
        if (!e.thumbnail.empty()) item["thumbnail"] = e.thumbnail;
        j["entries"].push_back(std::move(item));
    }
    return j;
}

ValidPrototypeSet valid_set_from_json(const nlohmann::json& j, int image_size, int num_classes) {
    std::vector<std::string> problems;
    ValidPrototypeSet set;
    try {
        if (j.value("version", 0) != 1) throw ValidationError("valid set: unsupported or missing version");
        const auto& entries = j.at("entries");
        if (!entries.is_array()) throw ValidationError("valid set: 'entries' must be an array");
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const auto& e = entries[i];
            ValidEntry v;
            v.class_id = e.at("class").get<int>();
            v.image_id = e.at("image").get<std::string>();
            const auto box = e.at("bbox").get<std::vector<int>>();
            if (box.size() != 4) {
                problems.push_back("entry " + std::to_string(i) + ": bbox must have 4 numbers");
                continue;
            }
            v.bbox = {box[0], box[1], box[2], box[3]};
            v.note = e.value("note", std::string{});
            v.thumbnail = e.value("thumbnail", std::string{});
            if (v.class_id < 0 || v.class_id >= num_classes) {
                problems.push_back("entry " + std::to_string(i) + ": class " + std::to_string(v.class_id) +
                                   " out of range");
            }
            const auto& b = v.bbox;
            if (b.x < 0 || b.y < 0 || b.w <= 0 || b.h <= 0 || b.x + b.w > image_size || b.y + b.h > image_size) {
                problems.push_back("entry " + std::to_string(i) + ": bbox [" + std::to_string(b.x) + "," +
                                   std::to_string(b.y) + "," + std::to_string(b.w) + "," + std::to_string(b.h) +
                                   "] outside " + std::to_string(image_size) + "x" + std::to_string(image_size));
            }
            set.entries.push_back(std::move(v));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("valid set: malformed JSON: ") + e.what());
    }
    if (!problems.empty()) throw ValidationError("valid set failed validation", problems);
    return set;
}

ValidPrototypeSet read_valid_set(const std::string& path, int image_size, int num_classes) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open valid set '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("valid set '" + path + "': malformed JSON: " + e.what());
    }
    return valid_set_from_json(j, image_size, num_classes);
}

namespace {

class ExclusiveLock {
public:
    explicit ExclusiveLock(const std::string& path) {
        fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
        if (fd_ < 0) throw IoError("cannot open lock file '" + path + "'");
        if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
            ::close(fd_);
            throw IoError("'" + path + "' is held by another writer");
        }
    }
    ~ExclusiveLock() {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
    ExclusiveLock(const ExclusiveLock&) = delete;
    ExclusiveLock& operator=(const ExclusiveLock&) = delete;

private:
    int fd_ = -1;
};

}  // namespace

void atomic_write(const std::string& path, const std::string& contents) {
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const std::string tmp = path + ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write '" + tmp + "'");
        out << contents;
        out.flush();
        if (!out) throw IoError("short write to '" + tmp + "'");
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp);
        throw IoError("cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
    }
}

void write_valid_set(const std::string& path, const ValidPrototypeSet& set) {
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    ExclusiveLock lock(path + ".lock");
    atomic_write(path, valid_set_to_json(set).dump(2) + "\n");
}

}  // namespace protopart
