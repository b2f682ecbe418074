#include "protopart/review_service.hpp"

#include <httplib.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "protopart/errors.hpp"

namespace fs = std::filesystem;

namespace protopart {

std::string to_string(Verdict v) {
    switch (v) {
        case Verdict::pending: return "pending";
        case Verdict::valid: return "valid";
        case Verdict::discard: return "discard";
    }
    return "pending";
}

namespace {

Verdict parse_verdict(const std::string& s) {
    if (s == "valid") return Verdict::valid;
    if (s == "discard") return Verdict::discard;
    if (s == "pending") return Verdict::pending;
    throw ValidationError("verdict must be \"valid\", \"discard\" or \"pending\", got \"" + s + "\"");
}

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

HttpResponse json_response(int status, const nlohmann::json& j) { return {status, "application/json", j.dump(2)}; }

HttpResponse error_response(int status, const std::string& message, nlohmann::json extra = nlohmann::json::object()) {
    extra["error"] = message;
    return json_response(status, extra);
}

const char* kHints[] = {
    "Keep prototypes that sit inside the lesion or on its border.",
    "Discard prototypes that fire on artifacts: black corners, borders, rulers, hair, plain skin.",
};

}  // namespace

ReviewService::ReviewService(ModelState model, std::string checkpoint_id, std::string session_dir, bool allow_partial)
    : model_(std::move(model)), checkpoint_id_(std::move(checkpoint_id)), session_dir_(std::move(session_dir)),
      allow_partial_(allow_partial) {
    if (!model_.has_sources()) {
        throw ValidationError(
            "checkpoint has no prototype source table; review needs a checkpoint saved after projection "
            "(ckpt-epoch<E>.ppt or best.ppt)");
    }
    session_path_ = (fs::path(session_dir_) / "session.json").string();
    if (fs::exists(session_path_)) {
        std::ifstream in(session_path_);
        const auto j = nlohmann::json::parse(in);
        if (j.value("checkpoint_id", std::string{}) != checkpoint_id_) {
            throw ValidationError("session '" + session_path_ + "' belongs to a different checkpoint");
        }
        created_at_ = j.value("created_at", std::string{});
        for (const auto& e : j.at("events")) {
            events_.push_back({e.at("seq").get<long>(), e.at("prototype").get<int>(),
                               parse_verdict(e.at("verdict").get<std::string>()), e.value("note", std::string{}),
                               e.value("at", std::string{})});
        }
    } else {
        created_at_ = utc_now();
        persist();
    }
}

void ReviewService::persist() const {
    nlohmann::json j = {{"version", 1}, {"checkpoint_id", checkpoint_id_}, {"created_at", created_at_}};
    auto& arr = j["events"] = nlohmann::json::array();
    for (const auto& e : events_) {
        arr.push_back({{"seq", e.seq}, {"prototype", e.prototype}, {"verdict", to_string(e.verdict)},
                       {"note", e.note}, {"at", e.at}});
    }
    atomic_write(session_path_, j.dump(2) + "\n");
}

std::vector<Verdict> ReviewService::verdicts_locked() const {
    std::vector<Verdict> out(model_.prototypes.count(), Verdict::pending);
    for (const auto& e : events_) out[e.prototype] = e.verdict;
    return out;
}

std::vector<Verdict> ReviewService::verdicts() const {
    std::lock_guard lock(mutex_);
    return verdicts_locked();
}

void ReviewService::record(int prototype, Verdict verdict, const std::string& note) {
    std::lock_guard lock(mutex_);
    if (prototype < 0 || prototype >= model_.prototypes.count()) {
        throw std::out_of_range("unknown prototype id " + std::to_string(prototype));
    }
    events_.push_back({static_cast<long>(events_.size()) + 1, prototype, verdict, note, utc_now()});
    try {
        persist();
    } catch (...) {
        events_.pop_back();
        throw;
    }
}

const Raster& ReviewService::source_image(int prototype) const {
    const auto& src = *model_.prototypes.sources[prototype];
    auto it = images_.find(src.image_path);
    if (it == images_.end()) it = images_.emplace(src.image_path, to_rgb(read_png(src.image_path))).first;
    return it->second;
}

std::vector<std::uint8_t> ReviewService::patch_png(int prototype) const {
    std::lock_guard lock(mutex_);
    const auto& src = *model_.prototypes.sources.at(prototype);
    const Raster& img = source_image(prototype);
    const PixelBox b = cell_box(model_.config, src.row, src.col);
    Raster patch(b.w, b.h, 3);
    for (int y = 0; y < b.h; ++y) {
        for (int x = 0; x < b.w; ++x) {
            const auto* p = img.at(std::min(b.x + x, img.width - 1), std::min(b.y + y, img.height - 1));
            std::copy(p, p + 3, patch.at(x, y));
        }
    }
    return encode_png(patch);
}

std::vector<std::uint8_t> ReviewService::context_png(int prototype) const {
    std::lock_guard lock(mutex_);
    const auto& src = *model_.prototypes.sources.at(prototype);
    Raster img = source_image(prototype);
    const PixelBox b = cell_box(model_.config, src.row, src.col);
    auto mark = [&](int x, int y) {
        if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
        auto* p = img.at(x, y);
        p[0] = 255;
        p[1] = 220;
        p[2] = 0;
    };
    for (int t = 0; t < 2; ++t) {
        for (int x = b.x; x < b.x + b.w; ++x) {
            mark(x, b.y + t);
            mark(x, b.y + b.h - 1 - t);
        }
        for (int y = b.y; y < b.y + b.h; ++y) {
            mark(b.x + t, y);
            mark(b.x + b.w - 1 - t, y);
        }
    }
    return encode_png(img);
}

nlohmann::json ReviewService::roster_entry(int j, const std::vector<Verdict>& current) const {
    const auto& src = *model_.prototypes.sources[j];
    const PixelBox b = cell_box(model_.config, src.row, src.col);
    std::string note;
    int history = 0;
    for (const auto& e : events_) {
        if (e.prototype != j) continue;
        note = e.note;
        ++history;
    }
    const std::string base = "/api/prototypes/" + std::to_string(j);
    return {{"id", j},
            {"class", model_.prototypes.classes[j]},
            {"class_name", class_name(model_.prototypes.classes[j])},
            {"verdict", to_string(current[j])},
            {"note", note},
            {"history", history},
            {"source", {{"image", src.image_id}, {"row", src.row}, {"col", src.col}, {"bbox", {b.x, b.y, b.w, b.h}}}},
            {"patch_url", base + "/patch.png"},
            {"context_url", base + "/context.png"}};
}

nlohmann::json ReviewService::roster_json() const {
    std::lock_guard lock(mutex_);
    const auto current = verdicts_locked();
    nlohmann::json arr = nlohmann::json::array();
    for (int j = 0; j < model_.prototypes.count(); ++j) arr.push_back(roster_entry(j, current));
    return arr;
}

nlohmann::json ReviewService::session_json() const {
    std::lock_guard lock(mutex_);
    const auto current = verdicts_locked();
    std::map<std::string, std::map<std::string, int>> per_class;
    std::map<std::string, int> totals{{"pending", 0}, {"valid", 0}, {"discard", 0}};
    for (int j = 0; j < model_.prototypes.count(); ++j) {
        auto& c = per_class[class_name(model_.prototypes.classes[j])];
        for (const char* key : {"pending", "valid", "discard"}) c.emplace(key, 0);
        ++c[to_string(current[j])];
        ++totals[to_string(current[j])];
    }
    return {{"checkpoint_id", checkpoint_id_},
            {"created_at", created_at_},
            {"prototypes", model_.prototypes.count()},
            {"counts", totals},
            {"per_class", per_class},
            {"events", events_.size()},
            {"allow_partial", allow_partial_},
            {"export_ready", allow_partial_ || totals["pending"] == 0},
            {"hints", kHints}};
}

ExportOutcome ReviewService::export_valid_set() {
    std::lock_guard lock(mutex_);
    const auto current = verdicts_locked();
    std::vector<int> pending;
    for (int j = 0; j < static_cast<int>(current.size()); ++j) {
        if (current[j] == Verdict::pending) pending.push_back(j);
    }
    if (!pending.empty() && !allow_partial_) {
        throw ConfigError(std::to_string(pending.size()) + " prototypes are still pending; review them or restart "
                          "the service with --allow-partial");
    }
    ExportOutcome out;
    for (int j = 0; j < static_cast<int>(current.size()); ++j) {
        if (current[j] != Verdict::valid) continue;
        const auto& src = *model_.prototypes.sources[j];
        std::string note;
        for (const auto& e : events_) {
            if (e.prototype == j) note = e.note;
        }
        out.set.entries.push_back({model_.prototypes.classes[j], src.image_id, cell_box(model_.config, src.row, src.col),
                                   note, ""});
    }
    const auto counts = out.set.per_class_counts();
    for (int k = 0; k < model_.config.num_classes; ++k) {
        if (!counts.count(k)) {
            out.warnings.push_back("class " + class_name(k) + " has no valid prototypes; its remembering term is vacuous");
        }
    }
    out.path = (fs::path(session_dir_) / "valid_set.json").string();
    write_valid_set(out.path, out.set);
    return out;
}

HttpResponse ReviewService::handle(const std::string& method, const std::string& path, const std::string& body) {
    static const std::regex item(R"(^/api/prototypes/([^/]+)/(patch\.png|context\.png|verdict)$)");
    try {
        if (path == "/api/session" && method == "GET") return json_response(200, session_json());
        if (path == "/api/prototypes" && method == "GET") return json_response(200, roster_json());
        if (path == "/api/export" && method == "POST") {
            try {
                const ExportOutcome out = export_valid_set();
                nlohmann::json per = nlohmann::json::object();
                for (int k = 0; k < model_.config.num_classes; ++k) per[class_name(k)] = 0;
                for (const auto& [k, n] : out.set.per_class_counts()) per[class_name(k)] = n;
                return json_response(200, {{"path", out.path},
                                           {"entries", out.set.entries.size()},
                                           {"per_class", per},
                                           {"warnings", out.warnings},
                                           {"valid_set", valid_set_to_json(out.set)}});
            } catch (const ConfigError& e) {
                return error_response(409, e.what());
            }
        }
        std::smatch m;
        if (std::regex_match(path, m, item)) {
            int id = -1;
            try {
                std::size_t used = 0;
                id = std::stoi(m[1].str(), &used);
                if (used != m[1].str().size()) id = -1;
            } catch (const std::exception&) {
                id = -1;
            }
            if (id < 0 || id >= model_.prototypes.count()) {
                return error_response(404, "unknown prototype id '" + m[1].str() + "'");
            }
            const std::string what = m[2].str();
            if (what == "verdict") {
                if (method != "POST") return error_response(405, "use POST");
                nlohmann::json j;
                try {
                    j = nlohmann::json::parse(body);
                } catch (const nlohmann::json::exception&) {
                    return error_response(400, "body must be JSON {\"verdict\": \"valid\"|\"discard\", \"note\": str}");
                }
                if (!j.is_object() || !j.contains("verdict") || !j["verdict"].is_string()) {
                    return error_response(400, "missing \"verdict\"");
                }
                const std::string v = j["verdict"].get<std::string>();
                if (v != "valid" && v != "discard") return error_response(400, "verdict must be \"valid\" or \"discard\"");
                const std::string note = j.contains("note") && j["note"].is_string() ? j["note"].get<std::string>() : "";
                record(id, parse_verdict(v), note);
                std::lock_guard lock(mutex_);
                return json_response(200, roster_entry(id, verdicts_locked()));
            }
            if (method != "GET") return error_response(405, "use GET");
            const auto png = what == "patch.png" ? patch_png(id) : context_png(id);
            return {200, "image/png", std::string(png.begin(), png.end())};
        }
        return error_response(404, "no route for " + method + " " + path);
    } catch (const IoError& e) {
        return error_response(500, e.what());
    } catch (const ValidationError& e) {
        return error_response(400, e.what());
    }
}

void run_review_server(ReviewService& service, const std::string& host, int port,
                       const std::optional<std::string>& ui_dir) {
    httplib::Server server;
    auto forward = [&service](const httplib::Request& req, httplib::Response& res) {
        const HttpResponse r = service.handle(req.method, req.path, req.body);
        res.status = r.status;
        res.set_content(r.body, r.content_type);
    };
    server.Get(R"(/api/.*)", forward);
    server.Post(R"(/api/.*)", forward);
    if (ui_dir && !server.set_mount_point("/", *ui_dir)) {
        throw IoError("cannot serve UI directory '" + *ui_dir + "'");
    }
    if (!server.bind_to_port(host, port)) throw IoError("cannot bind " + host + ":" + std::to_string(port));
    server.listen_after_bind();
}

}  // namespace protopart
