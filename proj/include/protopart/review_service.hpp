#pragma once
// Prototype review session: serves the post-projection roster over a small
// JSON API and turns verdicts into a valid prototype set.
//
// The request handler is independent of the HTTP library so it can be driven
// directly by tests; run_review_server() binds it to a socket.

#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "protopart/data.hpp"
#include "protopart/image_io.hpp"
#include "protopart/model.hpp"

namespace protopart {

struct HttpResponse {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
};

enum class Verdict { pending, valid, discard };
std::string to_string(Verdict v);

struct VerdictEvent {
    long seq = 0;
    int prototype = 0;
    Verdict verdict = Verdict::pending;
    std::string note;
    std::string at;  // UTC, ISO 8601
};

struct ExportOutcome {
    std::string path;
    ValidPrototypeSet set;
    std::vector<std::string> warnings;
};

class ReviewService {
public:
    /// Throws ValidationError when the checkpoint has no source table. An
    /// existing session for the same checkpoint in `session_dir` is resumed.
    ReviewService(ModelState model, std::string checkpoint_id, std::string session_dir, bool allow_partial);

    HttpResponse handle(const std::string& method, const std::string& path, const std::string& body);

    /// Appends a verdict and persists the session. Throws std::out_of_range
    /// for unknown prototype ids.
    void record(int prototype, Verdict verdict, const std::string& note);

    /// Current verdict per prototype (last event wins).
    std::vector<Verdict> verdicts() const;
    const std::vector<VerdictEvent>& events() const noexcept { return events_; }

    /// Throws ConfigError while prototypes are pending and partial export is
    /// not allowed.
    ExportOutcome export_valid_set();

    nlohmann::json session_json() const;
    nlohmann::json roster_json() const;
    std::vector<std::uint8_t> patch_png(int prototype) const;
    std::vector<std::uint8_t> context_png(int prototype) const;

    const std::string& session_path() const noexcept { return session_path_; }
    const std::string& checkpoint_id() const noexcept { return checkpoint_id_; }

private:
    void persist() const;
    std::vector<Verdict> verdicts_locked() const;
    const Raster& source_image(int prototype) const;
    nlohmann::json roster_entry(int j, const std::vector<Verdict>& current) const;

    ModelState model_;
    std::string checkpoint_id_;
    std::string session_dir_;
    std::string session_path_;
    bool allow_partial_ = false;
    std::string created_at_;
    std::vector<VerdictEvent> events_;
    mutable std::mutex mutex_;
    mutable std::map<std::string, Raster> images_;
};

/// Blocking. `ui_dir`, when given, is served as static files at "/".
void run_review_server(ReviewService& service, const std::string& host, int port,
                       const std::optional<std::string>& ui_dir = std::nullopt);

}  // namespace protopart
