#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "protopart/data.hpp"
#include "protopart/image_io.hpp"
#include "protopart/model.hpp"

namespace protopart {

// --- metrics ------------------------------------------------------------------

struct EvalReport {
    std::vector<std::vector<long>> confusion;  // [true][predicted]
    std::vector<long> n_per_class;
    std::vector<double> recall;  // percent
    double ba = 0.0;             // percent, mean of recall
    std::string checkpoint_id;
    std::string dataset;
};

/// Throws ValidationError when a class has no samples (BA undefined).
EvalReport report_from_confusion(std::vector<std::vector<long>> confusion);
EvalReport compute_report(std::span<const int> labels, std::span<const int> predicted, int num_classes);

void to_json(nlohmann::json& j, const EvalReport& r);
/// Fixed-width table: counts, recalls and BA.
std::string format_report(const EvalReport& r);

struct Prediction {
    std::string image_id;
    int label = 0;
    int predicted = 0;
    std::vector<double> scores;
};

struct Evaluation {
    EvalReport report;
    std::vector<Prediction> predictions;
};

/// Loads every manifest row and classifies it. Embeddings go through the
/// on-disk cache when PROTOPART_CACHE names a directory.
Evaluation evaluate(const ModelState& model, const Manifest& manifest, const std::string& checkpoint_id);

// --- explanations -------------------------------------------------------------

struct ExplanationEntry {
    int prototype = 0;
    int class_id = 0;
    double score = 0.0;
    double weight = 0.0;  // w_h[predicted, prototype]
    double points = 0.0;  // score * weight
    PixelBox overlay;     // footprint of the argmax latent cell on the test image
    std::optional<PrototypeSource> source;
    std::optional<PixelBox> source_box;
};

struct Explanation {
    std::string image_id;
    int predicted = 0;
    std::vector<double> scores;
    std::vector<ExplanationEntry> entries;  // by score descending, lower id first on ties
};

/// Throws ConfigError when top_n is outside [1, m].
Explanation explain(const ModelState& model, const InputImage& image, int top_n);
void to_json(nlohmann::json& j, const Explanation& e);

/// Panel rows of: test image with overlay box | activation heat map | source
/// patch of the prototype | points bar with its value.
Raster render_explanation(const ModelState& model, const InputImage& image, const Explanation& e);

// --- prototype audit ----------------------------------------------------------

struct AuditEntry {
    int prototype = 0;
    int class_id = 0;
    std::string image_id;
    int row = 0;  // argmax activation cell on the source image
    int col = 0;
    int center_x = 0;
    int center_y = 0;
    std::string status;  // "inside", "outside", "unauditable"
};

struct PrototypeAudit {
    std::vector<AuditEntry> entries;
    std::vector<double> fraction_inside_per_class;  // over auditable prototypes; -1 when none
    double fraction_inside = -1.0;
    int boundary_px = 8;
};

/// Inside when the mask is 0 at the cell center or a 0 pixel lies within
/// `boundary_px` (Euclidean) of it.
bool inside_or_boundary(const LesionMask& mask, int x, int y, int boundary_px);

/// `mask_for(image_id)` returns nullptr when no mask exists. Throws
/// ValidationError when the checkpoint has no source table.
PrototypeAudit audit_prototypes(const ModelState& model,
                                const std::function<const LesionMask*(const std::string&)>& mask_for,
                                int boundary_px);
void to_json(nlohmann::json& j, const PrototypeAudit& a);

/// embed() with an optional disk cache in $PROTOPART_CACHE keyed by checkpoint
/// id and image path.
FeatureMap cached_embed(const ModelState& model, const InputImage& image, const std::string& checkpoint_id,
                        const std::string& image_path);

}  // namespace protopart
