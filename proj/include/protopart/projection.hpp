#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "protopart/model.hpp"

namespace protopart {

/// Latent map of one training image, as scanned by projection.
struct LatentSample {
    std::string image_id;
    std::string image_path;
    int label = 0;
    FeatureMap map;
};

struct ProjectionEntry {
    int prototype = 0;
    int class_id = 0;
    std::string image_id;
    int row = 0;
    int col = 0;
    double distance_moved = 0.0;
};

struct ProjectionResult {
    std::vector<ProjectionEntry> entries;  // indexed by prototype
    bool diversity_ok = true;
};

void to_json(nlohmann::json& j, const ProjectionResult& r);

/// Snaps every prototype onto a latent patch of an image of its own class,
/// with no two prototypes of a class sharing a source image. Greedy: the
/// prototype with the smallest best available distance claims its patch
/// first, then the rest are re-ranked over the images still unclaimed. Ties
/// break on (image id, row, col), then prototype index.
///
/// Throws ValidationError when a class has fewer distinct images than
/// prototypes, NumericError on NaN distances.
ProjectionResult project_prototypes(PrototypeLayer& prototypes, std::span<const LatentSample> samples);

}  // namespace protopart
