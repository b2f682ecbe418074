#include "protopart/projection.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <tuple>

#include "protopart/errors.hpp"

namespace protopart {

void to_json(nlohmann::json& j, const ProjectionResult& r) {
    j = nlohmann::json::object();
    j["diversity_ok"] = r.diversity_ok;
    auto& arr = j["prototypes"] = nlohmann::json::array();
    for (const auto& e : r.entries) {
        arr.push_back({{"prototype", e.prototype},
                       {"class", e.class_id},
                       {"image", e.image_id},
                       {"row", e.row},
                       {"col", e.col},
                       {"distance_moved", e.distance_moved}});
    }
}

namespace {

struct Candidate {
    double distance = 0.0;
    int sample = -1;
    int row = 0;
    int col = 0;
};

}  // namespace

ProjectionResult project_prototypes(PrototypeLayer& prototypes, std::span<const LatentSample> samples) {
    const int m = prototypes.count();
    const int depth = prototypes.depth();

    std::map<int, std::vector<int>> images_of;  // class -> sample indices, ordered by image id
    for (int s = 0; s < static_cast<int>(samples.size()); ++s) {
        if (samples[s].map.channels != depth) throw ConfigError("latent sample depth does not match prototypes");
        images_of[samples[s].label].push_back(s);
    }
    for (auto& [cls, list] : images_of) {
        std::sort(list.begin(), list.end(),
                  [&](int a, int b) { return samples[a].image_id < samples[b].image_id; });
    }

    std::map<int, std::vector<int>> protos_of;
    for (int j = 0; j < m; ++j) protos_of[prototypes.classes[j]].push_back(j);

    std::vector<std::string> short_classes;
    for (const auto& [cls, js] : protos_of) {
        std::set<std::string> distinct;
        for (int s : images_of[cls]) distinct.insert(samples[s].image_id);
        if (distinct.size() < js.size()) {
            short_classes.push_back("class " + std::to_string(cls) + ": " + std::to_string(distinct.size()) +
                                    " distinct images for " + std::to_string(js.size()) + " prototypes");
        }
    }
    if (!short_classes.empty()) {
        throw ValidationError("not enough distinct training images to project prototypes", short_classes);
    }

    ProjectionResult result;
    result.entries.resize(m);
    prototypes.sources.resize(m);
    Matrix snapped = prototypes.vectors;

    for (const auto& [cls, js] : protos_of) {
        const auto& imgs = images_of[cls];
        // best[a][b]: nearest patch of prototype js[a] inside image imgs[b]
        std::vector<std::vector<Candidate>> best(js.size(), std::vector<Candidate>(imgs.size()));
        for (std::size_t a = 0; a < js.size(); ++a) {
            const auto p = prototypes.vectors.row(js[a]);
            for (std::size_t b = 0; b < imgs.size(); ++b) {
                const FeatureMap& z = samples[imgs[b]].map;
                const auto d = patch_distances(z, p);
                std::size_t arg = 0;
                for (std::size_t c = 0; c < d.size(); ++c) {
                    if (std::isnan(d[c])) {
                        throw NumericError("NaN distance projecting prototype " + std::to_string(js[a]) +
                                           " onto image " + samples[imgs[b]].image_id);
                    }
                    if (d[c] < d[arg]) arg = c;
                }
                best[a][b] = {d[arg], imgs[b], static_cast<int>(arg) / z.width, static_cast<int>(arg) % z.width};
            }
        }

        auto key = [&](const Candidate& c) {
            return std::make_tuple(c.distance, std::cref(samples[c.sample].image_id), c.row, c.col);
        };
        std::vector<bool> assigned(js.size(), false);
        std::vector<bool> claimed(imgs.size(), false);
        for (std::size_t round = 0; round < js.size(); ++round) {
            int pick_a = -1;
            int pick_b = -1;
            for (std::size_t a = 0; a < js.size(); ++a) {
                if (assigned[a]) continue;
                int own_b = -1;
                for (std::size_t b = 0; b < imgs.size(); ++b) {
                    if (claimed[b]) continue;
                    if (own_b < 0 || key(best[a][b]) < key(best[a][own_b])) own_b = static_cast<int>(b);
                }
                if (pick_a < 0 || key(best[a][own_b]) < key(best[pick_a][pick_b])) {
                    pick_a = static_cast<int>(a);
                    pick_b = own_b;
                }
            }
            assigned[pick_a] = true;
            claimed[pick_b] = true;
            const Candidate& c = best[pick_a][pick_b];
            const int j = js[pick_a];
            const LatentSample& src = samples[c.sample];
            const auto cell = src.map.cell(c.row, c.col);
            std::copy(cell.begin(), cell.end(), snapped.row(j).begin());
            result.entries[j] = {j, cls, src.image_id, c.row, c.col, c.distance};
            prototypes.sources[j] = PrototypeSource{src.image_id, src.image_path, c.row, c.col};
        }
    }

    prototypes.vectors = std::move(snapped);
    std::map<int, std::set<std::string>> used;
    for (const auto& e : result.entries) {
        if (!used[e.class_id].insert(e.image_id).second) result.diversity_ok = false;
    }
    return result;
}

}  // namespace protopart
