#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "protopart/layers.hpp"

namespace protopart {

/// Parameters updated together with one learning rate.
struct ParamGroup {
    std::string name;  // "trunk", "addon", "prototypes", "head"
    std::vector<ParamBlock> blocks;
    double lr = 0.0;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are keyed by block order, so the
/// same group layout must be passed to every step after a reset.
class Adam {
public:
    explicit Adam(AdamConfig config = {}) : config_(config) {}

    void reset();
    /// One update of every block in `groups` from its accumulated gradient.
    void step(std::vector<ParamGroup>& groups);
    long steps() const noexcept { return t_; }

    nlohmann::json to_json() const;
    void from_json(const nlohmann::json& j);

private:
    AdamConfig config_;
    long t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

}  // namespace protopart
