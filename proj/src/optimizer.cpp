#include "protopart/optimizer.hpp"

#include <cmath>

#include "protopart/errors.hpp"

namespace protopart {

void Adam::reset() {
    t_ = 0;
    m_.clear();
    v_.clear();
}

void Adam::step(std::vector<ParamGroup>& groups) {
    std::size_t total = 0;
    for (const auto& g : groups) total += g.blocks.size();
    if (m_.empty()) {
        for (const auto& g : groups) {
            for (const auto& b : g.blocks) {
                m_.emplace_back(b.values.size(), 0.0);
                v_.emplace_back(b.values.size(), 0.0);
            }
        }
    } else if (m_.size() != total) {
        throw std::logic_error("Adam::step called with a different parameter layout; reset() first");
    }
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    std::size_t slot = 0;
    for (auto& g : groups) {
        for (auto& b : g.blocks) {
            auto& m = m_[slot];
            auto& v = v_[slot];
            ++slot;
            for (std::size_t i = 0; i < b.values.size(); ++i) {
                const double grad = b.grads[i];
                m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * grad;
                v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * grad * grad;
                b.values[i] -= g.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
            }
        }
    }
}

nlohmann::json Adam::to_json() const { return {{"t", t_}, {"m", m_}, {"v", v_}}; }

void Adam::from_json(const nlohmann::json& j) {
    t_ = j.at("t").get<long>();
    m_ = j.at("m").get<std::vector<std::vector<double>>>();
    v_ = j.at("v").get<std::vector<std::vector<double>>>();
}

}  // namespace protopart
