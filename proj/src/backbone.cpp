#include "protopart/backbone.hpp"

#include "protopart/errors.hpp"

namespace protopart {

namespace {

struct DeskTape final : BackboneTape {
    SequentialTape seq;
};

}  // namespace

DeskCnn::DeskCnn(const std::vector<ConvBlockSpec>& blocks, std::mt19937_64& rng) {
    int in = 3;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const auto& b = blocks[i];
        Layer conv{LayerKind::conv, "trunk.block" + std::to_string(i) + ".conv",
                   Conv2d(in, b.channels, b.kernel, b.stride, b.pad)};
        conv.conv.init_he(rng);
        net_.layers.push_back(std::move(conv));
        net_.layers.push_back({LayerKind::relu, "trunk.block" + std::to_string(i) + ".relu", {}});
        in = b.channels;
    }
}

Tensor3 DeskCnn::forward(const Tensor3& image, std::unique_ptr<BackboneTape>* tape) const {
    if (tape == nullptr) return net_.forward(image, nullptr);
    auto t = std::make_unique<DeskTape>();
    Tensor3 out = net_.forward(image, &t->seq);
    *tape = std::move(t);
    return out;
}

void DeskCnn::backward(const BackboneTape& tape, const Tensor3& dy) {
    const auto* t = dynamic_cast<const DeskTape*>(&tape);
    if (t == nullptr) throw std::logic_error("DeskCnn::backward given a foreign tape");
    net_.backward(t->seq, dy, nullptr);
}

std::unique_ptr<Backbone> make_backbone(const ModelConfig& config, std::mt19937_64& rng) {
    if (config.backbone_id == "desk-cnn") return std::make_unique<DeskCnn>(config.trunk, rng);
    throw ConfigError("unknown backbone '" + config.backbone_id + "'");
}

Sequential make_addon(int in_channels, int depth, std::mt19937_64& rng) {
    Sequential s;
    Layer first{LayerKind::conv, "addon.conv0", Conv2d(in_channels, depth, 1, 1, 0)};
    first.conv.init_he(rng);
    Layer second{LayerKind::conv, "addon.conv1", Conv2d(depth, depth, 1, 1, 0)};
    second.conv.init_he(rng);
    s.layers.push_back(std::move(first));
    s.layers.push_back({LayerKind::relu, "addon.relu", {}});
    s.layers.push_back(std::move(second));
    s.layers.push_back({LayerKind::sigmoid, "addon.sigmoid", {}});
    return s;
}

}  // namespace protopart
