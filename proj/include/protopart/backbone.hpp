#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "protopart/config.hpp"
#include "protopart/layers.hpp"

namespace protopart {

/// Opaque per-call state recorded by Backbone::forward for the backward pass.
class BackboneTape {
public:
    virtual ~BackboneTape() = default;
};

/// Feature trunk f (without the add-on layers). Real pretrained networks plug
/// in by implementing this interface and registering a factory in
/// make_backbone(); only the desk CNN ships.
class Backbone {
public:
    virtual ~Backbone() = default;

    virtual std::string id() const = 0;
    virtual int output_channels() const = 0;

    /// Pure given the weights. When tape is non-null it receives what
    /// backward() needs.
    virtual Tensor3 forward(const Tensor3& image, std::unique_ptr<BackboneTape>* tape) const = 0;

    /// Accumulates parameter gradients for dy at the trunk output.
    virtual void backward(const BackboneTape& tape, const Tensor3& dy) = 0;

    virtual std::vector<ParamBlock> parameters() = 0;
    virtual void zero_grads() = 0;
    virtual std::unique_ptr<Backbone> clone() const = 0;
};

/// Stack of strided conv + ReLU blocks, randomly initialized from a seed.
class DeskCnn final : public Backbone {
public:
    DeskCnn(const std::vector<ConvBlockSpec>& blocks, std::mt19937_64& rng);

    std::string id() const override { return "desk-cnn"; }
    int output_channels() const override { return net_.output_channels(); }
    Tensor3 forward(const Tensor3& image, std::unique_ptr<BackboneTape>* tape) const override;
    void backward(const BackboneTape& tape, const Tensor3& dy) override;
    std::vector<ParamBlock> parameters() override { return net_.parameters(); }
    void zero_grads() override { net_.zero_grads(); }
    std::unique_ptr<Backbone> clone() const override { return std::make_unique<DeskCnn>(*this); }

private:
    Sequential net_;
};

/// Builds the backbone named by config.backbone_id. Throws ConfigError for
/// unknown ids.
std::unique_ptr<Backbone> make_backbone(const ModelConfig& config, std::mt19937_64& rng);

/// The two 1x1 add-on convolutions: trunk channels -> D -> D, ReLU between,
/// sigmoid at the end so latent vectors live in the unit cube.
Sequential make_addon(int in_channels, int depth, std::mt19937_64& rng);

}  // namespace protopart
