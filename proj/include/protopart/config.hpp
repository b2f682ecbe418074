#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace protopart {

/// One strided convolution block of the desk trunk (conv + ReLU).
struct ConvBlockSpec {
    int kernel = 3;
    int stride = 2;
    int pad = 1;
    int channels = 16;
    friend bool operator==(const ConvBlockSpec&, const ConvBlockSpec&) = default;
};

struct ModelConfig {
    int num_classes = 2;
    int prototypes_per_class = 9;
    int latent_depth = 64;
    int top_k = 5;
    double epsilon = 1e-4;
    std::string backbone_id = "desk-cnn";
    int input_size = 224;
    // 224 -> 56 -> 28 -> 14 -> 7. Unpadded so border cells are not latent
    // outliers that prototypes drift toward.
    std::vector<ConvBlockSpec> trunk{{4, 4, 0, 8}, {2, 2, 0, 16}, {2, 2, 0, 24}, {2, 2, 0, 32}};
    std::array<double, 3> channel_mean{0.0, 0.0, 0.0};
    std::array<double, 3> channel_std{1.0, 1.0, 1.0};
    unsigned long long init_seed = 0;

    int num_prototypes() const noexcept { return num_classes * prototypes_per_class; }
    int prototype_class(int j) const noexcept { return j / prototypes_per_class; }
    /// Spatial side of the latent map implied by input_size and the trunk.
    int latent_size() const;
    /// Input pixels per latent cell along one axis (input_size / latent_size).
    int cell_size() const { return input_size / latent_size(); }

    /// Throws ConfigError listing the first violated invariant.
    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LossWeights {
    double lambda1 = 0.8;    // cluster
    double lambda2 = 0.08;   // separation
    double lambda3 = 0.001;  // mask
    double lambda4 = 0.02;   // remembering
    double lambda5 = 1e-4;   // off-class L1 on the head
    std::optional<int> kappa;  // defaults to the model's top_k
    bool class_weighting = false;
    double separation_floor = -1e3;

    int resolved_kappa(const ModelConfig& m) const { return kappa.value_or(m.top_k); }
    void validate(const ModelConfig& m) const;
    friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

enum class TrainMode { lp, lp_lm, lp_lr };

std::string to_string(TrainMode mode);
/// Accepts "lp", "lp+lm", "lp+lr". Throws ConfigError otherwise.
TrainMode parse_mode(const std::string& text);

struct TrainConfig {
    int epochs = 21;
    int warmup_epochs = 5;
    std::vector<int> projection_epochs{5, 10, 15, 20};
    int last_layer_iters = 10;
    int batch_size = 75;
    double lr_features = 2e-4;
    double lr_addon = 3e-3;
    double lr_addon_warmup = 2e-3;
    double lr_prototypes = 3e-3;
    double lr_last_layer = 1e-3;
    int lr_step_size = 5;
    double lr_decay = 0.5;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    unsigned long long seed = 0;
    TrainMode mode = TrainMode::lp;
    // 0 scans every training image during projection
    int projection_subsample = 0;

    bool is_warmup(int epoch) const noexcept { return epoch < warmup_epochs; }
    bool is_projection(int epoch) const noexcept;
    void validate() const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

enum class MaskPolarity { lesion_white, lesion_black };

std::string to_string(MaskPolarity p);
MaskPolarity parse_mask_polarity(const std::string& text);

/// Fully resolved configuration of one command invocation.
struct RunConfig {
    ModelConfig model;
    LossWeights loss;
    TrainConfig train;
    MaskPolarity mask_polarity = MaskPolarity::lesion_white;
    int audit_boundary_px = 8;
    // derive channel statistics from the training split when true
    bool standardize_from_data = true;

    void validate() const;
    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

void to_json(nlohmann::json& j, const ConvBlockSpec& s);
void from_json(const nlohmann::json& j, ConvBlockSpec& s);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Reads a JSON config file; absent keys keep their defaults.
RunConfig load_run_config(const std::string& path);

}  // namespace protopart
