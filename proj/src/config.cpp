#include "protopart/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "protopart/errors.hpp"

namespace protopart {

int ModelConfig::latent_size() const {
    int side = input_size;
    for (const auto& b : trunk) {
        side = (side + 2 * b.pad - b.kernel) / b.stride + 1;
    }
    return side;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (num_classes < 2) fail("num_classes must be >= 2");
    if (prototypes_per_class < 1) fail("prototypes_per_class must be >= 1");
    if (latent_depth < 1) fail("latent_depth must be >= 1");
    if (!(epsilon > 0.0)) fail("epsilon must be > 0");
    if (backbone_id != "desk-cnn") fail("unknown backbone '" + backbone_id + "'");
    if (trunk.empty()) fail("trunk needs at least one block");
    int side = input_size;
    for (std::size_t i = 0; i < trunk.size(); ++i) {
        const auto& b = trunk[i];
        if (b.kernel < 1 || b.stride < 1 || b.pad < 0 || b.channels < 1) {
            fail("trunk block " + std::to_string(i) + " has a non-positive dimension");
        }
        side = (side + 2 * b.pad - b.kernel) / b.stride + 1;
        if (side < 1) fail("trunk block " + std::to_string(i) + " reduces the map below 1x1");
    }
    const int cells = side * side;
    if (top_k < 1 || top_k > cells) {
        fail("top_k must be in [1, " + std::to_string(cells) + "], got " + std::to_string(top_k));
    }
    for (int c = 0; c < 3; ++c) {
        if (!(channel_std[c] > 0.0)) fail("channel_std entries must be > 0");
    }
}

void LossWeights::validate(const ModelConfig& m) const {
    for (double l : {lambda1, lambda2, lambda3, lambda4, lambda5}) {
        if (l < 0.0) throw ConfigError("loss weights must be non-negative");
    }
    const int k = resolved_kappa(m);
    const int cells = m.latent_size() * m.latent_size();
    if (k < 1 || k > cells) {
        throw ConfigError("kappa must be in [1, " + std::to_string(cells) + "], got " + std::to_string(k));
    }
    if (separation_floor > 0.0) throw ConfigError("separation_floor must be <= 0");
}

std::string to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::lp: return "lp";
        case TrainMode::lp_lm: return "lp+lm";
        case TrainMode::lp_lr: return "lp+lr";
    }
    return "lp";
}

TrainMode parse_mode(const std::string& text) {
    if (text == "lp") return TrainMode::lp;
    if (text == "lp+lm") return TrainMode::lp_lm;
    if (text == "lp+lr") return TrainMode::lp_lr;
    throw ConfigError("unknown mode '" + text + "' (expected lp, lp+lm or lp+lr)");
}

bool TrainConfig::is_projection(int epoch) const noexcept {
    return std::find(projection_epochs.begin(), projection_epochs.end(), epoch) != projection_epochs.end();
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
    if (epochs < 1) fail("epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs > epochs) fail("warmup_epochs out of range");
    std::set<int> seen;
    for (int e : projection_epochs) {
        if (e < 0 || e >= epochs) fail("projection epoch " + std::to_string(e) + " outside the epoch range");
        if (e < warmup_epochs) fail("projection epoch " + std::to_string(e) + " overlaps the warm-up");
        if (!seen.insert(e).second) fail("duplicate projection epoch " + std::to_string(e));
    }
    if (last_layer_iters < 0) fail("last_layer_iters must be >= 0");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (lr_step_size < 1) fail("lr_step_size must be >= 1");
    if (!(lr_decay > 0.0)) fail("lr_decay must be > 0");
    for (double lr : {lr_features, lr_addon, lr_addon_warmup, lr_prototypes, lr_last_layer}) {
        if (lr < 0.0) fail("learning rates must be non-negative");
    }
    if (projection_subsample < 0) fail("projection_subsample must be >= 0");
}

std::string to_string(MaskPolarity p) {
    return p == MaskPolarity::lesion_white ? "lesion-white" : "lesion-black";
}

MaskPolarity parse_mask_polarity(const std::string& text) {
    if (text == "lesion-white") return MaskPolarity::lesion_white;
    if (text == "lesion-black") return MaskPolarity::lesion_black;
    throw ConfigError("unknown mask polarity '" + text + "' (expected lesion-white or lesion-black)");
}

void RunConfig::validate() const {
    model.validate();
    loss.validate(model);
    train.validate();
    if (audit_boundary_px < 0) throw ConfigError("audit_boundary_px must be >= 0");
}

// --- JSON ------------------------------------------------------------------

void to_json(nlohmann::json& j, const ConvBlockSpec& s) {
    j = {{"kernel", s.kernel}, {"stride", s.stride}, {"pad", s.pad}, {"channels", s.channels}};
}

void from_json(const nlohmann::json& j, ConvBlockSpec& s) {
    s.kernel = j.value("kernel", s.kernel);
    s.stride = j.value("stride", s.stride);
    s.pad = j.value("pad", s.pad);
    s.channels = j.value("channels", s.channels);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {
        {"num_classes", c.num_classes},
        {"prototypes_per_class", c.prototypes_per_class},
        {"latent_depth", c.latent_depth},
        {"top_k", c.top_k},
        {"epsilon", c.epsilon},
        {"backbone", c.backbone_id},
        {"input_size", c.input_size},
        {"latent_size", c.latent_size()},
        {"trunk", c.trunk},
        {"channel_mean", c.channel_mean},
        {"channel_std", c.channel_std},
        {"init_seed", c.init_seed},
    };
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.num_classes = j.value("num_classes", c.num_classes);
    c.prototypes_per_class = j.value("prototypes_per_class", c.prototypes_per_class);
    c.latent_depth = j.value("latent_depth", c.latent_depth);
    c.top_k = j.value("top_k", c.top_k);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.backbone_id = j.value("backbone", c.backbone_id);
    c.input_size = j.value("input_size", c.input_size);
    if (j.contains("trunk")) c.trunk = j.at("trunk").get<std::vector<ConvBlockSpec>>();
    if (j.contains("channel_mean")) c.channel_mean = j.at("channel_mean").get<std::array<double, 3>>();
    if (j.contains("channel_std")) c.channel_std = j.at("channel_std").get<std::array<double, 3>>();
    c.init_seed = j.value("init_seed", c.init_seed);
}

void to_json(nlohmann::json& j, const LossWeights& w) {
    j = {
        {"lambda1", w.lambda1}, {"lambda2", w.lambda2}, {"lambda3", w.lambda3},
        {"lambda4", w.lambda4}, {"lambda5", w.lambda5},
        {"kappa", w.kappa ? nlohmann::json(*w.kappa) : nlohmann::json(nullptr)},
        {"class_weighting", w.class_weighting},
        {"separation_floor", w.separation_floor},
        {"mask_normalization", "batch_mean"},
    };
}

void from_json(const nlohmann::json& j, LossWeights& w) {
    w.lambda1 = j.value("lambda1", w.lambda1);
    w.lambda2 = j.value("lambda2", w.lambda2);
    w.lambda3 = j.value("lambda3", w.lambda3);
    w.lambda4 = j.value("lambda4", w.lambda4);
    w.lambda5 = j.value("lambda5", w.lambda5);
    if (j.contains("kappa")) {
        if (j.at("kappa").is_null()) w.kappa.reset();
        else w.kappa = j.at("kappa").get<int>();
    }
    w.class_weighting = j.value("class_weighting", w.class_weighting);
    w.separation_floor = j.value("separation_floor", w.separation_floor);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {
        {"epochs", c.epochs},
        {"warmup_epochs", c.warmup_epochs},
        {"projection_epochs", c.projection_epochs},
        {"last_layer_iters", c.last_layer_iters},
        {"batch_size", c.batch_size},
        {"lr_features", c.lr_features},
        {"lr_addon", c.lr_addon},
        {"lr_addon_warmup", c.lr_addon_warmup},
        {"lr_prototypes", c.lr_prototypes},
        {"lr_last_layer", c.lr_last_layer},
        {"lr_step_size", c.lr_step_size},
        {"lr_decay", c.lr_decay},
        {"adam_beta1", c.adam_beta1},
        {"adam_beta2", c.adam_beta2},
        {"adam_eps", c.adam_eps},
        {"seed", c.seed},
        {"mode", to_string(c.mode)},
        {"projection_subsample", c.projection_subsample},
        {"optimizer_reset", "per_stage"},
    };
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.epochs = j.value("epochs", c.epochs);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    if (j.contains("projection_epochs")) c.projection_epochs = j.at("projection_epochs").get<std::vector<int>>();
    c.last_layer_iters = j.value("last_layer_iters", c.last_layer_iters);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr_features = j.value("lr_features", c.lr_features);
    c.lr_addon = j.value("lr_addon", c.lr_addon);
    c.lr_addon_warmup = j.value("lr_addon_warmup", c.lr_addon_warmup);
    c.lr_prototypes = j.value("lr_prototypes", c.lr_prototypes);
    c.lr_last_layer = j.value("lr_last_layer", c.lr_last_layer);
    c.lr_step_size = j.value("lr_step_size", c.lr_step_size);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.seed = j.value("seed", c.seed);
    if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
    c.projection_subsample = j.value("projection_subsample", c.projection_subsample);
}

void to_json(nlohmann::json& j, const RunConfig& c) {
    j = {
        {"model", c.model},
        {"loss", c.loss},
        {"train", c.train},
        {"data", {{"mask_polarity", to_string(c.mask_polarity)},
                  {"standardize_from_data", c.standardize_from_data}}},
        {"audit", {{"boundary_px", c.audit_boundary_px}}},
    };
}

void from_json(const nlohmann::json& j, RunConfig& c) {
    if (j.contains("model")) j.at("model").get_to(c.model);
    if (j.contains("loss")) j.at("loss").get_to(c.loss);
    if (j.contains("train")) j.at("train").get_to(c.train);
    if (j.contains("data")) {
        const auto& d = j.at("data");
        if (d.contains("mask_polarity")) c.mask_polarity = parse_mask_polarity(d.at("mask_polarity").get<std::string>());
        c.standardize_from_data = d.value("standardize_from_data", c.standardize_from_data);
    }
    if (j.contains("audit")) c.audit_boundary_px = j.at("audit").value("boundary_px", c.audit_boundary_px);
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    RunConfig cfg;
    try {
        const auto j = nlohmann::json::parse(in);
        j.get_to(cfg);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file '" + path + "': " + e.what());
    }
    return cfg;
}

}  // namespace protopart
