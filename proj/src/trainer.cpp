#include "protopart/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <sstream>

#include "protopart/checkpoint.hpp"
#include "protopart/errors.hpp"
#include "protopart/evaluation.hpp"
#include "protopart/hash.hpp"
#include "protopart/simd.hpp"

namespace fs = std::filesystem;

namespace protopart {

std::string to_string(Stage s) {
    switch (s) {
        case Stage::warmup: return "warmup";
        case Stage::joint: return "joint";
        case Stage::last_layer: return "last_layer";
    }
    return "warmup";
}

namespace {

Stage parse_stage(const std::string& s) {
    if (s == "joint") return Stage::joint;
    if (s == "last_layer") return Stage::last_layer;
    return Stage::warmup;
}

std::vector<ParamBlock> prototype_blocks(ModelState& m) {
    return {{"prototypes", m.prototypes.vectors.values, m.prototypes.grads.values}};
}

std::vector<ParamBlock> head_blocks(ModelState& m) { return {{"head", m.head.values, m.head_grad.values}}; }

std::uint64_t hash_blocks(const std::vector<ParamBlock>& blocks) {
    std::uint64_t h = kFnvOffset;
    for (const auto& b : blocks) h = fnv1a(std::span<const double>(b.values), h);
    return h;
}

void add_into(std::span<double> dst, std::span<const double> src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

std::map<std::string, std::uint64_t> group_hashes(ModelState& model) {
    return {{"trunk", hash_blocks(model.trunk->parameters())},
            {"addon", hash_blocks(model.addon.parameters())},
            {"prototypes", hash_blocks(prototype_blocks(model))},
            {"head", hash_blocks(head_blocks(model))}};
}

std::map<std::string, double> stage_learning_rates(const TrainConfig& c, Stage stage, int epoch) {
    switch (stage) {
        case Stage::warmup: return {{"addon", c.lr_addon_warmup}, {"prototypes", c.lr_prototypes}};
        case Stage::joint: {
            const int joint_epoch = std::max(0, epoch - c.warmup_epochs);
            const double f = std::pow(c.lr_decay, joint_epoch / c.lr_step_size);
            return {{"trunk", c.lr_features * f}, {"addon", c.lr_addon * f}, {"prototypes", c.lr_prototypes * f}};
        }
        case Stage::last_layer: return {{"head", c.lr_last_layer}};
    }
    return {};
}

std::vector<std::pair<int, int>> cells_overlapping(const ModelConfig& config, const PixelBox& box) {
    const int cell = config.cell_size();
    const int side = config.latent_size();
    const int r0 = std::clamp(box.y / cell, 0, side - 1);
    const int r1 = std::clamp((box.y + box.h - 1) / cell, 0, side - 1);
    const int c0 = std::clamp(box.x / cell, 0, side - 1);
    const int c1 = std::clamp((box.x + box.w - 1) / cell, 0, side - 1);
    std::vector<std::pair<int, int>> out;
    for (int r = r0; r <= r1; ++r) {
        for (int c = c0; c <= c1; ++c) out.emplace_back(r, c);
    }
    return out;
}

// --- data ---------------------------------------------------------------------

TrainData load_training_data(const std::string& manifest_path, const RunConfig& config,
                             const std::optional<std::string>& masks_dir,
                             const std::optional<std::string>& valid_set_path) {
    const Manifest manifest = load_manifest(manifest_path, config.model.num_classes);
    const bool has_splits = std::any_of(manifest.rows.begin(), manifest.rows.end(),
                                        [](const auto& r) { return !r.split.empty(); });
    const int size = config.model.input_size;
    TrainData data;
    std::vector<std::string> problems;

    auto sample_of = [&](const ManifestRow& row) {
        TrainSample s;
        s.id = row.image_id;
        s.path = row.image_path;
        s.label = row.label;
        s.image = load_image(row.image_path, row.image_id);
        s.image.label = row.label;
        if (masks_dir) {
            const fs::path mp = fs::path(*masks_dir) / (row.image_id + ".png");
            if (fs::exists(mp)) {
                s.mask = load_mask(mp.string(), size, size, config.mask_polarity);
            } else {
                problems.push_back("missing mask for image '" + row.image_id + "' (" + mp.string() + ")");
            }
        }
        return s;
    };
    for (const auto& row : manifest.rows) {
        if (!has_splits || row.split == "train") {
            data.train.push_back(sample_of(row));
        } else if (row.split == "val") {
            data.val.push_back(sample_of(row));
        }
    }
    if (data.train.empty()) problems.push_back("manifest '" + manifest_path + "' has no training rows");

    if (valid_set_path) {
        const ValidPrototypeSet set = read_valid_set(*valid_set_path, size, config.model.num_classes);
        std::map<std::string, int> loaded;
        for (const auto& e : set.entries) {
            auto it = loaded.find(e.image_id);
            if (it == loaded.end()) {
                const ManifestRow* row = manifest.find(e.image_id);
                if (row == nullptr) {
                    problems.push_back("valid set image '" + e.image_id + "' is not in the manifest");
                    continue;
                }
                data.valid_images.push_back(load_image(row->image_path, row->image_id));
                it = loaded.emplace(e.image_id, static_cast<int>(data.valid_images.size()) - 1).first;
            }
            data.valid.push_back({e, it->second});
        }
    }
    if (!problems.empty()) throw ValidationError("training inputs failed validation", problems);
    return data;
}

// --- trainer ------------------------------------------------------------------

Trainer::Trainer(RunConfig config, TrainData data, std::string run_dir)
    : config_(std::move(config)), data_(std::move(data)), run_dir_(std::move(run_dir)),
      adam_({config_.train.adam_beta1, config_.train.adam_beta2, config_.train.adam_eps}) {
    config_.validate();
    if (data_.train.empty()) throw ValidationError("no training images");
    const Objective objective = objective_for(config_.train.mode);
    if (objective == Objective::lp_lm) {
        std::vector<std::string> missing;
        for (const auto& s : data_.train) {
            if (!s.mask) missing.push_back("no mask for training image '" + s.id + "'");
        }
        if (!missing.empty()) throw ConfigError("mode lp+lm needs a mask for every training image (--masks)");
    }
    if (objective == Objective::lp_lr && config_.loss.lambda4 > 0.0 && data_.valid.empty()) {
        throw ConfigError("mode lp+lr needs a non-empty valid prototype set (--valid-set)");
    }

    config_.model.init_seed = config_.train.seed;
    if (config_.standardize_from_data) {
        std::vector<InputImage> images;
        images.reserve(data_.train.size());
        for (const auto& s : data_.train) images.push_back(s.image);
        const auto [mean, stdev] = channel_statistics(images);
        config_.model.channel_mean = mean;
        config_.model.channel_std = stdev;
    }
    model_ = ModelState::initialize(config_.model);

    if (config_.loss.class_weighting) {
        std::vector<int> labels;
        for (const auto& s : data_.train) labels.push_back(s.label);
        class_weights_ = inverse_frequency_weights(labels, config_.model.num_classes);
    }
}

void Trainer::log(const nlohmann::json& line) {
    if (!log_.is_open()) return;
    log_ << line.dump() << "\n";
    log_.flush();
}

std::vector<std::vector<int>> Trainer::batches(int epoch, int salt) const {
    std::vector<int> order(data_.train.size());
    std::iota(order.begin(), order.end(), 0);
    const std::uint64_t key[3] = {config_.train.seed, static_cast<std::uint64_t>(epoch),
                                  static_cast<std::uint64_t>(salt)};
    std::mt19937_64 rng(fnv1a(key, sizeof(key)));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<int>> out;
    const std::size_t bs = static_cast<std::size_t>(config_.train.batch_size);
    for (std::size_t i = 0; i < order.size(); i += bs) {
        out.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + bs));
    }
    return out;
}

std::vector<ParamGroup> Trainer::groups_for(Stage stage, int epoch) {
    std::vector<ParamGroup> groups;
    for (const auto& [name, lr] : stage_learning_rates(config_.train, stage, epoch)) {
        ParamGroup g{name, {}, lr};
        if (name == "trunk") g.blocks = model_.trunk->parameters();
        if (name == "addon") g.blocks = model_.addon.parameters();
        if (name == "prototypes") g.blocks = prototype_blocks(model_);
        if (name == "head") g.blocks = head_blocks(model_);
        groups.push_back(std::move(g));
    }
    return groups;
}

void Trainer::enter_stage(Stage stage, int epoch) {
    if (stage_ == stage) return;
    stage_ = stage;
    adam_.reset();
    log({{"event", "stage"},
         {"epoch", epoch},
         {"stage", to_string(stage)},
         {"optimizer", "reset"},
         {"lr", stage_learning_rates(config_.train, stage, epoch)}});
}

std::vector<std::vector<double>> Trainer::embed_valid(std::vector<EmbedTape>* tapes, std::vector<FeatureMap>* maps) {
    std::vector<FeatureMap> local;
    auto& z = maps != nullptr ? *maps : local;
    z.clear();
    if (tapes != nullptr) {
        tapes->clear();
        tapes->resize(data_.valid_images.size());
    }
    for (std::size_t i = 0; i < data_.valid_images.size(); ++i) {
        z.push_back(embed(model_, data_.valid_images[i], tapes != nullptr ? &(*tapes)[i] : nullptr));
    }
    std::vector<std::vector<double>> out;
    const int depth = model_.config.latent_depth;
    for (const auto& v : data_.valid) {
        std::vector<double> mean(depth, 0.0);
        const auto cells = cells_overlapping(model_.config, v.entry.bbox);
        for (const auto& [r, c] : cells) add_into(mean, z[v.image].cell(r, c));
        for (auto& x : mean) x /= static_cast<double>(cells.size());
        out.push_back(std::move(mean));
    }
    return out;
}

double Trainer::valid_distance() {
    if (data_.valid.empty()) return 0.0;
    const auto vs = embed_valid(nullptr, nullptr);
    double total = 0.0;
    long count = 0;
    for (std::size_t i = 0; i < vs.size(); ++i) {
        for (int j = 0; j < model_.prototypes.count(); ++j) {
            if (model_.prototypes.classes[j] != data_.valid[i].entry.class_id) continue;
            total += std::sqrt(simd::squared_distance(model_.prototypes.vectors.row(j), vs[i]));
            ++count;
        }
    }
    return count > 0 ? total / count : 0.0;
}

LossReport Trainer::feature_step(int epoch, Stage stage, const std::vector<int>& batch) {
    const bool into_trunk = stage == Stage::joint;
    const Objective objective = objective_for(config_.train.mode);
    const auto& mc = model_.config;
    std::map<std::string, std::uint64_t> before;
    if (observer_) before = group_hashes(model_);

    model_.zero_grads();
    LossReport report;
    for (int idx : batch) {
        const TrainSample& s = data_.train[idx];
        EmbedTape tape;
        const FeatureMap z = embed(model_, s.image, &tape);
        const LesionMask* mask = s.mask ? &*s.mask : nullptr;
        ObjectiveInputs in;
        in.batch = {std::span<const FeatureMap>(&z, 1), std::span<const int>(&s.label, 1),
                    std::span<const std::string>(&s.id, 1), static_cast<double>(batch.size())};
        in.prototypes = &model_.prototypes;
        in.head = &model_.head;
        in.epsilon = mc.epsilon;
        in.top_k = mc.top_k;
        in.kappa = config_.loss.resolved_kappa(mc);
        in.masks = std::span<const LesionMask* const>(&mask, 1);
        in.input_height = mc.input_size;
        in.input_width = mc.input_size;
        in.class_weights = class_weights_;
        in.include_remembering = false;
        LossGradients g = LossGradients::zeros(std::span<const FeatureMap>(&z, 1), model_.prototypes, model_.head);
        report += total_objective(in, config_.loss, objective, &g);
        add_into(model_.prototypes.grads.values, g.prototypes.values);
        backward_embed(model_, tape, g.maps[0], into_trunk);
    }

    if (objective == Objective::lp_lr && config_.loss.lambda4 > 0.0) {
        std::vector<EmbedTape> tapes;
        std::vector<FeatureMap> maps;
        const auto vs = embed_valid(&tapes, &maps);
        std::vector<int> classes;
        for (const auto& v : data_.valid) classes.push_back(v.entry.class_id);
        LossGradients g = LossGradients::zeros({}, model_.prototypes, model_.head, vs);
        const double value = remembering_loss(vs, classes, model_.prototypes, mc.epsilon, {&g, config_.loss.lambda4});
        report.terms["remembering"] += value;
        report.total += config_.loss.lambda4 * value;
        add_into(model_.prototypes.grads.values, g.prototypes.values);

        std::vector<FeatureMap> dz;
        for (const auto& z : maps) dz.emplace_back(z.height, z.width, z.channels);
        for (std::size_t i = 0; i < data_.valid.size(); ++i) {
            const auto cells = cells_overlapping(mc, data_.valid[i].entry.bbox);
            const double share = 1.0 / static_cast<double>(cells.size());
            for (const auto& [r, c] : cells) {
                auto cell = dz[data_.valid[i].image].cell(r, c);
                for (std::size_t d = 0; d < cell.size(); ++d) cell[d] += share * g.valid[i][d];
            }
        }
        for (std::size_t i = 0; i < maps.size(); ++i) backward_embed(model_, tapes[i], dz[i], into_trunk);
    }

    if (!std::isfinite(report.total)) {
        throw NumericError("training loss diverged at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step_));
    }
    auto groups = groups_for(stage, epoch);
    adam_.step(groups);
    ++step_;

    log({{"step", step_}, {"epoch", epoch}, {"stage", to_string(stage)}, {"terms", report.terms},
         {"total", report.total}});
    if (observer_) observer_({epoch, stage, step_, before, group_hashes(model_), report});
    return report;
}

void Trainer::run_warmup_epoch(int epoch) {
    enter_stage(Stage::warmup, epoch);
    cached_maps_.clear();
    for (const auto& batch : batches(epoch, 0)) feature_step(epoch, Stage::warmup, batch);
}

void Trainer::run_joint_epoch(int epoch) {
    enter_stage(Stage::joint, epoch);
    cached_maps_.clear();
    for (const auto& batch : batches(epoch, 0)) feature_step(epoch, Stage::joint, batch);
}

ProjectionResult Trainer::project(int epoch) {
    cached_maps_.clear();
    for (const auto& s : data_.train) cached_maps_.push_back(embed(model_, s.image));

    std::vector<int> pool(data_.train.size());
    std::iota(pool.begin(), pool.end(), 0);
    const int limit = config_.train.projection_subsample;
    if (limit > 0 && limit < static_cast<int>(pool.size())) {
        std::mt19937_64 rng(fnv1a(std::to_string(config_.train.seed) + "/projection/" + std::to_string(epoch)));
        std::shuffle(pool.begin(), pool.end(), rng);
        pool.resize(limit);
        std::sort(pool.begin(), pool.end());
    }
    std::vector<LatentSample> samples;
    for (int i : pool) {
        const auto& s = data_.train[i];
        samples.push_back({s.id, s.path, s.label, cached_maps_[i]});
    }
    ProjectionResult result = project_prototypes(model_.prototypes, samples);
    log({{"event", "projection"}, {"epoch", epoch}, {"result", result}});
    return result;
}

void Trainer::run_last_layer(int epoch) {
    enter_stage(Stage::last_layer, epoch);
    if (cached_maps_.size() != data_.train.size()) {
        cached_maps_.clear();
        for (const auto& s : data_.train) cached_maps_.push_back(embed(model_, s.image));
    }
    const auto& mc = model_.config;
    for (int it = 1; it <= config_.train.last_layer_iters; ++it) {
        LossReport iteration;
        for (const auto& batch : batches(epoch, 1000 + it)) {
            std::map<std::string, std::uint64_t> before;
            if (observer_) before = group_hashes(model_);
            std::vector<FeatureMap> maps;
            std::vector<int> labels;
            std::vector<std::string> ids;
            for (int idx : batch) {
                maps.push_back(cached_maps_[idx]);
                labels.push_back(data_.train[idx].label);
                ids.push_back(data_.train[idx].id);
            }
            ObjectiveInputs in;
            in.batch = {maps, labels, ids, 0.0};
            in.prototypes = &model_.prototypes;
            in.head = &model_.head;
            in.epsilon = mc.epsilon;
            in.top_k = mc.top_k;
            in.kappa = config_.loss.resolved_kappa(mc);
            in.class_weights = class_weights_;
            model_.zero_grads();
            LossGradients g = LossGradients::zeros(maps, model_.prototypes, model_.head);
            const LossReport r = total_objective(in, config_.loss, Objective::last_layer, &g);
            if (!std::isfinite(r.total)) {
                throw NumericError("last-layer loss diverged at epoch " + std::to_string(epoch));
            }
            add_into(model_.head_grad.values, g.head.values);
            auto groups = groups_for(Stage::last_layer, epoch);
            adam_.step(groups);
            ++step_;
            iteration += r;
            log({{"step", step_}, {"epoch", epoch}, {"stage", "last_layer"}, {"iteration", it}, {"terms", r.terms},
                 {"total", r.total}});
            if (observer_) observer_({epoch, Stage::last_layer, step_, before, group_hashes(model_), r});
        }
        log({{"event", "last_layer_iteration"},
             {"epoch", epoch},
             {"iteration", it},
             {"l1_offclass", l1_offclass(model_.head, model_.prototypes.classes)}});
    }
}

double Trainer::selection_ba() {
    const int k = config_.model.num_classes;
    auto ba_of = [&](const std::vector<TrainSample>& set) -> std::optional<double> {
        std::vector<int> labels, preds;
        for (const auto& s : set) {
            labels.push_back(s.label);
            preds.push_back(predicted_class(forward(model_, s.image).logits.scores));
        }
        try {
            return compute_report(labels, preds, k).ba;
        } catch (const ValidationError&) {
            return std::nullopt;
        }
    };
    if (!data_.val.empty()) {
        if (auto ba = ba_of(data_.val)) return *ba;
    }
    return ba_of(data_.train).value_or(0.0);
}

void Trainer::save_state(int epoch) {
    nlohmann::json st = {{"epoch", epoch},
                         {"step", step_},
                         {"stage", stage_ ? to_string(*stage_) : ""},
                         {"adam", adam_.to_json()},
                         {"best_epoch", summary_.best_epoch},
                         {"best_ba", summary_.best_ba},
                         {"projection_epochs", summary_.projection_epochs}};
    if (summary_.initial_valid_distance) st["initial_valid_distance"] = *summary_.initial_valid_distance;
    save_checkpoint((fs::path(run_dir_) / "state.ppt").string(), model_,
                    {{"epoch", epoch}, {"mode", to_string(config_.train.mode)}}, st.dump());
}

int Trainer::restore_state() {
    const auto path = (fs::path(run_dir_) / "state.ppt").string();
    Checkpoint c = load_checkpoint(path);
    if (!c.train_state) throw IoError("'" + path + "' carries no training state");
    const auto st = nlohmann::json::parse(*c.train_state);
    model_ = std::move(c.model);
    step_ = st.at("step").get<long>();
    const std::string stage = st.at("stage").get<std::string>();
    if (!stage.empty()) stage_ = parse_stage(stage);
    adam_.from_json(st.at("adam"));
    summary_.best_epoch = st.at("best_epoch").get<int>();
    summary_.best_ba = st.at("best_ba").get<double>();
    summary_.projection_epochs = st.at("projection_epochs").get<std::vector<int>>();
    if (st.contains("initial_valid_distance")) summary_.initial_valid_distance = st["initial_valid_distance"].get<double>();
    return st.at("epoch").get<int>();
}

TrainSummary Trainer::train(bool resume) {
    const fs::path dir(run_dir_);
    fs::create_directories(dir);
    const auto log_path = dir / "log.jsonl";
    int start = 0;
    if (resume) {
        const int done = restore_state();
        start = done + 1;
        // Drop log lines written after the saved state so the resumed log
        // matches an uninterrupted run.
        std::ifstream in(log_path);
        std::ostringstream kept;
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            if (nlohmann::json::parse(line).value("epoch", 0) <= done) kept << line << "\n";
        }
        in.close();
        atomic_write(log_path.string(), kept.str());
        log_.open(log_path, std::ios::app);
    } else {
        log_.open(log_path, std::ios::trunc);
        atomic_write((dir / "config.json").string(), nlohmann::json(config_).dump(2) + "\n");
    }
    if (!log_) throw IoError("cannot write '" + log_path.string() + "'");

    const bool track_valid = !data_.valid.empty();
    if (!resume && track_valid) {
        summary_.initial_valid_distance = valid_distance();
        log({{"event", "valid_distance"}, {"epoch", 0}, {"when", "start"}, {"value", *summary_.initial_valid_distance}});
    }

    int epoch = start;
    try {
        for (; epoch < config_.train.epochs; ++epoch) {
            if (config_.train.is_warmup(epoch)) {
                run_warmup_epoch(epoch);
            } else {
                run_joint_epoch(epoch);
            }
            if (config_.train.is_projection(epoch)) {
                project(epoch);
                run_last_layer(epoch);
                summary_.projection_epochs.push_back(epoch);
                const double ba = selection_ba();
                const nlohmann::json meta = {{"epoch", epoch}, {"mode", to_string(config_.train.mode)}, {"selection_ba", ba}};
                save_checkpoint((dir / ("ckpt-epoch" + std::to_string(epoch) + ".ppt")).string(), model_, meta);
                log({{"event", "checkpoint"}, {"epoch", epoch}, {"selection_ba", ba}});
                if (ba > summary_.best_ba) {
                    summary_.best_ba = ba;
                    summary_.best_epoch = epoch;
                    save_checkpoint((dir / "best.ppt").string(), model_, meta);
                    log({{"event", "best"}, {"epoch", epoch}, {"selection_ba", ba}});
                }
            }
            if (track_valid) {
                summary_.final_valid_distance = valid_distance();
                log({{"event", "valid_distance"}, {"epoch", epoch}, {"when", "end"}, {"value", *summary_.final_valid_distance}});
            }
            save_state(epoch);
        }
    } catch (const NumericError& e) {
        log({{"event", "abort"}, {"epoch", epoch}, {"reason", e.what()}});
        const bool have_state = fs::exists(dir / "state.ppt");
        throw NumericError(std::string(e.what()) + "; last good checkpoint: " +
                           (have_state ? (dir / "state.ppt").string() : std::string("none")));
    }
    summary_.steps = step_;
    return summary_;
}

}  // namespace protopart
