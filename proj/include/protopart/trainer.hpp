#pragma once
// Three-stage schedule: warm-up (add-on + prototypes), joint epochs (trunk,
// add-on, prototypes; head fixed), and at projection epochs a projection
// followed by last-layer optimization of the head alone.

#include <cstdint>
#include <functional>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "protopart/config.hpp"
#include "protopart/data.hpp"
#include "protopart/losses.hpp"
#include "protopart/model.hpp"
#include "protopart/optimizer.hpp"
#include "protopart/projection.hpp"

namespace protopart {

struct TrainSample {
    std::string id;
    std::string path;
    int label = 0;
    InputImage image;
    std::optional<LesionMask> mask;
};

/// A valid-set entry bound to its decoded source image.
struct ValidPatch {
    ValidEntry entry;
    int image = 0;  // index into TrainData::valid_images
};

struct TrainData {
    std::vector<TrainSample> train;
    std::vector<TrainSample> val;
    std::vector<InputImage> valid_images;
    std::vector<ValidPatch> valid;
};

/// Reads the manifest (split column "train"/"val"; without one every row
/// trains), masks from `masks_dir/<image id>.png` and the valid set, whose
/// image ids must appear in the manifest. Throws ValidationError itemizing
/// missing masks or images.
TrainData load_training_data(const std::string& manifest_path, const RunConfig& config,
                             const std::optional<std::string>& masks_dir,
                             const std::optional<std::string>& valid_set_path);

enum class Stage { warmup, joint, last_layer };
std::string to_string(Stage s);

/// FNV-1a of each trainable group: "trunk", "addon", "prototypes", "head".
std::map<std::string, std::uint64_t> group_hashes(ModelState& model);

struct StepEvent {
    int epoch = 0;
    Stage stage = Stage::warmup;
    long step = 0;
    std::map<std::string, std::uint64_t> before;
    std::map<std::string, std::uint64_t> after;
    LossReport report;
};
using StepObserver = std::function<void(const StepEvent&)>;

struct TrainSummary {
    std::vector<int> projection_epochs;
    int best_epoch = -1;
    double best_ba = -1.0;
    std::optional<double> initial_valid_distance;
    std::optional<double> final_valid_distance;
    long steps = 0;
};

/// Learning rates of a stage at a given epoch, keyed by group name.
std::map<std::string, double> stage_learning_rates(const TrainConfig& c, Stage stage, int epoch);

class Trainer {
public:
    /// Resolves the config (channel statistics from the training split when
    /// requested, init seed from the train seed), validates mode inputs and
    /// initializes the model. Throws ConfigError / ValidationError.
    Trainer(RunConfig config, TrainData data, std::string run_dir);

    const RunConfig& config() const noexcept { return config_; }
    ModelState& model() noexcept { return model_; }
    const TrainData& data() const noexcept { return data_; }
    void set_observer(StepObserver observer) { observer_ = std::move(observer); }

    void run_warmup_epoch(int epoch);
    void run_joint_epoch(int epoch);
    ProjectionResult project(int epoch);
    void run_last_layer(int epoch);

    /// Mean L2 distance between each valid patch embedding and every
    /// prototype of its class, under the current weights.
    double valid_distance();

    /// Balanced accuracy (percent) on the validation split, or the training
    /// split when there is none.
    double selection_ba();

    /// Runs (or, with resume, continues from RUNDIR/state.ppt) the whole
    /// schedule. Writes log.jsonl, config.json, ckpt-epoch<E>.ppt, best.ppt
    /// and state.ppt into the run directory.
    TrainSummary train(bool resume = false);

private:
    LossReport feature_step(int epoch, Stage stage, const std::vector<int>& batch);
    std::vector<std::vector<int>> batches(int epoch, int salt) const;
    std::vector<ParamGroup> groups_for(Stage stage, int epoch);
    void enter_stage(Stage stage, int epoch);
    void log(const nlohmann::json& line);
    void save_state(int epoch);
    int restore_state();
    std::vector<std::vector<double>> embed_valid(std::vector<EmbedTape>* tapes,
                                                 std::vector<FeatureMap>* maps);

    RunConfig config_;
    TrainData data_;
    std::string run_dir_;
    ModelState model_;
    Adam adam_;
    std::optional<Stage> stage_;
    StepObserver observer_;
    std::ofstream log_;
    std::vector<double> class_weights_;
    std::vector<FeatureMap> cached_maps_;  // train maps after the latest projection
    long step_ = 0;
    TrainSummary summary_;
};

/// Cells of a latent grid overlapped by an input-space box.
std::vector<std::pair<int, int>> cells_overlapping(const ModelConfig& config, const PixelBox& box);

}  // namespace protopart
