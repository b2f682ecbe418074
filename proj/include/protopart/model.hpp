#pragma once
// Prototypical-part network: trunk f, add-on layers, prototype units g_p with
// top-k average pooling, and the bias-free linear head h.

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "protopart/backbone.hpp"
#include "protopart/config.hpp"
#include "protopart/tensor.hpp"

namespace protopart {

/// Training patch a prototype was projected onto.
struct PrototypeSource {
    std::string image_id;
    std::string image_path;
    int row = 0;  // latent coordinates
    int col = 0;
    friend bool operator==(const PrototypeSource&, const PrototypeSource&) = default;
};

/// Input-space box [x, y, w, h] of latent cell (row, col).
struct PixelBox {
    int x = 0;
    int y = 0;
    int w = 0;
    int h = 0;
    friend bool operator==(const PixelBox&, const PixelBox&) = default;
};

PixelBox cell_box(const ModelConfig& config, int row, int col);

struct PrototypeView {
    int id = 0;
    int class_id = 0;
    std::span<const double> vector;
};

struct PrototypeLayer {
    Matrix vectors;  // m x D
    std::vector<int> classes;
    std::vector<std::optional<PrototypeSource>> sources;
    Matrix grads;

    int count() const noexcept { return vectors.rows; }
    int depth() const noexcept { return vectors.cols; }
    PrototypeView view(int j) const { return {j, classes[j], vectors.row(j)}; }
};

class ModelState {
public:
    ModelConfig config;
    std::unique_ptr<Backbone> trunk;
    Sequential addon;
    PrototypeLayer prototypes;
    Matrix head;  // K x m
    Matrix head_grad;

    ModelState() = default;
    ModelState(const ModelState& other);
    ModelState& operator=(const ModelState& other);
    ModelState(ModelState&&) noexcept = default;
    ModelState& operator=(ModelState&&) noexcept = default;

    /// Seeded initialization: He-normal convolutions, prototypes uniform in
    /// the unit cube, head 1 on-class / -0.5 off-class.
    static ModelState initialize(const ModelConfig& config);

    void zero_grads();
    bool has_sources() const;
};

/// Sets head weights to `on` for a prototype's own class and `off` elsewhere.
void init_head(Matrix& head, const std::vector<int>& prototype_classes, double on = 1.0, double off = -0.5);

struct EmbedTape {
    std::unique_ptr<BackboneTape> trunk;
    SequentialTape addon;
};

/// f(x): standardization, trunk, add-on layers. Throws ConfigError on shape
/// mismatch, NumericError naming the layer on non-finite activations.
FeatureMap embed(const ModelState& model, const InputImage& image, EmbedTape* tape = nullptr);

/// Back-propagates dz through the add-on layers and, if requested, the trunk.
void backward_embed(ModelState& model, const EmbedTape& tape, const FeatureMap& dz, bool into_trunk);

double similarity_from_distance(double d, double epsilon);
/// d/dd of similarity_from_distance.
double similarity_derivative(double d, double epsilon);

/// L2 distance from each latent cell (row-major) to the prototype vector.
std::vector<double> patch_distances(const FeatureMap& z, std::span<const double> prototype);

/// Throws ConfigError naming the prototype when its length differs from D.
ActivationMap similarity_map(const FeatureMap& z, const PrototypeView& p, double epsilon);

/// Indices of the k largest values; ties go to the lower index.
std::vector<int> top_k_indices(std::span<const double> values, int k);
/// Indices of the k smallest values; ties go to the lower index.
std::vector<int> bottom_k_indices(std::span<const double> values, int k);

/// Mean of the k largest entries. Throws ConfigError if k is out of range.
double topk_pool(const ActivationMap& a, int k);

struct ClassLogits {
    std::vector<double> scores;
    std::vector<double> similarity_vector;
};

struct ForwardResult {
    ClassLogits logits;
    std::vector<ActivationMap> activation_maps;  // one per prototype
    FeatureMap features;
};

/// Head product evaluated left to right so that per-prototype points sum to
/// the logit bit-for-bit.
std::vector<double> head_scores(const Matrix& head, std::span<const double> similarity_vector);

ForwardResult forward_features(const ModelState& model, FeatureMap z);
ForwardResult forward(const ModelState& model, const InputImage& image);

/// Index of the largest score, lowest index on ties.
int predicted_class(std::span<const double> scores);

/// Adaptive-pooling bin [start, end) of the source axis covering each output
/// index: start = floor(i*in/out), end = ceil((i+1)*in/out).
struct AxisBins {
    std::vector<int> start;
    std::vector<int> end;
};
AxisBins adaptive_bins(int out_size, int in_size);

/// Upscales an activation map to height x width by adaptive average pooling.
Grid scale_up(const ActivationMap& a, int height, int width);

/// Adjoint of scale_up: maps an input-resolution gradient back to latent cells.
Grid scale_up_adjoint(const Grid& g, int latent_rows, int latent_cols);

}  // namespace protopart
